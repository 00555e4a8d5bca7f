//! Binary checkpoint files.
//!
//! Layout: the 8-byte magic `SCCKPT01`, a little-endian `u64` header length,
//! a JSON header, then every array's `f64` values in little-endian order.
//! The header lists each array's name, group, shape and offset.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use autodiff::Array;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::{PolicyConfig, PolicyParameters};
use crate::trainer::{Adam, Checkpoint, RngState};

const MAGIC: &[u8; 8] = b"SCCKPT01";

#[derive(Serialize, Deserialize)]
struct ArrayEntry {
    group: String,
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    stage: String,
    config_hash: String,
    policy: PolicyConfig,
    rng_seed: String,
    rng_word_pos: String,
    adam_beta1: f64,
    adam_beta2: f64,
    adam_eps: f64,
    adam_t: u64,
    arrays: Vec<ArrayEntry>,
}

const GROUPS: [&str; 3] = ["param", "adam_m", "adam_v"];

pub fn to_bytes(c: &Checkpoint) -> Result<Vec<u8>> {
    let mut arrays = Vec::new();
    let mut data: Vec<f64> = Vec::new();
    let sources = [c.params.tensors(), &c.optimizer.m, &c.optimizer.v];
    for (group, map) in GROUPS.iter().zip(sources) {
        for (name, a) in map {
            arrays.push(ArrayEntry {
                group: group.to_string(),
                name: name.clone(),
                shape: a.shape().to_vec(),
                offset: data.len(),
            });
            data.extend_from_slice(a.data());
        }
    }
    let header = Header {
        stage: c.stage.to_string(),
        config_hash: c.config_hash.clone(),
        policy: c.params.config().clone(),
        rng_seed: hex::encode(c.rng.seed),
        rng_word_pos: c.rng.word_pos.to_string(),
        adam_beta1: c.optimizer.beta1,
        adam_beta2: c.optimizer.beta2,
        adam_eps: c.optimizer.eps,
        adam_t: c.optimizer.t,
        arrays,
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(16 + json.len() + 8 * data.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body_start = 16usize
        .checked_add(header_len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(&bytes[16..body_start])?;
    let body = &bytes[body_start..];
    if body.len() % 8 != 0 {
        return Err(bad("data section is not a whole number of f64 values"));
    }
    let values: Vec<f64> = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();

    let mut groups: [BTreeMap<String, Array>; 3] = Default::default();
    for e in header.arrays {
        let len: usize = e.shape.iter().product();
        let end = e.offset.checked_add(len).filter(|&end| end <= values.len());
        let end = end.ok_or_else(|| bad(format!("array {} runs past the data section", e.name)))?;
        let slot = GROUPS
            .iter()
            .position(|g| *g == e.group)
            .ok_or_else(|| bad(format!("unknown array group {}", e.group)))?;
        let a = Array::new(e.shape, values[e.offset..end].to_vec())?;
        groups[slot].insert(e.name, a);
    }
    let [params, m, v] = groups;
    let seed_bytes = hex::decode(&header.rng_seed).map_err(|e| bad(e.to_string()))?;
    let seed: [u8; 32] = seed_bytes.try_into().map_err(|_| bad("rng seed must be 32 bytes"))?;
    let word_pos = header.rng_word_pos.parse().map_err(|_| bad("bad rng position"))?;
    Ok(Checkpoint {
        stage: header.stage.parse()?,
        params: PolicyParameters::from_tensors(header.policy, params)?,
        optimizer: Adam {
            beta1: header.adam_beta1,
            beta2: header.adam_beta2,
            eps: header.adam_eps,
            t: header.adam_t,
            m,
            v,
        },
        config_hash: header.config_hash,
        rng: RngState { seed, word_pos },
    })
}

pub fn save(c: &Checkpoint, path: &Path) -> Result<()> {
    fs::write(path, to_bytes(c)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    from_bytes(&fs::read(path)?)
}
