//! Tiny decoder-only transformer policy.
//!
//! Pre-norm blocks (RMS norm without gain), multi-head causal attention with
//! per-head projections, a GELU feed-forward layer, learned positional
//! embeddings and an untied output head. Two evaluation paths share the
//! parameters: [`PolicyGraph`] builds differentiable log-probabilities and
//! [`Decoder`] runs incremental KV-cached inference for sampling.

mod decode;
mod graph;

use std::collections::BTreeMap;
use std::ops::Deref;
use std::sync::Arc;

use autodiff::{Array, Bindings};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::task::{Question, Token};

pub use decode::{sample, DecodeConfig, Decoder, Generation, Generator};
pub use graph::PolicyGraph;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyConfig {
    pub vocab_size: usize,
    pub max_len: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_hidden: usize,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            vocab_size: crate::task::vocab::SIZE,
            max_len: 128,
            d_model: 32,
            n_heads: 2,
            n_layers: 2,
            d_hidden: 64,
        }
    }
}

impl PolicyConfig {
    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0
            || self.max_len == 0
            || self.n_heads == 0
            || self.d_model % self.n_heads != 0
            || self.d_hidden == 0
        {
            return Err(Error::Config(format!("invalid policy config {self:?}")));
        }
        Ok(())
    }

    /// Every parameter tensor with its shape, in a fixed order.
    pub fn shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (v, d, h, dh) = (self.vocab_size, self.d_model, self.d_hidden, self.head_dim());
        let mut out = vec![
            ("tok_emb".to_string(), vec![v, d]),
            ("pos_emb".to_string(), vec![self.max_len, d]),
        ];
        for l in 0..self.n_layers {
            for head in 0..self.n_heads {
                for w in ["wq", "wk", "wv"] {
                    out.push((names::attn(l, w, head), vec![d, dh]));
                }
            }
            out.push((names::layer(l, "attn.wo"), vec![d, d]));
            out.push((names::layer(l, "ffn.w1"), vec![d, h]));
            out.push((names::layer(l, "ffn.b1"), vec![h]));
            out.push((names::layer(l, "ffn.w2"), vec![h, d]));
            out.push((names::layer(l, "ffn.b2"), vec![d]));
        }
        out.push(("head".to_string(), vec![d, v]));
        out
    }

    pub fn param_count(&self) -> usize {
        self.shapes().iter().map(|(_, s)| s.iter().product::<usize>()).sum()
    }
}

pub(crate) mod names {
    pub fn layer(l: usize, what: &str) -> String {
        format!("layers.{l}.{what}")
    }

    pub fn attn(l: usize, w: &str, head: usize) -> String {
        format!("layers.{l}.attn.{w}.{head}")
    }
}

/// All trainable weights of the policy, keyed by name.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParameters {
    config: PolicyConfig,
    tensors: BTreeMap<String, Array>,
}

impl PolicyParameters {
    /// All-zero weights: uniform next-token distributions everywhere.
    pub fn zeros(config: PolicyConfig) -> Result<Self> {
        config.validate()?;
        let tensors = config
            .shapes()
            .into_iter()
            .map(|(n, s)| (n, Array::zeros(&s)))
            .collect();
        Ok(Self { config, tensors })
    }

    /// Uniform fan-in initialization; residual output projections start smaller.
    pub fn init(config: PolicyConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let mut tensors = BTreeMap::new();
        for (name, shape) in config.shapes() {
            let n: usize = shape.iter().product();
            let scale = if name.ends_with("emb") {
                0.5
            } else if shape.len() == 1 {
                0.0
            } else {
                let residual_out = name.ends_with("attn.wo") || name.ends_with("ffn.w2");
                let base = (3.0 / shape[0] as f64).sqrt();
                if residual_out {
                    base * 0.5
                } else {
                    base
                }
            };
            let data = (0..n)
                .map(|_| if scale == 0.0 { 0.0 } else { rng.gen_range(-scale..scale) })
                .collect();
            tensors.insert(name, Array::new(shape, data)?);
        }
        Ok(Self { config, tensors })
    }

    /// Rebuilds parameters from named tensors, checking names and shapes.
    pub fn from_tensors(config: PolicyConfig, tensors: BTreeMap<String, Array>) -> Result<Self> {
        config.validate()?;
        let expected = config.shapes();
        if expected.len() != tensors.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                expected.len(),
                tensors.len()
            )));
        }
        for (name, shape) in &expected {
            match tensors.get(name) {
                Some(a) if a.shape() == shape.as_slice() => {}
                Some(a) => {
                    return Err(Error::Checkpoint(format!(
                        "tensor {name} has shape {:?}, expected {shape:?}",
                        a.shape()
                    )))
                }
                None => return Err(Error::Checkpoint(format!("missing tensor {name}"))),
            }
        }
        Ok(Self { config, tensors })
    }

    pub fn config(&self) -> &PolicyConfig {
        &self.config
    }

    pub fn tensors(&self) -> &BTreeMap<String, Array> {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut BTreeMap<String, Array> {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> &Array {
        &self.tensors[name]
    }

    pub fn param_count(&self) -> usize {
        self.tensors.values().map(Array::len).sum()
    }

    /// Bitwise equality, distinguishing `0.0` from `-0.0`.
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.config == other.config
            && self.tensors.len() == other.tensors.len()
            && self.tensors.iter().zip(&other.tensors).all(|((na, a), (nb, b))| {
                na == nb
                    && a.shape() == b.shape()
                    && a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }

    pub fn check_tokens(&self, tokens: &[Token]) -> Result<()> {
        if tokens.len() > self.config.max_len {
            return Err(Error::ContextOverflow {
                len: tokens.len(),
                max: self.config.max_len,
            });
        }
        if let Some(&t) = tokens.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(Error::UnknownToken {
                token: t,
                vocab: self.config.vocab_size,
            });
        }
        Ok(())
    }
}

impl Bindings for PolicyParameters {
    fn lookup(&self, name: &str) -> Option<&Array> {
        self.tensors.get(name)
    }
}

/// A frozen copy of the policy, used as the reference model. Cloning shares
/// the same immutable storage.
#[derive(Debug, Clone)]
pub struct FrozenPolicy(Arc<PolicyParameters>);

impl FrozenPolicy {
    pub fn params(&self) -> &PolicyParameters {
        &self.0
    }
}

impl Deref for FrozenPolicy {
    type Target = PolicyParameters;

    fn deref(&self) -> &PolicyParameters {
        &self.0
    }
}

impl PartialEq for FrozenPolicy {
    fn eq(&self, other: &Self) -> bool {
        self.0.bit_eq(&other.0)
    }
}

/// Deep, immutable copy of the current parameters.
pub fn snapshot(params: &PolicyParameters) -> FrozenPolicy {
    FrozenPolicy(Arc::new(params.clone()))
}

/// Resamples each grid digit uniformly over the ten digits with probability
/// `epsilon`. Question tokens are untouched.
pub fn perturb_image(question: &Question, epsilon: f64, rng: &mut impl Rng) -> Result<Question> {
    if !(0.0..=1.0).contains(&epsilon) {
        return Err(Error::InvalidArgument(format!(
            "perturbation level {epsilon} outside [0, 1]"
        )));
    }
    let mut out = question.clone();
    for t in out.image.iter_mut().skip(1) {
        if rng.gen::<f64>() < epsilon {
            *t = rng.gen_range(0..10);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use crate::task::{example_from_parts, TaskKind};

    #[test]
    fn reference_configuration_stays_small() {
        let c = PolicyConfig::default();
        assert!(c.param_count() <= 100_000);
        let p = PolicyParameters::init(c.clone(), &mut stream(0)).unwrap();
        assert_eq!(p.param_count(), c.param_count());
    }

    #[test]
    fn snapshot_is_a_bitwise_copy() {
        let mut p = PolicyParameters::init(PolicyConfig::default(), &mut stream(1)).unwrap();
        let a = snapshot(&p);
        let b = snapshot(&p);
        assert!(a.bit_eq(&p));
        assert_eq!(a, b);
        p.tensors_mut().get_mut("head").unwrap().data_mut()[0] += 1.0;
        assert!(!a.bit_eq(&p));
        assert!(a.bit_eq(&b));
    }

    #[test]
    fn perturbation_extremes() {
        let ex = example_from_parts([3; 9], TaskKind::GridMax, 0);
        let same = perturb_image(&ex.question, 0.0, &mut stream(5)).unwrap();
        assert_eq!(same, ex.question);
        let a = perturb_image(&ex.question, 0.5, &mut stream(9)).unwrap();
        let b = perturb_image(&ex.question, 0.5, &mut stream(9)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.question, ex.question.question);
        assert_eq!(a.image[0], ex.question.image[0]);
        assert!(perturb_image(&ex.question, 1.5, &mut stream(0)).is_err());
    }

    #[test]
    fn full_perturbation_changes_nine_tenths_of_cells() {
        // Each resampled cell keeps its value with probability 1/10.
        let ex = example_from_parts([4; 9], TaskKind::GridMax, 0);
        let mut rng = stream(17);
        let trials = 10_000;
        let mut changed = 0usize;
        for _ in 0..trials {
            let q = perturb_image(&ex.question, 1.0, &mut rng).unwrap();
            changed += q.grid_tokens().iter().filter(|&&t| t != 4).count();
        }
        let n = (trials * 9) as f64;
        let frac = changed as f64 / n;
        let sd = (0.9 * 0.1 / n).sqrt();
        assert!((frac - 0.9).abs() < 5.0 * sd, "fraction {frac}");
    }
}
