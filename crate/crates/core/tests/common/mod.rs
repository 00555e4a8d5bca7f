//! Shared fixtures: a three-token policy small enough to enumerate, and a
//! probability table built from it by exhaustive enumeration.
#![allow(dead_code)]

use std::collections::HashMap;

use selfcorrect::inference::ContextLayout;
use selfcorrect::objectives::{PreferencePair, Provenance, SftTriple};
use selfcorrect::policy::{PolicyConfig, PolicyParameters};
use selfcorrect::rng::stream;
use selfcorrect::task::Token;

/// Longest sequence the tiny policy scores.
pub const TINY_LEN: usize = 7;

pub fn tiny_config() -> PolicyConfig {
    PolicyConfig {
        vocab_size: 3,
        max_len: TINY_LEN,
        d_model: 4,
        n_heads: 2,
        n_layers: 1,
        d_hidden: 6,
    }
}

/// Separator `0`, correction marker `1`.
pub fn tiny_layout() -> ContextLayout {
    ContextLayout { sep: 0, correction: 1 }
}

pub fn tiny_policy(seed: u64) -> PolicyParameters {
    PolicyParameters::init(tiny_config(), &mut stream(seed)).unwrap()
}

/// Every length-`TINY_LEN` sequence that starts with `first`, with its
/// probability from the chain rule over next-token distributions.
pub struct Enumeration {
    first: Token,
    probs: HashMap<Vec<Token>, f64>,
}

impl Enumeration {
    pub fn new(policy: &PolicyParameters, first: Token) -> Self {
        let v = policy.config().vocab_size as Token;
        let mut probs = HashMap::new();
        let mut frontier = vec![(vec![first], 1.0f64)];
        while let Some((seq, p)) = frontier.pop() {
            if seq.len() == TINY_LEN {
                probs.insert(seq, p);
                continue;
            }
            let next = policy.next_logprobs(&seq).unwrap();
            for t in 0..v {
                let mut s = seq.clone();
                s.push(t);
                frontier.push((s, p * next[t as usize].exp()));
            }
        }
        Self { first, probs }
    }

    pub fn total_mass(&self) -> f64 {
        self.probs.values().sum()
    }

    /// Probability that a full sequence starts with `prefix`.
    pub fn marginal(&self, prefix: &[Token]) -> f64 {
        assert_eq!(prefix.first(), Some(&self.first));
        assert!(prefix.len() <= TINY_LEN);
        self.probs
            .iter()
            .filter(|(s, _)| s.starts_with(prefix))
            .map(|(_, p)| p)
            .sum()
    }

    /// `log P(target | context)` as a ratio of marginals.
    pub fn logprob(&self, context: &[Token], target: &[Token]) -> f64 {
        let mut joint = context.to_vec();
        joint.extend_from_slice(target);
        (self.marginal(&joint) / self.marginal(context)).ln()
    }
}

/// Preference pair over the tiny vocabulary with question `x = [2]`.
pub fn tiny_pair(chosen: &[Token], rejected: &[Token], chosen_cut: usize, rejected_cut: usize, beta: f64) -> PreferencePair {
    PreferencePair {
        x: vec![2],
        chosen: chosen.to_vec(),
        rejected: rejected.to_vec(),
        i: 1,
        stages: 4,
        epsilon: 0.5,
        beta,
        provenance: Provenance::Offline,
        seed: 0,
        chosen_prefix_len: chosen_cut,
        rejected_prefix_len: rejected_cut,
        truncated: false,
    }
}

/// Pairs exercising shared prefixes, distinct prefixes and empty prefixes.
/// Every scored sequence fits in `TINY_LEN`.
pub fn tiny_pairs() -> Vec<PreferencePair> {
    vec![
        tiny_pair(&[2, 1], &[2, 0], 1, 1, 0.25),
        tiny_pair(&[1], &[2], 0, 0, 0.2),
        tiny_pair(&[0, 2], &[2, 2], 1, 1, 1.0 / 6.0),
    ]
}

pub fn tiny_triples() -> Vec<SftTriple> {
    vec![
        SftTriple {
            x: vec![2],
            chosen: vec![1, 2],
            rejected: vec![0],
        },
        SftTriple {
            x: vec![2],
            chosen: vec![2],
            rejected: vec![2, 1],
        },
    ]
}

pub fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}
