//! Generation modes: direct answers, sequential self-correction, majority
//! vote and verifier-stopped correction.
//!
//! Every context fed to the policy, at training or inference time, is built by
//! [`ContextLayout`]:
//!
//! ```text
//! direct:      x  SEP
//! correction:  x  SEP  Y_prev  CORRECT
//! ```
//!
//! where `x` is the question input (`BOS`, image, question tokens).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::{DecodeConfig, Generation, Generator};
use crate::rng::StreamRng;
use crate::task::{extract_answer, vocab, Token};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ContextLayout {
    pub sep: Token,
    pub correction: Token,
}

impl Default for ContextLayout {
    fn default() -> Self {
        Self {
            sep: vocab::SEP,
            correction: vocab::CORRECT,
        }
    }
}

impl ContextLayout {
    pub fn direct(&self, x: &[Token]) -> Vec<Token> {
        let mut out = Vec::with_capacity(x.len() + 1);
        out.extend_from_slice(x);
        out.push(self.sep);
        out
    }

    pub fn correction(&self, x: &[Token], previous: &[Token]) -> Vec<Token> {
        let mut out = Vec::with_capacity(x.len() + previous.len() + 2);
        out.extend_from_slice(x);
        out.push(self.sep);
        out.extend_from_slice(previous);
        out.push(self.correction);
        out
    }
}

pub fn direct_generate<G: Generator + ?Sized>(
    policy: &G,
    layout: &ContextLayout,
    x: &[Token],
    decode: &DecodeConfig,
    rng: &mut StreamRng,
) -> Result<Generation> {
    policy.generate(&layout.direct(x), decode, rng)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Trajectory {
    /// `[Y¹, …, Y^{k+1}]`; shorter when a round overflowed the context.
    pub responses: Vec<Vec<Token>>,
    /// A round was aborted because its context did not fit.
    pub truncated: bool,
    pub tokens_generated: usize,
}

impl Trajectory {
    pub fn last(&self) -> &[Token] {
        self.responses.last().map_or(&[], Vec::as_slice)
    }
}

/// Direct answer followed by `rounds` sequential corrections, each conditioned
/// on the previous response.
pub fn self_correct<G: Generator + ?Sized>(
    policy: &G,
    layout: &ContextLayout,
    x: &[Token],
    rounds: usize,
    decode: &DecodeConfig,
    rng: &mut StreamRng,
) -> Result<Trajectory> {
    let first = direct_generate(policy, layout, x, decode, rng)?;
    let mut traj = Trajectory {
        tokens_generated: first.tokens.len(),
        responses: vec![first.tokens],
        truncated: false,
    };
    for _ in 0..rounds {
        let ctx = layout.correction(x, traj.last());
        match policy.generate(&ctx, decode, rng) {
            Ok(g) => {
                traj.tokens_generated += g.tokens.len();
                traj.responses.push(g.tokens);
            }
            Err(Error::ContextOverflow { .. }) => {
                traj.truncated = true;
                break;
            }
            Err(e) => return Err(e),
        }
    }
    Ok(traj)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VoteOutcome {
    /// `None` when every sample was malformed.
    pub answer: Option<Vec<Token>>,
    pub tokens_generated: usize,
}

/// Most frequent extracted answer among `n` samples; ties go to the answer
/// whose first occurrence came earliest.
pub fn majority_vote<G: Generator + ?Sized>(
    policy: &G,
    layout: &ContextLayout,
    x: &[Token],
    n: usize,
    decode: &DecodeConfig,
    rng: &mut StreamRng,
) -> Result<VoteOutcome> {
    if n == 0 {
        return Err(Error::InvalidArgument("majority vote needs n >= 1".into()));
    }
    let mut answers = Vec::with_capacity(n);
    let mut tokens_generated = 0;
    for _ in 0..n {
        let g = direct_generate(policy, layout, x, decode, rng)?;
        tokens_generated += g.tokens.len();
        answers.push(extract_answer(&g.tokens));
    }
    Ok(VoteOutcome {
        answer: vote(&answers),
        tokens_generated,
    })
}

/// Plurality over present answers with earliest-first tie-breaking.
pub fn vote(answers: &[Option<Vec<Token>>]) -> Option<Vec<Token>> {
    // (answer, count, first index)
    let mut tally: Vec<(&Vec<Token>, usize, usize)> = Vec::new();
    for (i, a) in answers.iter().enumerate() {
        let Some(a) = a else { continue };
        match tally.iter_mut().find(|(b, _, _)| *b == a) {
            Some(entry) => entry.1 += 1,
            None => tally.push((a, 1, i)),
        }
    }
    tally
        .into_iter()
        .max_by(|x, y| x.1.cmp(&y.1).then(y.2.cmp(&x.2)))
        .map(|(a, _, _)| a.clone())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GuidedOutcome {
    pub response: Vec<Token>,
    /// Correction rounds performed after the direct answer.
    pub rounds: usize,
    pub accepted: bool,
    pub tokens_generated: usize,
}

/// Generates, then keeps correcting until `verifier` accepts or `max_rounds`
/// corrections have been made. With a binary verifier the only feedback
/// carried into the next round is the correction marker itself.
pub fn verifier_guided<G: Generator + ?Sized>(
    policy: &G,
    layout: &ContextLayout,
    x: &[Token],
    mut verifier: impl FnMut(&[Token]) -> bool,
    max_rounds: usize,
    decode: &DecodeConfig,
    rng: &mut StreamRng,
) -> Result<GuidedOutcome> {
    let first = direct_generate(policy, layout, x, decode, rng)?;
    let mut out = GuidedOutcome {
        tokens_generated: first.tokens.len(),
        response: first.tokens,
        rounds: 0,
        accepted: false,
    };
    loop {
        if verifier(&out.response) {
            out.accepted = true;
            return Ok(out);
        }
        if out.rounds >= max_rounds {
            return Ok(out);
        }
        let ctx = layout.correction(x, &out.response);
        match policy.generate(&ctx, decode, rng) {
            Ok(g) => {
                out.tokens_generated += g.tokens.len();
                out.response = g.tokens;
                out.rounds += 1;
            }
            Err(Error::ContextOverflow { .. }) => return Ok(out),
            Err(e) => return Err(e),
        }
    }
}
