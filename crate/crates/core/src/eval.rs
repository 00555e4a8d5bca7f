//! Accuracy evaluation under each generation mode.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::{direct_generate, majority_vote, self_correct, verifier_guided, ContextLayout};
use crate::policy::{DecodeConfig, Generator};
use crate::rng::{derive_seed, stream};
use crate::task::{check_answer, extract_answer, vocab, Example, Token};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum EvalMode {
    Direct,
    /// Direct answer plus `rounds` greedy corrections; scored on the last.
    SelfCorrect { rounds: usize },
    /// Plurality answer over `n` temperature samples.
    Vote { n: usize },
    /// Up to `max_rounds` corrections, stopping as soon as the answer oracle
    /// accepts.
    Verifier { max_rounds: usize },
}

impl fmt::Display for EvalMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EvalMode::Direct => write!(f, "direct"),
            EvalMode::SelfCorrect { rounds } => write!(f, "self-correct-{rounds}"),
            EvalMode::Vote { n } => write!(f, "vote-{n}"),
            EvalMode::Verifier { max_rounds } => write!(f, "verifier-{max_rounds}"),
        }
    }
}

impl FromStr for EvalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let count = |rest: &str| {
            rest.parse::<usize>()
                .map_err(|_| Error::InvalidArgument(format!("bad count in eval mode {s:?}")))
        };
        if s == "direct" {
            Ok(EvalMode::Direct)
        } else if let Some(k) = s.strip_prefix("self-correct-") {
            Ok(EvalMode::SelfCorrect { rounds: count(k)? })
        } else if let Some(n) = s.strip_prefix("vote-") {
            Ok(EvalMode::Vote { n: count(n)? })
        } else if let Some(k) = s.strip_prefix("verifier-") {
            Ok(EvalMode::Verifier { max_rounds: count(k)? })
        } else {
            Err(Error::InvalidArgument(format!("unknown eval mode {s:?}")))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSettings {
    pub layout: ContextLayout,
    pub max_new_tokens: usize,
    /// Temperature for vote samples; every other mode decodes greedily.
    pub vote_temperature: f64,
    pub seed: u64,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            layout: ContextLayout::default(),
            max_new_tokens: 40,
            vote_temperature: 1.0,
            seed: 0,
        }
    }
}

/// One example under one mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub example_id: usize,
    pub mode: String,
    /// Correction rounds after the direct answer; samples drawn for a vote.
    pub rounds: usize,
    /// Extracted answer tokens rendered as text; empty when malformed.
    pub answer: String,
    pub correct: bool,
    pub tokens: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeSummary {
    pub mode: String,
    pub accuracy: f64,
    pub mean_rounds: f64,
    pub total_tokens: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub summaries: Vec<ModeSummary>,
    /// Accuracy of `Y^{t+1}` for turn `t = 0..=k`, from the self-correct mode
    /// with the most rounds.
    pub turns: Vec<f64>,
}

impl EvalReport {
    pub fn accuracy(&self, mode: EvalMode) -> Option<f64> {
        let name = mode.to_string();
        self.summaries.iter().find(|s| s.mode == name).map(|s| s.accuracy)
    }

    pub fn summary(&self, mode: EvalMode) -> Option<&ModeSummary> {
        let name = mode.to_string();
        self.summaries.iter().find(|s| s.mode == name)
    }
}

fn render_answer(response: &[Token]) -> String {
    extract_answer(response).map_or_else(String::new, |a| vocab::render(&a))
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn evaluate<G: Generator + ?Sized>(
    policy: &G,
    examples: &[Example],
    modes: &[EvalMode],
    settings: &EvalSettings,
) -> Result<EvalReport> {
    let greedy = DecodeConfig::greedy(settings.max_new_tokens);
    let sampled = DecodeConfig::sampled(settings.vote_temperature, settings.max_new_tokens);
    let mut report = EvalReport::default();
    let deepest = modes
        .iter()
        .filter_map(|m| match m {
            EvalMode::SelfCorrect { rounds } => Some(*rounds),
            _ => None,
        })
        .max();
    let mut turn_hits = vec![0usize; deepest.map_or(0, |k| k + 1)];

    for &mode in modes {
        let name = mode.to_string();
        let (mut hits, mut rounds_total, mut tokens_total) = (0usize, 0usize, 0usize);
        for (id, ex) in examples.iter().enumerate() {
            let x = ex.question.input_tokens();
            let mut rng = stream(derive_seed(settings.seed, &name, id as u64));
            let (response, rounds, tokens) = match mode {
                EvalMode::Direct => {
                    let g = direct_generate(policy, &settings.layout, &x, &greedy, &mut rng)?;
                    let n = g.tokens.len();
                    (g.tokens, 0, n)
                }
                EvalMode::SelfCorrect { rounds } => {
                    let t = self_correct(policy, &settings.layout, &x, rounds, &greedy, &mut rng)?;
                    if Some(rounds) == deepest {
                        for (turn, hit) in turn_hits.iter_mut().enumerate() {
                            // an aborted round repeats the last available response
                            let r = t.responses.get(turn).unwrap_or_else(|| t.responses.last().unwrap());
                            *hit += usize::from(check_answer(ex, r));
                        }
                    }
                    (t.last().to_vec(), t.responses.len() - 1, t.tokens_generated)
                }
                EvalMode::Vote { n } => {
                    let a = majority_vote(policy, &settings.layout, &x, n, &sampled, &mut rng)?;
                    let mut response = vec![vocab::SUMMARY, vocab::CAPTION, vocab::REASONING, vocab::ANSWER];
                    if let Some(a) = a.answer {
                        response.extend(a);
                    }
                    response.push(vocab::EOS);
                    (response, n, a.tokens_generated)
                }
                EvalMode::Verifier { max_rounds } => {
                    let out = verifier_guided(
                        policy,
                        &settings.layout,
                        &x,
                        |r| check_answer(ex, r),
                        max_rounds,
                        &greedy,
                        &mut rng,
                    )?;
                    (out.response, out.rounds, out.tokens_generated)
                }
            };
            let correct = check_answer(ex, &response);
            hits += usize::from(correct);
            rounds_total += rounds;
            tokens_total += tokens;
            report.rows.push(EvalRow {
                example_id: id,
                mode: name.clone(),
                rounds,
                answer: render_answer(&response),
                correct,
                tokens,
            });
        }
        report.summaries.push(ModeSummary {
            mode: name,
            accuracy: ratio(hits, examples.len()),
            mean_rounds: ratio(rounds_total, examples.len()),
            total_tokens: tokens_total,
        });
    }
    report.turns = turn_hits.iter().map(|&h| ratio(h, examples.len())).collect();
    Ok(report)
}
