//! Dataset construction: supervised pairs, offline preference pairs built by
//! truncation and image perturbation, and online pairs filtered by
//! self-consistency of the policy's own corrections.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::{self_correct, ContextLayout};
use crate::objectives::{dynamic_beta, PreferencePair, Provenance, SftTriple, STAGES};
use crate::policy::{perturb_image, DecodeConfig, Generator};
use crate::rng::{derive_seed, stream};
use crate::task::{extract_answer, Example, Question, StageLayout, Token};

/// Length of the retained prefix for truncation index `i`:
///
/// * `1`: nothing
/// * `2`: the summary block (delimiter and payload)
/// * `3`: summary and caption blocks
/// * `4`: as `3`, plus the reasoning delimiter and the first `⌈m/2⌉` of the
///   `m` reasoning payload tokens
pub fn prefix_len(response: &[Token], i: u8) -> Result<usize> {
    if i == 0 || i > STAGES {
        return Err(Error::InvalidArgument(format!("truncation index {i} outside 1..={STAGES}")));
    }
    if i == 1 {
        return Ok(0);
    }
    let layout = StageLayout::parse(response)
        .ok_or_else(|| Error::MalformedResponse(crate::task::vocab::render(response)))?;
    Ok(match i {
        2 => layout.delimiters[1],
        3 => layout.delimiters[2],
        _ => {
            let reasoning = layout.stage(response, 2);
            reasoning.start + reasoning.len().div_ceil(2)
        }
    })
}

pub fn truncate_prefix(response: &[Token], i: u8) -> Result<&[Token]> {
    Ok(&response[..prefix_len(response, i)?])
}

/// Sampling settings shared by every pair builder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PairSampling {
    pub layout: ContextLayout,
    /// Temperature for rejected suffixes and online trajectories.
    pub temperature: f64,
    /// Cap on a full response, prefix included.
    pub max_response_tokens: usize,
    /// Always truncate at `i = 1` (correct the whole response).
    pub force_full_response: bool,
    /// Replace the dynamic β with this constant.
    pub static_beta: Option<f64>,
}

impl Default for PairSampling {
    fn default() -> Self {
        Self {
            layout: ContextLayout::default(),
            temperature: 1.0,
            max_response_tokens: 40,
            force_full_response: false,
            static_beta: None,
        }
    }
}

impl PairSampling {
    fn decode(&self, prefix_len: usize) -> DecodeConfig {
        DecodeConfig::sampled(self.temperature, self.max_response_tokens.saturating_sub(prefix_len).max(1))
    }

    /// Draws `(i, ε)` and the β to store. Both are drawn under every ablation
    /// so variants consume identical random streams.
    fn draw(&self, rng: &mut impl Rng) -> Result<(u8, f64, f64)> {
        let drawn: u8 = rng.gen_range(1..=STAGES);
        let epsilon: f64 = rng.gen();
        let i = if self.force_full_response { 1 } else { drawn };
        let beta = match self.static_beta {
            Some(b) => b,
            None => dynamic_beta(i, STAGES, epsilon)?,
        };
        Ok((i, epsilon, beta))
    }
}

/// Pairs each gold response in `d_b` with `per_example` samples from the
/// warm-up policy. Samples equal to the gold response are kept.
pub fn build_sft_dataset<G: Generator + ?Sized>(
    d_b: &[Example],
    warmup: &G,
    sampling: &PairSampling,
    per_example: usize,
    seed: u64,
) -> Result<Vec<SftTriple>> {
    let mut out = Vec::with_capacity(d_b.len() * per_example);
    for (k, ex) in d_b.iter().enumerate() {
        let x = ex.question.input_tokens();
        let ctx = sampling.layout.direct(&x);
        for j in 0..per_example {
            let mut rng = stream(derive_seed(seed, "sft-pair", (k * per_example + j) as u64));
            let g = warmup
                .generate(&ctx, &sampling.decode(0), &mut rng)
                .map_err(|e| e.in_record(k))?;
            out.push(SftTriple {
                x: x.clone(),
                chosen: ex.gold_response.clone(),
                rejected: g.tokens,
            });
        }
    }
    Ok(out)
}

/// Samples a rejected suffix after `prefix` with the image perturbed at level `ε`.
fn rejected_suffix<G: Generator + ?Sized>(
    policy: &G,
    question: &Question,
    prefix: &[Token],
    epsilon: f64,
    sampling: &PairSampling,
    rng: &mut crate::rng::StreamRng,
) -> Result<(Vec<Token>, bool)> {
    let noisy = perturb_image(question, epsilon, rng)?;
    let mut ctx = sampling.layout.direct(&noisy.input_tokens());
    ctx.extend_from_slice(prefix);
    let g = policy.generate(&ctx, &sampling.decode(prefix.len()), rng)?;
    let mut rejected = prefix.to_vec();
    rejected.extend(g.tokens);
    Ok((rejected, g.truncated))
}

/// Offline pair: the gold response is chosen; the rejected response keeps the
/// gold prefix up to truncation point `i` and continues under a perturbed image.
pub fn build_offline_pair<G: Generator + ?Sized>(
    example: &Example,
    policy: &G,
    sampling: &PairSampling,
    seed: u64,
) -> Result<PreferencePair> {
    let mut rng = stream(seed);
    let (i, epsilon, beta) = sampling.draw(&mut rng)?;
    let chosen = example.gold_response.clone();
    let cut = prefix_len(&chosen, i)?;
    let (rejected, truncated) =
        rejected_suffix(policy, &example.question, &chosen[..cut], epsilon, sampling, &mut rng)?;
    Ok(PreferencePair {
        x: example.question.input_tokens(),
        chosen,
        rejected,
        i,
        stages: STAGES,
        epsilon,
        beta,
        provenance: Provenance::Offline,
        seed,
        chosen_prefix_len: cut,
        rejected_prefix_len: cut,
        truncated,
    })
}

pub fn build_offline_dataset<G: Generator + ?Sized>(
    examples: &[Example],
    policy: &G,
    sampling: &PairSampling,
    seed: u64,
) -> Result<Vec<PreferencePair>> {
    examples
        .iter()
        .enumerate()
        .map(|(k, ex)| {
            build_offline_pair(ex, policy, sampling, derive_seed(seed, "offline-pair", k as u64))
                .map_err(|e| e.in_record(k))
        })
        .collect()
}

/// Result of one online attempt, kept whether or not a pair was emitted.
#[derive(Debug, Clone, PartialEq)]
pub struct OnlineOutcome {
    pub pair: Option<PreferencePair>,
    /// `Y¹ … Y⁴` as generated.
    pub responses: Vec<Vec<Token>>,
    /// Truncation index fell back to 1 because `Y¹` or `Y⁴` was malformed.
    pub fell_back: bool,
}

/// Online pair from a question alone: three self-corrections, accepted only
/// if the answers of `Y²`, `Y³` and `Y⁴` are present and identical. The
/// chosen response is `Y⁴`; the rejected one keeps the prefix of `Y¹`.
pub fn build_online_pair<G: Generator + ?Sized>(
    question: &Question,
    policy: &G,
    sampling: &PairSampling,
    iteration: u32,
    seed: u64,
) -> Result<OnlineOutcome> {
    let mut rng = stream(seed);
    let x = question.input_tokens();
    let traj = self_correct(policy, &sampling.layout, &x, 3, &sampling.decode(0), &mut rng)?;
    let mut outcome = OnlineOutcome {
        pair: None,
        responses: traj.responses,
        fell_back: false,
    };
    if outcome.responses.len() < 4 {
        return Ok(outcome);
    }
    let answers: Vec<_> = outcome.responses[1..].iter().map(|r| extract_answer(r)).collect();
    let consistent = answers[0].is_some() && answers.iter().all(|a| *a == answers[0]);
    if !consistent {
        return Ok(outcome);
    }
    let (mut i, epsilon, mut beta) = sampling.draw(&mut rng)?;
    let first = &outcome.responses[0];
    let chosen = outcome.responses[3].clone();
    if i > 1 && (StageLayout::parse(first).is_none() || StageLayout::parse(&chosen).is_none()) {
        i = 1;
        beta = match sampling.static_beta {
            Some(b) => b,
            None => dynamic_beta(1, STAGES, epsilon)?,
        };
        outcome.fell_back = true;
    }
    let rejected_cut = prefix_len(first, i)?;
    let chosen_cut = prefix_len(&chosen, i)?;
    let (rejected, truncated) =
        rejected_suffix(policy, question, &first[..rejected_cut], epsilon, sampling, &mut rng)?;
    outcome.pair = Some(PreferencePair {
        x,
        chosen,
        rejected,
        i,
        stages: STAGES,
        epsilon,
        beta,
        provenance: Provenance::Online(iteration),
        seed,
        chosen_prefix_len: chosen_cut,
        rejected_prefix_len: rejected_cut,
        truncated,
    });
    Ok(outcome)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OnlineStats {
    pub attempts: usize,
    pub accepted: usize,
    /// Requested pairs that could not be filled within the attempt cap.
    pub shortfall: usize,
    pub fallbacks: usize,
}

impl OnlineStats {
    pub fn acceptance_rate(&self) -> f64 {
        if self.attempts == 0 {
            0.0
        } else {
            self.accepted as f64 / self.attempts as f64
        }
    }
}

/// Runs online attempts over `questions` in order until `budget` pairs are
/// accepted or the questions run out.
pub fn build_online_dataset<G: Generator + ?Sized>(
    questions: &[Question],
    policy: &G,
    sampling: &PairSampling,
    budget: usize,
    iteration: u32,
    seed: u64,
) -> Result<(Vec<PreferencePair>, OnlineStats)> {
    let mut pairs = Vec::with_capacity(budget);
    let mut stats = OnlineStats {
        attempts: 0,
        accepted: 0,
        shortfall: 0,
        fallbacks: 0,
    };
    for (k, q) in questions.iter().enumerate() {
        if pairs.len() >= budget {
            break;
        }
        let record_seed = derive_seed(seed, "online-pair", k as u64);
        let outcome = build_online_pair(q, policy, sampling, iteration, record_seed).map_err(|e| e.in_record(k))?;
        stats.attempts += 1;
        stats.fallbacks += usize::from(outcome.fell_back);
        if let Some(p) = outcome.pair {
            stats.accepted += 1;
            pairs.push(p);
        }
    }
    stats.shortfall = budget - pairs.len();
    Ok((pairs, stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::task::{example_from_parts, vocab, TaskKind};

    #[test]
    fn truncation_prefixes_nest() {
        let ex = example_from_parts([1, 2, 3, 4, 5, 6, 7, 8, 9], TaskKind::RowSum(0), 0);
        let y = &ex.gold_response;
        let lens: Vec<usize> = (1..=4).map(|i| prefix_len(y, i).unwrap()).collect();
        assert_eq!(lens[0], 0);
        assert!(lens.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(y[0], vocab::SUMMARY);
        assert_eq!(y[lens[1]], vocab::CAPTION);
        assert_eq!(y[lens[2]], vocab::REASONING);
        // nine reasoning tokens: delimiter plus five of them
        assert_eq!(lens[3], lens[2] + 1 + 5);
        assert!(prefix_len(y, 0).is_err());
        assert!(prefix_len(&[1, 2, 3], 2).is_err());
        assert_eq!(prefix_len(&[1, 2, 3], 1).unwrap(), 0);
    }

    #[test]
    fn odd_reasoning_length_rounds_up() {
        use vocab::*;
        let y = [SUMMARY, 1, CAPTION, 2, REASONING, 3, 4, 5, 6, 7, ANSWER, 8, EOS];
        assert_eq!(truncate_prefix(&y, 4).unwrap(), &y[..8]);
        assert_eq!(truncate_prefix(&y, 3).unwrap(), &[SUMMARY, 1, CAPTION, 2]);
        assert_eq!(truncate_prefix(&y, 2).unwrap(), &[SUMMARY, 1]);
    }
}
