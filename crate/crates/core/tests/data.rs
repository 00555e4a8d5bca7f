use std::cell::RefCell;

use proptest::prelude::*;

use selfcorrect::data::{
    build_offline_dataset, build_offline_pair, build_online_dataset, build_online_pair, build_sft_dataset, prefix_len,
    PairSampling,
};
use selfcorrect::objectives::{dynamic_beta, Provenance, STATIC_BETA};
use selfcorrect::policy::{DecodeConfig, Generation, Generator, PolicyConfig, PolicyParameters};
use selfcorrect::rng::{stream, StreamRng};
use selfcorrect::task::{example_from_parts, generate_dataset, oracle_calls, vocab, TaskKind, TaskMix, Token};
use selfcorrect::Result;

fn policy(seed: u64) -> PolicyParameters {
    PolicyParameters::init(PolicyConfig::default(), &mut stream(seed)).unwrap()
}

fn short_sampling() -> PairSampling {
    PairSampling {
        max_response_tokens: 30,
        ..PairSampling::default()
    }
}

/// Replays a fixed list of responses in order, ignoring the context.
struct Scripted(RefCell<Vec<Vec<Token>>>);

impl Scripted {
    fn new(mut responses: Vec<Vec<Token>>) -> Self {
        responses.reverse();
        Self(RefCell::new(responses))
    }
}

impl Generator for Scripted {
    fn generate(&self, _: &[Token], _: &DecodeConfig, _: &mut StreamRng) -> Result<Generation> {
        let tokens = self.0.borrow_mut().pop().unwrap_or_else(|| vec![vocab::EOS]);
        Ok(Generation { tokens, truncated: false })
    }
}

/// Well-formed response answering `a`, or a malformed one for `None`.
fn response(a: Option<Token>) -> Vec<Token> {
    use vocab::*;
    match a {
        Some(a) => vec![SUMMARY, Q_ROW_SUM, CAPTION, 1, REASONING, 2, 3, ANSWER, 0, a, EOS],
        None => vec![SUMMARY, 4, EOS],
    }
}

#[test]
fn self_consistency_filter_admits_exactly_agreeing_answers() {
    let q = generate_dataset(1, 1, &TaskMix::default()).remove(0).question;
    let options = [Some(1), Some(2), None];
    for first in options {
        for a2 in options {
            for a3 in options {
                for a4 in options {
                    let script = vec![response(first), response(a2), response(a3), response(a4), vec![vocab::EOS]];
                    let out = build_online_pair(&q, &Scripted::new(script), &short_sampling(), 1, 7).unwrap();
                    let expected = a2.is_some() && a2 == a3 && a3 == a4;
                    assert_eq!(out.pair.is_some(), expected, "{first:?} {a2:?} {a3:?} {a4:?}");
                    if let Some(p) = out.pair {
                        assert_eq!(p.chosen, response(a4));
                        assert_eq!(p.provenance, Provenance::Online(1));
                        if out.fell_back {
                            assert!(first.is_none());
                            assert_eq!(p.i, 1);
                        }
                        assert_eq!(&p.rejected[..p.rejected_prefix_len], &response(first)[..p.rejected_prefix_len]);
                    }
                }
            }
        }
    }
}

#[test]
fn malformed_first_response_falls_back_to_whole_response_correction() {
    let q = generate_dataset(2, 1, &TaskMix::default()).remove(0).question;
    let mut saw_fallback = false;
    for seed in 0..40 {
        let script = vec![response(None), response(Some(3)), response(Some(3)), response(Some(3)), vec![vocab::EOS]];
        let out = build_online_pair(&q, &Scripted::new(script), &short_sampling(), 2, seed).unwrap();
        let p = out.pair.unwrap();
        assert_eq!((p.rejected_prefix_len, p.chosen_prefix_len), (0, 0));
        assert_eq!(p.i, 1);
        assert!((p.beta - dynamic_beta(1, 4, p.epsilon).unwrap()).abs() == 0.0);
        saw_fallback |= out.fell_back;
    }
    assert!(saw_fallback);
}

#[test]
fn online_construction_never_consults_the_answer_oracle() {
    let p = policy(4);
    let questions: Vec<_> = generate_dataset(5, 6, &TaskMix::default()).into_iter().map(|e| e.question).collect();
    let before = oracle_calls();
    let (pairs, stats) = build_online_dataset(&questions, &p, &short_sampling(), 3, 1, 11).unwrap();
    assert_eq!(stats.accepted, pairs.len());
    assert_eq!(stats.shortfall + pairs.len(), 3);
    assert!(stats.attempts <= questions.len());
    let steady = Scripted::new(vec![response(Some(4)); 5 * questions.len()]);
    let (pairs, stats) = build_online_dataset(&questions, &steady, &short_sampling(), 3, 1, 11).unwrap();
    assert_eq!((pairs.len(), stats.attempts, stats.shortfall), (3, 3, 0));
    assert_eq!(oracle_calls(), before);
}

#[test]
fn static_beta_variant_changes_only_beta() {
    let data = generate_dataset(6, 8, &TaskMix::default());
    let p = policy(2);
    let full = build_offline_dataset(&data, &p, &short_sampling(), 3).unwrap();
    let fixed = PairSampling {
        static_beta: Some(STATIC_BETA),
        ..short_sampling()
    };
    let stat = build_offline_dataset(&data, &p, &fixed, 3).unwrap();
    for (a, b) in full.iter().zip(&stat) {
        assert_eq!(b.beta, STATIC_BETA);
        assert_eq!(a.beta, dynamic_beta(a.i, a.stages, a.epsilon).unwrap());
        let mut a = a.clone();
        a.beta = b.beta;
        assert_eq!(&a, b);
    }
}

#[test]
fn forced_full_response_pairs_have_empty_prefixes() {
    let data = generate_dataset(7, 6, &TaskMix::default());
    let s = PairSampling {
        force_full_response: true,
        ..short_sampling()
    };
    for pair in build_offline_dataset(&data, &policy(1), &s, 4).unwrap() {
        assert_eq!((pair.i, pair.chosen_prefix_len, pair.rejected_prefix_len), (1, 0, 0));
        assert_eq!(pair.beta, dynamic_beta(1, 4, pair.epsilon).unwrap());
    }
}

#[test]
fn offline_pairs_are_reproducible_from_their_seed() {
    let ex = generate_dataset(8, 1, &TaskMix::default()).remove(0);
    let p = policy(3);
    let a = build_offline_pair(&ex, &p, &short_sampling(), 99).unwrap();
    let b = build_offline_pair(&ex, &p, &short_sampling(), 99).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.seed, 99);
}

#[test]
fn sft_triples_repeat_each_gold_response_per_sample() {
    let data = generate_dataset(10, 4, &TaskMix::default());
    let p = policy(5);
    let one = build_sft_dataset(&data, &p, &short_sampling(), 1, 21).unwrap();
    let three = build_sft_dataset(&data, &p, &short_sampling(), 3, 21).unwrap();
    assert_eq!((one.len(), three.len()), (4, 12));
    for (k, ex) in data.iter().enumerate() {
        for t in &three[3 * k..3 * k + 3] {
            assert_eq!(t.chosen, ex.gold_response);
            assert_eq!(t.x, ex.question.input_tokens());
        }
    }
    // the single-sample set is the first sample of the first example's draws
    assert_eq!(one[0], three[0]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn offline_prefixes_are_byte_identical(seed in 0u64..10_000) {
        let ex = generate_dataset(seed, 1, &TaskMix::default()).remove(0);
        let pair = build_offline_pair(&ex, &policy(seed % 3), &short_sampling(), seed).unwrap();
        pair.validate().unwrap();
        prop_assert_eq!(pair.chosen_prefix_len, pair.rejected_prefix_len);
        prop_assert_eq!(pair.chosen_prefix_len, prefix_len(&ex.gold_response, pair.i).unwrap());
        prop_assert_eq!(pair.chosen_prefix(), pair.rejected_prefix());
        prop_assert_eq!(&pair.chosen, &ex.gold_response);
        prop_assert!(pair.rejected.len() <= 30);
    }

    #[test]
    fn truncation_points_nest_for_every_task(grid in proptest::array::uniform9(0u8..10), kind in 0usize..4, which in 0u8..3) {
        let kind = match kind {
            0 => TaskKind::RowSum(which),
            1 => TaskKind::ColSum(which),
            2 => TaskKind::GridMax,
            _ => TaskKind::CellCompare(which, (which + 1) % 3),
        };
        let ex = example_from_parts(grid, kind, 0);
        let lens: Vec<usize> = (1..=4).map(|i| prefix_len(&ex.gold_response, i).unwrap()).collect();
        prop_assert_eq!(lens[0], 0);
        prop_assert!(lens.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(lens[3] < ex.gold_response.len());
    }
}
