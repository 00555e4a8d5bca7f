//! Experiment orchestration and report files.

use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::data::prefix_len;
use crate::error::{Error, Result};
use crate::eval::{EvalRow, ModeSummary};
use crate::inference::ContextLayout;
use crate::io::{prepare_output_dir, write_jsonl};
use crate::objectives::{LossMode, STATIC_BETA};
use crate::policy::{DecodeConfig, Generator};
use crate::rng::{derive_seed, stream};
use crate::task::{check_answer, extract_answer, vocab, Example, StageLayout, Token};
use crate::trainer::{
    run_preference_stages, run_supervised_stages, MetricsRow, PipelineRun, TrainerConfig, TurnRow,
};

/// Bumped whenever a CSV column changes.
pub const CSV_SCHEMA_VERSION: u32 = 1;

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_error)?;
    for r in rows {
        w.serialize(r).map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_error)?;
    r.deserialize()
        .enumerate()
        .map(|(k, row)| row.map_err(|e| csv_error(e).in_record(k)))
        .collect()
}

fn csv_error(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::InvalidArgument(format!("csv: {other:?}")),
    }
}

/// Header-only CSV files for empty tables keep every output parseable.
pub fn write_table<T: Serialize>(path: &Path, rows: &[T], header: &[&str]) -> Result<()> {
    if rows.is_empty() {
        fs::write(path, format!("{}\n", header.join(",")))?;
        Ok(())
    } else {
        write_csv(path, rows)
    }
}

pub const EVAL_HEADER: [&str; 6] = ["example_id", "mode", "rounds", "answer", "correct", "tokens"];
pub const METRICS_HEADER: [&str; 6] = [
    "stage",
    "seed",
    "eval_mode",
    "accuracy",
    "mean_loss",
    "filter_acceptance_rate",
];

/// Recomputes per-mode summaries from per-example rows, in first-seen mode order.
pub fn summarize(rows: &[EvalRow]) -> Vec<ModeSummary> {
    let mut modes: Vec<&str> = Vec::new();
    for r in rows {
        if !modes.contains(&r.mode.as_str()) {
            modes.push(&r.mode);
        }
    }
    modes
        .into_iter()
        .map(|m| {
            let sel: Vec<_> = rows.iter().filter(|r| r.mode == m).collect();
            let n = sel.len() as f64;
            ModeSummary {
                mode: m.to_string(),
                accuracy: sel.iter().filter(|r| r.correct).count() as f64 / n,
                mean_rounds: sel.iter().map(|r| r.rounds).sum::<usize>() as f64 / n,
                total_tokens: sel.iter().map(|r| r.tokens).sum(),
            }
        })
        .collect()
}

/// Everything needed to reproduce a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub csv_schema_version: u32,
    pub config: TrainerConfig,
}

impl Manifest {
    pub fn new(command: &str, config: &TrainerConfig, seeds: &[u64]) -> Self {
        Self {
            command: command.to_string(),
            version: version_string(),
            config_hash: config.hash(),
            seeds: seeds.to_vec(),
            csv_schema_version: CSV_SCHEMA_VERSION,
            config: config.clone(),
        }
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

/// `git describe` output when available, else the package version.
pub fn version_string() -> String {
    std::process::Command::new("git")
        .args(["describe", "--always", "--dirty", "--tags"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .unwrap_or_else(|| format!("v{}", env!("CARGO_PKG_VERSION")))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OnlineRow {
    pub iteration: usize,
    pub attempts: usize,
    pub accepted: usize,
    pub shortfall: usize,
    pub fallbacks: usize,
    pub acceptance_rate: f64,
}

/// Writes checkpoints, datasets and every report table of one pipeline run.
pub fn write_run(dir: &Path, run: &PipelineRun) -> Result<()> {
    fs::create_dir_all(dir.join("checkpoints"))?;
    fs::create_dir_all(dir.join("eval"))?;
    fs::create_dir_all(dir.join("data"))?;
    for c in &run.checkpoints {
        checkpoint::save(c, &dir.join("checkpoints").join(format!("{}.ckpt", c.stage)))?;
    }
    for (stage, report) in &run.reports {
        write_table(&dir.join("eval").join(format!("{stage}.csv")), &report.rows, &EVAL_HEADER)?;
    }
    write_table(&dir.join("metrics.csv"), &run.metrics, &METRICS_HEADER)?;
    write_table(&dir.join("turns.csv"), &run.turns, &["stage", "seed", "turn", "accuracy"])?;
    write_table(&dir.join("diagnostics.csv"), &run.diagnostics, &["stage", "step", "loss"])?;
    let online: Vec<OnlineRow> = run
        .online
        .iter()
        .enumerate()
        .map(|(k, s)| OnlineRow {
            iteration: k + 1,
            attempts: s.attempts,
            accepted: s.accepted,
            shortfall: s.shortfall,
            fallbacks: s.fallbacks,
            acceptance_rate: s.acceptance_rate(),
        })
        .collect();
    write_table(&dir.join("online.csv"), &online, &["iteration", "attempts", "accepted"])?;
    let d = &run.datasets;
    write_jsonl(&dir.join("data").join("warmup.jsonl"), &d.warmup)?;
    write_jsonl(&dir.join("data").join("sft_gold.jsonl"), &d.sft_gold)?;
    write_jsonl(&dir.join("data").join("eval.jsonl"), &d.eval)?;
    write_jsonl(&dir.join("data").join("sft_pairs.jsonl"), &d.sft_pairs)?;
    write_jsonl(&dir.join("data").join("offline_pairs.jsonl"), &d.offline_pairs)?;
    for (k, pairs) in d.online_pairs.iter().enumerate() {
        write_jsonl(&dir.join("data").join(format!("online_iter{}_pairs.jsonl", k + 1)), pairs)?;
    }
    Ok(())
}

/// Trains one pipeline per seed and writes each under `out/seed-<s>`.
pub fn train_seeds(config: &TrainerConfig, seeds: &[u64], out: &Path, force: bool) -> Result<Vec<PipelineRun>> {
    prepare_output_dir(out, force)?;
    Manifest::new("train", config, seeds).write(out)?;
    let mut runs = Vec::new();
    let mut metrics: Vec<MetricsRow> = Vec::new();
    let mut turns: Vec<TurnRow> = Vec::new();
    for &seed in seeds {
        let cfg = TrainerConfig { seed, ..config.clone() };
        let run = crate::trainer::run_full_pipeline(&cfg)?;
        write_run(&out.join(format!("seed-{seed}")), &run)?;
        metrics.extend(run.metrics.iter().cloned());
        turns.extend(run.turns.iter().cloned());
        runs.push(run);
    }
    write_table(&out.join("metrics.csv"), &metrics, &METRICS_HEADER)?;
    write_table(&out.join("turns.csv"), &turns, &["stage", "seed", "turn", "accuracy"])?;
    Ok(runs)
}

/// Pipeline variants compared by the ablation grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Full,
    DpoOnly,
    ScOnly,
    /// Truncation index fixed at 1: the whole response is corrected.
    ForceFullResponse,
    StaticBeta,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Full,
        Variant::DpoOnly,
        Variant::ScOnly,
        Variant::ForceFullResponse,
        Variant::StaticBeta,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::DpoOnly => "dpo-only",
            Variant::ScOnly => "sc-only",
            Variant::ForceFullResponse => "force-i1",
            Variant::StaticBeta => "static-beta",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown variant {s:?}")))
    }

    pub fn apply(self, config: &TrainerConfig) -> TrainerConfig {
        let mut c = config.clone();
        match self {
            Variant::Full => {}
            Variant::DpoOnly => c.objective.mode = LossMode::DpoOnly,
            Variant::ScOnly => c.objective.mode = LossMode::ScOnly,
            Variant::ForceFullResponse => c.sampling.force_full_response = true,
            Variant::StaticBeta => c.sampling.static_beta = Some(STATIC_BETA),
        }
        c
    }
}

/// Per-variant metrics with the seed and variant attached.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub stage: String,
    pub seed: u64,
    pub eval_mode: String,
    pub accuracy: f64,
}

/// Runs each variant on each seed. The supervised stages do not depend on
/// the variant, so they are trained once per seed and shared.
pub fn ablation_grid(config: &TrainerConfig, seeds: &[u64], variants: &[Variant]) -> Result<Vec<(Variant, PipelineRun)>> {
    let mut out = Vec::new();
    for &seed in seeds {
        let base = TrainerConfig { seed, ..config.clone() };
        let supervised = run_supervised_stages(&base)?;
        for &v in variants {
            let run = run_preference_stages(&v.apply(&base), supervised.clone())?;
            out.push((v, run));
        }
    }
    Ok(out)
}

pub fn ablation_rows(runs: &[(Variant, PipelineRun)]) -> Vec<AblationRow> {
    runs.iter()
        .flat_map(|(v, run)| {
            run.metrics.iter().map(move |m| AblationRow {
                variant: v.name().to_string(),
                stage: m.stage.clone(),
                seed: m.seed,
                eval_mode: m.eval_mode.clone(),
                accuracy: m.accuracy,
            })
        })
        .collect()
}

pub fn write_ablation(dir: &Path, runs: &[(Variant, PipelineRun)]) -> Result<()> {
    let rows = ablation_rows(runs);
    write_table(&dir.join("ablation.csv"), &rows, &["variant", "stage", "seed", "eval_mode", "accuracy"])?;
    for (v, run) in runs {
        let seed = run.metrics.first().map_or(0, |m| m.seed);
        write_table(
            &dir.join(format!("diagnostics-{}-seed{seed}.csv", v.name())),
            &run.diagnostics,
            &["stage", "step", "loss"],
        )?;
    }
    Ok(())
}

/// One continuation in the corrupted-step experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModifyRow {
    pub example_id: usize,
    /// `baseline` (gold prefix) or `corrupted`.
    pub condition: String,
    /// Index of the changed token within the response, if any.
    pub position: Option<usize>,
    pub original: Option<String>,
    pub replacement: Option<String>,
    pub answer: String,
    pub correct: bool,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ModifyReport {
    pub rows: Vec<ModifyRow>,
    pub baseline_accuracy: f64,
    pub corrupted_accuracy: f64,
}

/// Replacement for a reasoning token: another digit for digits, another
/// relation for relation tokens.
fn corrupt_token(original: Token, rng: &mut impl Rng) -> Token {
    let pool: Vec<Token> = if vocab::is_digit(original) {
        (0..10).collect()
    } else {
        vec![vocab::LESS, vocab::EQUAL, vocab::GREATER]
    };
    let others: Vec<Token> = pool.into_iter().filter(|&t| t != original).collect();
    others[rng.gen_range(0..others.len())]
}

/// Continues each gold response from the first half of its reasoning block,
/// once as-is and once with a single token of that half changed, and
/// compares answer accuracy. With `corrupt == false` both conditions use the
/// unchanged prefix.
pub fn modify_one_step_experiment<G: Generator + ?Sized>(
    policy: &G,
    examples: &[Example],
    layout: &ContextLayout,
    max_response_tokens: usize,
    corrupt: bool,
    seed: u64,
) -> Result<ModifyReport> {
    let mut report = ModifyReport::default();
    let (mut base_hits, mut bad_hits) = (0usize, 0usize);
    for (id, ex) in examples.iter().enumerate() {
        let gold = &ex.gold_response;
        let cut = prefix_len(gold, 4).map_err(|e| e.in_record(id))?;
        let stages = StageLayout::parse(gold).expect("gold responses are well-formed");
        let reasoning_start = stages.stage(gold, 2).start;
        let mut rng = stream(derive_seed(seed, "modify-one-step", id as u64));

        let run = |prefix: &[Token], rng: &mut crate::rng::StreamRng| -> Result<(String, bool)> {
            let mut ctx = layout.direct(&ex.question.input_tokens());
            ctx.extend_from_slice(prefix);
            let decode = DecodeConfig::greedy(max_response_tokens.saturating_sub(prefix.len()).max(1));
            let g = policy.generate(&ctx, &decode, rng)?;
            let mut response = prefix.to_vec();
            response.extend(g.tokens);
            let answer = extract_answer(&response).map_or_else(String::new, |a| vocab::render(&a));
            Ok((answer, check_answer(ex, &response)))
        };

        let prefix = gold[..cut].to_vec();
        let (answer, correct) = run(&prefix, &mut rng)?;
        base_hits += usize::from(correct);
        report.rows.push(ModifyRow {
            example_id: id,
            condition: "baseline".into(),
            position: None,
            original: None,
            replacement: None,
            answer,
            correct,
        });

        let mut changed = prefix.clone();
        let mut edit = None;
        if corrupt && cut > reasoning_start {
            let pos = rng.gen_range(reasoning_start..cut);
            let replacement = corrupt_token(changed[pos], &mut rng);
            edit = Some((pos, changed[pos], replacement));
            changed[pos] = replacement;
        }
        let (answer, correct) = run(&changed, &mut rng)?;
        bad_hits += usize::from(correct);
        report.rows.push(ModifyRow {
            example_id: id,
            condition: "corrupted".into(),
            position: edit.map(|e| e.0),
            original: edit.map(|e| vocab::name(e.1)),
            replacement: edit.map(|e| vocab::name(e.2)),
            answer,
            correct,
        });
    }
    let n = examples.len().max(1) as f64;
    report.baseline_accuracy = base_hits as f64 / n;
    report.corrupted_accuracy = bad_hits as f64 / n;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variants_round_trip_by_name() {
        assert_eq!(Variant::ALL.len(), 5);
        for v in Variant::ALL {
            assert_eq!(Variant::parse(v.name()).unwrap(), v);
        }
        assert!(Variant::parse("nope").is_err());
    }

    #[test]
    fn corrupted_tokens_always_change() {
        let mut rng = stream(3);
        for t in (0..10).chain([vocab::LESS, vocab::EQUAL, vocab::GREATER]) {
            for _ in 0..20 {
                let c = corrupt_token(t, &mut rng);
                assert_ne!(c, t);
                assert_eq!(vocab::is_digit(c), vocab::is_digit(t));
            }
        }
    }

    #[test]
    fn summaries_recount_rows() {
        let row = |id, mode: &str, correct| EvalRow {
            example_id: id,
            mode: mode.into(),
            rounds: 1,
            answer: String::new(),
            correct,
            tokens: 3,
        };
        let rows = vec![row(0, "direct", true), row(1, "direct", false), row(0, "vote-2", true)];
        let s = summarize(&rows);
        assert_eq!(s[0].mode, "direct");
        assert_eq!(s[0].accuracy, 0.5);
        assert_eq!(s[1].accuracy, 1.0);
        assert_eq!(s[0].total_tokens, 6);
    }
}
