use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use selfcorrect::checkpoint;
use selfcorrect::eval::{evaluate, EvalMode, EvalRow};
use selfcorrect::harness::{
    ablation_grid, modify_one_step_experiment, read_csv, summarize, train_seeds, write_ablation, write_csv,
    write_table, Manifest, Variant, EVAL_HEADER,
};
use selfcorrect::inference::self_correct;
use selfcorrect::io::{prepare_output_dir, read_jsonl, write_jsonl};
use selfcorrect::policy::DecodeConfig;
use selfcorrect::rng::{derive_seed, stream};
use selfcorrect::task::{check_answer, extract_answer, generate_dataset, vocab, Example};
use selfcorrect::trainer::{make_splits, TrainerConfig};
use selfcorrect::{Error, Result};

/// Self-correction training on a synthetic grid-reasoning task.
#[derive(Parser)]
#[command(name = "selfcorrect", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON config; omitted fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory. Defaults to $SELFCORRECT_OUT.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overwrite a non-empty output directory.
    #[arg(long)]
    force: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Write the warm-up, pairwise-SFT and evaluation splits as JSON Lines.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run the full pipeline once per seed.
    Train {
        #[command(flatten)]
        common: Common,
        /// Comma-separated seeds.
        #[arg(long, value_delimiter = ',', default_value = "0")]
        seeds: Vec<u64>,
    },
    /// Score a checkpoint on a dataset under several generation modes.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// JSON Lines examples; defaults to the config's evaluation split.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Comma-separated modes: direct, self-correct-K, vote-N, verifier-K.
        #[arg(long, value_delimiter = ',', default_value = "direct,self-correct-3")]
        modes: Vec<String>,
    },
    /// Self-correct on one generated question and print the trajectory.
    Infer {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Seed of the generated question.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 3)]
        rounds: usize,
    },
    /// Train every requested variant under shared seeds.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_value = "0")]
        seeds: Vec<u64>,
        /// Variants to run (repeatable); defaults to all five.
        #[arg(long)]
        variant: Vec<String>,
    },
    /// Continue gold prefixes with and without one corrupted reasoning token.
    ModifyOneStep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Leave prefixes unchanged in both conditions.
        #[arg(long)]
        no_corrupt: bool,
    },
    /// Recompute per-mode summaries from the per-example files under a run.
    Report {
        /// Run directory written by `train` or `eval`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn out_dir(out: Option<PathBuf>) -> Result<PathBuf> {
    out.or_else(|| std::env::var_os("SELFCORRECT_OUT").map(PathBuf::from))
        .ok_or_else(|| Error::InvalidArgument("no output directory: pass --out or set SELFCORRECT_OUT".into()))
}

fn load_config(path: Option<&Path>) -> Result<TrainerConfig> {
    match path {
        Some(p) => TrainerConfig::load(p),
        None => Ok(TrainerConfig::default()),
    }
}

fn load_examples(data: Option<&Path>, config: &TrainerConfig) -> Result<Vec<Example>> {
    match data {
        Some(p) => read_jsonl(p),
        None => Ok(make_splits(config).eval),
    }
}

fn print_json(value: &serde_json::Value) {
    println!("{}", serde_json::to_string_pretty(value).expect("json value serializes"));
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { common, seed } => {
            let config = TrainerConfig {
                seed,
                ..load_config(common.config.as_deref())?
            };
            let out = out_dir(common.out)?;
            prepare_output_dir(&out, common.force)?;
            Manifest::new("gen-data", &config, &[seed]).write(&out)?;
            let splits = make_splits(&config);
            write_jsonl(&out.join("warmup.jsonl"), &splits.warmup)?;
            write_jsonl(&out.join("sft.jsonl"), &splits.sft)?;
            write_jsonl(&out.join("eval.jsonl"), &splits.eval)?;
        }
        Command::Train { common, seeds } => {
            let config = load_config(common.config.as_deref())?;
            let out = out_dir(common.out)?;
            let runs = train_seeds(&config, &seeds, &out, common.force)?;
            let summary: Vec<_> = runs
                .iter()
                .flat_map(|r| &r.metrics)
                .map(|m| json!({"stage": m.stage, "seed": m.seed, "mode": m.eval_mode, "accuracy": m.accuracy}))
                .collect();
            print_json(&json!(summary));
        }
        Command::Eval {
            common,
            checkpoint: ckpt,
            data,
            seed,
            modes,
        } => {
            let config = TrainerConfig {
                seed,
                ..load_config(common.config.as_deref())?
            };
            let modes = modes.iter().map(|m| m.parse()).collect::<Result<Vec<EvalMode>>>()?;
            let model = checkpoint::load(&ckpt)?;
            let examples = load_examples(data.as_deref(), &config)?;
            let out = out_dir(common.out)?;
            prepare_output_dir(&out, common.force)?;
            Manifest::new("eval", &config, &[seed]).write(&out)?;
            let report = evaluate(&model.params, &examples, &modes, &config.eval_settings())?;
            fs::create_dir_all(out.join("eval"))?;
            write_table(&out.join("eval").join(format!("{}.csv", model.stage)), &report.rows, &EVAL_HEADER)?;
            write_csv(&out.join("summary.csv"), &report.summaries)?;
            print_json(&serde_json::to_value(&report.summaries)?);
        }
        Command::Infer {
            config,
            checkpoint: ckpt,
            seed,
            rounds,
        } => {
            let config = load_config(config.as_deref())?;
            let model = checkpoint::load(&ckpt)?;
            let example = generate_dataset(seed, 1, &config.task_mix).remove(0);
            let x = example.question.input_tokens();
            let decode = DecodeConfig::greedy(config.sampling.max_response_tokens);
            let mut rng = stream(derive_seed(seed, "infer", 0));
            let traj = self_correct(&model.params, &config.objective.layout, &x, rounds, &decode, &mut rng)?;
            let responses: Vec<_> = traj
                .responses
                .iter()
                .map(|r| {
                    json!({
                        "response": vocab::render(r),
                        "answer": extract_answer(r).map(|a| vocab::render(&a)),
                        "correct": check_answer(&example, r),
                    })
                })
                .collect();
            print_json(&json!({
                "question": vocab::render(&x),
                "gold": vocab::render(&example.gold_response),
                "responses": responses,
                "truncated": traj.truncated,
            }));
        }
        Command::Ablate { common, seeds, variant } => {
            let config = load_config(common.config.as_deref())?;
            let variants = if variant.is_empty() {
                Variant::ALL.to_vec()
            } else {
                variant.iter().map(|v| Variant::parse(v)).collect::<Result<_>>()?
            };
            let out = out_dir(common.out)?;
            prepare_output_dir(&out, common.force)?;
            Manifest::new("ablate", &config, &seeds).write(&out)?;
            let runs = ablation_grid(&config, &seeds, &variants)?;
            write_ablation(&out, &runs)?;
        }
        Command::ModifyOneStep {
            common,
            checkpoint: ckpt,
            data,
            seed,
            no_corrupt,
        } => {
            let config = TrainerConfig {
                seed,
                ..load_config(common.config.as_deref())?
            };
            let model = checkpoint::load(&ckpt)?;
            let examples = load_examples(data.as_deref(), &config)?;
            let out = out_dir(common.out)?;
            prepare_output_dir(&out, common.force)?;
            Manifest::new("modify-one-step", &config, &[seed]).write(&out)?;
            let report = modify_one_step_experiment(
                &model.params,
                &examples,
                &config.objective.layout,
                config.sampling.max_response_tokens,
                !no_corrupt,
                derive_seed(seed, "modify", 0),
            )?;
            write_csv(&out.join("modify_one_step.csv"), &report.rows)?;
            print_json(&json!({
                "baseline_accuracy": report.baseline_accuracy,
                "corrupted_accuracy": report.corrupted_accuracy,
            }));
        }
        Command::Report { out } => {
            let out = out_dir(out)?;
            let mut files = Vec::new();
            collect_eval_files(&out, &out, &mut files)?;
            files.sort();
            let mut table = Vec::new();
            for f in &files {
                let rows: Vec<EvalRow> = read_csv(f)?;
                for s in summarize(&rows) {
                    table.push(json!({
                        "file": f.strip_prefix(&out).unwrap_or(f).display().to_string(),
                        "mode": s.mode,
                        "accuracy": s.accuracy,
                        "mean_rounds": s.mean_rounds,
                        "total_tokens": s.total_tokens,
                    }));
                }
            }
            print_json(&json!(table));
        }
    }
    Ok(())
}

/// Every `eval/*.csv` below `root`.
fn collect_eval_files(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_dir() {
            collect_eval_files(root, &path, out)?;
        } else if path.extension().is_some_and(|e| e == "csv")
            && path
                .strip_prefix(root)
                .ok()
                .and_then(Path::parent)
                .and_then(Path::file_name)
                .is_some_and(|n| n == "eval")
        {
            out.push(path);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            eprintln!("{}", json!({"kind": "usage", "message": e.to_string()}));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", json!({"kind": e.kind(), "message": e.to_string()}));
            ExitCode::FAILURE
        }
    }
}
