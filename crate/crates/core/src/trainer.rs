//! Staged training: warm-up SFT, pairwise SFT, offline preference training
//! and online self-improvement iterations.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use autodiff::{AutodiffError, Array, Gradients, Graph};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{build_offline_dataset, build_online_dataset, build_sft_dataset, OnlineStats, PairSampling};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalMode, EvalReport, EvalSettings};
use crate::objectives::{
    reference_scores, sft_loss, sft_pair_loss, preference_loss, LossDiagnostics, Objective, PreferencePair,
    SftTriple, TermBuilder,
};
use crate::policy::{snapshot, PolicyConfig, PolicyParameters};
use crate::rng::{derive_seed, stream, StreamRng};
use crate::task::{generate_dataset, Example, Question, TaskMix};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schedule {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainerConfig {
    pub seed: u64,
    pub policy: PolicyConfig,
    pub task_mix: TaskMix,
    /// Size of the warm-up set, also used for offline pairs.
    pub warmup_examples: usize,
    /// Size of the pairwise-SFT set.
    pub sft_examples: usize,
    pub eval_examples: usize,
    /// Online self-improvement iterations.
    pub iterations: usize,
    /// Accepted online pairs wanted per iteration.
    pub online_budget: usize,
    /// Fresh questions tried per iteration before giving up on the budget.
    pub online_attempts: usize,
    pub r0: Schedule,
    pub sft: Schedule,
    pub offline: Schedule,
    pub online: Schedule,
    pub objective: Objective,
    pub sampling: PairSampling,
    /// Temperature for rejected samples in the pairwise-SFT set.
    pub sft_sample_temperature: f64,
    /// Rejected samples drawn per pairwise-SFT example.
    pub sft_samples_per_example: usize,
    pub eval_rounds: usize,
    pub max_grad_norm: Option<f64>,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            policy: PolicyConfig::default(),
            task_mix: TaskMix::default(),
            warmup_examples: 500,
            sft_examples: 500,
            eval_examples: 500,
            iterations: 2,
            online_budget: 200,
            online_attempts: 600,
            r0: Schedule {
                lr: 2e-3,
                epochs: 50,
                batch_size: 16,
            },
            sft: Schedule {
                lr: 2e-3,
                epochs: 13,
                batch_size: 16,
            },
            offline: Schedule {
                lr: 1e-4,
                epochs: 1,
                batch_size: 16,
            },
            online: Schedule {
                lr: 2e-5,
                epochs: 1,
                batch_size: 16,
            },
            objective: Objective::default(),
            sampling: PairSampling::default(),
            sft_sample_temperature: 0.5,
            sft_samples_per_example: 4,
            eval_rounds: 3,
            max_grad_norm: Some(1.0),
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        self.policy.validate()?;
        self.task_mix.validate()?;
        if self.objective.alpha < 0.0 {
            return Err(Error::Config(format!("alpha {} < 0", self.objective.alpha)));
        }
        if !(self.objective.beta_dpo > 0.0) {
            return Err(Error::Config("beta_dpo must be positive".into()));
        }
        if let Some(b) = self.sampling.static_beta {
            if !(b > 0.0) {
                return Err(Error::Config("static beta must be positive".into()));
            }
        }
        if self.sft_samples_per_example == 0 {
            return Err(Error::Config("sft_samples_per_example must be at least 1".into()));
        }
        for (name, s) in [("r0", self.r0), ("sft", self.sft), ("offline", self.offline), ("online", self.online)] {
            if !(s.lr > 0.0) || s.batch_size == 0 {
                return Err(Error::Config(format!("{name}: lr and batch size must be positive")));
            }
        }
        Ok(())
    }

    /// Reads a JSON config; missing fields take their defaults.
    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let config: Self = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        config.validate()?;
        Ok(config)
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    pub fn eval_settings(&self) -> EvalSettings {
        EvalSettings {
            layout: self.objective.layout,
            max_new_tokens: self.sampling.max_response_tokens,
            vote_temperature: 1.0,
            seed: derive_seed(self.seed, "eval", 0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum StageLabel {
    Base,
    R0,
    PairSft,
    Offline,
    Iter(u32),
}

impl fmt::Display for StageLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StageLabel::Base => write!(f, "base"),
            StageLabel::R0 => write!(f, "r0"),
            StageLabel::PairSft => write!(f, "pair-sft"),
            StageLabel::Offline => write!(f, "offline"),
            StageLabel::Iter(k) => write!(f, "iter-{k}"),
        }
    }
}

impl FromStr for StageLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "base" => StageLabel::Base,
            "r0" => StageLabel::R0,
            "pair-sft" => StageLabel::PairSft,
            "offline" => StageLabel::Offline,
            _ => StageLabel::Iter(
                s.strip_prefix("iter-")
                    .and_then(|k| k.parse().ok())
                    .ok_or_else(|| Error::Checkpoint(format!("unknown stage {s:?}")))?,
            ),
        })
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: BTreeMap<String, Array>,
    pub v: BTreeMap<String, Array>,
}

impl Default for Adam {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }
}

impl Adam {
    /// One update of every parameter that has a gradient.
    pub fn step(&mut self, params: &mut BTreeMap<String, Array>, grads: &Gradients, lr: f64) -> Result<()> {
        self.t += 1;
        let t = self.t as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (name, g) in grads {
            let p = params
                .get_mut(name)
                .ok_or_else(|| Error::InvalidArgument(format!("gradient for unknown parameter {name}")))?;
            if p.shape() != g.shape() {
                return Err(AutodiffError::ShapeMismatch {
                    op: "adam",
                    shapes: vec![p.shape().to_vec(), g.shape().to_vec()],
                }
                .into());
            }
            let m = self.m.entry(name.clone()).or_insert_with(|| Array::zeros(g.shape()));
            let v = self.v.entry(name.clone()).or_insert_with(|| Array::zeros(g.shape()));
            for (((pi, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let mhat = *mi / c1;
                let vhat = *vi / c2;
                *pi -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Seed and position of a stage's random stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &StreamRng) -> Self {
        Self {
            seed: rng.get_seed(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> StreamRng {
        use rand::SeedableRng;
        let mut rng = StreamRng::from_seed(self.seed);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub stage: StageLabel,
    pub params: PolicyParameters,
    pub optimizer: Adam,
    pub config_hash: String,
    pub rng: RngState,
}

impl Checkpoint {
    /// Bitwise equality of everything that affects later training.
    pub fn bit_eq(&self, other: &Self) -> bool {
        let arrays_eq = |a: &BTreeMap<String, Array>, b: &BTreeMap<String, Array>| {
            a.len() == b.len()
                && a.iter().zip(b).all(|((na, x), (nb, y))| {
                    na == nb
                        && x.shape() == y.shape()
                        && x.data().iter().zip(y.data()).all(|(p, q)| p.to_bits() == q.to_bits())
                })
        };
        self.stage == other.stage
            && self.config_hash == other.config_hash
            && self.rng == other.rng
            && self.params.bit_eq(&other.params)
            && self.optimizer.t == other.optimizer.t
            && arrays_eq(&self.optimizer.m, &other.optimizer.m)
            && arrays_eq(&self.optimizer.v, &other.optimizer.v)
    }
}

/// Per-batch training record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsRow {
    pub stage: String,
    pub step: usize,
    pub loss: f64,
    pub sc_loss: Option<f64>,
    pub dpo_loss: Option<f64>,
    pub mean_v: Option<f64>,
    pub mean_u: Option<f64>,
    pub mean_v_chosen: Option<f64>,
    pub mean_u_chosen: Option<f64>,
    pub mean_beta: Option<f64>,
}

impl DiagnosticsRow {
    fn plain(stage: StageLabel, step: usize, loss: f64) -> Self {
        Self {
            stage: stage.to_string(),
            step,
            loss,
            sc_loss: None,
            dpo_loss: None,
            mean_v: None,
            mean_u: None,
            mean_v_chosen: None,
            mean_u_chosen: None,
            mean_beta: None,
        }
    }
}

/// Loss value, gradients and optional preference diagnostics for one record.
struct RecordOutcome {
    loss: f64,
    grads: Gradients,
    sc: Option<LossDiagnostics>,
    dpo: Option<f64>,
}

fn diverged(stage: StageLabel, step: usize, e: Error) -> Error {
    match e {
        Error::Autodiff(AutodiffError::NonFinite { .. }) => Error::Diverged {
            stage: stage.to_string(),
            step,
            detail: e.to_string(),
        },
        other => other,
    }
}

fn clip(grads: &mut Gradients, max_norm: f64) {
    let norm = grads
        .values()
        .flat_map(|a| a.data().iter())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let k = max_norm / norm;
        grads.values_mut().for_each(|a| a.scale_assign(k));
    }
}

/// Minibatch loop shared by every stage. Each record is differentiated in
/// its own graph and gradients are averaged in record order.
fn optimize(
    stage: StageLabel,
    params: &mut PolicyParameters,
    adam: &mut Adam,
    rng: &mut StreamRng,
    n: usize,
    schedule: &Schedule,
    max_grad_norm: Option<f64>,
    diagnostics: &mut Vec<DiagnosticsRow>,
    mut record: impl FnMut(&PolicyParameters, usize) -> Result<RecordOutcome>,
) -> Result<()> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut step = 0;
    for _ in 0..schedule.epochs {
        order.shuffle(rng);
        for batch in order.chunks(schedule.batch_size) {
            let scale = 1.0 / batch.len() as f64;
            let mut total: Option<Gradients> = None;
            let mut loss = 0.0;
            let (mut sc_rows, mut dpo_vals) = (Vec::new(), Vec::new());
            for &k in batch {
                let out = record(params, k).map_err(|e| diverged(stage, step, e.in_record(k)))?;
                loss += out.loss * scale;
                match &mut total {
                    None => total = Some(out.grads),
                    Some(t) => {
                        for (name, g) in out.grads {
                            t.get_mut(&name).expect("same parameter set").add_assign(&g);
                        }
                    }
                }
                sc_rows.extend(out.sc);
                dpo_vals.extend(out.dpo);
            }
            let mut grads = total.expect("non-empty batch");
            grads.values_mut().for_each(|g| g.scale_assign(scale));
            if !loss.is_finite() || grads.values().any(|g| !g.all_finite()) {
                return Err(Error::Diverged {
                    stage: stage.to_string(),
                    step,
                    detail: format!("loss {loss}"),
                });
            }
            if let Some(m) = max_grad_norm {
                clip(&mut grads, m);
            }
            adam.step(params.tensors_mut(), &grads, schedule.lr)?;

            let mut row = DiagnosticsRow::plain(stage, step, loss);
            if !sc_rows.is_empty() {
                let mean = |f: &dyn Fn(&LossDiagnostics) -> f64| sc_rows.iter().map(f).sum::<f64>() / sc_rows.len() as f64;
                row.sc_loss = Some(mean(&|d| d.loss));
                row.mean_v = Some(mean(&|d| d.mean_v()));
                row.mean_u = Some(mean(&|d| d.mean_u()));
                row.mean_v_chosen = Some(mean(&|d| d.mean_v_chosen()));
                row.mean_u_chosen = Some(mean(&|d| d.mean_u_chosen()));
                row.mean_beta = Some(mean(&|d| d.mean_beta()));
            }
            if !dpo_vals.is_empty() {
                row.dpo_loss = Some(dpo_vals.iter().sum::<f64>() / dpo_vals.len() as f64);
            }
            diagnostics.push(row);
            step += 1;
        }
    }
    Ok(())
}

fn differentiate(graph: &mut Graph, root: autodiff::NodeId, params: &PolicyParameters) -> Result<(f64, Gradients)> {
    let loss = graph.forward(root, params)?.item();
    let grads = graph.backward(root)?;
    Ok((loss, grads))
}

/// Output of a training stage.
#[derive(Debug, Clone)]
pub struct StageResult {
    pub checkpoint: Checkpoint,
    pub diagnostics: Vec<DiagnosticsRow>,
}

fn stage_rng(config: &TrainerConfig, stage: StageLabel) -> StreamRng {
    stream(derive_seed(config.seed, &format!("train-{stage}"), 0))
}

/// Next-token cross-entropy on gold responses, starting from `base`.
pub fn train_r0(base: &PolicyParameters, d_a: &[Example], config: &TrainerConfig) -> Result<StageResult> {
    let stage = StageLabel::R0;
    let mut params = base.clone();
    let mut adam = Adam::default();
    let mut rng = stage_rng(config, stage);
    let mut diagnostics = Vec::new();
    let inputs: Vec<_> = d_a.iter().map(|e| e.question.input_tokens()).collect();
    let layout = config.objective.layout;
    optimize(
        stage,
        &mut params,
        &mut adam,
        &mut rng,
        d_a.len(),
        &config.r0,
        config.max_grad_norm,
        &mut diagnostics,
        |p, k| {
            let mut g = Graph::new();
            let root = sft_loss(
                &mut TermBuilder::new(&mut g, p),
                &layout,
                &[(&inputs[k], &d_a[k].gold_response)],
            )?;
            let (loss, grads) = differentiate(&mut g, root, p)?;
            Ok(RecordOutcome { loss, grads, sc: None, dpo: None })
        },
    )?;
    Ok(StageResult {
        checkpoint: Checkpoint {
            stage,
            params,
            optimizer: adam,
            config_hash: config.hash(),
            rng: RngState::capture(&rng),
        },
        diagnostics,
    })
}

/// Pairwise SFT, starting from `base` rather than from the warm-up model.
pub fn train_pair_sft(
    base: &PolicyParameters,
    pairs: &[SftTriple],
    config: &TrainerConfig,
) -> Result<StageResult> {
    let stage = StageLabel::PairSft;
    let mut params = base.clone();
    let mut adam = Adam::default();
    let mut rng = stage_rng(config, stage);
    let mut diagnostics = Vec::new();
    let layout = config.objective.layout;
    optimize(
        stage,
        &mut params,
        &mut adam,
        &mut rng,
        pairs.len(),
        &config.sft,
        config.max_grad_norm,
        &mut diagnostics,
        |p, k| {
            let mut g = Graph::new();
            let root = sft_pair_loss(&mut TermBuilder::new(&mut g, p), &layout, &[&pairs[k]])?;
            let (loss, grads) = differentiate(&mut g, root, p)?;
            Ok(RecordOutcome { loss, grads, sc: None, dpo: None })
        },
    )?;
    Ok(StageResult {
        checkpoint: Checkpoint {
            stage,
            params,
            optimizer: adam,
            config_hash: config.hash(),
            rng: RngState::capture(&rng),
        },
        diagnostics,
    })
}

/// Preference training from `start`. The reference model is the entry
/// snapshot and stays fixed for the whole stage.
pub fn train_preference(
    start: &PolicyParameters,
    pairs: &[PreferencePair],
    stage: StageLabel,
    schedule: &Schedule,
    config: &TrainerConfig,
) -> Result<StageResult> {
    if pairs.is_empty() {
        return Err(Error::Empty("preference pair set"));
    }
    let reference = snapshot(start);
    let objective = &config.objective;
    let refs = pairs
        .iter()
        .enumerate()
        .map(|(k, p)| reference_scores(&reference, objective, p).map_err(|e| e.in_record(k)))
        .collect::<Result<Vec<_>>>()?;
    let mut params = start.clone();
    let mut adam = Adam::default();
    let mut rng = stage_rng(config, stage);
    let mut diagnostics = Vec::new();
    optimize(
        stage,
        &mut params,
        &mut adam,
        &mut rng,
        pairs.len(),
        schedule,
        config.max_grad_norm,
        &mut diagnostics,
        |p, k| {
            let mut g = Graph::new();
            let nodes = preference_loss(&mut TermBuilder::new(&mut g, p), objective, &[(&pairs[k], &refs[k])])?;
            let (loss, grads) = differentiate(&mut g, nodes.loss, p)?;
            let sc = nodes.sc.map(|s| s.diagnostics(&g)).transpose()?;
            let dpo = nodes.dpo.map(|d| g.value(d).map(Array::item)).transpose()?;
            Ok(RecordOutcome { loss, grads, sc, dpo })
        },
    )?;
    Ok(StageResult {
        checkpoint: Checkpoint {
            stage,
            params,
            optimizer: adam,
            config_hash: config.hash(),
            rng: RngState::capture(&rng),
        },
        diagnostics,
    })
}

/// One row of the per-stage metrics table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub stage: String,
    pub seed: u64,
    pub eval_mode: String,
    pub accuracy: f64,
    pub mean_loss: Option<f64>,
    pub filter_acceptance_rate: Option<f64>,
}

/// Accuracy of each turn after a stage, for turns-vs-accuracy curves.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnRow {
    pub stage: String,
    pub seed: u64,
    pub turn: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, Default)]
pub struct PipelineRun {
    pub checkpoints: Vec<Checkpoint>,
    pub metrics: Vec<MetricsRow>,
    pub turns: Vec<TurnRow>,
    pub diagnostics: Vec<DiagnosticsRow>,
    pub online: Vec<OnlineStats>,
    pub reports: Vec<(StageLabel, EvalReport)>,
    pub datasets: PipelineData,
}

/// Every dataset a pipeline run consumed, for export.
#[derive(Debug, Clone, Default)]
pub struct PipelineData {
    pub warmup: Vec<Example>,
    pub sft_gold: Vec<Example>,
    pub eval: Vec<Example>,
    pub sft_pairs: Vec<SftTriple>,
    pub offline_pairs: Vec<PreferencePair>,
    pub online_pairs: Vec<Vec<PreferencePair>>,
}

impl PipelineRun {
    pub fn checkpoint(&self, stage: StageLabel) -> Option<&Checkpoint> {
        self.checkpoints.iter().find(|c| c.stage == stage)
    }

    pub fn report(&self, stage: StageLabel) -> Option<&EvalReport> {
        self.reports.iter().find(|(s, _)| *s == stage).map(|(_, r)| r)
    }
}

/// Disjoint example sets drawn from one seed.
pub struct Splits {
    pub warmup: Vec<Example>,
    pub sft: Vec<Example>,
    pub eval: Vec<Example>,
}

pub fn make_splits(config: &TrainerConfig) -> Splits {
    Splits {
        warmup: generate_dataset(derive_seed(config.seed, "warmup-set", 0), config.warmup_examples, &config.task_mix),
        sft: generate_dataset(derive_seed(config.seed, "sft-set", 0), config.sft_examples, &config.task_mix),
        eval: generate_dataset(derive_seed(config.seed, "eval-set", 0), config.eval_examples, &config.task_mix),
    }
}

/// Fresh unlabeled questions for online iteration `iteration`.
pub fn online_questions(config: &TrainerConfig, iteration: u32) -> Vec<Question> {
    generate_dataset(
        derive_seed(config.seed, "online-questions", u64::from(iteration)),
        config.online_attempts,
        &config.task_mix,
    )
    .into_iter()
    .map(|e| e.question)
    .collect()
}

pub fn eval_modes(config: &TrainerConfig) -> Vec<EvalMode> {
    vec![EvalMode::Direct, EvalMode::SelfCorrect { rounds: config.eval_rounds }]
}

fn mean_loss(rows: &[DiagnosticsRow]) -> Option<f64> {
    (!rows.is_empty()).then(|| rows.iter().map(|r| r.loss).sum::<f64>() / rows.len() as f64)
}

impl PipelineRun {
    fn record(
        &mut self,
        config: &TrainerConfig,
        eval: &[Example],
        result: StageResult,
        acceptance: Option<f64>,
    ) -> Result<()> {
        let stage = result.checkpoint.stage;
        let report = evaluate(&result.checkpoint.params, eval, &eval_modes(config), &config.eval_settings())?;
        let loss = mean_loss(&result.diagnostics);
        for s in &report.summaries {
            self.metrics.push(MetricsRow {
                stage: stage.to_string(),
                seed: config.seed,
                eval_mode: s.mode.clone(),
                accuracy: s.accuracy,
                mean_loss: loss,
                filter_acceptance_rate: acceptance,
            });
        }
        for (turn, &accuracy) in report.turns.iter().enumerate() {
            self.turns.push(TurnRow {
                stage: stage.to_string(),
                seed: config.seed,
                turn,
                accuracy,
            });
        }
        self.reports.push((stage, report));
        self.diagnostics.extend(result.diagnostics);
        self.checkpoints.push(result.checkpoint);
        Ok(())
    }
}

/// Output of the supervised stages, shared by pipeline variants that differ
/// only in preference training.
#[derive(Debug, Clone)]
pub struct SupervisedStages {
    pub run: PipelineRun,
    pub model: PolicyParameters,
}

/// Warm-up SFT, pairwise-set construction and pairwise SFT from the base model.
pub fn run_supervised_stages(config: &TrainerConfig) -> Result<SupervisedStages> {
    config.validate()?;
    let splits = make_splits(config);
    let base = PolicyParameters::init(config.policy.clone(), &mut stream(derive_seed(config.seed, "init", 0)))?;
    let mut run = PipelineRun::default();

    let r0 = train_r0(&base, &splits.warmup, config)?;
    let sft_sampling = PairSampling {
        temperature: config.sft_sample_temperature,
        ..config.sampling.clone()
    };
    let sft_pairs = build_sft_dataset(
        &splits.sft,
        &r0.checkpoint.params,
        &sft_sampling,
        config.sft_samples_per_example,
        derive_seed(config.seed, "sft-pairs", 0),
    )?;
    run.record(config, &splits.eval, r0, None)?;

    let sft = train_pair_sft(&base, &sft_pairs, config)?;
    let model = sft.checkpoint.params.clone();
    run.record(config, &splits.eval, sft, None)?;
    run.datasets = PipelineData {
        warmup: splits.warmup,
        sft_gold: splits.sft,
        eval: splits.eval,
        sft_pairs,
        ..PipelineData::default()
    };
    Ok(SupervisedStages { run, model })
}

/// Offline preference training and the online iterations, continuing a run
/// of the supervised stages. Only the preference-related fields of `config`
/// may differ from the config that produced `supervised`.
pub fn run_preference_stages(config: &TrainerConfig, supervised: SupervisedStages) -> Result<PipelineRun> {
    config.validate()?;
    let SupervisedStages { mut run, model } = supervised;
    let eval = run.datasets.eval.clone();
    let mut current = model;

    let offline_pairs = build_offline_dataset(
        &run.datasets.warmup,
        &current,
        &config.sampling,
        derive_seed(config.seed, "offline-pairs", 0),
    )?;
    let offline = train_preference(&current, &offline_pairs, StageLabel::Offline, &config.offline, config)?;
    current = offline.checkpoint.params.clone();
    run.record(config, &eval, offline, None)?;
    run.datasets.offline_pairs = offline_pairs;

    for t in 1..=config.iterations as u32 {
        let questions = online_questions(config, t);
        let (pairs, stats) = build_online_dataset(
            &questions,
            &current,
            &config.sampling,
            config.online_budget,
            t,
            derive_seed(config.seed, "online-pairs", u64::from(t)),
        )?;
        run.online.push(stats);
        let stage = StageLabel::Iter(t);
        let result = if pairs.is_empty() {
            // Nothing passed the filter: carry the model forward unchanged.
            StageResult {
                checkpoint: Checkpoint {
                    stage,
                    params: current.clone(),
                    optimizer: Adam::default(),
                    config_hash: config.hash(),
                    rng: RngState::capture(&stage_rng(config, stage)),
                },
                diagnostics: Vec::new(),
            }
        } else {
            train_preference(&current, &pairs, stage, &config.online, config)?
        };
        current = result.checkpoint.params.clone();
        run.record(config, &eval, result, Some(stats.acceptance_rate()))?;
        run.datasets.online_pairs.push(pairs);
    }
    Ok(run)
}

/// Runs every stage in order and evaluates after each one.
pub fn run_full_pipeline(config: &TrainerConfig) -> Result<PipelineRun> {
    run_preference_stages(config, run_supervised_stages(config)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_first_step_moves_by_lr_times_sign() {
        let mut params: BTreeMap<String, Array> = [("w".to_string(), Array::vector(vec![1.0, -2.0, 0.5]))].into();
        let grads: Gradients = [("w".to_string(), Array::vector(vec![0.3, -4.0, 0.0]))].into();
        let mut adam = Adam::default();
        adam.step(&mut params, &grads, 0.01).unwrap();
        let w = params["w"].data();
        assert!((w[0] - 0.99).abs() < 1e-9);
        assert!((w[1] + 1.99).abs() < 1e-9);
        assert_eq!(w[2], 0.5);
        assert_eq!(adam.t, 1);
    }

    #[test]
    fn stage_labels_round_trip() {
        for s in [StageLabel::R0, StageLabel::PairSft, StageLabel::Offline, StageLabel::Iter(2), StageLabel::Base] {
            assert_eq!(s.to_string().parse::<StageLabel>().unwrap(), s);
        }
    }

    #[test]
    fn config_hash_tracks_content() {
        let a = TrainerConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.seed = 1;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut c = TrainerConfig::default();
        c.objective.alpha = -1.0;
        assert!(c.validate().is_err());
        let mut c = TrainerConfig::default();
        c.online.lr = 0.0;
        assert!(c.validate().is_err());
        assert!(TrainerConfig::default().validate().is_ok());
    }
}
