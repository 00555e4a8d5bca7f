//! Training objectives over the policy graph.
//!
//! Notation: `x` is the question input, `Yw`/`Yl` the chosen and rejected
//! responses, `Y<` a response prefix and `Y≥` the remaining suffix.
//! `C(Y)` is the correction context `x SEP Y CORRECT` from
//! [`ContextLayout::correction`] and `D` the direct context `x SEP`.
//!
//! The self-correction loss compares four conditional suffix log-ratios
//! `r(target | context) = log π(target | context) − log π_ref(target | context)`
//! in each of two correction contexts:
//!
//! ```text
//! v_l = β [ r(Yw≥ | C(Yl) Yw<) − r(Yl≥ | C(Yl) Yl<) ]
//! u_l = β [ r(Yw≥ | C(Yl) Yl<) − r(Yl≥ | C(Yl) Yw<) ]
//! v_w = β [ r(Yl≥ | C(Yw) Yl<) − r(Yw≥ | C(Yw) Yw<) ]
//! u_w = β [ r(Yl≥ | C(Yw) Yw<) − r(Yw≥ | C(Yw) Yl<) ]
//! loss = (1 − v_l − u_l)² + (1 + v_w + u_w)²
//! ```
//!
//! Correcting a rejected response towards the chosen one is pushed up;
//! drifting from a chosen response towards the rejected one is pushed down.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use autodiff::{Graph, NodeId};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::ContextLayout;
use crate::policy::{PolicyGraph, PolicyParameters};
use crate::task::Token;

/// Number of response stages; the truncation index ranges over `1..=STAGES`.
pub const STAGES: u8 = 4;
pub const STATIC_BETA: f64 = 0.25;

/// `β(i, n, ε) = 1 / (4 (0.5 + (i/n)^(0.5 + ε/2)))`. Later truncation points
/// (smaller quality gap) and weaker perturbations get a smaller β.
pub fn dynamic_beta(i: u8, n: u8, epsilon: f64) -> Result<f64> {
    if n == 0 || i == 0 || i > n {
        return Err(Error::InvalidArgument(format!(
            "truncation index {i} outside 1..={n}"
        )));
    }
    if !(0.0..=1.0).contains(&epsilon) {
        return Err(Error::InvalidArgument(format!(
            "perturbation level {epsilon} outside [0, 1]"
        )));
    }
    let ratio = f64::from(i) / f64::from(n);
    Ok(1.0 / (4.0 * (0.5 + ratio.powf(0.5 + epsilon / 2.0))))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Provenance {
    Offline,
    /// Online self-improvement iteration, counted from 1.
    Online(u32),
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Provenance::Offline => write!(f, "offline"),
            Provenance::Online(k) => write!(f, "online-iter-{k}"),
        }
    }
}

impl FromStr for Provenance {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "offline" {
            return Ok(Provenance::Offline);
        }
        s.strip_prefix("online-iter-")
            .and_then(|k| k.parse().ok())
            .map(Provenance::Online)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown provenance {s:?}")))
    }
}

impl Serialize for Provenance {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Provenance {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// One trajectory-level preference record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub x: Vec<Token>,
    pub chosen: Vec<Token>,
    pub rejected: Vec<Token>,
    /// Truncation index `i` in `1..=stages`.
    pub i: u8,
    pub stages: u8,
    pub epsilon: f64,
    /// Self-correction β used in training; never recomputed from `(i, ε)`.
    pub beta: f64,
    pub provenance: Provenance,
    pub seed: u64,
    /// Length of `Yw<`.
    pub chosen_prefix_len: usize,
    /// Length of `Yl<`. Equals `chosen_prefix_len` for offline pairs.
    pub rejected_prefix_len: usize,
    /// The rejected suffix hit the generation cap before end-of-sequence.
    pub truncated: bool,
}

impl PreferencePair {
    pub fn validate(&self) -> Result<()> {
        if self.i == 0 || self.i > self.stages {
            return Err(Error::InvalidArgument(format!(
                "truncation index {} outside 1..={}",
                self.i, self.stages
            )));
        }
        if !(self.beta > 0.0) || !self.beta.is_finite() {
            return Err(Error::InvalidArgument(format!("beta {} must be positive", self.beta)));
        }
        if self.chosen_prefix_len > self.chosen.len() || self.rejected_prefix_len > self.rejected.len() {
            return Err(Error::InvalidArgument("prefix longer than response".into()));
        }
        Ok(())
    }

    pub fn chosen_prefix(&self) -> &[Token] {
        &self.chosen[..self.chosen_prefix_len]
    }

    pub fn chosen_suffix(&self) -> &[Token] {
        &self.chosen[self.chosen_prefix_len..]
    }

    pub fn rejected_prefix(&self) -> &[Token] {
        &self.rejected[..self.rejected_prefix_len]
    }

    pub fn rejected_suffix(&self) -> &[Token] {
        &self.rejected[self.rejected_prefix_len..]
    }
}

/// Supervised pair: gold response and a sample from the warm-up model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SftTriple {
    pub x: Vec<Token>,
    pub chosen: Vec<Token>,
    pub rejected: Vec<Token>,
}

/// A `(context, target)` pair scored as `log π(target | context)`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Term {
    pub context: Vec<Token>,
    pub target: Vec<Token>,
}

fn term(mut context: Vec<Token>, prefix: &[Token], target: &[Token]) -> Term {
    context.extend_from_slice(prefix);
    Term {
        context,
        target: target.to_vec(),
    }
}

/// The eight self-correction terms in the order used by the `v`/`u` formulas:
/// `[Yw≥|C(Yl)Yw<, Yl≥|C(Yl)Yl<, Yw≥|C(Yl)Yl<, Yl≥|C(Yl)Yw<,
///   Yl≥|C(Yw)Yl<, Yw≥|C(Yw)Yw<, Yl≥|C(Yw)Yw<, Yw≥|C(Yw)Yl<]`.
pub fn sc_terms(layout: &ContextLayout, pair: &PreferencePair) -> [Term; 8] {
    let (wp, ws) = (pair.chosen_prefix(), pair.chosen_suffix());
    let (lp, ls) = (pair.rejected_prefix(), pair.rejected_suffix());
    let cl = layout.correction(&pair.x, &pair.rejected);
    let cw = layout.correction(&pair.x, &pair.chosen);
    [
        term(cl.clone(), wp, ws),
        term(cl.clone(), lp, ls),
        term(cl.clone(), lp, ws),
        term(cl, wp, ls),
        term(cw.clone(), lp, ls),
        term(cw.clone(), wp, ws),
        term(cw.clone(), wp, ls),
        term(cw, lp, ws),
    ]
}

/// `[Yw | D, Yl | D]`, full responses under the direct context.
pub fn dpo_terms(layout: &ContextLayout, pair: &PreferencePair) -> [Term; 2] {
    let d = layout.direct(&pair.x);
    [term(d.clone(), &[], &pair.chosen), term(d, &[], &pair.rejected)]
}

/// Which terms enter the preference objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossMode {
    /// Self-correction loss plus `α`-weighted DPO.
    #[default]
    Combined,
    DpoOnly,
    ScOnly,
}

impl LossMode {
    pub fn uses_sc(self) -> bool {
        self != LossMode::DpoOnly
    }

    pub fn uses_dpo(self) -> bool {
        self != LossMode::ScOnly
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Objective {
    pub layout: ContextLayout,
    /// Weight of the DPO term in the combined loss.
    pub alpha: f64,
    pub beta_dpo: f64,
    pub mode: LossMode,
}

impl Default for Objective {
    fn default() -> Self {
        Self {
            layout: ContextLayout::default(),
            alpha: 0.25,
            beta_dpo: 0.1,
            mode: LossMode::Combined,
        }
    }
}

/// Reference-model log-probabilities of a pair's terms, computed once per
/// training stage. Entries for terms the mode does not use are zero.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ReferenceScores {
    pub sc: [f64; 8],
    pub dpo: [f64; 2],
}

/// Scores a pair's terms under `reference` through the same graph code the
/// trained policy uses, so `θ == ref` gives exactly zero log-ratios.
pub fn reference_scores(
    reference: &PolicyParameters,
    objective: &Objective,
    pair: &PreferencePair,
) -> Result<ReferenceScores> {
    let mut out = ReferenceScores::default();
    let mut cache: HashMap<Term, f64> = HashMap::new();
    let mut score = |t: Term| -> Result<f64> {
        if let Some(&v) = cache.get(&t) {
            return Ok(v);
        }
        let v = reference.logprob(&t.context, &t.target)?;
        cache.insert(t, v);
        Ok(v)
    };
    if objective.mode.uses_sc() {
        for (k, t) in sc_terms(&objective.layout, pair).into_iter().enumerate() {
            out.sc[k] = score(t)?;
        }
    }
    if objective.mode.uses_dpo() {
        for (k, t) in dpo_terms(&objective.layout, pair).into_iter().enumerate() {
            out.dpo[k] = score(t)?;
        }
    }
    Ok(out)
}

/// Builds log-probability nodes on a shared graph, reusing the node for any
/// repeated `(context, target)` within one builder.
pub struct TermBuilder<'g> {
    policy: PolicyGraph<'g>,
    cache: HashMap<Term, NodeId>,
}

impl<'g> TermBuilder<'g> {
    pub fn new(graph: &'g mut Graph, params: &'g PolicyParameters) -> Self {
        Self {
            policy: PolicyGraph::new(graph, params),
            cache: HashMap::new(),
        }
    }

    pub fn graph(&mut self) -> &mut Graph {
        self.policy.graph()
    }

    pub fn logprob(&mut self, t: Term) -> Result<NodeId> {
        if let Some(&id) = self.cache.get(&t) {
            return Ok(id);
        }
        let id = self.policy.continuation_logprob(&t.context, &t.target)?;
        self.cache.insert(t, id);
        Ok(id)
    }

    /// Forgets cached nodes so later terms are built fresh.
    pub fn clear_cache(&mut self) {
        self.cache.clear();
    }
}

fn mean_of(g: &mut Graph, terms: &[NodeId]) -> Result<NodeId> {
    let total = g.add_all(terms).ok_or(Error::Empty("batch"))?;
    Ok(g.scale(total, 1.0 / terms.len() as f64))
}

/// Next-token cross-entropy of gold responses under the direct context,
/// averaged over the batch.
pub fn sft_loss(b: &mut TermBuilder, layout: &ContextLayout, batch: &[(&[Token], &[Token])]) -> Result<NodeId> {
    let mut per = Vec::with_capacity(batch.len());
    for (k, (x, y)) in batch.iter().enumerate() {
        let lp = b.logprob(term(layout.direct(x), &[], y)).map_err(|e| e.in_record(k))?;
        per.push(lp);
    }
    let g = b.graph();
    let m = mean_of(g, &per)?;
    Ok(g.scale(m, -1.0))
}

/// `−[log π(Yw | D) + log π(Yw | C(Yl))]`, averaged over the batch.
pub fn sft_pair_loss(b: &mut TermBuilder, layout: &ContextLayout, batch: &[&SftTriple]) -> Result<NodeId> {
    let mut per = Vec::with_capacity(batch.len());
    for (k, t) in batch.iter().enumerate() {
        let direct = b
            .logprob(term(layout.direct(&t.x), &[], &t.chosen))
            .map_err(|e| e.in_record(k))?;
        let corrected = b
            .logprob(term(layout.correction(&t.x, &t.rejected), &[], &t.chosen))
            .map_err(|e| e.in_record(k))?;
        per.push(b.graph().add(direct, corrected));
    }
    let g = b.graph();
    let m = mean_of(g, &per)?;
    Ok(g.scale(m, -1.0))
}

fn log_ratio(g: &mut Graph, node: NodeId, reference: f64) -> NodeId {
    g.shift(node, -reference)
}

/// `−log σ(β_dpo [(θw − refw) − (θl − refl)])`, averaged over the batch.
pub fn dpo_loss(
    b: &mut TermBuilder,
    objective: &Objective,
    batch: &[(&PreferencePair, &ReferenceScores)],
) -> Result<NodeId> {
    let mut per = Vec::with_capacity(batch.len());
    for (k, (pair, refs)) in batch.iter().enumerate() {
        let [tw, tl] = dpo_terms(&objective.layout, pair);
        let w = b.logprob(tw).map_err(|e| e.in_record(k))?;
        let l = b.logprob(tl).map_err(|e| e.in_record(k))?;
        let g = b.graph();
        let rw = log_ratio(g, w, refs.dpo[0]);
        let rl = log_ratio(g, l, refs.dpo[1]);
        let diff = g.sub(rw, rl);
        // −log σ(z) = softplus(−z)
        let neg_margin = g.scale(diff, -objective.beta_dpo);
        per.push(g.softplus(neg_margin));
    }
    mean_of(b.graph(), &per)
}

/// Graph handles for the self-correction loss and its per-pair components.
#[derive(Debug, Clone)]
pub struct ScNodes {
    pub loss: NodeId,
    pub v_rejected: Vec<NodeId>,
    pub u_rejected: Vec<NodeId>,
    pub v_chosen: Vec<NodeId>,
    pub u_chosen: Vec<NodeId>,
    /// Per-term log-ratio nodes, eight per pair.
    pub log_ratios: Vec<[NodeId; 8]>,
    pub betas: Vec<f64>,
}

/// Per-batch values read back from an evaluated [`ScNodes`].
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LossDiagnostics {
    pub loss: f64,
    /// `v` and `u` in the rejected-response correction context.
    pub v_rejected: Vec<f64>,
    pub u_rejected: Vec<f64>,
    /// `v` and `u` in the chosen-response correction context.
    pub v_chosen: Vec<f64>,
    pub u_chosen: Vec<f64>,
    pub log_ratios: Vec<[f64; 8]>,
    pub betas: Vec<f64>,
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

impl LossDiagnostics {
    pub fn mean_v(&self) -> f64 {
        mean(&self.v_rejected)
    }

    pub fn mean_u(&self) -> f64 {
        mean(&self.u_rejected)
    }

    pub fn mean_v_chosen(&self) -> f64 {
        mean(&self.v_chosen)
    }

    pub fn mean_u_chosen(&self) -> f64 {
        mean(&self.u_chosen)
    }

    pub fn mean_beta(&self) -> f64 {
        mean(&self.betas)
    }
}

impl ScNodes {
    /// Reads values after a forward pass over a root that depends on `loss`.
    pub fn diagnostics(&self, g: &Graph) -> Result<LossDiagnostics> {
        let read = |ids: &[NodeId]| -> Result<Vec<f64>> {
            ids.iter().map(|&id| Ok(g.value(id)?.item())).collect()
        };
        let log_ratios = self
            .log_ratios
            .iter()
            .map(|row| {
                let mut out = [0.0; 8];
                for (o, &id) in out.iter_mut().zip(row) {
                    *o = g.value(id)?.item();
                }
                Ok(out)
            })
            .collect::<Result<_>>()?;
        Ok(LossDiagnostics {
            loss: g.value(self.loss)?.item(),
            v_rejected: read(&self.v_rejected)?,
            u_rejected: read(&self.u_rejected)?,
            v_chosen: read(&self.v_chosen)?,
            u_chosen: read(&self.u_chosen)?,
            log_ratios,
            betas: self.betas.clone(),
        })
    }
}

/// Self-correction loss averaged over the batch, using each pair's stored β.
pub fn sc_loss(
    b: &mut TermBuilder,
    objective: &Objective,
    batch: &[(&PreferencePair, &ReferenceScores)],
) -> Result<ScNodes> {
    let mut nodes = ScNodes {
        loss: NodeId(0),
        v_rejected: Vec::new(),
        u_rejected: Vec::new(),
        v_chosen: Vec::new(),
        u_chosen: Vec::new(),
        log_ratios: Vec::new(),
        betas: Vec::new(),
    };
    let mut per = Vec::with_capacity(batch.len());
    for (k, (pair, refs)) in batch.iter().enumerate() {
        pair.validate().map_err(|e| e.in_record(k))?;
        let terms = sc_terms(&objective.layout, pair);
        let mut r = [NodeId(0); 8];
        for (slot, (t, reference)) in r.iter_mut().zip(terms.into_iter().zip(refs.sc)) {
            let lp = b.logprob(t).map_err(|e| e.in_record(k))?;
            *slot = log_ratio(b.graph(), lp, reference);
        }
        let g = b.graph();
        let beta = pair.beta;
        let mut diff = |a: usize, c: usize| {
            let d = g.sub(r[a], r[c]);
            g.scale(d, beta)
        };
        let v_l = diff(0, 1);
        let u_l = diff(2, 3);
        let v_w = diff(4, 5);
        let u_w = diff(6, 7);
        let s_l = g.add(v_l, u_l);
        let e_l = g.scale(s_l, -1.0);
        let e_l = g.shift(e_l, 1.0);
        let s_w = g.add(v_w, u_w);
        let e_w = g.shift(s_w, 1.0);
        let sq_l = g.square(e_l);
        let sq_w = g.square(e_w);
        per.push(g.add(sq_l, sq_w));
        nodes.v_rejected.push(v_l);
        nodes.u_rejected.push(u_l);
        nodes.v_chosen.push(v_w);
        nodes.u_chosen.push(u_w);
        nodes.log_ratios.push(r);
        nodes.betas.push(beta);
    }
    nodes.loss = mean_of(b.graph(), &per)?;
    Ok(nodes)
}

/// Graph handles for a full preference objective.
#[derive(Debug, Clone)]
pub struct PreferenceNodes {
    pub loss: NodeId,
    pub sc: Option<ScNodes>,
    pub dpo: Option<NodeId>,
}

/// `sc_loss + α · dpo_loss`, or one component alone per `objective.mode`.
pub fn preference_loss(
    b: &mut TermBuilder,
    objective: &Objective,
    batch: &[(&PreferencePair, &ReferenceScores)],
) -> Result<PreferenceNodes> {
    if objective.alpha < 0.0 {
        return Err(Error::InvalidArgument(format!("alpha {} < 0", objective.alpha)));
    }
    let sc = if objective.mode.uses_sc() {
        Some(sc_loss(b, objective, batch)?)
    } else {
        None
    };
    let dpo = if objective.mode.uses_dpo() {
        Some(dpo_loss(b, objective, batch)?)
    } else {
        None
    };
    let g = b.graph();
    let loss = match (&sc, dpo) {
        (Some(s), Some(d)) => {
            let weighted = g.scale(d, objective.alpha);
            g.add(s.loss, weighted)
        }
        (Some(s), None) => s.loss,
        (None, Some(d)) => d,
        (None, None) => unreachable!("every mode uses at least one term"),
    };
    Ok(PreferenceNodes { loss, sc, dpo })
}
