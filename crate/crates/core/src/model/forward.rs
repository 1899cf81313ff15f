use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{NoiseSet, Task, TreeModel, TreeTopology};
use crate::data::Dataset;
use crate::error::{GphmeError, Result};
use crate::features::{dot, FeatureActivation};

/// Bounds applied to α_ν before taking logs in the branching penalty.
pub const ALPHA_CLAMP: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// Mixture log-likelihood `Σ_l P_l log Q_l^y`.
    Of1,
    /// Normalized likelihood `log Q^y − logsumexp_k log Q^k` (classification only).
    Of2,
}

impl std::str::FromStr for Objective {
    type Err = GphmeError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "of1" => Ok(Objective::Of1),
            "of2" => Ok(Objective::Of2),
            other => Err(GphmeError::input(format!("unknown objective `{other}`"))),
        }
    }
}

/// Which terms enter the PELBO and how strongly the penalty acts.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    pub objective: Objective,
    /// λ in `λ_ν = λ · 2^{−depth(ν)} · N`; 0 disables the penalty.
    pub penalty_base: f64,
    /// When false, the likelihood term is dropped (prior-only diagnostics).
    pub likelihood: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            objective: Objective::Of1,
            penalty_base: 1.0,
            likelihood: true,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub enum Target<'a> {
    Class(usize),
    Values(&'a [f64]),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub lprime: f64,
    pub penalty: f64,
    pub kl: f64,
    pub pelbo: f64,
}

impl LossBreakdown {
    pub fn new(lprime: f64, penalty: f64, kl: f64) -> Self {
        LossBreakdown {
            lprime,
            penalty,
            kl,
            pelbo: lprime + penalty - kl,
        }
    }
}

pub(crate) struct RealizedGroup {
    pub omega: Vec<f64>,
    pub amplitude: f64,
    pub inv_lengthscales: Vec<f64>,
}

/// One joint draw Θ_r of every weight and frequency.
pub(crate) struct Realized {
    pub groups: Vec<RealizedGroup>,
    pub gates: Vec<Vec<f64>>,
    pub experts: Vec<Vec<f64>>,
}

/// Forward pass of one input under one draw Θ_r.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    pub(crate) features: Vec<FeatureActivation>,
    /// Gate activations `z_ν`, indexed by `ν − 1`.
    pub gate_logits: Vec<f64>,
    /// Left-branch probabilities `σ(z_ν)`, indexed by `ν − 1`.
    pub gate_probs: Vec<f64>,
    /// `log P_ν` for every node, indexed by node id (entry 0 unused).
    pub log_visit: Vec<f64>,
    /// Leaf outputs `z_l^k`, `num_leaves × output_dim` row-major.
    pub leaf_outputs: Vec<f64>,
    /// Leaf log-distributions `log Q_l^k` (classification only).
    pub leaf_log_probs: Vec<f64>,
    /// Aggregated class scores `log Q^k = Σ_l P_l log Q_l^k` (classification only).
    pub class_log_scores: Vec<f64>,
    pub(crate) num_leaves: usize,
    pub(crate) output_dim: usize,
}

impl ForwardTrace {
    pub fn log_path(&self, leaf: usize) -> f64 {
        self.log_visit[self.num_leaves + leaf]
    }

    pub fn path_probs(&self) -> Vec<f64> {
        self.log_visit[self.num_leaves..].iter().map(|l| l.exp()).collect()
    }

    /// `P_ν`, the probability of reaching `node`.
    pub fn visit_prob(&self, node: usize) -> f64 {
        self.log_visit[node].exp()
    }

    pub fn leaf_output(&self, leaf: usize) -> &[f64] {
        &self.leaf_outputs[leaf * self.output_dim..(leaf + 1) * self.output_dim]
    }

    pub fn leaf_log_dist(&self, leaf: usize) -> &[f64] {
        &self.leaf_log_probs[leaf * self.output_dim..(leaf + 1) * self.output_dim]
    }
}

/// `log σ(z) = −softplus(−z)`.
pub fn log_sigmoid(z: f64) -> f64 {
    -softplus(-z)
}

fn softplus(t: f64) -> f64 {
    t.max(0.0) + (-t.abs()).exp().ln_1p()
}

pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn logsumexp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub fn log_softmax(z: &[f64]) -> Vec<f64> {
    let lse = logsumexp(z);
    z.iter().map(|v| v - lse).collect()
}

/// `log P_ν` for every node from the gate logits (indexed by `ν − 1`).
pub(crate) fn log_visit_probabilities(topology: &TreeTopology, gate_logits: &[f64]) -> Vec<f64> {
    let mut log_visit = vec![0.0; topology.num_nodes() + 1];
    for node in 1..=topology.num_inner() {
        let z = gate_logits[node - 1];
        log_visit[2 * node] = log_visit[node] + log_sigmoid(z);
        log_visit[2 * node + 1] = log_visit[node] + log_sigmoid(-z);
    }
    log_visit
}

/// `log P_l` for every leaf, left to right, accumulated in log space along each root path.
pub fn path_log_probabilities(topology: &TreeTopology, gate_logits: &[f64]) -> Result<Vec<f64>> {
    if gate_logits.len() != topology.num_inner() {
        return Err(GphmeError::input(format!(
            "expected {} gate logits, got {}",
            topology.num_inner(),
            gate_logits.len()
        )));
    }
    let lv = log_visit_probabilities(topology, gate_logits);
    Ok(lv[topology.num_leaves()..].to_vec())
}

impl TreeModel {
    pub(crate) fn forward(&self, realized: &Realized, x: &[f64]) -> ForwardTrace {
        let n_slots = realized.groups.len().max(1);
        let features: Vec<FeatureActivation> = (0..n_slots)
            .map(|slot| self.feature_params(realized, slot).forward(x))
            .collect();
        let topo = &self.topology;
        let gate_logits: Vec<f64> = (1..=topo.num_inner())
            .map(|node| dot(&features[self.feature_slot(node)].phi, &realized.gates[node - 1]))
            .collect();
        let gate_probs = gate_logits.iter().map(|z| sigmoid(*z)).collect();
        let log_visit = log_visit_probabilities(topo, &gate_logits);

        let out = self.task.output_dim();
        let n_leaves = topo.num_leaves();
        let mut leaf_outputs = vec![0.0; n_leaves * out];
        for leaf in 0..n_leaves {
            let phi = &features[self.feature_slot(topo.leaf_node(leaf))].phi;
            let w = &realized.experts[leaf];
            let z = &mut leaf_outputs[leaf * out..(leaf + 1) * out];
            for (f, p) in phi.iter().enumerate() {
                let row = &w[f * out..(f + 1) * out];
                for (zk, wk) in z.iter_mut().zip(row) {
                    *zk += p * wk;
                }
            }
        }
        let (leaf_log_probs, class_log_scores) = if self.task.is_classification() {
            let mut lq = Vec::with_capacity(n_leaves * out);
            for leaf in 0..n_leaves {
                lq.extend(log_softmax(&leaf_outputs[leaf * out..(leaf + 1) * out]));
            }
            let mut scores = vec![0.0; out];
            for leaf in 0..n_leaves {
                let p = log_visit[n_leaves + leaf].exp();
                for k in 0..out {
                    scores[k] += p * lq[leaf * out + k];
                }
            }
            (lq, scores)
        } else {
            (Vec::new(), Vec::new())
        };
        ForwardTrace {
            features,
            gate_logits,
            gate_probs,
            log_visit,
            leaf_outputs,
            leaf_log_probs,
            class_log_scores,
            num_leaves: n_leaves,
            output_dim: out,
        }
    }

    pub(crate) fn check_target(&self, target: Target<'_>) -> Result<()> {
        match (self.task, target) {
            (Task::Classification { num_classes }, Target::Class(y)) => {
                if y >= num_classes {
                    return Err(GphmeError::input(format!(
                        "label {y} out of range for {num_classes} classes"
                    )));
                }
                Ok(())
            }
            (Task::Regression { num_outputs }, Target::Values(y)) => {
                if y.len() != num_outputs {
                    return Err(GphmeError::input(format!(
                        "target has {} outputs, model expects {num_outputs}",
                        y.len()
                    )));
                }
                Ok(())
            }
            _ => Err(GphmeError::input("target kind does not match the model task")),
        }
    }

    pub(crate) fn check_dataset(&self, data: &Dataset) -> Result<()> {
        if data.input_dim() != self.input_dim {
            return Err(GphmeError::input(format!(
                "dataset has D_x = {}, model expects {}",
                data.input_dim(),
                self.input_dim
            )));
        }
        match (self.task, data.task()) {
            (Task::Classification { num_classes: a }, Task::Classification { num_classes: b }) if b <= a => Ok(()),
            (Task::Regression { num_outputs: a }, Task::Regression { num_outputs: b }) if a == b => Ok(()),
            (m, d) => Err(GphmeError::input(format!(
                "dataset task {d:?} does not fit model task {m:?}"
            ))),
        }
    }
}

/// Mixture log-likelihood of one sample under one draw.
pub fn objective_of1(model: &TreeModel, trace: &ForwardTrace, target: Target<'_>) -> Result<f64> {
    model.check_target(target)?;
    let mut total = 0.0;
    match target {
        Target::Class(y) => {
            for leaf in 0..trace.num_leaves {
                total += trace.log_path(leaf).exp() * trace.leaf_log_dist(leaf)[y];
            }
        }
        Target::Values(y) => {
            let var = model.noise_variance();
            for leaf in 0..trace.num_leaves {
                let z = trace.leaf_output(leaf);
                let ll: f64 = (0..y.len()).map(|k| gaussian_log_density(y[k], z[k], var[k])).sum();
                total += trace.log_path(leaf).exp() * ll;
            }
        }
    }
    Ok(total)
}

pub(crate) fn gaussian_log_density(y: f64, mean: f64, var: f64) -> f64 {
    -0.5 * (2.0 * std::f64::consts::PI * var).ln() - (y - mean).powi(2) / (2.0 * var)
}

/// Normalized likelihood `log Q^y − logsumexp_k log Q^k`, clamped to ≤ 0.
pub fn objective_of2(model: &TreeModel, trace: &ForwardTrace, target: Target<'_>) -> Result<f64> {
    if !model.task.is_classification() {
        return Err(GphmeError::unsupported("OF2 is only defined for classification"));
    }
    model.check_target(target)?;
    let Target::Class(y) = target else { unreachable!() };
    Ok((trace.class_log_scores[y] - logsumexp(&trace.class_log_scores)).min(0.0))
}

pub(crate) fn objective(
    model: &TreeModel,
    trace: &ForwardTrace,
    target: Target<'_>,
    which: Objective,
) -> Result<f64> {
    match which {
        Objective::Of1 => objective_of1(model, trace, target),
        Objective::Of2 => objective_of2(model, trace, target),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BranchingPenalty {
    /// C.
    pub value: f64,
    /// Batch-average left-routing probability α_ν after clamping, indexed by `ν − 1`.
    pub alphas: Vec<f64>,
    /// α_ν before clamping.
    pub raw_alphas: Vec<f64>,
    /// λ_ν, indexed by `ν − 1`.
    pub lambdas: Vec<f64>,
}

/// Branching penalty of one draw over a minibatch of traces.
///
/// `α_ν = Σ_x P_ν(x) p_ν(x) / Σ_x P_ν(x)` and
/// `C = Σ_ν λ_ν [½ log α_ν + ½ log(1 − α_ν)]` with `λ_ν = λ · 2^{−depth(ν)} · N`.
pub fn branching_penalty(
    topology: &TreeTopology,
    traces: &[ForwardTrace],
    penalty_base: f64,
    n_total: usize,
) -> Result<BranchingPenalty> {
    if traces.is_empty() {
        return Err(GphmeError::input("branching penalty needs a non-empty batch"));
    }
    let n_inner = topology.num_inner();
    let mut num = vec![0.0; n_inner];
    let mut den = vec![0.0; n_inner];
    for t in traces {
        for node in 1..=n_inner {
            let pv = t.visit_prob(node);
            num[node - 1] += pv * t.gate_probs[node - 1];
            den[node - 1] += pv;
        }
    }
    let mut value = 0.0;
    let mut alphas = Vec::with_capacity(n_inner);
    let mut raw_alphas = Vec::with_capacity(n_inner);
    let mut lambdas = Vec::with_capacity(n_inner);
    for node in 1..=n_inner {
        let raw = if den[node - 1] > 0.0 { num[node - 1] / den[node - 1] } else { 0.5 };
        let alpha = raw.clamp(ALPHA_CLAMP, 1.0 - ALPHA_CLAMP);
        let lambda = penalty_lambda(topology, node, penalty_base, n_total);
        value += lambda * (0.5 * alpha.ln() + 0.5 * (1.0 - alpha).ln());
        raw_alphas.push(raw);
        alphas.push(alpha);
        lambdas.push(lambda);
    }
    Ok(BranchingPenalty {
        value,
        alphas,
        raw_alphas,
        lambdas,
    })
}

pub(crate) fn penalty_lambda(topology: &TreeTopology, node: usize, base: f64, n_total: usize) -> f64 {
    base * 0.5f64.powi(topology.depth(node) as i32) * n_total as f64
}

/// Doubly-stochastic PELBO estimate of a minibatch under the draws in `noise`.
///
/// `L′ = (N/M) Σ_m (1/N_MC) Σ_r objective(y_m | x_m, Θ_r)`, the penalty is averaged
/// over draws, and the KL term covers every variational tensor in the model.
pub fn pelbo(
    model: &TreeModel,
    data: &Dataset,
    batch: &[usize],
    config: &LossConfig,
    noise: &NoiseSet,
) -> Result<LossBreakdown> {
    validate_loss_inputs(model, data, batch, config, noise)?;
    let n_total = data.len();
    let scale = n_total as f64 / batch.len() as f64 / noise.n_mc() as f64;
    let mut lprime = 0.0;
    let mut penalty = 0.0;
    for draw in &noise.draws {
        let realized = model.realize(draw);
        let traces: Vec<ForwardTrace> = batch
            .par_iter()
            .map(|&i| model.forward(&realized, data.row(i)))
            .collect();
        if config.likelihood {
            for (trace, &i) in traces.iter().zip(batch) {
                lprime += scale * objective(model, trace, data.target(i), config.objective)?;
            }
        }
        if config.penalty_base != 0.0 {
            penalty += branching_penalty(&model.topology, &traces, config.penalty_base, n_total)?.value
                / noise.n_mc() as f64;
        }
    }
    Ok(LossBreakdown::new(lprime, penalty, model.kl_divergence()))
}

/// [`pelbo`] with fresh noise drawn from `seed`.
pub fn pelbo_seeded(
    model: &TreeModel,
    data: &Dataset,
    batch: &[usize],
    config: &LossConfig,
    n_mc: usize,
    seed: u64,
) -> Result<LossBreakdown> {
    let noise = model.sample_noise(n_mc, seed)?;
    pelbo(model, data, batch, config, &noise)
}

pub(crate) fn validate_loss_inputs(
    model: &TreeModel,
    data: &Dataset,
    batch: &[usize],
    config: &LossConfig,
    noise: &NoiseSet,
) -> Result<()> {
    if batch.is_empty() {
        return Err(GphmeError::input("minibatch must contain at least one sample"));
    }
    if noise.n_mc() == 0 {
        return Err(GphmeError::input("number of Monte-Carlo draws must be at least 1"));
    }
    if config.objective == Objective::Of2 && !model.task.is_classification() {
        return Err(GphmeError::unsupported("OF2 is only defined for classification"));
    }
    if let Some(&i) = batch.iter().find(|&&i| i >= data.len()) {
        return Err(GphmeError::input(format!("batch index {i} out of range for {} rows", data.len())));
    }
    model.check_dataset(data)
}
