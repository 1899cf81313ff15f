//! Gradients of the PELBO, Adam, and the minibatch training loop.
//!
//! The backward pass is hand-derived reverse mode over the fixed tree graph. For
//! each Monte-Carlo draw the minibatch is forwarded once, per-sample adjoints are
//! pushed from the objective and the branching penalty down through the path
//! probabilities, the gate and leaf linear maps and the feature map, and finally
//! mapped onto the variational parameters through `θ = mean + exp(log_std)·ε`.

use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{GphmeError, Result};
use crate::features::FeatureActivation;
use crate::model::forward::{logsumexp, penalty_lambda, validate_loss_inputs};
use crate::model::{
    branching_penalty, objective_of1, objective_of2, ForwardTrace, LossBreakdown, LossConfig,
    NoiseSet, Objective, ParamKind, Realized, Target, Task, TreeModel, ALPHA_CLAMP,
};
use crate::rng::{derive_seed, rng_from};
use crate::variational::GaussianVariational;

/// Samples per parallel work unit. Fixed so the reduction order never depends on
/// the thread count.
const CHUNK: usize = 16;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TensorGrad {
    pub mean: Vec<f64>,
    pub log_std: Vec<f64>,
}

impl TensorGrad {
    fn zeros(q: &GaussianVariational) -> Self {
        TensorGrad { mean: vec![0.0; q.len()], log_std: vec![0.0; q.len()] }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GroupGrad {
    pub log_amplitude: f64,
    pub log_lengthscales: Vec<f64>,
    pub omega: TensorGrad,
}

/// Gradients mirroring every trainable tensor of a [`TreeModel`].
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GradientSet {
    pub groups: Vec<GroupGrad>,
    pub gates: Vec<TensorGrad>,
    pub experts: Vec<TensorGrad>,
    pub noise_log_variance: Vec<f64>,
}

impl GradientSet {
    pub fn zeros(model: &TreeModel) -> Self {
        GradientSet {
            groups: model
                .groups
                .iter()
                .map(|g| GroupGrad {
                    log_amplitude: 0.0,
                    log_lengthscales: vec![0.0; g.hyper.log_lengthscales.len()],
                    omega: TensorGrad::zeros(&g.omega),
                })
                .collect(),
            gates: model.gates.iter().map(TensorGrad::zeros).collect(),
            experts: model.experts.iter().map(TensorGrad::zeros).collect(),
            noise_log_variance: vec![0.0; model.noise_log_variance.len()],
        }
    }

    /// Entries in the order of [`TreeModel::visit_params_mut`].
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for g in &self.groups {
            out.push(g.log_amplitude);
            out.extend_from_slice(&g.log_lengthscales);
            out.extend_from_slice(&g.omega.mean);
            out.extend_from_slice(&g.omega.log_std);
        }
        for t in self.gates.iter().chain(&self.experts) {
            out.extend_from_slice(&t.mean);
            out.extend_from_slice(&t.log_std);
        }
        out.extend_from_slice(&self.noise_log_variance);
        out
    }
}

/// Adjoints with respect to one realized draw Θ_r.
#[derive(Clone)]
struct RealizedGrad {
    omega: Vec<Vec<f64>>,
    log_amplitude: Vec<f64>,
    log_lengthscales: Vec<Vec<f64>>,
    gates: Vec<Vec<f64>>,
    experts: Vec<Vec<f64>>,
    noise_log_variance: Vec<f64>,
}

impl RealizedGrad {
    fn zeros(model: &TreeModel) -> Self {
        RealizedGrad {
            omega: model.groups.iter().map(|g| vec![0.0; g.omega.len()]).collect(),
            log_amplitude: vec![0.0; model.groups.len()],
            log_lengthscales: model.groups.iter().map(|g| vec![0.0; g.hyper.log_lengthscales.len()]).collect(),
            gates: model.gates.iter().map(|q| vec![0.0; q.len()]).collect(),
            experts: model.experts.iter().map(|q| vec![0.0; q.len()]).collect(),
            noise_log_variance: vec![0.0; model.noise_log_variance.len()],
        }
    }

    fn add(&mut self, other: &RealizedGrad) {
        fn acc(a: &mut [f64], b: &[f64]) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
        for (a, b) in self.omega.iter_mut().zip(&other.omega) {
            acc(a, b);
        }
        acc(&mut self.log_amplitude, &other.log_amplitude);
        for (a, b) in self.log_lengthscales.iter_mut().zip(&other.log_lengthscales) {
            acc(a, b);
        }
        for (a, b) in self.gates.iter_mut().zip(&other.gates) {
            acc(a, b);
        }
        for (a, b) in self.experts.iter_mut().zip(&other.experts) {
            acc(a, b);
        }
        acc(&mut self.noise_log_variance, &other.noise_log_variance);
    }
}

/// Per-node penalty coefficients shared by every sample of one draw.
struct PenaltyAdjoint {
    /// `(1/N_MC)·∂C/∂α_ν`, zero where α is clamped.
    coef: Vec<f64>,
    raw_alpha: Vec<f64>,
    /// `Σ_x P_ν(x)`.
    denom: Vec<f64>,
}

fn penalty_adjoint(
    model: &TreeModel,
    traces: &[ForwardTrace],
    base: f64,
    n_total: usize,
    n_mc: usize,
) -> PenaltyAdjoint {
    let n_inner = model.topology.num_inner();
    let mut num = vec![0.0; n_inner];
    let mut denom = vec![0.0; n_inner];
    for t in traces {
        for node in 1..=n_inner {
            let pv = t.visit_prob(node);
            num[node - 1] += pv * t.gate_probs[node - 1];
            denom[node - 1] += pv;
        }
    }
    let mut coef = vec![0.0; n_inner];
    let mut raw_alpha = vec![0.5; n_inner];
    for node in 1..=n_inner {
        let i = node - 1;
        if denom[i] <= 0.0 {
            continue;
        }
        let a = num[i] / denom[i];
        raw_alpha[i] = a;
        if a > ALPHA_CLAMP && a < 1.0 - ALPHA_CLAMP {
            let lambda = penalty_lambda(&model.topology, node, base, n_total);
            coef[i] = lambda * 0.5 * (1.0 / a - 1.0 / (1.0 - a)) / n_mc as f64;
        }
    }
    PenaltyAdjoint { coef, raw_alpha, denom }
}

/// Pushes one sample's adjoints into `grad`.
#[allow(clippy::too_many_arguments)]
fn backward_sample(
    model: &TreeModel,
    realized: &Realized,
    trace: &ForwardTrace,
    target: Target<'_>,
    config: &LossConfig,
    scale: f64,
    penalty: Option<&PenaltyAdjoint>,
    grad: &mut RealizedGrad,
) {
    let topo = &model.topology;
    let n_leaves = topo.num_leaves();
    let n_inner = topo.num_inner();
    let out = model.task.output_dim();

    // Adjoints of log P_ν (by node id), z_ν (by ν − 1) and leaf outputs.
    let mut g_logp = vec![0.0; topo.num_nodes() + 1];
    let mut g_gate = vec![0.0; n_inner];
    let mut g_leaf = vec![0.0; n_leaves * out];

    if config.likelihood {
        match (config.objective, target) {
            (Objective::Of1, Target::Class(y)) => {
                for l in 0..n_leaves {
                    let p = trace.log_path(l).exp();
                    let lq = trace.leaf_log_dist(l);
                    g_logp[n_leaves + l] += scale * p * lq[y];
                    for k in 0..out {
                        let delta = if k == y { 1.0 } else { 0.0 };
                        g_leaf[l * out + k] += scale * p * (delta - lq[k].exp());
                    }
                }
            }
            (Objective::Of1, Target::Values(y)) => {
                let var = model.noise_variance();
                for l in 0..n_leaves {
                    let p = trace.log_path(l).exp();
                    let z = trace.leaf_output(l);
                    let mut ll = 0.0;
                    for k in 0..out {
                        let r = y[k] - z[k];
                        ll += -0.5 * (2.0 * std::f64::consts::PI * var[k]).ln() - r * r / (2.0 * var[k]);
                        g_leaf[l * out + k] += scale * p * r / var[k];
                        grad.noise_log_variance[k] += scale * p * (-0.5 + r * r / (2.0 * var[k]));
                    }
                    g_logp[n_leaves + l] += scale * p * ll;
                }
            }
            (Objective::Of2, Target::Class(y)) => {
                let scores = &trace.class_log_scores;
                let lse = logsumexp(scores);
                if scores[y] - lse <= 0.0 {
                    let g: Vec<f64> = (0..out)
                        .map(|k| if k == y { 1.0 } else { 0.0 } - (scores[k] - lse).exp())
                        .collect();
                    for l in 0..n_leaves {
                        let p = trace.log_path(l).exp();
                        let lq = trace.leaf_log_dist(l);
                        let mut s = 0.0;
                        for k in 0..out {
                            s += g[k] * lq[k];
                            // Σ_k g_k = 0, so the softmax Jacobian reduces to the identity.
                            g_leaf[l * out + k] += scale * p * g[k];
                        }
                        g_logp[n_leaves + l] += scale * p * s;
                    }
                }
            }
            (Objective::Of2, Target::Values(_)) => unreachable!("rejected by validation"),
        }
    }

    if let Some(pen) = penalty {
        for node in 1..=n_inner {
            let i = node - 1;
            if pen.coef[i] == 0.0 {
                continue;
            }
            let pv = trace.visit_prob(node);
            let p = trace.gate_probs[i];
            let c = pen.coef[i] / pen.denom[i];
            g_gate[i] += c * pv * p * (1.0 - p);
            g_logp[node] += c * pv * (p - pen.raw_alpha[i]);
        }
    }

    // log P_{2ν} = log P_ν + log σ(z_ν), log P_{2ν+1} = log P_ν + log σ(−z_ν).
    let mut subtree = g_logp;
    for node in (1..=n_inner).rev() {
        let (l, r) = (subtree[2 * node], subtree[2 * node + 1]);
        let p = trace.gate_probs[node - 1];
        g_gate[node - 1] += l * (1.0 - p) - r * p;
        subtree[node] += l + r;
    }

    let mut d_phi: Vec<Vec<f64>> = trace.features.iter().map(|a| vec![0.0; a.phi.len()]).collect();
    for node in 1..=n_inner {
        let g = g_gate[node - 1];
        if g == 0.0 {
            continue;
        }
        let slot = model.feature_slot(node);
        let phi = &trace.features[slot].phi;
        let w = &realized.gates[node - 1];
        let dw = &mut grad.gates[node - 1];
        for f in 0..phi.len() {
            dw[f] += g * phi[f];
            d_phi[slot][f] += g * w[f];
        }
    }
    for l in 0..n_leaves {
        let dz = &g_leaf[l * out..(l + 1) * out];
        let slot = model.feature_slot(topo.leaf_node(l));
        let phi = &trace.features[slot].phi;
        let w = &realized.experts[l];
        let dw = &mut grad.experts[l];
        for f in 0..phi.len() {
            let mut acc = 0.0;
            for k in 0..out {
                dw[f * out + k] += phi[f] * dz[k];
                acc += w[f * out + k] * dz[k];
            }
            d_phi[slot][f] += acc;
        }
    }
    for (slot, act) in trace.features.iter().enumerate() {
        if slot >= realized.groups.len() {
            break;
        }
        feature_backward(model, realized, slot, act, &d_phi[slot], grad);
    }
}

fn feature_backward(
    model: &TreeModel,
    realized: &Realized,
    slot: usize,
    act: &FeatureActivation,
    d_phi: &[f64],
    grad: &mut RealizedGrad,
) {
    let params = model.feature_params(realized, slot);
    params.backward(
        act,
        d_phi,
        &mut grad.omega[slot],
        &mut grad.log_amplitude[slot],
        &mut grad.log_lengthscales[slot],
    );
}

fn check_finite(loss: &LossBreakdown) -> Result<()> {
    for (term, value) in [
        ("lprime", loss.lprime),
        ("penalty", loss.penalty),
        ("kl", loss.kl),
        ("pelbo", loss.pelbo),
    ] {
        if !value.is_finite() {
            return Err(GphmeError::Training { term: term.into(), value });
        }
    }
    Ok(())
}

/// PELBO of a minibatch and the gradient of −PELBO under the draws in `noise`.
///
/// The loss equals [`crate::model::pelbo`] on the same inputs bit for bit.
pub fn backward(
    model: &TreeModel,
    data: &Dataset,
    batch: &[usize],
    config: &LossConfig,
    noise: &NoiseSet,
) -> Result<(LossBreakdown, GradientSet)> {
    validate_loss_inputs(model, data, batch, config, noise)?;
    let n_total = data.len();
    let n_mc = noise.n_mc();
    let scale = n_total as f64 / batch.len() as f64 / n_mc as f64;
    let mut lprime = 0.0;
    let mut penalty = 0.0;
    let mut grads = GradientSet::zeros(model);

    for draw in &noise.draws {
        let realized = model.realize(draw);
        let traces: Vec<ForwardTrace> = batch
            .par_iter()
            .map(|&i| model.forward(&realized, data.row(i)))
            .collect();
        if config.likelihood {
            for (trace, &i) in traces.iter().zip(batch) {
                let obj = match config.objective {
                    Objective::Of1 => objective_of1(model, trace, data.target(i))?,
                    Objective::Of2 => objective_of2(model, trace, data.target(i))?,
                };
                lprime += scale * obj;
            }
        }
        let pen = if config.penalty_base != 0.0 {
            penalty += branching_penalty(&model.topology, &traces, config.penalty_base, n_total)?.value
                / n_mc as f64;
            Some(penalty_adjoint(model, &traces, config.penalty_base, n_total, n_mc))
        } else {
            None
        };

        let partials: Vec<RealizedGrad> = traces
            .par_chunks(CHUNK)
            .zip(batch.par_chunks(CHUNK))
            .map(|(ts, idx)| {
                let mut g = RealizedGrad::zeros(model);
                for (t, &i) in ts.iter().zip(idx) {
                    backward_sample(model, &realized, t, data.target(i), config, scale, pen.as_ref(), &mut g);
                }
                g
            })
            .collect();
        let mut total = RealizedGrad::zeros(model);
        for p in &partials {
            total.add(p);
        }
        accumulate_draw(model, draw, &total, &mut grads);
    }

    let loss = LossBreakdown::new(lprime, penalty, model.kl_divergence());
    check_finite(&loss)?;

    // Gradient of −PELBO = −(L′ + C) + KL.
    negate(&mut grads);
    for (q, g) in model.variationals().zip(tensor_grads_mut(&mut grads)) {
        let (dm, ds) = q.kl_gradient();
        g.mean.iter_mut().zip(dm).for_each(|(a, b)| *a += b);
        g.log_std.iter_mut().zip(ds).for_each(|(a, b)| *a += b);
    }
    if let Some((i, v)) = grads.flatten().iter().enumerate().find(|(_, v)| !v.is_finite()) {
        return Err(GphmeError::Training { term: format!("gradient[{i}]"), value: *v });
    }
    Ok((loss, grads))
}

/// [`backward`] with fresh noise drawn from `seed`.
pub fn backward_seeded(
    model: &TreeModel,
    data: &Dataset,
    batch: &[usize],
    config: &LossConfig,
    n_mc: usize,
    seed: u64,
) -> Result<(LossBreakdown, GradientSet)> {
    let noise = model.sample_noise(n_mc, seed)?;
    backward(model, data, batch, config, &noise)
}

/// Chain rule through `θ = mean + exp(log_std)·ε`.
fn accumulate_draw(model: &TreeModel, draw: &crate::model::NoiseDraw, g: &RealizedGrad, out: &mut GradientSet) {
    fn reparam(q: &GaussianVariational, eps: &[f64], d: &[f64], t: &mut TensorGrad) {
        for i in 0..d.len() {
            t.mean[i] += d[i];
            t.log_std[i] += d[i] * q.log_std[i].exp() * eps[i];
        }
    }
    for (gi, grp) in model.groups.iter().enumerate() {
        let o = &mut out.groups[gi];
        reparam(&grp.omega, &draw.groups[gi], &g.omega[gi], &mut o.omega);
        o.log_amplitude += g.log_amplitude[gi];
        o.log_lengthscales
            .iter_mut()
            .zip(&g.log_lengthscales[gi])
            .for_each(|(a, b)| *a += b);
    }
    for (i, q) in model.gates.iter().enumerate() {
        reparam(q, &draw.gates[i], &g.gates[i], &mut out.gates[i]);
    }
    for (i, q) in model.experts.iter().enumerate() {
        reparam(q, &draw.experts[i], &g.experts[i], &mut out.experts[i]);
    }
    out.noise_log_variance
        .iter_mut()
        .zip(&g.noise_log_variance)
        .for_each(|(a, b)| *a += b);
}

fn negate(g: &mut GradientSet) {
    for grp in &mut g.groups {
        grp.log_amplitude = -grp.log_amplitude;
        grp.log_lengthscales.iter_mut().for_each(|v| *v = -*v);
        grp.omega.mean.iter_mut().for_each(|v| *v = -*v);
        grp.omega.log_std.iter_mut().for_each(|v| *v = -*v);
    }
    for t in g.gates.iter_mut().chain(g.experts.iter_mut()) {
        t.mean.iter_mut().for_each(|v| *v = -*v);
        t.log_std.iter_mut().for_each(|v| *v = -*v);
    }
    g.noise_log_variance.iter_mut().for_each(|v| *v = -*v);
}

/// Tensor gradients in the order of [`TreeModel::variationals`].
fn tensor_grads_mut(g: &mut GradientSet) -> impl Iterator<Item = &mut TensorGrad> {
    g.groups
        .iter_mut()
        .map(|grp| &mut grp.omega)
        .chain(g.gates.iter_mut())
        .chain(g.experts.iter_mut())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Global gradient-norm ceiling applied before the update.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { learning_rate: 0.01, beta1: 0.9, beta2: 0.999, epsilon: 1e-8, clip_norm: None }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

/// One bias-corrected Adam update of `params`; entries with `mask[i] == false` are left untouched.
pub fn adam_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut AdamState,
    config: &AdamConfig,
    mask: Option<&[bool]>,
) -> Result<()> {
    if params.len() != grads.len() {
        return Err(GphmeError::input(format!(
            "{} parameters but {} gradients",
            params.len(),
            grads.len()
        )));
    }
    if let Some((i, v)) = grads.iter().enumerate().find(|(_, v)| v.is_nan()) {
        return Err(GphmeError::Training { term: format!("gradient[{i}]"), value: *v });
    }
    if state.m.is_empty() {
        state.m = vec![0.0; params.len()];
        state.v = vec![0.0; params.len()];
    } else if state.m.len() != params.len() {
        return Err(GphmeError::input("optimizer state does not match the parameter count"));
    }
    let active = |i: usize| mask.is_none_or(|m| m[i]);
    let mut factor = 1.0;
    if let Some(c) = config.clip_norm {
        let norm = grads
            .iter()
            .enumerate()
            .filter(|(i, _)| active(*i))
            .map(|(_, g)| g * g)
            .sum::<f64>()
            .sqrt();
        if norm > c {
            factor = c / norm;
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - config.beta1.powi(t);
    let bc2 = 1.0 - config.beta2.powi(t);
    for i in 0..params.len() {
        if !active(i) {
            continue;
        }
        let g = grads[i] * factor;
        state.m[i] = config.beta1 * state.m[i] + (1.0 - config.beta1) * g;
        state.v[i] = config.beta2 * state.v[i] + (1.0 - config.beta2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        params[i] -= config.learning_rate * m_hat / (v_hat.sqrt() + config.epsilon);
    }
    Ok(())
}

/// Applies one Adam step to the model and re-clamps every log standard deviation.
pub fn apply_update(
    model: &mut TreeModel,
    grads: &GradientSet,
    state: &mut AdamState,
    config: &AdamConfig,
    freeze_hyperparameters: bool,
) -> Result<()> {
    let mut flat = model.to_flat();
    let mask: Option<Vec<bool>> = freeze_hyperparameters
        .then(|| model.parameter_kinds().iter().map(|k| *k != ParamKind::Hyper).collect());
    adam_step(&mut flat, &grads.flatten(), state, config, mask.as_deref())?;
    model.set_flat(&flat)?;
    for g in &mut model.groups {
        g.omega.clamp_log_std();
    }
    for q in model.gates.iter_mut().chain(model.experts.iter_mut()) {
        q.clamp_log_std();
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub n_mc_train: usize,
    pub n_mc_eval: usize,
    pub learning_rate: f64,
    pub adam_betas: (f64, f64),
    pub adam_epsilon: f64,
    pub epochs: usize,
    pub max_minutes: Option<f64>,
    pub objective: Objective,
    pub penalty_base: f64,
    pub seed: u64,
    pub clip_norm: Option<f64>,
    pub freeze_hyperparameters: bool,
    /// Evaluate training-set metrics every this many epochs; 0 disables.
    pub snapshot_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 128,
            n_mc_train: 1,
            n_mc_eval: 50,
            learning_rate: 0.01,
            adam_betas: (0.9, 0.999),
            adam_epsilon: 1e-8,
            epochs: 100,
            max_minutes: None,
            objective: Objective::Of1,
            penalty_base: 1.0,
            seed: 0,
            clip_norm: None,
            freeze_hyperparameters: false,
            snapshot_every: 0,
        }
    }
}

impl TrainConfig {
    /// Every violated constraint, not just the first.
    pub fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        if self.batch_size == 0 {
            p.push("batch_size must be at least 1".into());
        }
        if self.n_mc_train == 0 {
            p.push("n_mc_train must be at least 1".into());
        }
        if self.n_mc_eval == 0 {
            p.push("n_mc_eval must be at least 1".into());
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            p.push(format!("learning_rate must be non-negative, got {}", self.learning_rate));
        }
        let (b1, b2) = self.adam_betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
            p.push(format!("adam_betas must lie in [0, 1), got ({b1}, {b2})"));
        }
        if !(self.adam_epsilon > 0.0) {
            p.push("adam_epsilon must be positive".into());
        }
        if self.epochs == 0 {
            p.push("epochs must be at least 1".into());
        }
        if let Some(m) = self.max_minutes {
            if !(m > 0.0) {
                p.push(format!("max_minutes must be positive, got {m}"));
            }
        }
        if !(self.penalty_base >= 0.0 && self.penalty_base.is_finite()) {
            p.push(format!("penalty_base must be non-negative, got {}", self.penalty_base));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                p.push(format!("clip_norm must be positive, got {c}"));
            }
        }
        p
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(GphmeError::Config(p))
        }
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig { objective: self.objective, penalty_base: self.penalty_base, likelihood: true }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.adam_betas.0,
            beta2: self.adam_betas.1,
            epsilon: self.adam_epsilon,
            clip_norm: self.clip_norm,
        }
    }
}

/// Position of an interrupted run, stored in checkpoints for resuming.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    /// Next epoch to run.
    pub epoch: usize,
    pub global_step: u64,
    pub adam: AdamState,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: u64,
    #[serde(flatten)]
    pub loss: LossBreakdown,
    pub elapsed_seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean over the epoch's steps.
    pub pelbo: f64,
    pub lprime: f64,
    pub penalty: f64,
    pub kl: f64,
    /// Mean negative objective per training sample, `−L′/N`.
    pub train_loss: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub metrics: Vec<(String, f64)>,
    pub elapsed_seconds: f64,
}

pub enum TrainEvent<'a> {
    Step(&'a StepRecord),
    Epoch(&'a EpochRecord),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub steps: u64,
    pub seconds: f64,
    pub stopped_by_time_budget: bool,
    pub state: TrainState,
}

impl TrainReport {
    /// One JSON object per epoch, newline separated.
    pub fn to_json_lines(&self) -> Result<String> {
        let mut out = String::new();
        for e in &self.epochs {
            out.push_str(&serde_json::to_string(e)?);
            out.push('\n');
        }
        Ok(out)
    }
}

const STREAM_SHUFFLE: u64 = 0x5AFF;
const STREAM_NOISE: u64 = 0x7015E;

/// Trains `model` on `data` (already standardized) with minibatch Adam.
///
/// Epoch `e` shuffles with a generator seeded from `(seed, e)` and step `s` draws
/// its ε from `(seed, s)`, so a resumed run continues exactly where it stopped.
pub fn fit(
    model: &mut TreeModel,
    data: &Dataset,
    config: &TrainConfig,
    resume: Option<TrainState>,
    observer: &mut dyn FnMut(TrainEvent<'_>),
) -> Result<TrainReport> {
    config.validate()?;
    model.check_dataset(data)?;
    if config.objective == Objective::Of2 && !model.task.is_classification() {
        return Err(GphmeError::unsupported("OF2 is only defined for classification"));
    }
    let n = data.len();
    if n == 0 {
        return Err(GphmeError::input("cannot train on an empty dataset"));
    }
    let loss_cfg = config.loss_config();
    let adam = config.adam();
    let mut state = resume.unwrap_or_default();
    let start = Instant::now();
    let budget = config.max_minutes.map(|m| m * 60.0);
    let mut epochs = Vec::new();
    let mut out_of_time = false;

    while state.epoch < config.epochs && !out_of_time {
        let epoch = state.epoch;
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng_from(config.seed, &[STREAM_SHUFFLE, epoch as u64]));
        let mut sums = [0.0; 4];
        let mut count = 0usize;
        for batch in order.chunks(config.batch_size) {
            let noise = model.sample_noise(
                config.n_mc_train,
                derive_seed(config.seed, &[STREAM_NOISE, state.global_step]),
            )?;
            let (loss, grads) = backward(model, data, batch, &loss_cfg, &noise)?;
            apply_update(model, &grads, &mut state.adam, &adam, config.freeze_hyperparameters)?;
            state.global_step += 1;
            sums[0] += loss.pelbo;
            sums[1] += loss.lprime;
            sums[2] += loss.penalty;
            sums[3] += loss.kl;
            count += 1;
            let elapsed = start.elapsed().as_secs_f64();
            observer(TrainEvent::Step(&StepRecord {
                epoch,
                step: state.global_step,
                loss,
                elapsed_seconds: elapsed,
            }));
            if budget.is_some_and(|b| elapsed >= b) {
                out_of_time = true;
                break;
            }
        }
        let c = count as f64;
        let metrics = if config.snapshot_every > 0 && (epoch + 1).is_multiple_of(config.snapshot_every) {
            let pred = crate::model::predict(
                model,
                data.features(),
                config.n_mc_eval,
                derive_seed(config.seed, &[0x5A, epoch as u64]),
            )?;
            crate::eval::score(&pred, data)?
        } else {
            Vec::new()
        };
        let record = EpochRecord {
            epoch,
            pelbo: sums[0] / c,
            lprime: sums[1] / c,
            penalty: sums[2] / c,
            kl: sums[3] / c,
            train_loss: -sums[1] / c / n as f64,
            metrics,
            elapsed_seconds: start.elapsed().as_secs_f64(),
        };
        log::debug!("epoch {epoch}: pelbo {:.4} loss {:.4}", record.pelbo, record.train_loss);
        observer(TrainEvent::Epoch(&record));
        epochs.push(record);
        if !out_of_time {
            state.epoch += 1;
        }
    }
    if out_of_time {
        log::info!("time budget reached after {} steps", state.global_step);
    }
    Ok(TrainReport {
        epochs,
        steps: state.global_step,
        seconds: start.elapsed().as_secs_f64(),
        stopped_by_time_budget: out_of_time,
        state,
    })
}

/// Mean objective per sample over the full dataset under `noise`.
pub fn dataset_objective(model: &TreeModel, data: &Dataset, objective: Objective, noise: &NoiseSet) -> Result<f64> {
    let cfg = LossConfig { objective, penalty_base: 0.0, likelihood: true };
    let all: Vec<usize> = (0..data.len()).collect();
    let loss = crate::model::pelbo(model, data, &all, &cfg, noise)?;
    Ok(loss.lprime / data.len() as f64)
}

/// Tasks for which a given objective is defined.
pub fn objective_supported(objective: Objective, task: &Task) -> bool {
    objective == Objective::Of1 || task.is_classification()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_rings;
    use crate::features::KernelFamily;
    use crate::model::{pelbo, ModelSpec, OmegaSharing};
    use rand::Rng;

    fn tiny_classification(seed: u64) -> Dataset {
        let mut rng = rng_from(seed, &[9]);
        let feats: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
        Dataset::classification("tiny", feats, 2, vec![0, 1, 1, 0], 2).unwrap()
    }

    /// Central differences of −PELBO in every flat coordinate, with fixed ε.
    fn finite_difference(model: &TreeModel, data: &Dataset, batch: &[usize], cfg: &LossConfig, noise: &NoiseSet) -> Vec<f64> {
        let h = 1e-5;
        let base = model.to_flat();
        (0..base.len())
            .map(|i| {
                let mut m = model.clone();
                let mut p = base.clone();
                p[i] = base[i] + h;
                m.set_flat(&p).unwrap();
                let up = pelbo(&m, data, batch, cfg, noise).unwrap().pelbo;
                p[i] = base[i] - h;
                m.set_flat(&p).unwrap();
                let down = pelbo(&m, data, batch, cfg, noise).unwrap().pelbo;
                -(up - down) / (2.0 * h)
            })
            .collect()
    }

    pub(crate) fn assert_gradients_match(analytic: &[f64], numeric: &[f64]) {
        assert_eq!(analytic.len(), numeric.len());
        for (i, (a, n)) in analytic.iter().zip(numeric).enumerate() {
            let err = (a - n).abs();
            assert!(
                err <= 1e-4 * a.abs().max(n.abs()) || err <= 1e-8 * 1e2_f64.max(0.0) + 1e-8,
                "entry {i}: analytic {a} vs numeric {n}"
            );
        }
    }

    #[test]
    fn tiny_model_matches_finite_differences() {
        let data = tiny_classification(1);
        let spec = ModelSpec::new(KernelFamily::Rbf, 1, 2, Task::Classification { num_classes: 2 }).with_features(3);
        let mut model = TreeModel::new(&spec, 2).unwrap();
        // Move away from the near-zero init so every term is exercised.
        let mut rng = rng_from(5, &[]);
        model.visit_params_mut(|k, v| {
            if k == ParamKind::Mean {
                *v = rng.random_range(-1.0..1.0);
            } else if k == ParamKind::LogStd {
                *v = rng.random_range(-2.0..-0.5);
            }
        });
        let noise = model.sample_noise(1, 3).unwrap();
        let cfg = LossConfig { objective: Objective::Of1, penalty_base: 0.5, likelihood: true };
        let batch = [0, 1, 2, 3];
        let (loss, grads) = backward(&model, &data, &batch, &cfg, &noise).unwrap();
        assert_eq!(loss, pelbo(&model, &data, &batch, &cfg, &noise).unwrap());
        assert_gradients_match(&grads.flatten(), &finite_difference(&model, &data, &batch, &cfg, &noise));
    }

    #[test]
    fn kl_only_gradient_is_kl_gradient() {
        let data = tiny_classification(2);
        let spec = ModelSpec::new(KernelFamily::ArcCosine1, 2, 2, Task::Classification { num_classes: 2 })
            .with_features(4)
            .with_sharing(OmegaSharing::NisN);
        let model = TreeModel::new(&spec, 4).unwrap();
        let cfg = LossConfig { objective: Objective::Of1, penalty_base: 0.0, likelihood: false };
        let (loss, g) = backward_seeded(&model, &data, &[0, 1], &cfg, 2, 9).unwrap();
        assert_eq!(loss.pelbo, -model.kl_divergence());
        let mut expected = GradientSet::zeros(&model);
        for (q, t) in model.variationals().zip(tensor_grads_mut(&mut expected)) {
            let (m, s) = q.kl_gradient();
            t.mean = m;
            t.log_std = s;
        }
        assert_eq!(g, expected);
    }

    #[test]
    fn symmetric_penalty_has_zero_gate_gradient() {
        let data = tiny_classification(3);
        let spec = ModelSpec::new(KernelFamily::Rbf, 2, 2, Task::Classification { num_classes: 2 }).with_features(3);
        let mut model = TreeModel::new(&spec, 1).unwrap();
        for q in model.gates.iter_mut() {
            q.mean.iter_mut().for_each(|v| *v = 0.0);
            q.log_std.iter_mut().for_each(|v| *v = -10.0);
        }
        let cfg = LossConfig { objective: Objective::Of1, penalty_base: 3.0, likelihood: false };
        let noise = model.mean_noise();
        let (_, g) = backward(&model, &data, &[0, 1, 2, 3], &cfg, &noise).unwrap();
        for (q, t) in model.gates.iter().zip(&g.gates) {
            let (kl_m, _) = q.kl_gradient();
            for (a, b) in t.mean.iter().zip(kl_m) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn non_finite_loss_names_the_term() {
        let data = tiny_classification(4);
        let spec = ModelSpec::new(KernelFamily::Identity, 1, 2, Task::Classification { num_classes: 2 });
        let mut model = TreeModel::new(&spec, 1).unwrap();
        model.experts[0].mean[0] = f64::INFINITY;
        let err = backward_seeded(&model, &data, &[0, 1], &LossConfig::default(), 1, 0).unwrap_err();
        assert!(matches!(err, GphmeError::Training { .. }), "{err}");
    }

    #[test]
    fn adam_examples() {
        let cfg = AdamConfig::default();
        let mut p = vec![1.0, -2.0];
        let mut st = AdamState::default();
        adam_step(&mut p, &[0.0, 0.0], &mut st, &cfg, None).unwrap();
        assert_eq!(p, vec![1.0, -2.0]);

        let mut p = vec![0.0];
        let mut st = AdamState::default();
        for _ in 0..10 {
            adam_step(&mut p, &[2.5], &mut st, &cfg, None).unwrap();
        }
        assert!(p[0] < 0.0);
        assert!(adam_step(&mut p, &[f64::NAN], &mut st, &cfg, None).is_err());

        // f(x) = (x − 3)², minimizer 3.
        let mut p = vec![0.0];
        let mut st = AdamState::default();
        for _ in 0..2000 {
            let g = 2.0 * (p[0] - 3.0);
            adam_step(&mut p, &[g], &mut st, &cfg, None).unwrap();
        }
        assert!((p[0] - 3.0).abs() < 1e-3, "{}", p[0]);

        // Clipping caps the first step at lr regardless, but changes the moments.
        let mut a = vec![0.0, 0.0];
        let mut st = AdamState::default();
        let clip = AdamConfig { clip_norm: Some(1.0), ..cfg };
        adam_step(&mut a, &[30.0, 40.0], &mut st, &clip, None).unwrap();
        assert!((st.m[0] - 0.1 * 0.6).abs() < 1e-12 && (st.m[1] - 0.1 * 0.8).abs() < 1e-12);

        let mut a = vec![0.0, 0.0];
        let mut st = AdamState::default();
        adam_step(&mut a, &[1.0, 1.0], &mut st, &cfg, Some(&[true, false])).unwrap();
        assert!(a[0] < 0.0 && a[1] == 0.0);
    }

    fn rings_setup(n: usize) -> (Dataset, ModelSpec) {
        let d = synth_rings(n, 0.2, 11).unwrap();
        let all: Vec<usize> = (0..n).collect();
        let (train, _, _) = crate::data::standardize(&d, &all, &[]);
        let spec = ModelSpec::new(KernelFamily::Rbf, 1, 2, Task::Classification { num_classes: 2 }).with_features(50);
        (train, spec)
    }

    #[test]
    fn zero_learning_rate_is_identity() {
        let (data, spec) = rings_setup(64);
        let mut model = TreeModel::new(&spec, 1).unwrap();
        let before = model.clone();
        let cfg = TrainConfig { learning_rate: 0.0, epochs: 2, batch_size: 16, ..Default::default() };
        fit(&mut model, &data, &cfg, None, &mut |_| {}).unwrap();
        assert_eq!(model, before);
    }

    #[test]
    fn training_is_deterministic_and_resumable() {
        let (data, spec) = rings_setup(64);
        let cfg = TrainConfig { epochs: 4, batch_size: 16, seed: 3, ..Default::default() };
        let run = |resume_at: Option<usize>| {
            let mut model = TreeModel::new(&spec, 1).unwrap();
            let report = match resume_at {
                None => fit(&mut model, &data, &cfg, None, &mut |_| {}).unwrap(),
                Some(e) => {
                    let first = TrainConfig { epochs: e, ..cfg.clone() };
                    let r = fit(&mut model, &data, &first, None, &mut |_| {}).unwrap();
                    fit(&mut model, &data, &cfg, Some(r.state), &mut |_| {}).unwrap()
                }
            };
            (model, report.state)
        };
        let (a, sa) = run(None);
        let (b, sb) = run(None);
        assert_eq!(a, b);
        assert_eq!(sa, sb);
        let (c, sc) = run(Some(2));
        assert_eq!(a, c);
        assert_eq!(sa, sc);
    }

    #[test]
    fn rings_loss_gap_halves() {
        let (data, spec) = rings_setup(400);
        let mut model = TreeModel::new(&spec, 5).unwrap();
        let eval_noise = model.sample_noise(8, 77).unwrap();
        let initial = -dataset_objective(&model, &data, Objective::Of1, &eval_noise).unwrap();
        let cfg = TrainConfig { epochs: 500, batch_size: 100, seed: 2, ..Default::default() };
        fit(&mut model, &data, &cfg, None, &mut |_| {}).unwrap();
        let eval_noise = model.sample_noise(8, 77).unwrap();
        let fin = -dataset_objective(&model, &data, Objective::Of1, &eval_noise).unwrap();
        // Labels are a deterministic function of the radius, so the entropy floor is 0.
        assert!(fin <= 0.5 * initial, "initial {initial}, final {fin}");
    }

    #[test]
    fn minibatch_estimator_is_unbiased() {
        let (data, spec) = rings_setup(60);
        let model = TreeModel::new(&spec, 2).unwrap();
        let noise = model.sample_noise(1, 5).unwrap();
        let cfg = LossConfig { objective: Objective::Of1, penalty_base: 0.0, likelihood: true };
        let all: Vec<usize> = (0..60).collect();
        let full = pelbo(&model, &data, &all, &cfg, &noise).unwrap().lprime;
        let mut avg = 0.0;
        for b in all.chunks(12) {
            avg += pelbo(&model, &data, b, &cfg, &noise).unwrap().lprime / 5.0;
        }
        assert!((avg - full).abs() <= 1e-9 * full.abs().max(1.0), "{avg} vs {full}");
    }
}
