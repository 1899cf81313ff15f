//! The GPHME tree: topology, parameters, and the Ω-sharing layout.
//!
//! Nodes are numbered breadth-first from 1. Inner nodes are `1..2^h` and leaves
//! are `2^h..2^{h+1}`; the children of node `ν` are `2ν` (left) and `2ν + 1`.

pub(crate) mod forward;
mod predict;

pub use forward::{
    branching_penalty, log_sigmoid, log_softmax, objective_of1, objective_of2, path_log_probabilities,
    pelbo, pelbo_seeded, BranchingPenalty, ForwardTrace, LossBreakdown, LossConfig, Objective,
    Target, ALPHA_CLAMP,
};
pub(crate) use forward::{Realized, RealizedGroup};
pub use predict::{predict, Predictions};

use serde::{Deserialize, Serialize};

use crate::error::{GphmeError, Result};
use crate::features::{FeatureParams, KernelFamily, KernelSpec};
use crate::rng::derive_seed;
use crate::variational::GaussianVariational;

/// Initial homoscedastic noise variance of regression leaves.
pub const INIT_NOISE_VARIANCE: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TreeTopology {
    pub height: usize,
}

impl TreeTopology {
    pub fn new(height: usize) -> Result<Self> {
        if height == 0 {
            return Err(GphmeError::input("tree height must be at least 1"));
        }
        if height > 20 {
            return Err(GphmeError::input(format!("tree height {height} is unreasonably large")));
        }
        Ok(TreeTopology { height })
    }

    pub fn num_inner(&self) -> usize {
        (1 << self.height) - 1
    }

    pub fn num_leaves(&self) -> usize {
        1 << self.height
    }

    /// Inner nodes plus leaves, `2^{h+1} − 1`.
    pub fn num_nodes(&self) -> usize {
        (1 << (self.height + 1)) - 1
    }

    pub fn is_leaf(&self, node: usize) -> bool {
        node >= self.num_leaves()
    }

    /// Root has depth 0; leaves have depth `h`.
    pub fn depth(&self, node: usize) -> usize {
        debug_assert!(node >= 1);
        (usize::BITS - 1 - node.leading_zeros()) as usize
    }

    pub fn leaf_node(&self, leaf: usize) -> usize {
        self.num_leaves() + leaf
    }

    pub fn leaf_index(&self, node: usize) -> usize {
        node - self.num_leaves()
    }

    /// Leaf indices (0-based, left to right) below `node`.
    pub fn leaves_under(&self, node: usize) -> std::ops::Range<usize> {
        let shift = self.height - self.depth(node);
        let first = node << shift;
        self.leaf_index(first)..self.leaf_index(first + (1 << shift))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OmegaSharing {
    /// One Ω posterior per node.
    NisN,
    /// One Ω posterior shared by every node.
    IsoN,
    /// One Ω posterior per tree level, the leaves forming the last level.
    IsoL,
}

impl OmegaSharing {
    pub fn num_groups(self, topology: &TreeTopology) -> usize {
        match self {
            OmegaSharing::NisN => topology.num_nodes(),
            OmegaSharing::IsoN => 1,
            OmegaSharing::IsoL => topology.height + 1,
        }
    }

    pub fn group_of(self, topology: &TreeTopology, node: usize) -> usize {
        match self {
            OmegaSharing::NisN => node - 1,
            OmegaSharing::IsoN => 0,
            OmegaSharing::IsoL => topology.depth(node),
        }
    }
}

impl std::str::FromStr for OmegaSharing {
    type Err = GphmeError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "nis_n" => Ok(OmegaSharing::NisN),
            "iso_n" => Ok(OmegaSharing::IsoN),
            "iso_l" => Ok(OmegaSharing::IsoL),
            other => Err(GphmeError::input(format!("unknown Ω sharing scheme `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Task {
    Classification { num_classes: usize },
    Regression { num_outputs: usize },
}

impl Task {
    /// K for classification, D_y for regression.
    pub fn output_dim(&self) -> usize {
        match *self {
            Task::Classification { num_classes } => num_classes,
            Task::Regression { num_outputs } => num_outputs,
        }
    }

    pub fn is_classification(&self) -> bool {
        matches!(self, Task::Classification { .. })
    }
}

/// Log-parameterized amplitude and ARD lengthscales of one Ω group.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelHyper {
    pub log_amplitude: f64,
    pub log_lengthscales: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OmegaGroup {
    pub hyper: KernelHyper,
    /// Posterior over the `D_x × J` spectral frequencies.
    pub omega: GaussianVariational,
}

/// Everything needed to build a fresh model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub height: usize,
    pub sharing: OmegaSharing,
    pub family: KernelFamily,
    pub num_features: usize,
    pub input_dim: usize,
    pub task: Task,
    pub init_amplitude: f64,
    pub init_lengthscale: f64,
}

impl ModelSpec {
    pub fn new(family: KernelFamily, height: usize, input_dim: usize, task: Task) -> Self {
        ModelSpec {
            height,
            sharing: OmegaSharing::IsoN,
            family,
            num_features: 100,
            input_dim,
            task,
            init_amplitude: 1.0,
            init_lengthscale: 1.0,
        }
    }

    pub fn with_features(mut self, num_features: usize) -> Self {
        self.num_features = num_features;
        self
    }

    pub fn with_sharing(mut self, sharing: OmegaSharing) -> Self {
        self.sharing = sharing;
        self
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TreeModel {
    pub topology: TreeTopology,
    pub sharing: OmegaSharing,
    pub family: KernelFamily,
    pub num_features: usize,
    pub input_dim: usize,
    pub task: Task,
    /// Ω groups per the sharing scheme; empty for identity features.
    pub groups: Vec<OmegaGroup>,
    /// Gate weights `w_ν`, indexed by `ν − 1`.
    pub gates: Vec<GaussianVariational>,
    /// Expert weights, `feature_dim × output_dim` row-major, indexed by leaf.
    pub experts: Vec<GaussianVariational>,
    /// Per-output noise log-variance (regression only).
    pub noise_log_variance: Vec<f64>,
}

/// Role of an entry in the flattened parameter vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Mean,
    LogStd,
    Hyper,
    NoiseLogVariance,
}

impl TreeModel {
    pub fn new(spec: &ModelSpec, seed: u64) -> Result<Self> {
        let topology = TreeTopology::new(spec.height)?;
        if spec.input_dim == 0 {
            return Err(GphmeError::input("input dimension must be at least 1"));
        }
        validate_task(&spec.task)?;
        if spec.family.uses_spectral_frequencies() {
            KernelSpec::new(
                spec.family,
                spec.init_amplitude,
                vec![spec.init_lengthscale; spec.input_dim],
                spec.num_features,
            )?;
        }
        let feature_dim = spec.family.feature_dim(spec.input_dim, spec.num_features);
        let out = spec.task.output_dim();

        let groups = if spec.family.uses_spectral_frequencies() {
            (0..spec.sharing.num_groups(&topology))
                .map(|g| OmegaGroup {
                    hyper: KernelHyper {
                        log_amplitude: spec.init_amplitude.ln(),
                        log_lengthscales: vec![spec.init_lengthscale.ln(); spec.input_dim],
                    },
                    omega: GaussianVariational::initialized(
                        vec![spec.input_dim, spec.num_features],
                        derive_seed(seed, &[0, g as u64]),
                    ),
                })
                .collect()
        } else {
            Vec::new()
        };
        let gates = (1..=topology.num_inner())
            .map(|node| {
                GaussianVariational::initialized(vec![feature_dim], derive_seed(seed, &[1, node as u64]))
            })
            .collect();
        let experts = (0..topology.num_leaves())
            .map(|leaf| {
                GaussianVariational::initialized(
                    vec![feature_dim, out],
                    derive_seed(seed, &[2, leaf as u64]),
                )
            })
            .collect();
        let noise_log_variance = match spec.task {
            Task::Regression { num_outputs } => vec![INIT_NOISE_VARIANCE.ln(); num_outputs],
            Task::Classification { .. } => Vec::new(),
        };
        Ok(TreeModel {
            topology,
            sharing: spec.sharing,
            family: spec.family,
            num_features: if spec.family.uses_spectral_frequencies() { spec.num_features } else { 0 },
            input_dim: spec.input_dim,
            task: spec.task,
            groups,
            gates,
            experts,
            noise_log_variance,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.family.feature_dim(self.input_dim, self.num_features)
    }

    /// Tree size as reported in benchmarks: inner nodes plus leaves.
    pub fn tree_size(&self) -> usize {
        self.topology.num_nodes()
    }

    /// Index into the per-sample feature activations used by `node`.
    pub(crate) fn feature_slot(&self, node: usize) -> usize {
        if self.family.uses_spectral_frequencies() {
            self.sharing.group_of(&self.topology, node)
        } else {
            0
        }
    }

    /// Kernel spec (amplitude and lengthscales) of Ω group `group`.
    pub fn kernel_spec(&self, group: usize) -> Result<KernelSpec> {
        if !self.family.uses_spectral_frequencies() {
            return Ok(KernelSpec::identity(self.input_dim));
        }
        let g = self
            .groups
            .get(group)
            .ok_or_else(|| GphmeError::input(format!("no Ω group {group}")))?;
        KernelSpec::new(
            self.family,
            g.hyper.log_amplitude.exp(),
            g.hyper.log_lengthscales.iter().map(|l| l.exp()).collect(),
            self.num_features,
        )
    }

    /// All variational tensors in canonical order: Ω groups, gates, experts.
    pub fn variationals(&self) -> impl Iterator<Item = &GaussianVariational> {
        self.groups
            .iter()
            .map(|g| &g.omega)
            .chain(&self.gates)
            .chain(&self.experts)
    }

    pub fn kl_divergence(&self) -> f64 {
        self.variationals().map(|q| q.kl_to_standard_normal()).sum()
    }

    pub fn noise_variance(&self) -> Vec<f64> {
        self.noise_log_variance.iter().map(|l| l.exp()).collect()
    }

    /// Checks every shape invariant; used after loading a checkpoint.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if let Err(e) = TreeTopology::new(self.topology.height) {
            problems.push(e.to_string());
        }
        if let Err(e) = validate_task(&self.task) {
            problems.push(e.to_string());
        }
        if !problems.is_empty() {
            return Err(GphmeError::Checkpoint(problems.join("; ")));
        }
        let f = self.feature_dim();
        let out = self.task.output_dim();
        if self.family.uses_spectral_frequencies() {
            if self.num_features == 0 {
                problems.push("random-feature model with J = 0".into());
            }
            let expected = self.sharing.num_groups(&self.topology);
            if self.groups.len() != expected {
                problems.push(format!("expected {expected} Ω groups, found {}", self.groups.len()));
            }
            for (i, g) in self.groups.iter().enumerate() {
                if g.omega.shape != [self.input_dim, self.num_features] {
                    problems.push(format!("Ω group {i} has shape {:?}", g.omega.shape));
                }
                if g.hyper.log_lengthscales.len() != self.input_dim {
                    problems.push(format!("Ω group {i} has {} lengthscales", g.hyper.log_lengthscales.len()));
                }
            }
        } else if !self.groups.is_empty() {
            problems.push("identity features carry no Ω groups".into());
        }
        if self.gates.len() != self.topology.num_inner() {
            problems.push(format!("expected {} gates, found {}", self.topology.num_inner(), self.gates.len()));
        }
        if self.experts.len() != self.topology.num_leaves() {
            problems.push(format!("expected {} experts, found {}", self.topology.num_leaves(), self.experts.len()));
        }
        for (i, q) in self.gates.iter().enumerate() {
            if q.shape != [f] || q.mean.len() != f || q.log_std.len() != f {
                problems.push(format!("gate {} has shape {:?}, expected [{f}]", i + 1, q.shape));
            }
        }
        for (i, q) in self.experts.iter().enumerate() {
            if q.shape != [f, out] || q.mean.len() != f * out || q.log_std.len() != f * out {
                problems.push(format!("expert {i} has shape {:?}, expected [{f}, {out}]", q.shape));
            }
        }
        let want_noise = if self.task.is_classification() { 0 } else { out };
        if self.noise_log_variance.len() != want_noise {
            problems.push(format!("expected {want_noise} noise variances, found {}", self.noise_log_variance.len()));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(GphmeError::Checkpoint(problems.join("; ")))
        }
    }

    /// Calls `f` on every trainable scalar in canonical order.
    pub fn visit_params_mut(&mut self, mut f: impl FnMut(ParamKind, &mut f64)) {
        for g in &mut self.groups {
            f(ParamKind::Hyper, &mut g.hyper.log_amplitude);
            g.hyper.log_lengthscales.iter_mut().for_each(|v| f(ParamKind::Hyper, v));
            g.omega.mean.iter_mut().for_each(|v| f(ParamKind::Mean, v));
            g.omega.log_std.iter_mut().for_each(|v| f(ParamKind::LogStd, v));
        }
        for q in self.gates.iter_mut().chain(self.experts.iter_mut()) {
            q.mean.iter_mut().for_each(|v| f(ParamKind::Mean, v));
            q.log_std.iter_mut().for_each(|v| f(ParamKind::LogStd, v));
        }
        self.noise_log_variance
            .iter_mut()
            .for_each(|v| f(ParamKind::NoiseLogVariance, v));
    }

    pub fn parameter_kinds(&self) -> Vec<ParamKind> {
        let mut kinds = Vec::new();
        self.clone().visit_params_mut(|k, _| kinds.push(k));
        kinds
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut flat = Vec::new();
        self.clone().visit_params_mut(|_, v| flat.push(*v));
        flat
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        let mut count = 0;
        self.visit_params_mut(|_, _| count += 1);
        if count != flat.len() {
            return Err(GphmeError::input(format!(
                "flat parameter vector has {} entries, model has {count}",
                flat.len()
            )));
        }
        let mut it = flat.iter();
        self.visit_params_mut(|_, v| *v = *it.next().expect("length checked"));
        Ok(())
    }

    /// Standard-normal noise for `n_mc` joint draws of every variational tensor.
    pub fn sample_noise(&self, n_mc: usize, seed: u64) -> Result<NoiseSet> {
        if n_mc == 0 {
            return Err(GphmeError::input("number of Monte-Carlo draws must be at least 1"));
        }
        let tensor_eps = |q: &GaussianVariational, stream: [u64; 2]| -> Result<Vec<Vec<f64>>> {
            Ok(q.sample(n_mc, derive_seed(seed, &stream))?
                .into_iter()
                .map(|d| d.epsilon)
                .collect())
        };
        let groups = self
            .groups
            .iter()
            .enumerate()
            .map(|(g, grp)| tensor_eps(&grp.omega, [0, g as u64]))
            .collect::<Result<Vec<_>>>()?;
        let gates = self
            .gates
            .iter()
            .enumerate()
            .map(|(i, q)| tensor_eps(q, [1, i as u64 + 1]))
            .collect::<Result<Vec<_>>>()?;
        let experts = self
            .experts
            .iter()
            .enumerate()
            .map(|(i, q)| tensor_eps(q, [2, i as u64]))
            .collect::<Result<Vec<_>>>()?;
        let draws = (0..n_mc)
            .map(|r| NoiseDraw {
                groups: groups.iter().map(|d| d[r].clone()).collect(),
                gates: gates.iter().map(|d| d[r].clone()).collect(),
                experts: experts.iter().map(|d| d[r].clone()).collect(),
            })
            .collect();
        Ok(NoiseSet { draws })
    }

    /// All-zero noise: a single draw at the posterior mean.
    pub fn mean_noise(&self) -> NoiseSet {
        NoiseSet {
            draws: vec![NoiseDraw {
                groups: self.groups.iter().map(|g| vec![0.0; g.omega.len()]).collect(),
                gates: self.gates.iter().map(|q| vec![0.0; q.len()]).collect(),
                experts: self.experts.iter().map(|q| vec![0.0; q.len()]).collect(),
            }],
        }
    }

    pub(crate) fn realize(&self, noise: &NoiseDraw) -> Realized {
        Realized {
            groups: self
                .groups
                .iter()
                .zip(&noise.groups)
                .map(|(g, eps)| RealizedGroup {
                    omega: g.omega.realize(eps),
                    amplitude: g.hyper.log_amplitude.exp(),
                    inv_lengthscales: g.hyper.log_lengthscales.iter().map(|l| (-l).exp()).collect(),
                })
                .collect(),
            gates: self.gates.iter().zip(&noise.gates).map(|(q, e)| q.realize(e)).collect(),
            experts: self.experts.iter().zip(&noise.experts).map(|(q, e)| q.realize(e)).collect(),
        }
    }

    pub(crate) fn feature_params<'a>(&self, realized: &'a Realized, slot: usize) -> FeatureParams<'a> {
        match realized.groups.get(slot) {
            Some(g) => FeatureParams {
                family: self.family,
                omega: &g.omega,
                num_features: self.num_features,
                amplitude: g.amplitude,
                inv_lengthscales: &g.inv_lengthscales,
            },
            None => FeatureParams {
                family: KernelFamily::Identity,
                omega: &[],
                num_features: 0,
                amplitude: 1.0,
                inv_lengthscales: &[],
            },
        }
    }

    /// Forward traces of one input under every draw of `noise`.
    pub fn trace(&self, x: &[f64], noise: &NoiseSet) -> Result<Vec<ForwardTrace>> {
        if x.len() != self.input_dim {
            return Err(GphmeError::input(format!(
                "input has {} columns, model expects D_x = {}",
                x.len(),
                self.input_dim
            )));
        }
        Ok(noise
            .draws
            .iter()
            .map(|d| self.forward(&self.realize(d), x))
            .collect())
    }
}

fn validate_task(task: &Task) -> Result<()> {
    match *task {
        Task::Classification { num_classes } if num_classes < 2 => Err(GphmeError::input(format!(
            "classification needs at least 2 classes, got {num_classes}"
        ))),
        Task::Regression { num_outputs } if num_outputs == 0 => {
            Err(GphmeError::input("regression needs at least one output"))
        }
        _ => Ok(()),
    }
}

/// Standard-normal noise for one joint draw of every variational tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseDraw {
    pub groups: Vec<Vec<f64>>,
    pub gates: Vec<Vec<f64>>,
    pub experts: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSet {
    pub draws: Vec<NoiseDraw>,
}

impl NoiseSet {
    pub fn n_mc(&self) -> usize {
        self.draws.len()
    }
}
