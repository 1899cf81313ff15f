//! TOML run configuration, validation and command-line overrides.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use gphme::data::{CsvSchema, FoldPlan, TaskKind};
use gphme::features::KernelFamily;
use gphme::model::{ModelSpec, Objective, OmegaSharing, Task};
use gphme::train::TrainConfig;
use gphme::GphmeError;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Name used in reports; defaults to the kernel family.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    pub data: DataConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub folds: FoldConfig,
    /// Second config benchmarked on the same folds for a Welch comparison.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baseline: Option<PathBuf>,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("gphme-out")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticConfig>,
    #[serde(default = "default_task")]
    pub task: String,
    /// Zero-based target columns; empty means the last column.
    #[serde(default)]
    pub target_columns: Vec<usize>,
    #[serde(default = "default_delimiter")]
    pub delimiter: char,
    #[serde(default = "default_true")]
    pub has_header: bool,
}

fn default_task() -> String {
    "classification".into()
}

fn default_delimiter() -> char {
    ','
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticConfig {
    /// Only `rings` is available.
    pub kind: String,
    pub n: usize,
    #[serde(default = "default_ring_noise")]
    pub noise: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_ring_noise() -> f64 {
    0.2
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub family: String,
    pub num_features: usize,
    pub height: usize,
    pub sharing: String,
    pub init_amplitude: f64,
    pub init_lengthscale: f64,
    pub freeze_hyperparameters: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            family: "rbf".into(),
            num_features: 100,
            height: 3,
            sharing: "iso_n".into(),
            init_amplitude: 1.0,
            init_lengthscale: 1.0,
            freeze_hyperparameters: false,
        }
    }
}

/// Optimizer and schedule settings; see [`TrainConfig`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub objective: String,
    pub batch_size: usize,
    pub n_mc_train: usize,
    pub n_mc_eval: usize,
    pub learning_rate: f64,
    pub adam_betas: (f64, f64),
    pub adam_epsilon: f64,
    pub epochs: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_minutes: Option<f64>,
    pub penalty_base: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub clip_norm: Option<f64>,
    pub snapshot_every: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSection {
            objective: "of1".into(),
            batch_size: t.batch_size,
            n_mc_train: t.n_mc_train,
            n_mc_eval: t.n_mc_eval,
            learning_rate: t.learning_rate,
            adam_betas: t.adam_betas,
            adam_epsilon: t.adam_epsilon,
            epochs: t.epochs,
            max_minutes: t.max_minutes,
            penalty_base: t.penalty_base,
            clip_norm: t.clip_norm,
            snapshot_every: t.snapshot_every,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FoldConfig {
    pub n_folds: usize,
    pub test_fraction: f64,
    pub stratified: bool,
    /// Defaults to the run seed.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl Default for FoldConfig {
    fn default() -> Self {
        let p = FoldPlan::default();
        FoldConfig {
            n_folds: p.n_folds,
            test_fraction: p.test_fraction,
            stratified: p.stratified,
            seed: None,
        }
    }
}

/// Command-line flags that take precedence over the config file.
#[derive(Clone, Debug, Default, clap::Args)]
pub struct Overrides {
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Training data CSV (replaces any synthetic source).
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub family: Option<String>,
    /// Random feature count J.
    #[arg(long)]
    pub features: Option<usize>,
    #[arg(long)]
    pub height: Option<usize>,
    #[arg(long)]
    pub sharing: Option<String>,
    #[arg(long)]
    pub objective: Option<String>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub max_minutes: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    /// Branching penalty base λ.
    #[arg(long)]
    pub penalty: Option<f64>,
    #[arg(long)]
    pub folds: Option<usize>,
    /// Baseline config for the Welch comparison.
    #[arg(long)]
    pub baseline: Option<PathBuf>,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    /// Parses a config file; relative paths inside it resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
        let mut cfg = Self::from_toml(&text).with_context(|| format!("cannot parse config {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new(""));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(p) = cfg.data.path.as_mut() {
            resolve(p);
        }
        if let Some(p) = cfg.baseline.as_mut() {
            resolve(p);
        }
        Ok(cfg)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(v) = &o.out {
            self.output_dir = v.clone();
        }
        if let Some(v) = o.seed {
            self.seed = v;
        }
        if let Some(v) = &o.data {
            self.data.path = Some(v.clone());
            self.data.synthetic = None;
        }
        if let Some(v) = &o.family {
            self.model.family = v.clone();
        }
        if let Some(v) = o.features {
            self.model.num_features = v;
        }
        if let Some(v) = o.height {
            self.model.height = v;
        }
        if let Some(v) = &o.sharing {
            self.model.sharing = v.clone();
        }
        if let Some(v) = &o.objective {
            self.train.objective = v.clone();
        }
        if let Some(v) = o.epochs {
            self.train.epochs = v;
        }
        if let Some(v) = o.max_minutes {
            self.train.max_minutes = Some(v);
        }
        if let Some(v) = o.batch_size {
            self.train.batch_size = v;
        }
        if let Some(v) = o.learning_rate {
            self.train.learning_rate = v;
        }
        if let Some(v) = o.penalty {
            self.train.penalty_base = v;
        }
        if let Some(v) = o.folds {
            self.folds.n_folds = v;
        }
        if let Some(v) = &o.baseline {
            self.baseline = Some(v.clone());
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }

    /// Every violated constraint, each naming its field.
    pub fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        let d = &self.data;
        match (&d.path, &d.synthetic) {
            (None, None) => p.push("data: set either `path` or `synthetic`".into()),
            (Some(_), Some(_)) => p.push("data: `path` and `synthetic` are mutually exclusive".into()),
            _ => {}
        }
        let task = d.task.parse::<TaskKind>();
        if task.is_err() {
            p.push(format!("data.task: expected `classification` or `regression`, got `{}`", d.task));
        }
        if !d.delimiter.is_ascii() {
            p.push(format!("data.delimiter: must be an ASCII character, got `{}`", d.delimiter));
        }
        if let Some(s) = &d.synthetic {
            if s.kind != "rings" {
                p.push(format!("data.synthetic.kind: only `rings` is available, got `{}`", s.kind));
            }
            if s.n < 4 {
                p.push(format!("data.synthetic.n: must be at least 4, got {}", s.n));
            }
            if !(s.noise >= 0.0 && s.noise.is_finite()) {
                p.push(format!("data.synthetic.noise: must be non-negative, got {}", s.noise));
            }
            if matches!(task, Ok(TaskKind::Regression)) {
                p.push("data.task: synthetic rings are a classification task".into());
            }
        }

        let m = &self.model;
        let family = m.family.parse::<KernelFamily>();
        if family.is_err() {
            p.push(format!("model.family: expected rbf, arc_cosine1 or identity, got `{}`", m.family));
        }
        if m.height == 0 {
            p.push("model.height: must be at least 1, got 0".into());
        } else if m.height > 20 {
            p.push(format!("model.height: at most 20 is supported, got {}", m.height));
        }
        if m.sharing.parse::<OmegaSharing>().is_err() {
            p.push(format!("model.sharing: expected nis_n, iso_n or iso_l, got `{}`", m.sharing));
        }
        if family.is_ok_and(|f| f.uses_spectral_frequencies()) && m.num_features == 0 {
            p.push("model.num_features: must be at least 1 for random-feature kernels".into());
        }
        if !(m.init_amplitude > 0.0 && m.init_amplitude.is_finite()) {
            p.push(format!("model.init_amplitude: must be positive, got {}", m.init_amplitude));
        }
        if !(m.init_lengthscale > 0.0 && m.init_lengthscale.is_finite()) {
            p.push(format!("model.init_lengthscale: must be positive, got {}", m.init_lengthscale));
        }

        match self.train.objective.parse::<Objective>() {
            Err(_) => p.push(format!("train.objective: expected of1 or of2, got `{}`", self.train.objective)),
            Ok(Objective::Of2) if matches!(task, Ok(TaskKind::Regression)) => {
                p.push("train.objective: of2 is only defined for classification".into())
            }
            Ok(_) => {}
        }
        let probe = TrainConfig { objective: Objective::Of1, ..self.train_config_unchecked() };
        p.extend(probe.problems().into_iter().map(|e| format!("train.{e}")));

        let f = &self.folds;
        if f.n_folds == 0 {
            p.push("folds.n_folds: must be at least 1".into());
        }
        if !(f.test_fraction > 0.0 && f.test_fraction < 1.0) {
            p.push(format!("folds.test_fraction: must lie in (0, 1), got {}", f.test_fraction));
        }
        p
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(GphmeError::Config(p).into())
        }
    }

    fn train_config_unchecked(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            batch_size: t.batch_size,
            n_mc_train: t.n_mc_train,
            n_mc_eval: t.n_mc_eval,
            learning_rate: t.learning_rate,
            adam_betas: t.adam_betas,
            adam_epsilon: t.adam_epsilon,
            epochs: t.epochs,
            max_minutes: t.max_minutes,
            objective: t.objective.parse().unwrap_or(Objective::Of1),
            penalty_base: t.penalty_base,
            seed: self.seed,
            clip_norm: t.clip_norm,
            freeze_hyperparameters: self.model.freeze_hyperparameters,
            snapshot_every: t.snapshot_every,
        }
    }

    /// The library training config; call [`RunConfig::validate`] first.
    pub fn train_config(&self) -> TrainConfig {
        self.train_config_unchecked()
    }

    pub fn task_kind(&self) -> TaskKind {
        self.data.task.parse().unwrap_or(TaskKind::Classification)
    }

    pub fn csv_schema(&self) -> CsvSchema {
        CsvSchema {
            task: self.task_kind(),
            target_columns: self.data.target_columns.clone(),
            delimiter: self.data.delimiter,
            has_header: self.data.has_header,
        }
    }

    pub fn model_spec(&self, input_dim: usize, task: Task) -> Result<ModelSpec> {
        let m = &self.model;
        let mut spec = ModelSpec::new(m.family.parse()?, m.height, input_dim, task)
            .with_features(m.num_features)
            .with_sharing(m.sharing.parse()?);
        spec.init_amplitude = m.init_amplitude;
        spec.init_lengthscale = m.init_lengthscale;
        Ok(spec)
    }

    pub fn fold_plan(&self) -> FoldPlan {
        FoldPlan {
            n_folds: self.folds.n_folds,
            test_fraction: self.folds.test_fraction,
            seed: self.folds.seed.unwrap_or(self.seed),
            stratified: self.folds.stratified,
        }
    }

    pub fn label(&self) -> String {
        self.label.clone().unwrap_or_else(|| format!("gphme-{}", self.model.family))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const RINGS: &str = r#"
seed = 3
output_dir = "out"

[data]
synthetic = { kind = "rings", n = 200 }

[model]
family = "rbf"
num_features = 20
height = 2

[train]
epochs = 5
"#;

    #[test]
    fn parses_with_defaults() {
        let cfg = RunConfig::from_toml(RINGS).unwrap();
        assert!(cfg.problems().is_empty(), "{:?}", cfg.problems());
        assert_eq!(cfg.train.batch_size, 128);
        assert_eq!(cfg.model.sharing, "iso_n");
        assert_eq!(cfg.fold_plan().seed, 3);
        let t = cfg.train_config();
        assert_eq!(t.epochs, 5);
        assert_eq!(t.seed, 3);
    }

    #[test]
    fn reports_every_violation() {
        let mut cfg = RunConfig::from_toml(RINGS).unwrap();
        cfg.model.height = 0;
        cfg.model.family = "poly".into();
        cfg.train.batch_size = 0;
        cfg.train.objective = "of3".into();
        cfg.folds.test_fraction = 1.5;
        let p = cfg.problems();
        assert_eq!(p.len(), 5, "{p:?}");
        for field in ["model.height", "model.family", "train.batch_size", "train.objective", "folds.test_fraction"] {
            assert!(p.iter().any(|e| e.starts_with(field)), "{field} missing from {p:?}");
        }
    }

    #[test]
    fn of2_regression_rejected() {
        let mut cfg = RunConfig::from_toml(RINGS).unwrap();
        cfg.data.synthetic = None;
        cfg.data.path = Some("x.csv".into());
        cfg.data.task = "regression".into();
        cfg.train.objective = "of2".into();
        let p = cfg.problems();
        assert!(p.iter().any(|e| e.contains("of2")), "{p:?}");
    }

    #[test]
    fn unknown_keys_rejected() {
        let text = RINGS.replace("height = 2", "heigth = 2");
        assert!(RunConfig::from_toml(&text).is_err());
    }

    #[test]
    fn overrides_take_precedence_and_echo_round_trips() {
        let mut cfg = RunConfig::from_toml(RINGS).unwrap();
        cfg.apply(&Overrides { height: Some(4), seed: Some(9), epochs: Some(1), ..Default::default() });
        assert_eq!(cfg.model.height, 4);
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.train.epochs, 1);
        let back = RunConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(back, cfg);
    }
}
