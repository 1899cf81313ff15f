//! Datasets, CSV ingestion, standardization and the fold protocol.
//!
//! Benchmarks use five independently shuffled train/test splits with one third of
//! the rows held out per split. Standardization statistics are always fitted on the
//! training rows of a split and applied unchanged to its test rows.

use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{GphmeError, Result};
use crate::model::{Target, Task};
use crate::rng::rng_from;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Targets {
    Labels { labels: Vec<usize>, num_classes: usize },
    Values { values: Vec<f64>, dim: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub provenance: String,
    features: Vec<f64>,
    input_dim: usize,
    targets: Targets,
    /// Original label values, indexed by class id (classification only).
    pub class_values: Vec<i64>,
}

impl Dataset {
    pub fn classification(
        name: &str,
        features: Vec<f64>,
        input_dim: usize,
        labels: Vec<usize>,
        num_classes: usize,
    ) -> Result<Self> {
        let data = Dataset {
            name: name.to_string(),
            provenance: "in-memory".into(),
            features,
            input_dim,
            class_values: (0..num_classes as i64).collect(),
            targets: Targets::Labels { labels, num_classes },
        };
        data.validate()?;
        Ok(data)
    }

    pub fn regression(
        name: &str,
        features: Vec<f64>,
        input_dim: usize,
        values: Vec<f64>,
        dim: usize,
    ) -> Result<Self> {
        let data = Dataset {
            name: name.to_string(),
            provenance: "in-memory".into(),
            features,
            input_dim,
            class_values: Vec::new(),
            targets: Targets::Values { values, dim },
        };
        data.validate()?;
        Ok(data)
    }

    fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(GphmeError::input("dataset needs at least one feature column"));
        }
        if !self.features.len().is_multiple_of(self.input_dim) {
            return Err(GphmeError::input("feature matrix is ragged"));
        }
        let n = self.features.len() / self.input_dim;
        if let Some(v) = self.features.iter().find(|v| !v.is_finite()) {
            return Err(GphmeError::input(format!("non-finite feature value {v}")));
        }
        match &self.targets {
            Targets::Labels { labels, num_classes } => {
                if labels.len() != n {
                    return Err(GphmeError::input(format!("{} labels for {n} rows", labels.len())));
                }
                if *num_classes < 2 {
                    return Err(GphmeError::input("classification needs at least 2 classes"));
                }
                if let Some(l) = labels.iter().find(|l| **l >= *num_classes) {
                    return Err(GphmeError::input(format!("label {l} out of range for {num_classes} classes")));
                }
            }
            Targets::Values { values, dim } => {
                if *dim == 0 || values.len() != n * dim {
                    return Err(GphmeError::input(format!(
                        "{} target values for {n} rows of dimension {dim}",
                        values.len()
                    )));
                }
                if let Some(v) = values.iter().find(|v| !v.is_finite()) {
                    return Err(GphmeError::input(format!("non-finite target value {v}")));
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.features.len() / self.input_dim
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn targets(&self) -> &Targets {
        &self.targets
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.input_dim..(i + 1) * self.input_dim]
    }

    pub fn target(&self, i: usize) -> Target<'_> {
        match &self.targets {
            Targets::Labels { labels, .. } => Target::Class(labels[i]),
            Targets::Values { values, dim } => Target::Values(&values[i * dim..(i + 1) * dim]),
        }
    }

    pub fn labels(&self) -> Option<&[usize]> {
        match &self.targets {
            Targets::Labels { labels, .. } => Some(labels),
            Targets::Values { .. } => None,
        }
    }

    pub fn task(&self) -> Task {
        match &self.targets {
            Targets::Labels { num_classes, .. } => Task::Classification { num_classes: *num_classes },
            Targets::Values { dim, .. } => Task::Regression { num_outputs: *dim },
        }
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let mut features = Vec::with_capacity(indices.len() * self.input_dim);
        for &i in indices {
            features.extend_from_slice(self.row(i));
        }
        let targets = match &self.targets {
            Targets::Labels { labels, num_classes } => Targets::Labels {
                labels: indices.iter().map(|&i| labels[i]).collect(),
                num_classes: *num_classes,
            },
            Targets::Values { values, dim } => Targets::Values {
                values: indices
                    .iter()
                    .flat_map(|&i| values[i * dim..(i + 1) * dim].iter().copied())
                    .collect(),
                dim: *dim,
            },
        };
        Dataset {
            name: self.name.clone(),
            provenance: self.provenance.clone(),
            features,
            input_dim: self.input_dim,
            targets,
            class_values: self.class_values.clone(),
        }
    }

    pub fn feature_stats(&self) -> ColumnStats {
        ColumnStats::fit(&self.features, self.input_dim, 0..self.len())
    }

    /// Target statistics for regression data.
    pub fn target_stats(&self) -> Option<ColumnStats> {
        match &self.targets {
            Targets::Values { values, dim } => Some(ColumnStats::fit(values, *dim, 0..self.len())),
            Targets::Labels { .. } => None,
        }
    }

    /// Writes features then targets; classification labels use their original values.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| ingestion(path, e.to_string()))?;
        let mut header: Vec<String> = (0..self.input_dim).map(|d| format!("x{d}")).collect();
        match &self.targets {
            Targets::Labels { .. } => header.push("label".into()),
            Targets::Values { dim, .. } => header.extend((0..*dim).map(|k| format!("y{k}"))),
        }
        w.write_record(&header).map_err(|e| ingestion(path, e.to_string()))?;
        for i in 0..self.len() {
            let mut rec: Vec<String> = self.row(i).iter().map(|v| v.to_string()).collect();
            match self.target(i) {
                Target::Class(y) => rec.push(self.class_values[y].to_string()),
                Target::Values(v) => rec.extend(v.iter().map(|x| x.to_string())),
            }
            w.write_record(&rec).map_err(|e| ingestion(path, e.to_string()))?;
        }
        w.flush()?;
        Ok(())
    }
}

fn ingestion(path: &Path, message: impl Into<String>) -> GphmeError {
    GphmeError::Ingestion {
        path: path.display().to_string(),
        message: message.into(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Classification,
    Regression,
}

impl std::str::FromStr for TaskKind {
    type Err = GphmeError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "classification" => Ok(TaskKind::Classification),
            "regression" => Ok(TaskKind::Regression),
            other => Err(GphmeError::input(format!("unknown task `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CsvSchema {
    pub task: TaskKind,
    /// Zero-based target columns; empty means the last column.
    #[serde(default)]
    pub target_columns: Vec<usize>,
    #[serde(default = "default_delimiter")]
    pub delimiter: char,
    #[serde(default = "default_true")]
    pub has_header: bool,
}

fn default_delimiter() -> char {
    ','
}

fn default_true() -> bool {
    true
}

impl CsvSchema {
    pub fn new(task: TaskKind) -> Self {
        CsvSchema {
            task,
            target_columns: Vec::new(),
            delimiter: ',',
            has_header: true,
        }
    }
}

const MAX_REPORTED_ROWS: usize = 10;

/// Reads a numeric CSV. Every malformed row is collected and reported by line number.
pub fn load_csv(path: &Path, schema: &CsvSchema) -> Result<Dataset> {
    if !schema.delimiter.is_ascii() {
        return Err(ingestion(path, "delimiter must be an ASCII character"));
    }
    let file = std::fs::File::open(path).map_err(|e| ingestion(path, format!("cannot open: {e}")))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(schema.has_header)
        .delimiter(schema.delimiter as u8)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(file);

    let mut width: Option<usize> = None;
    let mut target_cols: Vec<usize> = Vec::new();
    let mut features = Vec::new();
    let mut raw_labels: Vec<i64> = Vec::new();
    let mut values = Vec::new();
    let mut problems: Vec<String> = Vec::new();

    for record in reader.records() {
        let record = record.map_err(|e| ingestion(path, e.to_string()))?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        if record.iter().all(|c| c.is_empty()) {
            continue;
        }
        let w = *width.get_or_insert_with(|| record.len());
        if target_cols.is_empty() {
            target_cols = if schema.target_columns.is_empty() {
                vec![w - 1]
            } else {
                schema.target_columns.clone()
            };
            if let Some(c) = target_cols.iter().find(|c| **c >= w) {
                return Err(ingestion(path, format!("target column {c} out of range for {w} columns")));
            }
            if schema.task == TaskKind::Classification && target_cols.len() != 1 {
                return Err(ingestion(path, "classification takes exactly one label column"));
            }
            if target_cols.len() >= w {
                return Err(ingestion(path, "no feature columns left after removing targets"));
            }
        }
        if record.len() != w {
            problems.push(format!("line {line}: expected {w} fields, found {}", record.len()));
            continue;
        }
        let mut row = Vec::with_capacity(w - target_cols.len());
        let mut bad = None;
        for (c, cell) in record.iter().enumerate() {
            if target_cols.contains(&c) {
                continue;
            }
            match cell.parse::<f64>() {
                Ok(v) if v.is_finite() => row.push(v),
                _ => {
                    bad = Some(format!("line {line}: column {c} is not a finite number (`{cell}`)"));
                    break;
                }
            }
        }
        if bad.is_none() {
            match schema.task {
                TaskKind::Classification => match parse_label(&record[target_cols[0]]) {
                    Some(l) => raw_labels.push(l),
                    None => {
                        bad = Some(format!(
                            "line {line}: label `{}` is not an integer",
                            &record[target_cols[0]]
                        ))
                    }
                },
                TaskKind::Regression => {
                    let mut ys = Vec::with_capacity(target_cols.len());
                    for &c in &target_cols {
                        match record[c].parse::<f64>() {
                            Ok(v) if v.is_finite() => ys.push(v),
                            _ => {
                                bad = Some(format!("line {line}: target `{}` is not a finite number", &record[c]));
                                break;
                            }
                        }
                    }
                    if bad.is_none() {
                        values.extend(ys);
                    }
                }
            }
        }
        match bad {
            Some(msg) => problems.push(msg),
            None => features.extend(row),
        }
    }

    if !problems.is_empty() {
        let total = problems.len();
        problems.truncate(MAX_REPORTED_ROWS);
        let mut msg = format!("{total} malformed row(s): {}", problems.join("; "));
        if total > MAX_REPORTED_ROWS {
            msg.push_str("; ...");
        }
        return Err(ingestion(path, msg));
    }
    let Some(w) = width else {
        return Err(ingestion(path, "file contains no data rows"));
    };
    let input_dim = w - target_cols.len();
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".into());
    let mut data = match schema.task {
        TaskKind::Classification => {
            let distinct: Vec<i64> = raw_labels.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
            if distinct.len() < 2 {
                return Err(ingestion(path, format!("found {} distinct label(s), need at least 2", distinct.len())));
            }
            let labels = raw_labels
                .iter()
                .map(|l| distinct.binary_search(l).expect("label present"))
                .collect();
            let mut d = Dataset::classification(&name, features, input_dim, labels, distinct.len())?;
            d.class_values = distinct;
            d
        }
        TaskKind::Regression => Dataset::regression(&name, features, input_dim, values, target_cols.len())?,
    };
    data.provenance = path.display().to_string();
    Ok(data)
}

/// Unlabelled numeric rows, e.g. prediction inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureRows {
    /// Row-major values.
    pub values: Vec<f64>,
    /// Columns per row after dropping ignored ones; `None` for an empty file.
    pub width: Option<usize>,
}

impl FeatureRows {
    pub fn len(&self) -> usize {
        match self.width {
            Some(w) if w > 0 => self.values.len() / w,
            _ => 0,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Reads a numeric CSV without targets, skipping the zero-based `ignore` columns.
pub fn load_feature_rows(path: &Path, delimiter: char, has_header: bool, ignore: &[usize]) -> Result<FeatureRows> {
    if !delimiter.is_ascii() {
        return Err(ingestion(path, "delimiter must be an ASCII character"));
    }
    let file = std::fs::File::open(path).map_err(|e| ingestion(path, format!("cannot open: {e}")))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(has_header)
        .delimiter(delimiter as u8)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(file);
    let mut width: Option<usize> = None;
    let mut values = Vec::new();
    let mut problems: Vec<String> = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| ingestion(path, e.to_string()))?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        if record.iter().all(|c| c.is_empty()) {
            continue;
        }
        let w = *width.get_or_insert(record.len());
        if record.len() != w {
            problems.push(format!("line {line}: expected {w} fields, found {}", record.len()));
            continue;
        }
        let mut row = Vec::with_capacity(w);
        let mut bad = None;
        for (c, cell) in record.iter().enumerate() {
            if ignore.contains(&c) {
                continue;
            }
            match cell.parse::<f64>() {
                Ok(v) if v.is_finite() => row.push(v),
                _ => {
                    bad = Some(format!("line {line}: column {c} is not a finite number (`{cell}`)"));
                    break;
                }
            }
        }
        match bad {
            Some(msg) => problems.push(msg),
            None => values.extend(row),
        }
    }
    if !problems.is_empty() {
        let total = problems.len();
        problems.truncate(MAX_REPORTED_ROWS);
        return Err(ingestion(path, format!("{total} malformed row(s): {}", problems.join("; "))));
    }
    let width = width.map(|w| w - ignore.iter().filter(|&&c| c < w).count());
    Ok(FeatureRows { values, width })
}

fn parse_label(cell: &str) -> Option<i64> {
    if let Ok(v) = cell.parse::<i64>() {
        return Some(v);
    }
    match cell.parse::<f64>() {
        Ok(v) if v.is_finite() && v.fract() == 0.0 && v.abs() < 9.0e15 => Some(v as i64),
        _ => None,
    }
}

/// Per-column mean and (population) standard deviation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColumnStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ColumnStats {
    fn fit(values: &[f64], dim: usize, rows: impl Iterator<Item = usize> + Clone) -> Self {
        let n = rows.clone().count().max(1) as f64;
        let mut mean = vec![0.0; dim];
        for i in rows.clone() {
            for d in 0..dim {
                mean[d] += values[i * dim + d];
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; dim];
        for i in rows {
            for d in 0..dim {
                var[d] += (values[i * dim + d] - mean[d]).powi(2);
            }
        }
        let std = var.iter().map(|v| (v / n).sqrt()).collect();
        ColumnStats { mean, std }
    }

    fn guard_zero_variance(&mut self, what: &str) {
        for (d, s) in self.std.iter_mut().enumerate() {
            if !(*s > 1e-12) {
                log::warn!("{what} column {d} has zero variance; leaving it unscaled");
                *s = 1.0;
            }
        }
    }

    pub fn apply(&self, values: &mut [f64]) {
        let dim = self.mean.len();
        for (i, v) in values.iter_mut().enumerate() {
            let d = i % dim;
            *v = (*v - self.mean[d]) / self.std[d];
        }
    }

    pub fn invert(&self, values: &mut [f64]) {
        let dim = self.mean.len();
        for (i, v) in values.iter_mut().enumerate() {
            let d = i % dim;
            *v = *v * self.std[d] + self.mean[d];
        }
    }
}

/// Feature (and, for regression, target) standardization fitted on training rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub features: ColumnStats,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub targets: Option<ColumnStats>,
}

impl Standardizer {
    pub fn fit(data: &Dataset, train: &[usize]) -> Self {
        let mut features = ColumnStats::fit(&data.features, data.input_dim, train.iter().copied());
        features.guard_zero_variance("feature");
        let targets = match &data.targets {
            Targets::Values { values, dim } => {
                let mut s = ColumnStats::fit(values, *dim, train.iter().copied());
                s.guard_zero_variance("target");
                Some(s)
            }
            Targets::Labels { .. } => None,
        };
        Standardizer { features, targets }
    }

    pub fn apply(&self, data: &Dataset) -> Dataset {
        let mut out = data.clone();
        self.features.apply(&mut out.features);
        if let (Some(stats), Targets::Values { values, .. }) = (&self.targets, &mut out.targets) {
            stats.apply(values);
        }
        out
    }

    pub fn transform_features(&self, rows: &[f64]) -> Vec<f64> {
        let mut out = rows.to_vec();
        self.features.apply(&mut out);
        out
    }

    pub fn unstandardize(&self, data: &Dataset) -> Dataset {
        let mut out = data.clone();
        self.features.invert(&mut out.features);
        if let (Some(stats), Targets::Values { values, .. }) = (&self.targets, &mut out.targets) {
            stats.invert(values);
        }
        out
    }
}

/// Fits statistics on `train` rows and returns the standardized train and test splits.
pub fn standardize(data: &Dataset, train: &[usize], test: &[usize]) -> (Dataset, Dataset, Standardizer) {
    let st = Standardizer::fit(data, train);
    let tr = st.apply(&data.subset(train));
    let te = st.apply(&data.subset(test));
    (tr, te, st)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub n_folds: usize,
    pub test_fraction: f64,
    pub seed: u64,
    pub stratified: bool,
}

impl Default for FoldPlan {
    fn default() -> Self {
        FoldPlan {
            n_folds: 5,
            test_fraction: 1.0 / 3.0,
            seed: 0,
            stratified: true,
        }
    }
}

impl FoldPlan {
    pub fn fold_seed(&self, fold: usize) -> u64 {
        crate::rng::derive_seed(self.seed, &[0xF01D, fold as u64])
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Independent shuffled train/test splits, one per fold.
pub fn make_folds(data: &Dataset, plan: &FoldPlan) -> Result<Vec<Fold>> {
    let n = data.len();
    if plan.n_folds == 0 {
        return Err(GphmeError::input("fold plan needs at least one fold"));
    }
    if !(plan.test_fraction > 0.0 && plan.test_fraction < 1.0) {
        return Err(GphmeError::input(format!("test fraction {} outside (0, 1)", plan.test_fraction)));
    }
    let n_test = (n as f64 * plan.test_fraction).round() as usize;
    if n_test == 0 || n_test >= n {
        return Err(GphmeError::input(format!(
            "{n} rows cannot be split with test fraction {}",
            plan.test_fraction
        )));
    }

    let mut by_class: Option<Vec<Vec<usize>>> = None;
    if plan.stratified {
        if let Targets::Labels { labels, num_classes } = &data.targets {
            let mut groups = vec![Vec::new(); *num_classes];
            for (i, &l) in labels.iter().enumerate() {
                groups[l].push(i);
            }
            if groups.iter().any(|g| !g.is_empty() && g.len() < plan.n_folds) {
                log::warn!("a class has fewer than {} members; falling back to unstratified folds", plan.n_folds);
            } else {
                by_class = Some(groups);
            }
        }
    }

    let folds = (0..plan.n_folds)
        .map(|f| {
            let mut rng = rng_from(plan.fold_seed(f), &[]);
            let mut test = match &by_class {
                None => {
                    let mut idx: Vec<usize> = (0..n).collect();
                    idx.shuffle(&mut rng);
                    idx.truncate(n_test);
                    idx
                }
                Some(groups) => {
                    let quotas = stratified_quotas(groups, n_test);
                    let mut test = Vec::with_capacity(n_test);
                    for (g, q) in groups.iter().zip(quotas) {
                        let mut idx = g.clone();
                        idx.shuffle(&mut rng);
                        test.extend_from_slice(&idx[..q]);
                    }
                    test
                }
            };
            test.sort_unstable();
            let mut is_test = vec![false; n];
            test.iter().for_each(|&i| is_test[i] = true);
            let train = (0..n).filter(|&i| !is_test[i]).collect();
            Fold { train, test }
        })
        .collect();
    Ok(folds)
}

/// Largest-remainder allocation of `n_test` rows across classes.
fn stratified_quotas(groups: &[Vec<usize>], n_test: usize) -> Vec<usize> {
    let n: usize = groups.iter().map(Vec::len).sum();
    let exact: Vec<f64> = groups
        .iter()
        .map(|g| g.len() as f64 * n_test as f64 / n as f64)
        .collect();
    let mut quotas: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut order: Vec<usize> = (0..groups.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.partial_cmp(&ra).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
    });
    let mut left = n_test - quotas.iter().sum::<usize>();
    for &c in order.iter().cycle() {
        if left == 0 {
            break;
        }
        if quotas[c] < groups[c].len() {
            quotas[c] += 1;
            left -= 1;
        }
    }
    quotas
}

/// Two concentric 2-D rings: class 0 at radius 1, class 1 at radius 3, with
/// Gaussian radial noise of standard deviation `noise`.
pub fn synth_rings(n: usize, noise: f64, seed: u64) -> Result<Dataset> {
    if n < 4 {
        return Err(GphmeError::input(format!("rings need at least 4 samples, got {n}")));
    }
    if !(noise >= 0.0 && noise.is_finite()) {
        return Err(GphmeError::input(format!("ring noise must be non-negative, got {noise}")));
    }
    let mut rng = rng_from(seed, &[0x215C]);
    let mut features = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % 2;
        let theta = rng.random_range(0.0..std::f64::consts::TAU);
        let eps: f64 = StandardNormal.sample(&mut rng);
        let r = if label == 0 { 1.0 } else { 3.0 } + noise * eps;
        features.push(r * theta.cos());
        features.push(r * theta.sin());
        labels.push(label);
    }
    let mut d = Dataset::classification("rings", features, 2, labels, 2)?;
    d.provenance = format!("synth_rings(n={n}, noise={noise}, seed={seed})");
    Ok(d)
}
