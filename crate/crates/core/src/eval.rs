//! Metrics, the Welch t-test, fold aggregation and report rendering.

use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{make_folds, standardize, Dataset, FoldPlan, Targets};
use crate::error::{GphmeError, Result};
use crate::model::{predict, ModelSpec, Predictions, TreeModel};
use crate::rng::derive_seed;
use crate::train::{fit, TrainConfig};

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

fn check_len(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(GphmeError::input(format!("length mismatch: {a} predictions vs {b} targets")));
    }
    if a == 0 {
        return Err(GphmeError::input("metrics need at least one sample"));
    }
    Ok(())
}

/// Fraction of rows whose argmax class equals the label.
pub fn accuracy(probs: &[f64], num_classes: usize, labels: &[usize]) -> Result<f64> {
    if num_classes == 0 || !probs.len().is_multiple_of(num_classes) {
        return Err(GphmeError::input("probability matrix is ragged"));
    }
    check_len(probs.len() / num_classes, labels.len())?;
    let hits = probs
        .chunks(num_classes)
        .zip(labels)
        .filter(|(p, y)| argmax(p) == **y)
        .count();
    Ok(hits as f64 / labels.len() as f64)
}

pub fn mse(predictions: &[f64], targets: &[f64]) -> Result<f64> {
    check_len(predictions.len(), targets.len())?;
    let s: f64 = predictions.iter().zip(targets).map(|(p, t)| (p - t).powi(2)).sum();
    Ok(s / targets.len() as f64)
}

/// Mean negative log-probability of the true class.
pub fn mnll_classification(probs: &[f64], num_classes: usize, labels: &[usize]) -> Result<f64> {
    if num_classes == 0 || !probs.len().is_multiple_of(num_classes) {
        return Err(GphmeError::input("probability matrix is ragged"));
    }
    check_len(probs.len() / num_classes, labels.len())?;
    let s: f64 = probs
        .chunks(num_classes)
        .zip(labels)
        .map(|(p, &y)| -p[y].max(f64::MIN_POSITIVE).ln())
        .sum();
    Ok(s / labels.len() as f64)
}

/// Mean Gaussian negative log-density, averaged over samples (summed over outputs).
pub fn mnll_regression(mean: &[f64], variance: &[f64], targets: &[f64], num_outputs: usize) -> Result<f64> {
    check_len(mean.len(), targets.len())?;
    check_len(variance.len(), targets.len())?;
    if num_outputs == 0 || !targets.len().is_multiple_of(num_outputs) {
        return Err(GphmeError::input("target matrix is ragged"));
    }
    let s: f64 = mean
        .iter()
        .zip(variance)
        .zip(targets)
        .map(|((m, v), y)| 0.5 * ((2.0 * std::f64::consts::PI * v).ln() + (y - m).powi(2) / v))
        .sum();
    Ok(s / (targets.len() / num_outputs) as f64)
}

/// MNLL under a prediction block, dispatching on task.
pub fn mnll(pred: &Predictions, data: &Dataset) -> Result<f64> {
    match (pred, data.targets()) {
        (Predictions::Classification { probs, num_classes }, Targets::Labels { labels, .. }) => {
            mnll_classification(probs, *num_classes, labels)
        }
        (Predictions::Regression { mean, variance, num_outputs }, Targets::Values { values, .. }) => {
            mnll_regression(mean, variance, values, *num_outputs)
        }
        _ => Err(GphmeError::input("prediction task does not match dataset task")),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WelchResult {
    pub t: f64,
    pub df: f64,
    pub p_value: f64,
}

fn mean_var(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    let v = x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, v)
}

/// Unequal-variance two-sample t-test with a two-sided p-value.
pub fn welch_t_test(a: &[f64], b: &[f64]) -> Result<WelchResult> {
    if a.len() < 2 || b.len() < 2 {
        return Err(GphmeError::input("Welch t-test needs at least 2 values per sample"));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(GphmeError::input("Welch t-test inputs must be finite"));
    }
    let (ma, va) = mean_var(a);
    let (mb, vb) = mean_var(b);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (sa, sb) = (va / na, vb / nb);
    let se2 = sa + sb;
    if se2 == 0.0 {
        return Ok(if ma == mb {
            WelchResult { t: 0.0, df: na + nb - 2.0, p_value: 1.0 }
        } else {
            WelchResult {
                t: if ma > mb { f64::INFINITY } else { f64::NEG_INFINITY },
                df: na + nb - 2.0,
                p_value: 0.0,
            }
        });
    }
    let t = (ma - mb) / se2.sqrt();
    let df = se2 * se2 / (sa * sa / (na - 1.0) + sb * sb / (nb - 1.0));
    Ok(WelchResult { t, df, p_value: student_t_two_sided(t, df) })
}

/// P(|T| ≥ |t|) for Student's t with `df` degrees of freedom.
pub fn student_t_two_sided(t: f64, df: f64) -> f64 {
    if t == 0.0 {
        return 1.0;
    }
    let x = df / (df + t * t);
    regularized_incomplete_beta(0.5 * df, 0.5, x).clamp(0.0, 1.0)
}

const LANCZOS: [f64; 9] = [
    0.999_999_999_999_809_9,
    676.520_368_121_885_1,
    -1_259.139_216_722_402_8,
    771.323_428_777_653_1,
    -176.615_029_162_140_6,
    12.507_343_278_686_905,
    -0.138_571_095_265_720_12,
    9.984_369_578_019_572e-6,
    1.505_632_735_149_311_6e-7,
];

/// Natural log of the gamma function for x > 0 (Lanczos, g = 7).
pub fn ln_gamma(x: f64) -> f64 {
    if x < 0.5 {
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = LANCZOS[0];
    let t = x + 7.5;
    for (i, c) in LANCZOS.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

/// I_x(a, b) via the modified Lentz continued fraction.
pub fn regularized_incomplete_beta(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    if x < (a + 1.0) / (a + b + 2.0) {
        ln_front.exp() * beta_continued_fraction(a, b, x) / a
    } else {
        1.0 - ln_front.exp() * beta_continued_fraction(b, a, 1.0 - x) / b
    }
}

fn beta_continued_fraction(a: f64, b: f64, x: f64) -> f64 {
    const TINY: f64 = 1e-300;
    const EPS: f64 = 1e-16;
    let (qab, qap, qam) = (a + b, a + 1.0, a - 1.0);
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..10_000 {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < EPS {
            break;
        }
    }
    h
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub name: String,
    pub per_fold: Vec<f64>,
    pub mean: f64,
    /// Sample standard deviation; absent for a single fold.
    pub std: Option<f64>,
}

impl MetricSummary {
    pub fn new(name: &str, per_fold: Vec<f64>) -> Self {
        let n = per_fold.len();
        let mean = per_fold.iter().sum::<f64>() / n as f64;
        let std = (n > 1).then(|| mean_var(&per_fold).1.sqrt());
        MetricSummary { name: name.into(), per_fold, mean, std }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub label: String,
    pub dataset: String,
    pub n_folds: usize,
    pub single_fold: bool,
    pub metrics: Vec<MetricSummary>,
    pub tree_size: usize,
    pub minutes_per_fold: Vec<f64>,
    pub mean_minutes: f64,
    pub model_fingerprint: String,
    pub config_fingerprint: String,
}

impl MetricReport {
    pub fn metric(&self, name: &str) -> Option<&MetricSummary> {
        self.metrics.iter().find(|m| m.name == name)
    }

    /// Metric compared between models: accuracy for classification, MSE for regression.
    pub fn headline(&self) -> &MetricSummary {
        self.metric("accuracy").or_else(|| self.metric("mse")).unwrap_or(&self.metrics[0])
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WelchComparison {
    pub metric: String,
    pub model: String,
    pub baseline: String,
    pub model_mean: f64,
    pub baseline_mean: f64,
    #[serde(flatten)]
    pub test: WelchResult,
}

pub fn compare(model: &MetricReport, baseline: &MetricReport) -> Result<WelchComparison> {
    let a = model.headline();
    let b = baseline
        .metric(&a.name)
        .ok_or_else(|| GphmeError::input(format!("baseline report has no `{}` metric", a.name)))?;
    Ok(WelchComparison {
        metric: a.name.clone(),
        model: model.label.clone(),
        baseline: baseline.label.clone(),
        model_mean: a.mean,
        baseline_mean: b.mean,
        test: welch_t_test(&a.per_fold, &b.per_fold)?,
    })
}

fn fmt_summary(m: &MetricSummary) -> String {
    match m.std {
        Some(s) => format!("{:.4} ± {:.4}", m.mean, s),
        None => format!("{:.4} (single fold)", m.mean),
    }
}

/// Aligned plain-text table, one row per report.
pub fn render_table(reports: &[MetricReport], comparison: Option<&WelchComparison>) -> String {
    let mut names: Vec<&str> = Vec::new();
    for r in reports {
        for m in &r.metrics {
            if !names.contains(&m.name.as_str()) {
                names.push(&m.name);
            }
        }
    }
    let mut header = vec!["model".to_string(), "dataset".to_string()];
    header.extend(names.iter().map(|n| n.to_string()));
    header.push("tree size".into());
    header.push("minutes".into());
    let mut rows = vec![header];
    for r in reports {
        let mut row = vec![r.label.clone(), r.dataset.clone()];
        for n in &names {
            row.push(r.metric(n).map(fmt_summary).unwrap_or_else(|| "-".into()));
        }
        row.push(r.tree_size.to_string());
        row.push(format!("{:.2}", r.mean_minutes));
        rows.push(row);
    }
    let widths: Vec<usize> = (0..rows[0].len())
        .map(|c| rows.iter().map(|r| r[c].chars().count()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for (i, row) in rows.iter().enumerate() {
        let cells: Vec<String> = row
            .iter()
            .zip(&widths)
            .map(|(c, w)| format!("{c}{}", " ".repeat(w - c.chars().count())))
            .collect();
        let _ = writeln!(out, "{}", cells.join("  ").trim_end());
        if i == 0 {
            let _ = writeln!(out, "{}", widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().join("  "));
        }
    }
    if let Some(c) = comparison {
        let _ = writeln!(
            out,
            "Welch t-test on {}: {} vs {}: t = {:.4}, df = {:.2}, p = {:.4e}",
            c.metric, c.model, c.baseline, c.test.t, c.test.df, c.test.p_value
        );
    }
    out
}

/// 64-bit FNV-1a digest in hex, used to fingerprint configs and models.
pub fn fingerprint(bytes: &[u8]) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    format!("{h:016x}")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold: usize,
    pub metrics: Vec<(String, f64)>,
    pub minutes: f64,
    pub epochs_run: usize,
}

/// Metrics for a prediction block against a (standardized) dataset.
pub fn score(pred: &Predictions, data: &Dataset) -> Result<Vec<(String, f64)>> {
    let nll = mnll(pred, data)?;
    match (pred, data.targets()) {
        (Predictions::Classification { probs, num_classes }, Targets::Labels { labels, .. }) => Ok(vec![
            ("accuracy".into(), accuracy(probs, *num_classes, labels)?),
            ("mnll".into(), nll),
        ]),
        (Predictions::Regression { mean, .. }, Targets::Values { values, .. }) => Ok(vec![
            ("mse".into(), mse(mean, values)?),
            ("mnll".into(), nll),
        ]),
        _ => Err(GphmeError::input("prediction task does not match dataset task")),
    }
}

/// Aggregates per-fold results into a report.
pub fn aggregate(label: &str, dataset: &str, tree_size: usize, folds: &[FoldResult]) -> Result<MetricReport> {
    let first = folds.first().ok_or_else(|| GphmeError::input("no folds to aggregate"))?;
    let metrics = first
        .metrics
        .iter()
        .enumerate()
        .map(|(i, (name, _))| MetricSummary::new(name, folds.iter().map(|f| f.metrics[i].1).collect()))
        .collect();
    let minutes_per_fold: Vec<f64> = folds.iter().map(|f| f.minutes).collect();
    Ok(MetricReport {
        label: label.into(),
        dataset: dataset.into(),
        n_folds: folds.len(),
        single_fold: folds.len() == 1,
        metrics,
        tree_size,
        mean_minutes: minutes_per_fold.iter().sum::<f64>() / folds.len() as f64,
        minutes_per_fold,
        model_fingerprint: String::new(),
        config_fingerprint: String::new(),
    })
}

/// Runs the fold protocol: per fold, standardize on the training rows, build a
/// fresh model from `spec`, train it and score the held-out rows.
pub fn cross_validate(
    label: &str,
    data: &Dataset,
    plan: &FoldPlan,
    spec: &ModelSpec,
    config: &TrainConfig,
) -> Result<(MetricReport, Vec<TreeModel>)> {
    let folds = make_folds(data, plan)?;
    let mut results = Vec::with_capacity(folds.len());
    let mut models = Vec::with_capacity(folds.len());
    for (i, fold) in folds.iter().enumerate() {
        let start = Instant::now();
        let (train, test, _) = standardize(data, &fold.train, &fold.test);
        let seed = derive_seed(config.seed, &[0xC5, i as u64]);
        let mut model = TreeModel::new(spec, seed)?;
        let cfg = TrainConfig { seed, ..config.clone() };
        let report = fit(&mut model, &train, &cfg, None, &mut |_| {})?;
        let pred = predict(&model, test.features(), config.n_mc_eval, derive_seed(seed, &[0xE7]))?;
        let metrics = score(&pred, &test)?;
        log::info!("{label} fold {i}: {metrics:?}");
        results.push(FoldResult {
            fold: i,
            metrics,
            minutes: start.elapsed().as_secs_f64() / 60.0,
            epochs_run: report.epochs.len(),
        });
        models.push(model);
    }
    let tree_size = models[0].tree_size();
    let mut report = aggregate(label, &data.name, tree_size, &results)?;
    report.config_fingerprint = fingerprint(
        format!("{}{}", serde_json::to_string(spec)?, serde_json::to_string(config)?).as_bytes(),
    );
    let mut all = Vec::new();
    for m in &models {
        all.extend_from_slice(serde_json::to_string(m)?.as_bytes());
    }
    report.model_fingerprint = fingerprint(&all);
    Ok((report, models))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use statrs::distribution::{ContinuousCDF, StudentsT};

    #[test]
    fn accuracy_examples() {
        let probs = [0.9, 0.1, 0.2, 0.8, 0.6, 0.4, 0.3, 0.7];
        assert_eq!(accuracy(&probs, 2, &[0, 1, 0, 1]).unwrap(), 1.0);
        assert_eq!(accuracy(&probs, 2, &[0, 1, 1, 1]).unwrap(), 0.75);
        // Uniform rows break ties toward class 0.
        assert_eq!(accuracy(&[0.5, 0.5, 0.5, 0.5], 2, &[0, 1]).unwrap(), 0.5);
        assert_eq!(argmax(&[0.2, 0.4, 0.4]), 1);
        assert!(accuracy(&probs, 2, &[0, 1]).is_err());
    }

    #[test]
    fn mse_examples() {
        assert_eq!(mse(&[0.0, 1.0], &[1.0, 1.0]).unwrap(), 0.5);
        assert_eq!(mse(&[3.0, 4.0], &[3.0, 4.0]).unwrap(), 0.0);
        // Predicting the mean of standardized targets gives their variance, 1.
        let d = crate::data::synth_rings(200, 0.2, 3).unwrap();
        let y: Vec<f64> = d.features().iter().step_by(2).copied().collect();
        let s = d.feature_stats();
        let z: Vec<f64> = y.iter().map(|v| (v - s.mean[0]) / s.std[0]).collect();
        assert!((mse(&vec![0.0; z.len()], &z).unwrap() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn mnll_examples() {
        for k in [2usize, 3, 7, 10] {
            let p = vec![1.0 / k as f64; 2 * k];
            assert!((mnll_classification(&p, k, &[0, k - 1]).unwrap() - (k as f64).ln()).abs() < 1e-12);
        }
        assert_eq!(mnll_classification(&[1.0, 0.0], 2, &[0]).unwrap(), 0.0);
        let v = mnll_classification(&[0.5, 0.5, 0.75, 0.25], 2, &[0, 1]).unwrap();
        assert!((v - 1.03972).abs() < 1e-5);
        let r = mnll_regression(&[0.0], &[1.0], &[0.0], 1).unwrap();
        assert!((r - 0.5 * (2.0 * std::f64::consts::PI).ln()).abs() < 1e-12);
    }

    #[test]
    fn welch_examples() {
        let same = welch_t_test(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!((same.t, same.p_value), (0.0, 1.0));
        let w = welch_t_test(&[1.0, 2.0, 3.0, 4.0, 5.0], &[2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert!((w.t + 1.0).abs() < 1e-12);
        assert!((w.df - 8.0).abs() < 1e-12);
        assert!((w.p_value - 0.3466).abs() < 1e-4);
        let reference = 2.0 * StudentsT::new(0.0, 1.0, 8.0).unwrap().cdf(-1.0);
        assert!((w.p_value - reference).abs() < 1e-10);

        let far = welch_t_test(&[0.1, 0.12, 0.11, 0.13], &[0.9, 0.91, 0.93, 0.92]).unwrap();
        assert!(far.p_value < 0.01);
        let flat = welch_t_test(&[1.0, 1.0], &[1.0, 1.0]).unwrap();
        assert_eq!(flat.p_value, 1.0);
        assert!(welch_t_test(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn student_t_matches_reference() {
        for df in [1.0, 2.5, 4.0, 8.0, 17.3, 60.0, 400.0] {
            let dist = StudentsT::new(0.0, 1.0, df).unwrap();
            for t in [0.01, 0.3, 1.0, 2.2, 5.0, 12.0] {
                let ours = student_t_two_sided(t, df);
                let theirs = 2.0 * dist.cdf(-t);
                assert!((ours - theirs).abs() <= 1e-10 * theirs.max(1e-3), "df {df} t {t}: {ours} vs {theirs}");
            }
        }
    }

    #[test]
    fn ln_gamma_values() {
        assert!(ln_gamma(1.0).abs() < 1e-13);
        assert!((ln_gamma(5.0) - 24f64.ln()).abs() < 1e-12);
        assert!((ln_gamma(0.5) - std::f64::consts::PI.sqrt().ln()).abs() < 1e-13);
    }

    #[test]
    fn aggregation_matches_manual() {
        let folds: Vec<FoldResult> = [0.9, 0.8, 1.0]
            .iter()
            .enumerate()
            .map(|(i, v)| FoldResult { fold: i, metrics: vec![("accuracy".into(), *v)], minutes: 1.0, epochs_run: 1 })
            .collect();
        let r = aggregate("m", "d", 3, &folds).unwrap();
        assert!((r.metrics[0].mean - 0.9).abs() < 1e-12);
        assert!((r.metrics[0].std.unwrap() - 0.1).abs() < 1e-12);
        let single = aggregate("m", "d", 3, &folds[..1]).unwrap();
        assert!(single.single_fold && single.metrics[0].std.is_none());
        let table = render_table(&[r, single], None);
        assert!(table.contains("0.9000 ± 0.1000") && table.contains("single fold"), "{table}");
    }

    proptest! {
        #[test]
        fn welch_antisymmetric(
            a in proptest::collection::vec(-10.0f64..10.0, 2..8),
            b in proptest::collection::vec(-10.0f64..10.0, 2..8),
        ) {
            let ab = welch_t_test(&a, &b).unwrap();
            let ba = welch_t_test(&b, &a).unwrap();
            prop_assert!((ab.t + ba.t).abs() <= 1e-12 * ab.t.abs().max(1.0));
            prop_assert!((ab.p_value - ba.p_value).abs() <= 1e-12);
        }

        #[test]
        fn accuracy_plus_error_is_one(
            probs in proptest::collection::vec(0.0f64..1.0, 30),
            labels in proptest::collection::vec(0usize..3, 10),
        ) {
            let acc = accuracy(&probs, 3, &labels).unwrap();
            let wrong = probs.chunks(3).zip(&labels).filter(|(p, y)| argmax(p) != **y).count();
            prop_assert!((acc + wrong as f64 / 10.0 - 1.0).abs() < 1e-12);
        }
    }
}
