//! `predict`: checkpoint + feature CSV → prediction CSV.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use gphme::checkpoint::Checkpoint;
use gphme::data::{load_feature_rows, FeatureRows};
use gphme::eval::argmax;
use gphme::model::{predict, Predictions};

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureInput {
    pub path: PathBuf,
    pub delimiter: char,
    pub has_header: bool,
    /// Zero-based columns to skip, e.g. a label column.
    pub ignore_columns: Vec<usize>,
}

impl FeatureInput {
    pub fn new(path: impl Into<PathBuf>) -> Self {
        FeatureInput { path: path.into(), delimiter: ',', has_header: true, ignore_columns: Vec::new() }
    }

    /// Reads the rows and checks their width against the model's `D_x`.
    pub fn load(&self, input_dim: usize) -> Result<FeatureRows> {
        let rows = load_feature_rows(&self.path, self.delimiter, self.has_header, &self.ignore_columns)?;
        if let Some(w) = rows.width {
            if w != input_dim {
                bail!(
                    "{}: rows have {w} feature columns, the checkpoint expects D_x = {input_dim}",
                    self.path.display()
                );
            }
        }
        Ok(rows)
    }
}

/// Standardized features and predictions for `input` under a checkpoint.
pub fn predict_rows(ck: &Checkpoint, input: &FeatureInput, n_mc: usize, seed: u64) -> Result<Predictions> {
    let rows = input.load(ck.model.input_dim)?;
    let x = match &ck.standardizer {
        Some(st) => st.transform_features(&rows.values),
        None => rows.values,
    };
    Ok(predict(&ck.model, &x, n_mc, seed)?)
}

/// CSV text: class probabilities and the predicted label, or per-output mean and
/// standard deviation on the original target scale.
pub fn render_predictions(ck: &Checkpoint, pred: &Predictions) -> String {
    let mut out = String::new();
    match pred {
        Predictions::Classification { num_classes, .. } => {
            let names: Vec<i64> = ck
                .class_values
                .clone()
                .unwrap_or_else(|| (0..*num_classes as i64).collect());
            let header: Vec<String> = names.iter().map(|v| format!("p_{v}")).collect();
            let _ = writeln!(out, "{},label", header.join(","));
            for i in 0..pred.len() {
                let p = pred.class_probs(i).expect("classification");
                let cells: Vec<String> = p.iter().map(|v| v.to_string()).collect();
                let _ = writeln!(out, "{},{}", cells.join(","), names[argmax(p)]);
            }
        }
        Predictions::Regression { mean, variance, num_outputs } => {
            let k = *num_outputs;
            let header: Vec<String> = (0..k)
                .map(|j| format!("mean_{j}"))
                .chain((0..k).map(|j| format!("std_{j}")))
                .collect();
            let _ = writeln!(out, "{}", header.join(","));
            let stats = ck.standardizer.as_ref().and_then(|s| s.targets.as_ref());
            for i in 0..pred.len() {
                let mut m = mean[i * k..(i + 1) * k].to_vec();
                let mut s: Vec<f64> = variance[i * k..(i + 1) * k].iter().map(|v| v.sqrt()).collect();
                if let Some(st) = stats {
                    st.invert(&mut m);
                    for (j, v) in s.iter_mut().enumerate() {
                        *v *= st.std[j];
                    }
                }
                let cells: Vec<String> = m.iter().chain(&s).map(|v| v.to_string()).collect();
                let _ = writeln!(out, "{}", cells.join(","));
            }
        }
    }
    out
}

/// Writes predictions for every input row to `output` and returns them.
pub fn cmd_predict(checkpoint: &Path, input: &FeatureInput, output: &Path, n_mc: usize, seed: u64) -> Result<Predictions> {
    let ck = Checkpoint::load(checkpoint)?;
    let pred = predict_rows(&ck, input, n_mc, seed)?;
    std::fs::write(output, render_predictions(&ck, &pred)).with_context(|| format!("cannot write {}", output.display()))?;
    Ok(pred)
}
