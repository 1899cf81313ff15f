use rayon::prelude::*;

use super::forward::logsumexp;
use super::{Task, TreeModel};
use crate::error::{GphmeError, Result};

/// Posterior-predictive summaries for a block of rows.
#[derive(Clone, Debug, PartialEq)]
pub enum Predictions {
    /// Class probabilities, `rows × num_classes` row-major.
    Classification { probs: Vec<f64>, num_classes: usize },
    /// Predictive mean and variance, `rows × num_outputs` row-major.
    Regression { mean: Vec<f64>, variance: Vec<f64>, num_outputs: usize },
}

impl Predictions {
    pub fn len(&self) -> usize {
        match self {
            Predictions::Classification { probs, num_classes } => probs.len() / num_classes,
            Predictions::Regression { mean, num_outputs, .. } => mean.len() / num_outputs,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn class_probs(&self, row: usize) -> Option<&[f64]> {
        match self {
            Predictions::Classification { probs, num_classes } => {
                Some(&probs[row * num_classes..(row + 1) * num_classes])
            }
            _ => None,
        }
    }

    /// Argmax labels, ties resolved toward the lowest class index.
    pub fn labels(&self) -> Option<Vec<usize>> {
        let n = self.len();
        match self {
            Predictions::Classification { .. } => Some(
                (0..n)
                    .map(|i| crate::eval::argmax(self.class_probs(i).expect("classification")))
                    .collect(),
            ),
            _ => None,
        }
    }
}

/// Monte-Carlo posterior predictive.
///
/// The `n_mc` parameter draws are shared by all rows, so a row's prediction does
/// not depend on which other rows are in `rows`. Classification averages the
/// normalized class distribution `softmax_k(log Q^k)` over draws; regression
/// reports the mixture mean and the total (draw, mixture and noise) variance.
pub fn predict(model: &TreeModel, rows: &[f64], n_mc: usize, seed: u64) -> Result<Predictions> {
    let d = model.input_dim;
    if !rows.len().is_multiple_of(d) {
        return Err(GphmeError::input(format!(
            "input holds {} values, not a multiple of D_x = {d}",
            rows.len()
        )));
    }
    let noise = model.sample_noise(n_mc, seed)?;
    let realized: Vec<_> = noise.draws.iter().map(|dr| model.realize(dr)).collect();
    let out = model.task.output_dim();
    let per_row: Vec<(Vec<f64>, Vec<f64>)> = rows
        .par_chunks(d)
        .map(|x| {
            let mut first = vec![0.0; out];
            let mut second = vec![0.0; out];
            for real in &realized {
                let t = model.forward(real, x);
                match model.task {
                    Task::Classification { .. } => {
                        let lse = logsumexp(&t.class_log_scores);
                        for k in 0..out {
                            first[k] += (t.class_log_scores[k] - lse).exp();
                        }
                    }
                    Task::Regression { .. } => {
                        let p = t.path_probs();
                        for (leaf, pl) in p.iter().enumerate() {
                            for (k, z) in t.leaf_output(leaf).iter().enumerate() {
                                first[k] += pl * z;
                                second[k] += pl * z * z;
                            }
                        }
                    }
                }
            }
            let inv = 1.0 / realized.len() as f64;
            first.iter_mut().for_each(|v| *v *= inv);
            second.iter_mut().for_each(|v| *v *= inv);
            (first, second)
        })
        .collect();

    Ok(match model.task {
        Task::Classification { num_classes } => Predictions::Classification {
            probs: per_row.into_iter().flat_map(|(p, _)| p).collect(),
            num_classes,
        },
        Task::Regression { num_outputs } => {
            let noise_var = model.noise_variance();
            let mut mean = Vec::with_capacity(per_row.len() * out);
            let mut variance = Vec::with_capacity(per_row.len() * out);
            for (m1, m2) in per_row {
                for k in 0..out {
                    mean.push(m1[k]);
                    variance.push((m2[k] - m1[k] * m1[k]).max(0.0) + noise_var[k]);
                }
            }
            Predictions::Regression {
                mean,
                variance,
                num_outputs,
            }
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::KernelFamily;
    use crate::model::ModelSpec;

    #[test]
    fn zero_weights_predict_uniform() {
        let spec = ModelSpec::new(KernelFamily::Rbf, 2, 2, Task::Classification { num_classes: 4 })
            .with_features(3);
        let mut m = TreeModel::new(&spec, 1).unwrap();
        for q in m.gates.iter_mut().chain(m.experts.iter_mut()) {
            q.mean.iter_mut().for_each(|v| *v = 0.0);
            q.log_std.iter_mut().for_each(|v| *v = -10.0);
        }
        let p = predict(&m, &[0.5, -0.5, 1.0, 2.0], 3, 1).unwrap();
        assert_eq!(p.len(), 2);
        let Predictions::Classification { probs, .. } = &p else { panic!() };
        assert!(probs.iter().all(|v| (v - 0.25).abs() < 1e-4), "{probs:?}");
        assert_eq!(p.labels().unwrap().len(), 2);
    }

    #[test]
    fn collapsed_posterior_matches_single_forward_pass() {
        let spec = ModelSpec::new(KernelFamily::ArcCosine1, 1, 2, Task::Regression { num_outputs: 1 })
            .with_features(4);
        let mut m = TreeModel::new(&spec, 3).unwrap();
        for (i, q) in m.experts.iter_mut().enumerate() {
            q.mean.iter_mut().for_each(|v| *v = 0.3 * (i as f64 + 1.0));
        }
        for g in &mut m.groups {
            g.omega.log_std.iter_mut().for_each(|v| *v = -10.0);
        }
        for q in m.gates.iter_mut().chain(m.experts.iter_mut()) {
            q.log_std.iter_mut().for_each(|v| *v = -10.0);
        }
        let x = [0.7, 0.2];
        let p = predict(&m, &x, 20, 4).unwrap();
        let t = &m.trace(&x, &m.mean_noise()).unwrap()[0];
        let mean: f64 = t.path_probs().iter().enumerate().map(|(l, p)| p * t.leaf_output(l)[0]).sum();
        let Predictions::Regression { mean: pm, variance, .. } = p else { panic!() };
        assert!((pm[0] - mean).abs() < 1e-3);
        assert!(variance[0] >= 0.1 - 1e-12);
    }

    #[test]
    fn monte_carlo_predictions_converge() {
        let data = crate::data::synth_rings(200, 0.2, 1).unwrap();
        let spec = ModelSpec::new(KernelFamily::Rbf, 1, 2, Task::Classification { num_classes: 2 }).with_features(10);
        let mut m = TreeModel::new(&spec, 2).unwrap();
        let cfg = crate::train::TrainConfig { epochs: 5, batch_size: 50, ..Default::default() };
        crate::train::fit(&mut m, &data, &cfg, None, &mut |_| {}).unwrap();
        let rows = &data.features()[..20];
        let a = predict(&m, rows, 2000, 3).unwrap();
        let b = predict(&m, rows, 200, 4).unwrap();
        let (Predictions::Classification { probs: pa, .. }, Predictions::Classification { probs: pb, .. }) = (a, b) else {
            panic!()
        };
        let worst = pa.iter().zip(&pb).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(worst <= 0.02, "{worst}");
    }

    #[test]
    fn predictions_are_row_independent() {
        let spec = ModelSpec::new(KernelFamily::Rbf, 2, 2, Task::Classification { num_classes: 3 })
            .with_features(5);
        let m = TreeModel::new(&spec, 8).unwrap();
        let rows = [0.1, 0.2, -1.0, 0.4, 2.0, 2.0];
        let all = predict(&m, &rows, 5, 2).unwrap();
        let single = predict(&m, &rows[2..4], 5, 2).unwrap();
        assert_eq!(all.class_probs(1).unwrap(), single.class_probs(0).unwrap());
        assert!(predict(&m, &rows[..3], 5, 2).is_err());
    }
}
