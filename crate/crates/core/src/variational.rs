//! Factorized Gaussian posteriors with a standard-normal prior.

use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{GphmeError, Result};
use crate::rng::{derive_seed, rng_from};

pub const LOG_STD_MIN: f64 = -10.0;
pub const LOG_STD_MAX: f64 = 4.0;

/// Initial log standard deviation of every posterior factor.
pub const INIT_LOG_STD: f64 = -2.0;
/// Standard deviation of the initial posterior means.
pub const INIT_MEAN_STD: f64 = 0.01;

/// Independent `N(mean_i, exp(log_std_i)²)` factors over a tensor of declared shape.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianVariational {
    pub shape: Vec<usize>,
    pub mean: Vec<f64>,
    pub log_std: Vec<f64>,
}

/// One reparameterized draw: `realized = mean + exp(log_std) ⊙ epsilon`.
#[derive(Clone, Debug, PartialEq)]
pub struct ReparamDraw {
    pub epsilon: Vec<f64>,
    pub realized: Vec<f64>,
    pub seed_tag: u64,
}

impl GaussianVariational {
    pub fn new(shape: Vec<usize>, mean: Vec<f64>, log_std: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if mean.len() != n || log_std.len() != n {
            return Err(GphmeError::input(format!(
                "shape {shape:?} needs {n} entries, got mean {} / log_std {}",
                mean.len(),
                log_std.len()
            )));
        }
        if let Some(v) = mean.iter().chain(&log_std).find(|v| !v.is_finite()) {
            return Err(GphmeError::input(format!("non-finite variational parameter {v}")));
        }
        let mut q = GaussianVariational { shape, mean, log_std };
        q.clamp_log_std();
        Ok(q)
    }

    /// Posterior equal to the N(0, I) prior.
    pub fn prior(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        GaussianVariational {
            shape,
            mean: vec![0.0; n],
            log_std: vec![0.0; n],
        }
    }

    /// Near-deterministic starting point: means ~ N(0, 0.01²), log_std = −2.
    pub fn initialized(shape: Vec<usize>, seed: u64) -> Self {
        let n = shape.iter().product();
        let mut rng = rng_from(seed, &[0x1A17]);
        let normal = Normal::new(0.0, INIT_MEAN_STD).expect("valid normal");
        GaussianVariational {
            shape,
            mean: (0..n).map(|_| normal.sample(&mut rng)).collect(),
            log_std: vec![INIT_LOG_STD; n],
        }
    }

    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }

    pub fn std_dev(&self) -> Vec<f64> {
        self.log_std.iter().map(|l| l.exp()).collect()
    }

    pub fn clamp_log_std(&mut self) {
        for l in &mut self.log_std {
            *l = l.clamp(LOG_STD_MIN, LOG_STD_MAX);
        }
    }

    /// `mean + exp(log_std) ⊙ epsilon`.
    pub fn realize(&self, epsilon: &[f64]) -> Vec<f64> {
        debug_assert_eq!(epsilon.len(), self.len());
        self.mean
            .iter()
            .zip(&self.log_std)
            .zip(epsilon)
            .map(|((m, l), e)| m + l.exp() * e)
            .collect()
    }

    /// Standard-normal noise for one draw, keyed by `seed_tag`.
    pub fn epsilon(&self, seed_tag: u64) -> Vec<f64> {
        let mut rng = rng_from(seed_tag, &[0xE75]);
        (0..self.len()).map(|_| StandardNormal.sample(&mut rng)).collect()
    }

    pub fn sample(&self, n_mc: usize, seed: u64) -> Result<Vec<ReparamDraw>> {
        if n_mc == 0 {
            return Err(GphmeError::input("number of Monte-Carlo draws must be at least 1"));
        }
        Ok((0..n_mc as u64)
            .map(|r| {
                let seed_tag = derive_seed(seed, &[r]);
                let epsilon = self.epsilon(seed_tag);
                let realized = self.realize(&epsilon);
                ReparamDraw {
                    epsilon,
                    realized,
                    seed_tag,
                }
            })
            .collect())
    }

    pub fn kl_to_standard_normal(&self) -> f64 {
        self.mean
            .iter()
            .zip(&self.log_std)
            .map(|(m, l)| 0.5 * ((2.0 * l).exp() + m * m - 1.0 - 2.0 * l))
            .sum()
    }

    /// `(∂KL/∂mean, ∂KL/∂log_std) = (m, s² − 1)`.
    pub fn kl_gradient(&self) -> (Vec<f64>, Vec<f64>) {
        let d_mean = self.mean.clone();
        let d_log_std = self.log_std.iter().map(|l| (2.0 * l).exp() - 1.0).collect();
        (d_mean, d_log_std)
    }
}

pub fn sample(q: &GaussianVariational, n_mc: usize, seed: u64) -> Result<Vec<ReparamDraw>> {
    q.sample(n_mc, seed)
}

pub fn kl_to_standard_normal(q: &GaussianVariational) -> f64 {
    q.kl_to_standard_normal()
}

pub fn kl_gradient(q: &GaussianVariational) -> (Vec<f64>, Vec<f64>) {
    q.kl_gradient()
}
