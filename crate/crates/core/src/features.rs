//! Kernels and their random-feature expansions.
//!
//! Three feature families are supported:
//!
//! * `Rbf`: Bochner features `σ/√J · [sin(x̃ᵀΩ), cos(x̃ᵀΩ)]` (all sines first, then
//!   all cosines), whose inner products estimate the squared-exponential kernel.
//! * `ArcCosine1`: ReLU features `√2σ/√J · max(0, Ωᵀx̃)` for the degree-1
//!   arc-cosine kernel.
//! * `Identity`: `[1, xᵀ]`, which turns every gate into a hyperplane and every
//!   expert into a linear model.
//!
//! Lengthscales act on the input (`x̃_d = x_d / λ_d`) and the spectral prior is
//! always N(0, I).

use std::f64::consts::PI;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{GphmeError, Result};
use crate::rng::rng_from;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelFamily {
    Rbf,
    ArcCosine1,
    Identity,
}

impl KernelFamily {
    pub fn uses_spectral_frequencies(self) -> bool {
        !matches!(self, KernelFamily::Identity)
    }

    /// Length of φ(x) for an input of dimension `input_dim` and `J` frequencies.
    pub fn feature_dim(self, input_dim: usize, num_features: usize) -> usize {
        match self {
            KernelFamily::Rbf => 2 * num_features,
            KernelFamily::ArcCosine1 => num_features,
            KernelFamily::Identity => input_dim + 1,
        }
    }
}

impl std::str::FromStr for KernelFamily {
    type Err = GphmeError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "rbf" => Ok(KernelFamily::Rbf),
            "arc_cosine1" | "arccos" | "arc_cosine" | "arccosine1" => Ok(KernelFamily::ArcCosine1),
            "identity" | "linear" => Ok(KernelFamily::Identity),
            other => Err(GphmeError::input(format!("unknown kernel family `{other}`"))),
        }
    }
}

/// Kernel family, amplitude σ_λ, ARD lengthscales λ_d and feature count J.
#[derive(Clone, Debug, PartialEq)]
pub struct KernelSpec {
    pub family: KernelFamily,
    pub sigma_lambda: f64,
    pub lengthscales: Vec<f64>,
    pub num_features: usize,
}

impl KernelSpec {
    pub fn new(
        family: KernelFamily,
        sigma_lambda: f64,
        lengthscales: Vec<f64>,
        num_features: usize,
    ) -> Result<Self> {
        let spec = KernelSpec {
            family,
            sigma_lambda,
            lengthscales,
            num_features,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Identity spec for `input_dim` inputs; amplitude, lengthscales and J are unused.
    pub fn identity(input_dim: usize) -> Self {
        KernelSpec {
            family: KernelFamily::Identity,
            sigma_lambda: 1.0,
            lengthscales: vec![1.0; input_dim],
            num_features: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lengthscales.is_empty() {
            return Err(GphmeError::input("kernel needs at least one input dimension"));
        }
        if self.family == KernelFamily::Identity {
            return Ok(());
        }
        if !(self.sigma_lambda > 0.0 && self.sigma_lambda.is_finite()) {
            return Err(GphmeError::input(format!(
                "kernel amplitude must be positive, got {}",
                self.sigma_lambda
            )));
        }
        if let Some(l) = self
            .lengthscales
            .iter()
            .find(|l| !(**l > 0.0 && l.is_finite()))
        {
            return Err(GphmeError::input(format!("lengthscales must be positive, got {l}")));
        }
        if self.num_features == 0 {
            return Err(GphmeError::input("number of random features must be at least 1"));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.lengthscales.len()
    }

    fn scale(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.lengthscales)
            .map(|(xi, l)| xi / l)
            .collect()
    }

    fn check_dim(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(GphmeError::input(format!(
                "input has {} dimensions, kernel expects {}",
                x.len(),
                self.input_dim()
            )));
        }
        Ok(())
    }
}

/// A feature map bound to its kernel spec.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub spec: KernelSpec,
    pub output_dim: usize,
}

impl FeatureMap {
    pub fn new(spec: KernelSpec) -> Result<Self> {
        spec.validate()?;
        let output_dim = spec.family.feature_dim(spec.input_dim(), spec.num_features);
        Ok(FeatureMap { spec, output_dim })
    }

    pub fn apply(&self, x: &[f64], omega: Option<&SpectralMatrix>) -> Result<Vec<f64>> {
        apply_feature_map(x, omega, &self.spec)
    }
}

/// Row-major `D_x × J` matrix of spectral frequencies; column `j` is ω_j.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectralMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl SpectralMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(GphmeError::input(format!(
                "spectral matrix {rows}x{cols} needs {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(SpectralMatrix { rows, cols, data })
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }
}

/// σ_λ² · exp(−½ Σ_d (x_d − x2_d)² / λ_d²).
pub fn kernel_rbf(x: &[f64], x2: &[f64], spec: &KernelSpec) -> Result<f64> {
    spec.check_dim(x)?;
    spec.check_dim(x2)?;
    let sq: f64 = x
        .iter()
        .zip(x2)
        .zip(&spec.lengthscales)
        .map(|((a, b), l)| ((a - b) / l).powi(2))
        .sum();
    Ok(spec.sigma_lambda.powi(2) * (-0.5 * sq).exp())
}

/// Degree-1 arc-cosine kernel on lengthscale-scaled inputs.
///
/// Zero-norm inputs yield 0, the limit of the `‖x̃‖‖x̃2‖` prefactor.
pub fn kernel_arccos1(x: &[f64], x2: &[f64], spec: &KernelSpec) -> Result<f64> {
    spec.check_dim(x)?;
    spec.check_dim(x2)?;
    let a = spec.scale(x);
    let b = spec.scale(x2);
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Ok(0.0);
    }
    let cos = (a.iter().zip(&b).map(|(u, v)| u * v).sum::<f64>() / (na * nb)).clamp(-1.0, 1.0);
    let alpha = cos.acos();
    let j1 = alpha.sin() + (PI - alpha) * alpha.cos();
    Ok(spec.sigma_lambda.powi(2) * na * nb / PI * j1)
}

/// Draws a `D_x × J` matrix of i.i.d. standard-normal frequencies.
pub fn sample_spectral_frequencies(spec: &KernelSpec, seed: u64) -> Result<SpectralMatrix> {
    spec.validate()?;
    if !spec.family.uses_spectral_frequencies() {
        return Err(GphmeError::unsupported(
            "identity features have no spectral frequencies",
        ));
    }
    let (rows, cols) = (spec.input_dim(), spec.num_features);
    let mut rng = rng_from(seed, &[0x5EC7]);
    let data = (0..rows * cols)
        .map(|_| StandardNormal.sample(&mut rng))
        .collect();
    SpectralMatrix::new(rows, cols, data)
}

/// φ(x) for the given family. Lengthscale scaling is applied here, not by the caller.
pub fn apply_feature_map(
    x: &[f64],
    omega: Option<&SpectralMatrix>,
    spec: &KernelSpec,
) -> Result<Vec<f64>> {
    spec.check_dim(x)?;
    if spec.family == KernelFamily::Identity {
        return Ok(identity_features(x));
    }
    let omega = omega.ok_or_else(|| {
        GphmeError::input("random-feature families need a spectral frequency matrix")
    })?;
    if omega.rows != spec.input_dim() || omega.cols != spec.num_features {
        return Err(GphmeError::input(format!(
            "spectral matrix is {}x{}, kernel expects {}x{}",
            omega.rows,
            omega.cols,
            spec.input_dim(),
            spec.num_features
        )));
    }
    let inv_ls: Vec<f64> = spec.lengthscales.iter().map(|l| 1.0 / l).collect();
    let params = FeatureParams {
        family: spec.family,
        omega: &omega.data,
        num_features: spec.num_features,
        amplitude: spec.sigma_lambda,
        inv_lengthscales: &inv_ls,
    };
    Ok(params.forward(x).phi)
}

/// φ(x)ᵀφ(x2), the random-feature estimate of the kernel.
pub fn kernel_estimate(
    x: &[f64],
    x2: &[f64],
    omega: Option<&SpectralMatrix>,
    spec: &KernelSpec,
) -> Result<f64> {
    let a = apply_feature_map(x, omega, spec)?;
    let b = apply_feature_map(x2, omega, spec)?;
    Ok(dot(&a, &b))
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(u, v)| u * v).sum()
}

fn identity_features(x: &[f64]) -> Vec<f64> {
    let mut phi = Vec::with_capacity(x.len() + 1);
    phi.push(1.0);
    phi.extend_from_slice(x);
    phi
}

/// Realized feature-map parameters for one Ω group.
pub(crate) struct FeatureParams<'a> {
    pub family: KernelFamily,
    pub omega: &'a [f64],
    pub num_features: usize,
    pub amplitude: f64,
    pub inv_lengthscales: &'a [f64],
}

/// Intermediate values of one feature evaluation, kept for the backward pass.
#[derive(Clone, Debug, Default)]
pub(crate) struct FeatureActivation {
    pub scaled: Vec<f64>,
    pub proj: Vec<f64>,
    pub phi: Vec<f64>,
}

impl FeatureParams<'_> {
    pub fn forward(&self, x: &[f64]) -> FeatureActivation {
        if self.family == KernelFamily::Identity {
            return FeatureActivation {
                phi: identity_features(x),
                ..Default::default()
            };
        }
        let j_count = self.num_features;
        let scaled: Vec<f64> = x
            .iter()
            .zip(self.inv_lengthscales)
            .map(|(xi, il)| xi * il)
            .collect();
        let mut proj = vec![0.0; j_count];
        for (i, xi) in scaled.iter().enumerate() {
            let row = &self.omega[i * j_count..(i + 1) * j_count];
            for (p, w) in proj.iter_mut().zip(row) {
                *p += xi * w;
            }
        }
        let phi = match self.family {
            KernelFamily::Rbf => {
                let c = self.amplitude / (j_count as f64).sqrt();
                let mut phi = vec![0.0; 2 * j_count];
                for (j, a) in proj.iter().enumerate() {
                    let (s, co) = a.sin_cos();
                    phi[j] = c * s;
                    phi[j_count + j] = c * co;
                }
                phi
            }
            KernelFamily::ArcCosine1 => {
                let c = std::f64::consts::SQRT_2 * self.amplitude / (j_count as f64).sqrt();
                proj.iter().map(|a| c * a.max(0.0)).collect()
            }
            KernelFamily::Identity => unreachable!(),
        };
        FeatureActivation { scaled, proj, phi }
    }

    /// Accumulates gradients of a scalar with upstream `d_phi` into the realized
    /// Ω, log-amplitude and log-lengthscales.
    pub fn backward(
        &self,
        act: &FeatureActivation,
        d_phi: &[f64],
        d_omega: &mut [f64],
        d_log_amplitude: &mut f64,
        d_log_lengthscales: &mut [f64],
    ) {
        if self.family == KernelFamily::Identity {
            return;
        }
        let j_count = self.num_features;
        // φ is proportional to the amplitude.
        *d_log_amplitude += dot(d_phi, &act.phi);
        let mut d_proj = vec![0.0; j_count];
        match self.family {
            KernelFamily::Rbf => {
                let c = self.amplitude / (j_count as f64).sqrt();
                for j in 0..j_count {
                    let (s, co) = act.proj[j].sin_cos();
                    d_proj[j] = c * (d_phi[j] * co - d_phi[j_count + j] * s);
                }
            }
            KernelFamily::ArcCosine1 => {
                let c = std::f64::consts::SQRT_2 * self.amplitude / (j_count as f64).sqrt();
                for j in 0..j_count {
                    if act.proj[j] > 0.0 {
                        d_proj[j] = c * d_phi[j];
                    }
                }
            }
            KernelFamily::Identity => unreachable!(),
        }
        for (i, xi) in act.scaled.iter().enumerate() {
            let row = &self.omega[i * j_count..(i + 1) * j_count];
            let d_row = &mut d_omega[i * j_count..(i + 1) * j_count];
            let mut d_scaled = 0.0;
            for j in 0..j_count {
                d_row[j] += xi * d_proj[j];
                d_scaled += row[j] * d_proj[j];
            }
            // x̃ = x·exp(−log λ)
            d_log_lengthscales[i] -= d_scaled * xi;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rbf(sigma: f64, ls: Vec<f64>, j: usize) -> KernelSpec {
        KernelSpec::new(KernelFamily::Rbf, sigma, ls, j).unwrap()
    }

    fn arccos(sigma: f64, ls: Vec<f64>, j: usize) -> KernelSpec {
        KernelSpec::new(KernelFamily::ArcCosine1, sigma, ls, j).unwrap()
    }

    fn uniform_vec(rng: &mut ChaCha8Rng, d: usize, lo: f64, hi: f64) -> Vec<f64> {
        (0..d).map(|_| rng.random_range(lo..hi)).collect()
    }

    #[test]
    fn spec_validation() {
        assert!(KernelSpec::new(KernelFamily::Rbf, 0.0, vec![1.0], 3).is_err());
        assert!(KernelSpec::new(KernelFamily::Rbf, 1.0, vec![1.0, -1.0], 3).is_err());
        assert!(KernelSpec::new(KernelFamily::Rbf, 1.0, vec![1.0], 0).is_err());
        assert!(KernelSpec::new(KernelFamily::Identity, -1.0, vec![1.0], 0).is_ok());
    }

    #[test]
    fn feature_dims_per_family() {
        let ls = vec![1.0; 3];
        let dims: Vec<usize> = [KernelFamily::Rbf, KernelFamily::ArcCosine1, KernelFamily::Identity]
            .iter()
            .map(|f| {
                FeatureMap::new(KernelSpec::new(*f, 1.0, ls.clone(), 7).unwrap())
                    .unwrap()
                    .output_dim
            })
            .collect();
        assert_eq!(dims, vec![14, 7, 4]);
    }

    #[test]
    fn rbf_kernel_values() {
        let spec = rbf(1.0, vec![0.7, 2.0], 1);
        assert_eq!(kernel_rbf(&[0.3, -1.0], &[0.3, -1.0], &spec).unwrap(), 1.0);
        let spec = rbf(2.0, vec![1.0, 1.0], 1);
        let v = kernel_rbf(&[1.0, 0.0], &[0.0, 0.0], &spec).unwrap();
        assert!((v - 4.0 * (-0.5f64).exp()).abs() < 1e-14);
        assert!((v - 2.42612).abs() < 1e-5);
        assert!(kernel_rbf(&[1.0], &[0.0, 0.0], &spec).is_err());
    }

    #[test]
    fn rbf_kernel_matches_second_formula() {
        // Mahalanobis form: σ² exp(−½ Δᵀ diag(λ⁻²) Δ) computed via the expanded square.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = uniform_vec(&mut rng, 5, -2.0, 2.0);
        let y = uniform_vec(&mut rng, 5, -2.0, 2.0);
        let ls = uniform_vec(&mut rng, 5, 0.5, 2.0);
        let sigma = 1.7;
        let mut quad = 0.0;
        for d in 0..5 {
            let w = 1.0 / (ls[d] * ls[d]);
            quad += w * x[d] * x[d] - 2.0 * w * x[d] * y[d] + w * y[d] * y[d];
        }
        let oracle = sigma * sigma * (-0.5 * quad).exp();
        let spec = rbf(sigma, ls, 1);
        let v = kernel_rbf(&x, &y, &spec).unwrap();
        assert!((v - oracle).abs() < 1e-12, "{v} vs {oracle}");
        assert_eq!(v, kernel_rbf(&y, &x, &spec).unwrap());
        assert!(v <= sigma * sigma);
    }

    #[test]
    fn arccos_kernel_values() {
        let spec = arccos(1.0, vec![1.0, 1.0], 1);
        let v = kernel_arccos1(&[1.0, 0.0], &[1.0, 0.0], &spec).unwrap();
        assert!((v - 1.0).abs() < 1e-14);
        let v = kernel_arccos1(&[1.0, 0.0], &[0.0, 1.0], &spec).unwrap();
        assert!((v - 1.0 / PI).abs() < 1e-14);
        assert_eq!(kernel_arccos1(&[0.0, 0.0], &[0.0, 1.0], &spec).unwrap(), 0.0);
        // Antiparallel: α = π, J₁ = 0.
        assert!(kernel_arccos1(&[1.0, 0.0], &[-2.0, 0.0], &spec).unwrap().abs() < 1e-14);
        // ARD: scaling the input by λ is undone by the lengthscale.
        let spec2 = arccos(1.0, vec![2.0, 1.0], 1);
        let v2 = kernel_arccos1(&[2.0, 0.0], &[2.0, 0.0], &spec2).unwrap();
        assert!((v2 - 1.0).abs() < 1e-14);
    }

    #[test]
    fn arccos_kernel_matches_integral_monte_carlo() {
        // κ(x, x') = 2 σ² E_ω[(ωᵀx̃)(ωᵀx̃') H(ωᵀx̃) H(ωᵀx̃')], ω ~ N(0, I).
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = uniform_vec(&mut rng, 3, -1.0, 1.0);
        let y = uniform_vec(&mut rng, 3, -1.0, 1.0);
        let ls = vec![0.8, 1.3, 1.0];
        let sigma = 1.4;
        let xs: Vec<f64> = x.iter().zip(&ls).map(|(a, l)| a / l).collect();
        let ys: Vec<f64> = y.iter().zip(&ls).map(|(a, l)| a / l).collect();
        let n = 1_000_000;
        let (mut sum, mut sum_sq) = (0.0, 0.0);
        for _ in 0..n {
            let w: Vec<f64> = (0..3).map(|_| StandardNormal.sample(&mut rng)).collect();
            let a = dot(&w, &xs);
            let b = dot(&w, &ys);
            let s = if a > 0.0 && b > 0.0 { 2.0 * sigma * sigma * a * b } else { 0.0 };
            sum += s;
            sum_sq += s * s;
        }
        let mean = sum / n as f64;
        let se = ((sum_sq / n as f64 - mean * mean) / n as f64).sqrt();
        let exact = kernel_arccos1(&x, &y, &arccos(sigma, ls, 1)).unwrap();
        assert!((mean - exact).abs() <= 3.0 * se, "{mean} vs {exact} (se {se})");
    }

    #[test]
    fn spectral_sampling() {
        let spec = rbf(1.0, vec![1.0, 1.0], 4);
        let a = sample_spectral_frequencies(&spec, 3).unwrap();
        let b = sample_spectral_frequencies(&spec, 3).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, sample_spectral_frequencies(&spec, 4).unwrap());
        assert_eq!((a.rows, a.cols), (2, 4));

        let spec = rbf(1.0, vec![1.0], 100_000);
        let m = sample_spectral_frequencies(&spec, 9).unwrap();
        let n = m.data.len() as f64;
        let mean = m.data.iter().sum::<f64>() / n;
        let var = m.data.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!(mean.abs() < 0.01, "{mean}");
        assert!((var - 1.0).abs() < 0.02, "{var}");

        let id = KernelSpec::identity(2);
        assert!(matches!(
            sample_spectral_frequencies(&id, 1),
            Err(GphmeError::Unsupported(_))
        ));
    }

    #[test]
    fn feature_map_examples() {
        let spec = rbf(1.5, vec![1.0, 1.0], 4);
        let omega = sample_spectral_frequencies(&spec, 1).unwrap();
        let phi = apply_feature_map(&[0.0, 0.0], Some(&omega), &spec).unwrap();
        assert_eq!(phi.len(), 8);
        assert!(phi[..4].iter().all(|v| *v == 0.0));
        assert!(phi[4..].iter().all(|v| (*v - 1.5 / 2.0).abs() < 1e-15));

        let spec = arccos(1.0, vec![1.0, 1.0], 3);
        let omega = SpectralMatrix::new(2, 3, vec![-1.0, -2.0, -0.5, -1.0, -0.1, -3.0]).unwrap();
        let phi = apply_feature_map(&[1.0, 1.0], Some(&omega), &spec).unwrap();
        assert_eq!(phi, vec![0.0; 3]);

        let id = KernelSpec::identity(2);
        assert_eq!(apply_feature_map(&[3.0, -1.0], None, &id).unwrap(), vec![1.0, 3.0, -1.0]);

        assert!(apply_feature_map(&[1.0], Some(&omega), &spec).is_err());
        assert!(apply_feature_map(&[1.0, 1.0], None, &spec).is_err());
    }

    #[test]
    fn rbf_estimate_on_diagonal_is_exact() {
        let spec = rbf(1.3, vec![0.5, 2.0, 1.0], 17);
        let omega = sample_spectral_frequencies(&spec, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..20 {
            let x = uniform_vec(&mut rng, 3, -5.0, 5.0);
            let v = kernel_estimate(&x, &x, Some(&omega), &spec).unwrap();
            assert!((v - 1.69).abs() < 1e-12);
        }
    }

    #[test]
    fn rbf_estimate_equals_cosine_sum() {
        let spec = rbf(0.9, vec![0.5, 2.0], 13);
        let omega = sample_spectral_frequencies(&spec, 8).unwrap();
        let x = [0.3, -1.1];
        let y = [-0.7, 0.4];
        let est = kernel_estimate(&x, &y, Some(&omega), &spec).unwrap();
        let mut s = 0.0;
        for j in 0..13 {
            let mut arg = 0.0;
            for d in 0..2 {
                arg += (x[d] - y[d]) / spec.lengthscales[d] * omega.get(d, j);
            }
            s += arg.cos();
        }
        let oracle = 0.81 * s / 13.0;
        assert!((est - oracle).abs() < 1e-12);
        assert_eq!(est, kernel_estimate(&y, &x, Some(&omega), &spec).unwrap());
    }

    fn count_close(spec: &KernelSpec, exact: fn(&[f64], &[f64], &KernelSpec) -> Result<f64>) -> (usize, f64) {
        let omega = sample_spectral_frequencies(spec, 2024).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let sig2 = spec.sigma_lambda.powi(2);
        let (mut close, mut mad) = (0, 0.0);
        for _ in 0..100 {
            let x = uniform_vec(&mut rng, 5, -1.0, 1.0);
            let y = uniform_vec(&mut rng, 5, -1.0, 1.0);
            let e = kernel_estimate(&x, &y, Some(&omega), spec).unwrap();
            let k = exact(&x, &y, spec).unwrap();
            if (e - k).abs() <= 0.05 * sig2 {
                close += 1;
            }
            mad += (e - k).abs() / 100.0;
        }
        (close, mad / sig2)
    }

    #[test]
    fn rbf_estimate_converges() {
        let (close, _) = count_close(&rbf(1.2, vec![1.0; 5], 5000), kernel_rbf);
        assert!(close >= 95, "{close}");
    }

    #[test]
    fn arccos_estimate_converges() {
        let (_, mad) = count_close(&arccos(1.2, vec![1.0; 5], 20_000), kernel_arccos1);
        assert!(mad <= 0.03, "{mad}");
    }

    #[test]
    fn estimate_is_unbiased_over_omega_draws() {
        let x = [0.4, -0.2, 0.9];
        let y = [-0.3, 0.5, 0.1];
        for (spec, exact) in [
            (rbf(1.0, vec![0.8, 1.0, 1.5], 100), kernel_rbf(&x, &y, &rbf(1.0, vec![0.8, 1.0, 1.5], 1)).unwrap()),
            (arccos(1.0, vec![0.8, 1.0, 1.5], 100), kernel_arccos1(&x, &y, &arccos(1.0, vec![0.8, 1.0, 1.5], 1)).unwrap()),
        ] {
            let vals: Vec<f64> = (0..200)
                .map(|s| {
                    let omega = sample_spectral_frequencies(&spec, s).unwrap();
                    kernel_estimate(&x, &y, Some(&omega), &spec).unwrap()
                })
                .collect();
            let mean = vals.iter().sum::<f64>() / 200.0;
            let sd = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 199.0).sqrt();
            let se = sd / (200f64).sqrt();
            assert!((mean - exact).abs() <= 3.0 * se, "{:?}: {mean} vs {exact}", spec.family);
        }
    }

    #[test]
    fn identity_features_reproduce_affine_maps() {
        let id = KernelSpec::identity(3);
        let w = [0.5, 2.0, -1.0, 0.25];
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10 {
            let x = uniform_vec(&mut rng, 3, -3.0, 3.0);
            let phi = apply_feature_map(&x, None, &id).unwrap();
            let affine = 0.5 + 2.0 * x[0] - x[1] + 0.25 * x[2];
            assert_eq!(dot(&phi, &w), affine);
        }
    }
}
