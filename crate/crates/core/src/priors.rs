//! Analytic score models.
//!
//! Each prior is a distribution over clean signals `x₀`; the score model
//! evaluates the VE-perturbed density `p_σ = p₀ * N(0, σ²I)`. For Gaussians and
//! Gaussian mixtures both the score `∇ log p_σ` and the Tweedie denoiser
//! `E[x₀ | x_σ]` are available in closed form.

use std::f64::consts::PI;
use std::path::Path;
use std::sync::Arc;

use nalgebra::SymmetricEigen;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{RepsError, Result};
use crate::{Matrix, Vector};

/// Anything that can stand in for a trained score network.
pub trait ScoreModel: Send + Sync {
    fn dim(&self) -> usize;

    /// `∇ₓ log p_σ(x)`.
    fn score_at(&self, x: &Vector, sigma: f64) -> Vector;

    /// `E[x₀ | x_σ = x]`. Defaults to the Tweedie form `x + σ² ∇ log p_σ(x)`.
    fn denoise_at(&self, x: &Vector, sigma: f64) -> Vector {
        let mut out = self.score_at(x, sigma);
        out *= sigma * sigma;
        out += x;
        out
    }
}

/// Priors with a tractable density, used by the oracles.
pub trait PriorDensity: Send + Sync {
    fn log_density(&self, x: &Vector, sigma: f64) -> f64;
    fn mean(&self) -> Vector;
    fn covariance(&self) -> Matrix;
}

impl<T: ScoreModel + ?Sized> ScoreModel for &T {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn score_at(&self, x: &Vector, sigma: f64) -> Vector {
        (**self).score_at(x, sigma)
    }
    fn denoise_at(&self, x: &Vector, sigma: f64) -> Vector {
        (**self).denoise_at(x, sigma)
    }
}

impl<T: ScoreModel + ?Sized> ScoreModel for Arc<T> {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn score_at(&self, x: &Vector, sigma: f64) -> Vector {
        (**self).score_at(x, sigma)
    }
    fn denoise_at(&self, x: &Vector, sigma: f64) -> Vector {
        (**self).denoise_at(x, sigma)
    }
}

/// `N(mean, covariance)` with a cached eigendecomposition of the covariance.
///
/// With `Σ = Q Λ Qᵀ`, `(Σ + σ²I)⁻¹ = Q (Λ + σ²)⁻¹ Qᵀ`, so every noise level is
/// served from the same factorization.
#[derive(Debug, Clone)]
pub struct GaussianPrior {
    mean: Vector,
    covariance: Matrix,
    eigvecs: Matrix,
    eigvals: Vector,
}

impl GaussianPrior {
    pub fn new(mean: Vector, covariance: Matrix) -> Result<Self> {
        let d = mean.len();
        if d == 0 {
            return Err(RepsError::InvalidConfig("prior dimension must be positive".into()));
        }
        if covariance.nrows() != d || covariance.ncols() != d {
            return Err(RepsError::DimensionMismatch {
                context: "gaussian prior covariance",
                expected: d,
                got: covariance.nrows(),
            });
        }
        if mean.iter().chain(covariance.iter()).any(|v| !v.is_finite()) {
            return Err(RepsError::NonFinite("gaussian prior parameters".into()));
        }
        let scale = covariance.amax().max(1.0);
        for i in 0..d {
            for j in 0..i {
                if (covariance[(i, j)] - covariance[(j, i)]).abs() > 1e-12 * scale {
                    return Err(RepsError::InvalidConfig(format!(
                        "covariance is not symmetric at ({i}, {j})"
                    )));
                }
            }
        }
        let eig = SymmetricEigen::new(covariance.clone());
        if let Some(min) = eig.eigenvalues.iter().copied().reduce(f64::min) {
            if min <= 0.0 {
                return Err(RepsError::InvalidConfig(format!(
                    "covariance is not positive definite (smallest eigenvalue {min})"
                )));
            }
        }
        Ok(Self {
            mean,
            covariance,
            eigvecs: eig.eigenvectors,
            eigvals: eig.eigenvalues,
        })
    }

    /// `N(mean, τ² I)`.
    pub fn isotropic(mean: Vector, variance: f64) -> Result<Self> {
        let d = mean.len();
        Self::new(mean, Matrix::identity(d, d) * variance)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &Vector {
        &self.mean
    }

    pub fn covariance(&self) -> &Matrix {
        &self.covariance
    }

    /// Draws `x₀ ~ N(mean, covariance)`.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vector {
        let z = standard_normal(rng, self.dim());
        &self.mean + self.spectral_apply(&z, f64::sqrt)
    }

    /// Applies `Q diag(f(λᵢ)) Qᵀ` to `v`.
    fn spectral_apply(&self, v: &Vector, f: impl Fn(f64) -> f64) -> Vector {
        let mut coeffs = self.eigvecs.tr_mul(v);
        for (c, &lam) in coeffs.iter_mut().zip(self.eigvals.iter()) {
            *c *= f(lam);
        }
        &self.eigvecs * coeffs
    }

    fn log_density_at(&self, x: &Vector, sigma: f64) -> f64 {
        let s2 = sigma * sigma;
        let coeffs = self.eigvecs.tr_mul(&(x - &self.mean));
        coeffs
            .iter()
            .zip(self.eigvals.iter())
            .map(|(c, &lam)| {
                let var = lam + s2;
                -0.5 * (c * c / var + (2.0 * PI * var).ln())
            })
            .sum()
    }
}

impl ScoreModel for GaussianPrior {
    fn dim(&self) -> usize {
        self.mean.len()
    }

    fn score_at(&self, x: &Vector, sigma: f64) -> Vector {
        let s2 = sigma * sigma;
        -self.spectral_apply(&(x - &self.mean), |lam| 1.0 / (lam + s2))
    }

    /// Closed form `μ + Σ (Σ + σ²I)⁻¹ (x − μ)`.
    fn denoise_at(&self, x: &Vector, sigma: f64) -> Vector {
        let s2 = sigma * sigma;
        &self.mean + self.spectral_apply(&(x - &self.mean), |lam| lam / (lam + s2))
    }
}

impl PriorDensity for GaussianPrior {
    fn log_density(&self, x: &Vector, sigma: f64) -> f64 {
        self.log_density_at(x, sigma)
    }
    fn mean(&self) -> Vector {
        self.mean.clone()
    }
    fn covariance(&self) -> Matrix {
        self.covariance.clone()
    }
}

/// Finite mixture of Gaussians.
#[derive(Debug, Clone)]
pub struct GmmPrior {
    log_weights: Vec<f64>,
    weights: Vec<f64>,
    components: Vec<GaussianPrior>,
}

pub(crate) fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

impl GmmPrior {
    pub fn new(weights: Vec<f64>, components: Vec<GaussianPrior>) -> Result<Self> {
        if components.is_empty() {
            return Err(RepsError::InvalidConfig("mixture needs at least one component".into()));
        }
        if weights.len() != components.len() {
            return Err(RepsError::DimensionMismatch {
                context: "mixture weights",
                expected: components.len(),
                got: weights.len(),
            });
        }
        if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(RepsError::InvalidConfig("mixture weights must be non-negative".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(RepsError::InvalidConfig(format!("mixture weights sum to {total}, not 1")));
        }
        let d = components[0].dim();
        for c in &components[1..] {
            RepsError::check_dim("mixture component", d, c.dim())?;
        }
        Ok(Self {
            log_weights: weights.iter().map(|w| w.ln()).collect(),
            weights,
            components,
        })
    }

    pub fn dim(&self) -> usize {
        self.components[0].dim()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn components(&self) -> &[GaussianPrior] {
        &self.components
    }

    /// Picks a component by weight, then draws from it.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vector {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut pick = self.components.len() - 1;
        for (k, &w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                pick = k;
                break;
            }
        }
        self.components[pick].sample(rng)
    }

    /// The component itself when the mixture has exactly one.
    pub fn as_gaussian(&self) -> Option<&GaussianPrior> {
        match self.components.as_slice() {
            [only] => Some(only),
            _ => None,
        }
    }

    /// Posterior component responsibilities at noise level `sigma`.
    pub fn responsibilities(&self, x: &Vector, sigma: f64) -> Vec<f64> {
        let logs: Vec<f64> = self
            .components
            .iter()
            .zip(&self.log_weights)
            .map(|(c, lw)| lw + c.log_density_at(x, sigma))
            .collect();
        let norm = log_sum_exp(&logs);
        logs.iter().map(|l| (l - norm).exp()).collect()
    }

    fn mix(&self, x: &Vector, sigma: f64, f: impl Fn(&GaussianPrior) -> Vector) -> Vector {
        let resp = self.responsibilities(x, sigma);
        let mut out = Vector::zeros(x.len());
        for (r, c) in resp.iter().zip(&self.components) {
            if *r > 0.0 {
                out.axpy(*r, &f(c), 1.0);
            }
        }
        out
    }

    pub fn from_spec(spec: &PriorSpec) -> Result<Self> {
        let mut weights = Vec::with_capacity(spec.components.len());
        let mut comps = Vec::with_capacity(spec.components.len());
        for c in &spec.components {
            let d = c.mean.len();
            if c.covariance.len() != d || c.covariance.iter().any(|row| row.len() != d) {
                return Err(RepsError::Parse(format!(
                    "component covariance must be {d}x{d}"
                )));
            }
            let cov = Matrix::from_fn(d, d, |i, j| c.covariance[i][j]);
            weights.push(c.weight);
            comps.push(GaussianPrior::new(Vector::from_vec(c.mean.clone()), cov)?);
        }
        Self::new(weights, comps)
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let spec: PriorSpec = toml::from_str(text).map_err(|e| RepsError::Parse(e.to_string()))?;
        Self::from_spec(&spec)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }
}

impl From<GaussianPrior> for GmmPrior {
    fn from(g: GaussianPrior) -> Self {
        Self { log_weights: vec![0.0], weights: vec![1.0], components: vec![g] }
    }
}

impl ScoreModel for GmmPrior {
    fn dim(&self) -> usize {
        ScoreModel::dim(&self.components[0])
    }

    fn score_at(&self, x: &Vector, sigma: f64) -> Vector {
        self.mix(x, sigma, |c| c.score_at(x, sigma))
    }

    /// Responsibility-weighted component posterior means.
    fn denoise_at(&self, x: &Vector, sigma: f64) -> Vector {
        self.mix(x, sigma, |c| c.denoise_at(x, sigma))
    }
}

impl PriorDensity for GmmPrior {
    fn log_density(&self, x: &Vector, sigma: f64) -> f64 {
        let logs: Vec<f64> = self
            .components
            .iter()
            .zip(&self.log_weights)
            .map(|(c, lw)| lw + c.log_density_at(x, sigma))
            .collect();
        log_sum_exp(&logs)
    }

    fn mean(&self) -> Vector {
        let mut m = Vector::zeros(ScoreModel::dim(self));
        for (w, c) in self.weights.iter().zip(&self.components) {
            m.axpy(*w, c.mean(), 1.0);
        }
        m
    }

    fn covariance(&self) -> Matrix {
        let mu = PriorDensity::mean(self);
        let d = mu.len();
        let mut cov = Matrix::zeros(d, d);
        for (w, c) in self.weights.iter().zip(&self.components) {
            cov += (c.covariance() + c.mean() * c.mean().transpose()) * *w;
        }
        cov - &mu * mu.transpose()
    }
}

/// On-disk prior description.
///
/// ```toml
/// [[components]]
/// weight = 0.5
/// mean = [-1.0, 0.0]
/// covariance = [[0.25, 0.0], [0.0, 0.25]]
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorSpec {
    pub components: Vec<ComponentSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentSpec {
    pub weight: f64,
    pub mean: Vec<f64>,
    pub covariance: Vec<Vec<f64>>,
}

/// A score model with a deterministic, smooth error field added on top.
///
/// The field is a random Fourier-feature expansion keyed by `seed`:
/// `δᵢ(x) = (ε/σ) Σⱼ aᵢⱼ cos(ωⱼ·x + bⱼ)` with `Σⱼ |aᵢⱼ| = 1`, so every
/// coordinate is bounded by `ε/σ` and the denoiser error is at most `ε σ`.
/// At `σ = 0` the field vanishes.
#[derive(Debug, Clone)]
pub struct PerturbedScore<P> {
    base: P,
    epsilon: f64,
    seed: u64,
    frequencies: Matrix,
    phases: Vec<f64>,
    amplitudes: Matrix,
}

impl<P: ScoreModel> PerturbedScore<P> {
    pub const N_FEATURES: usize = 16;

    pub fn new(base: P, epsilon: f64, seed: u64) -> Result<Self> {
        Self::with_length_scale(base, epsilon, seed, 1.0)
    }

    /// `length_scale` sets the spatial correlation length of the error field.
    pub fn with_length_scale(base: P, epsilon: f64, seed: u64, length_scale: f64) -> Result<Self> {
        if !(epsilon >= 0.0) || !epsilon.is_finite() {
            return Err(RepsError::Domain(format!("perturbation magnitude {epsilon} must be >= 0")));
        }
        if !(length_scale > 0.0) {
            return Err(RepsError::Domain("length scale must be positive".into()));
        }
        let d = base.dim();
        let f = Self::N_FEATURES;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let frequencies =
            Matrix::from_fn(f, d, |_, _| rng.sample::<f64, _>(StandardNormal) / length_scale);
        let phases = (0..f).map(|_| rng.random_range(0.0..2.0 * PI)).collect();
        let mut amplitudes = Matrix::from_fn(d, f, |_, _| rng.random_range(-1.0..1.0));
        for mut row in amplitudes.row_iter_mut() {
            let l1: f64 = row.iter().map(|a| a.abs()).sum();
            row /= l1;
        }
        Ok(Self { base, epsilon, seed, frequencies, phases, amplitudes })
    }

    pub fn base(&self) -> &P {
        &self.base
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// The additive score error `δ(x, σ)`.
    pub fn perturbation(&self, x: &Vector, sigma: f64) -> Vector {
        if self.epsilon == 0.0 || sigma == 0.0 {
            return Vector::zeros(x.len());
        }
        let features = (&self.frequencies * x)
            .zip_map(&Vector::from_column_slice(&self.phases), |wx, b| (wx + b).cos());
        (&self.amplitudes * features) * (self.epsilon / sigma)
    }
}

impl<P: ScoreModel> ScoreModel for PerturbedScore<P> {
    fn dim(&self) -> usize {
        self.base.dim()
    }

    fn score_at(&self, x: &Vector, sigma: f64) -> Vector {
        let base = self.base.score_at(x, sigma);
        if self.epsilon == 0.0 || sigma == 0.0 {
            return base;
        }
        base + self.perturbation(x, sigma)
    }

    fn denoise_at(&self, x: &Vector, sigma: f64) -> Vector {
        let base = self.base.denoise_at(x, sigma);
        if self.epsilon == 0.0 || sigma == 0.0 {
            return base;
        }
        base + self.perturbation(x, sigma) * (sigma * sigma)
    }
}

/// Standard-normal draw of dimension `d`.
pub fn standard_normal<R: Rng + ?Sized>(rng: &mut R, d: usize) -> Vector {
    Vector::from_iterator(d, (0..d).map(|_| StandardNormal.sample(rng)))
}

#[cfg(test)]
mod tests {
    use super::*;

    const FIXTURE: &str = r#"
[[components]]
weight = 0.3
mean = [0.0, 0.0]
covariance = [[1.0, 0.3], [0.3, 0.5]]

[[components]]
weight = 0.7
mean = [2.5, 1.5]
covariance = [[0.4, -0.1], [-0.1, 0.8]]
"#;

    fn fixture() -> GmmPrior {
        GmmPrior::from_toml_str(FIXTURE).unwrap()
    }

    // Independent oracle: central differences of the log density.
    fn fd_score(p: &dyn PriorDensity, x: &Vector, sigma: f64, h: f64) -> Vector {
        Vector::from_iterator(
            x.len(),
            (0..x.len()).map(|i| {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[i] += h;
                xm[i] -= h;
                (p.log_density(&xp, sigma) - p.log_density(&xm, sigma)) / (2.0 * h)
            }),
        )
    }

    #[test]
    fn draws_match_mixture_moments() {
        let p = fixture();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let n = 100_000;
        let mut mean = Vector::zeros(2);
        let mut second = Matrix::zeros(2, 2);
        for _ in 0..n {
            let x = p.sample(&mut rng);
            mean += &x;
            second.ger(1.0, &x, &x, 1.0);
        }
        mean /= n as f64;
        let cov = second / n as f64 - &mean * mean.transpose();
        assert!((&mean - PriorDensity::mean(&p)).amax() < 0.02);
        assert!((cov - PriorDensity::covariance(&p)).amax() < 0.03);
    }

    #[test]
    fn isotropic_gaussian_score() {
        let g = GaussianPrior::isotropic(Vector::zeros(2), 1.0).unwrap();
        let s = g.score_at(&Vector::from_vec(vec![1.0, 0.0]), 1.0);
        assert!((s[0] + 0.5).abs() < 1e-15 && s[1].abs() < 1e-15);
    }

    #[test]
    fn denoise_without_noise_is_identity() {
        let p = fixture();
        let x = Vector::from_vec(vec![0.7, -1.2]);
        assert!((p.denoise_at(&x, 0.0) - &x).norm() < 1e-14);
    }

    #[test]
    fn gaussian_denoiser_closed_form() {
        let mu = Vector::from_vec(vec![1.0, -2.0, 0.5]);
        let tau2 = 2.0;
        let g = GaussianPrior::isotropic(mu.clone(), tau2).unwrap();
        let x = Vector::from_vec(vec![3.0, 0.0, -1.0]);
        let sigma: f64 = 0.7;
        let s2 = sigma * sigma;
        let want = (&x * tau2 + &mu * s2) / (tau2 + s2);
        assert!((g.denoise_at(&x, sigma) - want).norm() < 1e-14);
    }

    #[test]
    fn gmm_fixture_score_regression() {
        // Frozen from a 40-digit finite-difference evaluation of log p_σ.
        let p = fixture();
        let x = Vector::from_vec(vec![2.0, 2.0]);
        let fd = fd_score(&p, &x, 0.5, 1e-5);
        let s = p.score_at(&x, 0.5);
        assert!((&s - &fd).norm() / fd.norm() < 1e-8);
        let want = Vector::from_vec(vec![0.67413726922050323925, -0.44228189426228144843]);
        assert!((&s - &want).norm() < 1e-12, "{s}");
        let den = p.denoise_at(&x, 0.5);
        assert!((&den - (&x + &fd * 0.25)).norm() < 1e-8);
        let want = Vector::from_vec(vec![2.1685343173051258098, 1.8894295264344296379]);
        assert!((&den - &want).norm() < 1e-12, "{den}");
    }

    #[test]
    fn score_at_component_mean_with_equal_weights() {
        let a = GaussianPrior::new(Vector::from_vec(vec![-1.0, 0.0]), Matrix::identity(2, 2) * 0.5).unwrap();
        let b = GaussianPrior::new(Vector::from_vec(vec![1.0, 0.5]), Matrix::identity(2, 2)).unwrap();
        let p = GmmPrior::new(vec![0.5, 0.5], vec![a.clone(), b]).unwrap();
        let x = a.mean().clone();
        let fd = fd_score(&p, &x, 0.0, 1e-5);
        assert!((p.score_at(&x, 0.0) - &fd).norm() / fd.norm().max(1e-12) < 1e-5);
    }

    #[test]
    fn scores_match_finite_differences() {
        let p = fixture();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for &sigma in &[0.0, 0.1, 1.0, 10.0] {
            for _ in 0..50 {
                let x = standard_normal(&mut rng, 2) * 2.0 + Vector::from_vec(vec![1.0, 0.5]);
                let fd = fd_score(&p, &x, sigma, 1e-5);
                let s = p.score_at(&x, sigma);
                assert!((&s - &fd).norm() <= 1e-5 * fd.norm().max(1e-3), "sigma={sigma} x={x}");
            }
        }
    }

    #[test]
    fn tweedie_consistency() {
        let p = fixture();
        let g = GaussianPrior::new(
            Vector::from_vec(vec![0.5, -0.5]),
            Matrix::from_row_slice(2, 2, &[2.0, 0.4, 0.4, 1.0]),
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..1000 {
            let sigma = 10f64.powf(rng.random_range(-2.0..2.0));
            let x = standard_normal(&mut rng, 2) * (1.0 + sigma);
            for m in [&p as &dyn ScoreModel, &g] {
                let den = m.denoise_at(&x, sigma);
                let tw = &x + m.score_at(&x, sigma) * (sigma * sigma);
                assert!((den - tw).norm() < 1e-10);
            }
        }
    }

    #[test]
    fn single_component_mixture_matches_gaussian() {
        let g = GaussianPrior::new(
            Vector::from_vec(vec![0.3, 1.0]),
            Matrix::from_row_slice(2, 2, &[1.5, 0.2, 0.2, 0.7]),
        )
        .unwrap();
        let m = GmmPrior::from(g.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let x = standard_normal(&mut rng, 2) * 3.0;
            for sigma in [0.0, 0.5, 20.0] {
                assert!((m.score_at(&x, sigma) - g.score_at(&x, sigma)).norm() < 1e-12);
                assert!((m.denoise_at(&x, sigma) - g.denoise_at(&x, sigma)).norm() < 1e-12);
                assert!((m.log_density(&x, sigma) - g.log_density(&x, sigma)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn density_normalizes_on_grid() {
        let p = fixture();
        for sigma in [0.0, 0.3] {
            let (lo, hi, n) = (-8.0, 10.0, 600);
            let h = (hi - lo) / n as f64;
            let mut total = 0.0;
            for i in 0..n {
                for j in 0..n {
                    let x = Vector::from_vec(vec![lo + (i as f64 + 0.5) * h, lo + (j as f64 + 0.5) * h]);
                    total += p.log_density(&x, sigma).exp() * h * h;
                }
            }
            assert!((total - 1.0).abs() < 1e-4, "sigma={sigma}: {total}");
        }
    }

    #[test]
    fn far_from_all_components_never_nan() {
        let p = fixture();
        let x = Vector::from_vec(vec![1e4, -1e4]);
        for sigma in [0.0, 0.01, 1.0] {
            let s = p.score_at(&x, sigma);
            assert!(s.iter().all(|v| v.is_finite()));
            let r = p.responsibilities(&x, sigma);
            assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn mixture_moments() {
        let p = fixture();
        let m = PriorDensity::mean(&p);
        assert!((m[0] - 1.75).abs() < 1e-14 && (m[1] - 1.05).abs() < 1e-14);
        let c = PriorDensity::covariance(&p);
        // Var(x0) = 0.3*1 + 0.7*0.4 + 0.3*0.7*2.5^2
        assert!((c[(0, 0)] - (0.3 + 0.28 + 0.21 * 6.25)).abs() < 1e-12);
    }

    #[test]
    fn rejects_invalid_priors() {
        assert!(GaussianPrior::new(Vector::zeros(2), Matrix::from_row_slice(2, 2, &[1.0, 0.5, 0.4, 1.0])).is_err());
        assert!(GaussianPrior::new(Vector::zeros(2), Matrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0])).is_err());
        let g = GaussianPrior::isotropic(Vector::zeros(2), 1.0).unwrap();
        assert!(GmmPrior::new(vec![0.5, 0.6], vec![g.clone(), g.clone()]).is_err());
        assert!(GmmPrior::new(vec![], vec![]).is_err());
        assert!(GmmPrior::from_toml_str("components = 3").is_err());
    }

    #[test]
    fn zero_perturbation_is_bit_exact() {
        let p = fixture();
        let q = PerturbedScore::new(&p, 0.0, 9).unwrap();
        let x = Vector::from_vec(vec![-0.0, 1.3]);
        for sigma in [0.01, 1.0] {
            let a = p.score_at(&x, sigma);
            let b = q.score_at(&x, sigma);
            assert!(a.iter().zip(b.iter()).all(|(u, v)| u.to_bits() == v.to_bits()));
        }
    }

    #[test]
    fn perturbation_is_deterministic_and_bounded() {
        let p = fixture();
        let q1 = PerturbedScore::new(&p, 0.1, 42).unwrap();
        let q2 = PerturbedScore::new(&p, 0.1, 42).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..10_000 {
            let sigma = 10f64.powf(rng.random_range(-2.0..2.0));
            let x = standard_normal(&mut rng, 2) * 5.0;
            let a = q1.score_at(&x, sigma);
            let b = q2.score_at(&x, sigma);
            assert!(a.iter().zip(b.iter()).all(|(u, v)| u.to_bits() == v.to_bits()));
            let delta = q1.perturbation(&x, sigma);
            assert!(delta.amax() <= 0.1 / sigma * (1.0 + 1e-12));
        }
        let q3 = PerturbedScore::new(&p, 0.1, 43).unwrap();
        let x = Vector::from_vec(vec![0.2, 0.1]);
        assert_ne!(q1.perturbation(&x, 1.0), q3.perturbation(&x, 1.0));
    }
}
