//! Reference posteriors: the conjugate Gaussian-linear closed form and a
//! brute-force lattice posterior for one- and two-dimensional problems.

use nalgebra::Cholesky;
use rand::Rng;

use crate::error::{RepsError, Result};
use crate::measurements::{MeasurementModel, Observation};
use crate::priors::{GaussianPrior, PriorDensity};
use crate::{Matrix, Vector};

/// Smallest lattice resolution per dimension.
pub const MIN_RESOLUTION: usize = 64;

/// Half-width of automatic grid bounds, in prior standard deviations.
pub const AUTO_BOUND_STDS: f64 = 6.0;

/// A posterior summary that sample sets can be compared against.
pub trait PosteriorOracle {
    fn dim(&self) -> usize;
    fn mean(&self) -> Vector;
    fn covariance(&self) -> Matrix;
    /// Total variation between the empirical distribution of `samples` and
    /// the oracle, when the oracle is discrete.
    fn tv_distance(&self, _samples: &[Vector]) -> Option<f64> {
        None
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPosterior {
    pub mean: Vector,
    pub covariance: Matrix,
}

impl PosteriorOracle for GaussianPosterior {
    fn dim(&self) -> usize {
        self.mean.len()
    }

    fn mean(&self) -> Vector {
        self.mean.clone()
    }

    fn covariance(&self) -> Matrix {
        self.covariance.clone()
    }
}

/// `Σ_post = (Σ⁻¹ + AᵀA/σ_n²)⁻¹`, `μ_post = Σ_post (Σ⁻¹μ + Aᵀy/σ_n²)`.
pub fn gaussian_linear_posterior(
    prior: &GaussianPrior,
    a: &Matrix,
    y: &Vector,
    sigma_n: f64,
) -> Result<GaussianPosterior> {
    if !(sigma_n > 0.0) || !sigma_n.is_finite() {
        return Err(RepsError::Domain(format!("sigma_n {sigma_n} must be positive and finite")));
    }
    RepsError::check_dim("posterior operator columns", prior.dim(), a.ncols())?;
    RepsError::check_dim("posterior observation", a.nrows(), y.len())?;
    let prior_precision = prior.covariance().clone().try_inverse()
        .ok_or_else(|| RepsError::Singular("prior covariance".into()))?;
    let noise_precision = 1.0 / (sigma_n * sigma_n);
    let precision = &prior_precision + a.transpose() * a * noise_precision;
    let chol = Cholesky::new(precision).ok_or_else(|| RepsError::Singular("posterior precision".into()))?;
    let rhs = &prior_precision * prior.mean() + a.transpose() * y * noise_precision;
    let mean = chol.solve(&rhs);
    let cov = chol.inverse();
    let covariance = (&cov + cov.transpose()) * 0.5;
    Ok(GaussianPosterior { mean, covariance })
}

/// Lattice layout. `bounds = None` means prior mean ± 6 prior std per axis.
///
/// Each cell is integrated with a `subdivisions`-point midpoint rule per axis,
/// so cell masses stay accurate when the posterior is narrower than a cell.
#[derive(Debug, Clone, PartialEq)]
pub struct GridSpec {
    pub resolution: usize,
    pub bounds: Option<Vec<(f64, f64)>>,
    pub subdivisions: usize,
}

impl GridSpec {
    pub fn new(resolution: usize) -> Self {
        Self { resolution, bounds: None, subdivisions: 4 }
    }

    pub fn with_bounds(mut self, bounds: Vec<(f64, f64)>) -> Self {
        self.bounds = Some(bounds);
        self
    }

    pub fn with_subdivisions(mut self, subdivisions: usize) -> Self {
        self.subdivisions = subdivisions;
        self
    }
}

impl Default for GridSpec {
    fn default() -> Self {
        Self::new(128)
    }
}

/// Normalized posterior mass on a regular lattice of cells. Cell `i` along an
/// axis spans `[lo + i h, lo + (i+1) h)`. The table is row-major over
/// `(axis 0, axis 1)`. Moments come from the same quadrature as the table.
#[derive(Debug, Clone, PartialEq)]
pub struct GridOracle {
    bounds: Vec<(f64, f64)>,
    resolution: Vec<usize>,
    table: Vec<f64>,
    mean: Vector,
    covariance: Matrix,
}

/// Per-axis bounds and cell counts.
type Layout = (Vec<(f64, f64)>, Vec<usize>);

impl GridOracle {
    fn layout(bounds: Vec<(f64, f64)>, resolution: usize) -> Result<Layout> {
        if bounds.is_empty() || bounds.len() > 2 {
            return Err(RepsError::Domain(format!("grid oracle supports d <= 2, got d = {}", bounds.len())));
        }
        if resolution < MIN_RESOLUTION {
            return Err(RepsError::InvalidConfig(format!(
                "grid resolution {resolution} is below the minimum {MIN_RESOLUTION}"
            )));
        }
        for &(lo, hi) in &bounds {
            if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
                return Err(RepsError::InvalidConfig(format!("invalid grid bounds ({lo}, {hi})")));
            }
        }
        let n = bounds.len();
        Ok((bounds, vec![resolution; n]))
    }

    /// Builds the table from an unnormalized log density.
    pub fn from_log_density(
        bounds: Vec<(f64, f64)>,
        resolution: usize,
        subdivisions: usize,
        mut log_density: impl FnMut(&Vector) -> Result<f64>,
    ) -> Result<Self> {
        if subdivisions == 0 {
            return Err(RepsError::InvalidConfig("grid subdivisions must be >= 1".into()));
        }
        let (bounds, resolution) = Self::layout(bounds, resolution)?;
        let d = bounds.len();
        let mut oracle = Self { bounds, resolution, table: Vec::new(), mean: Vector::zeros(d), covariance: Matrix::zeros(d, d) };
        let per_cell = subdivisions.pow(d as u32);
        let mut points = Vec::with_capacity(oracle.n_cells() * per_cell);
        let mut logs = Vec::with_capacity(oracle.n_cells() * per_cell);
        for idx in 0..oracle.n_cells() {
            let center = oracle.cell_center(idx);
            for sub in 0..per_cell {
                let mut x = center.clone();
                let offsets = [sub % subdivisions, sub / subdivisions];
                for a in 0..d {
                    let frac = (offsets[a] as f64 + 0.5) / subdivisions as f64 - 0.5;
                    x[a] += frac * oracle.cell_width(a);
                }
                let v = log_density(&x)?;
                if v.is_nan() || v == f64::INFINITY {
                    return Err(RepsError::NonFinite(format!("log density {v} on the grid")));
                }
                logs.push(v);
                points.push(x);
            }
        }
        let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            return Err(RepsError::EmptyPosterior("measurement incompatible with grid bounds".into()));
        }
        let weights: Vec<f64> = logs.iter().map(|&l| (l - max).exp()).collect();
        let total: f64 = weights.iter().sum();
        oracle.table = weights.chunks(per_cell).map(|c| c.iter().sum::<f64>() / total).collect();
        for (x, w) in points.iter().zip(&weights) {
            oracle.mean.axpy(w / total, x, 1.0);
        }
        for (x, w) in points.iter().zip(&weights) {
            let r = x - &oracle.mean;
            oracle.covariance.ger(w / total, &r, &r, 1.0);
        }
        Ok(oracle)
    }

    pub fn dim(&self) -> usize {
        self.bounds.len()
    }

    pub fn bounds(&self) -> &[(f64, f64)] {
        &self.bounds
    }

    pub fn resolution(&self) -> &[usize] {
        &self.resolution
    }

    pub fn table(&self) -> &[f64] {
        &self.table
    }

    pub fn n_cells(&self) -> usize {
        self.resolution.iter().product()
    }

    fn cell_width(&self, axis: usize) -> f64 {
        let (lo, hi) = self.bounds[axis];
        (hi - lo) / self.resolution[axis] as f64
    }

    fn axis_indices(&self, idx: usize) -> [usize; 2] {
        match self.dim() {
            1 => [idx, 0],
            _ => [idx / self.resolution[1], idx % self.resolution[1]],
        }
    }

    pub fn cell_center(&self, idx: usize) -> Vector {
        let ij = self.axis_indices(idx);
        Vector::from_iterator(
            self.dim(),
            (0..self.dim()).map(|a| self.bounds[a].0 + (ij[a] as f64 + 0.5) * self.cell_width(a)),
        )
    }

    /// Flat index of the cell containing `x`, or `None` outside the bounds.
    pub fn cell_index(&self, x: &Vector) -> Option<usize> {
        if x.len() != self.dim() {
            return None;
        }
        let mut flat = 0;
        for a in 0..self.dim() {
            let (lo, hi) = self.bounds[a];
            if !(x[a] >= lo && x[a] < hi) {
                return None;
            }
            let i = (((x[a] - lo) / self.cell_width(a)) as usize).min(self.resolution[a] - 1);
            flat = flat * self.resolution[a] + i;
        }
        Some(flat)
    }

    /// Cell center with the largest mass.
    pub fn mode(&self) -> Vector {
        let (idx, _) = self
            .table
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, &p)| if p > best.1 { (i, p) } else { best });
        self.cell_center(idx)
    }

    /// Draws a cell by inverse CDF, then a uniform point inside it.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vector {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut idx = self.table.len() - 1;
        for (i, &p) in self.table.iter().enumerate() {
            acc += p;
            if u < acc {
                idx = i;
                break;
            }
        }
        let mut x = self.cell_center(idx);
        for a in 0..self.dim() {
            x[a] += (rng.random::<f64>() - 0.5) * self.cell_width(a);
        }
        x
    }

    /// Empirical cell frequencies, plus the fraction of samples outside the grid.
    pub fn histogram(&self, samples: &[Vector]) -> (Vec<f64>, f64) {
        let mut counts = vec![0.0; self.n_cells()];
        let mut outside = 0.0;
        let w = 1.0 / samples.len() as f64;
        for s in samples {
            match self.cell_index(s) {
                Some(i) => counts[i] += w,
                None => outside += w,
            }
        }
        (counts, outside)
    }
}

impl PosteriorOracle for GridOracle {
    fn dim(&self) -> usize {
        self.bounds.len()
    }

    fn mean(&self) -> Vector {
        self.mean.clone()
    }

    fn covariance(&self) -> Matrix {
        self.covariance.clone()
    }

    /// Samples outside the grid count as mass the oracle does not have.
    fn tv_distance(&self, samples: &[Vector]) -> Option<f64> {
        if samples.is_empty() {
            return None;
        }
        let (hist, outside) = self.histogram(samples);
        let inside: f64 = hist.iter().zip(&self.table).map(|(h, p)| (h - p).abs()).sum();
        Some(0.5 * (inside + outside))
    }
}

/// Lattice posterior `∝ p(x) N(y; A(x), σ_n² I)` for `d ≤ 2`.
pub fn grid_posterior<P: PriorDensity + ?Sized>(
    prior: &P,
    model: &MeasurementModel,
    observation: &Observation,
    spec: &GridSpec,
) -> Result<GridOracle> {
    let sigma_n = model.sigma_n();
    if !(sigma_n > 0.0) {
        return Err(RepsError::Domain("grid posterior needs sigma_n > 0".into()));
    }
    RepsError::check_dim("grid observation", model.output_dim(), observation.y.len())?;
    let d = model.input_dim();
    let bounds = match &spec.bounds {
        Some(b) => {
            RepsError::check_dim("grid bounds", d, b.len())?;
            b.clone()
        }
        None => {
            let mean = prior.mean();
            let cov = prior.covariance();
            RepsError::check_dim("grid prior", d, mean.len())?;
            (0..d)
                .map(|a| {
                    let half = AUTO_BOUND_STDS * cov[(a, a)].sqrt();
                    (mean[a] - half, mean[a] + half)
                })
                .collect()
        }
    };
    let inv_two_var = 0.5 / (sigma_n * sigma_n);
    let mut best_loglik = f64::NEG_INFINITY;
    let oracle = GridOracle::from_log_density(bounds, spec.resolution, spec.subdivisions, |x| {
        let r = &observation.y - model.apply(x)?;
        let loglik = -inv_two_var * r.norm_squared();
        best_loglik = best_loglik.max(loglik);
        Ok(prior.log_density(x, 0.0) + loglik)
    })?;
    // The log-domain table is always normalizable; flag the case where the
    // likelihood itself underflows on every cell.
    if best_loglik < f64::MIN_POSITIVE.ln() {
        return Err(RepsError::EmptyPosterior(format!(
            "likelihood underflows on every cell (best log-likelihood {best_loglik:.3e})"
        )));
    }
    Ok(oracle)
}

/// Sample-versus-oracle discrepancies.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleComparison {
    /// `‖mean(samples) − oracle mean‖₂`.
    pub mean_error: f64,
    /// Frobenius norm of the covariance difference.
    pub cov_error: f64,
    pub tv: Option<f64>,
}

/// Unbiased sample mean and covariance.
pub fn sample_moments(samples: &[Vector]) -> Result<(Vector, Matrix)> {
    let first = samples.first().ok_or_else(|| RepsError::InvalidConfig("no samples".into()))?;
    let d = first.len();
    let n = samples.len() as f64;
    let mut mean = Vector::zeros(d);
    for s in samples {
        RepsError::check_dim("sample", d, s.len())?;
        mean += s;
    }
    mean /= n;
    let mut cov = Matrix::zeros(d, d);
    for s in samples {
        let r = s - &mean;
        cov.ger(1.0, &r, &r, 1.0);
    }
    if samples.len() > 1 {
        cov /= n - 1.0;
    }
    Ok((mean, cov))
}

pub fn compare_samples<O: PosteriorOracle + ?Sized>(samples: &[Vector], oracle: &O) -> Result<SampleComparison> {
    if samples.len() < 100 {
        return Err(RepsError::InvalidConfig(format!(
            "need at least 100 samples for a comparison, got {}",
            samples.len()
        )));
    }
    RepsError::check_dim("samples", oracle.dim(), samples[0].len())?;
    let (mean, cov) = sample_moments(samples)?;
    Ok(SampleComparison {
        mean_error: (mean - oracle.mean()).norm(),
        cov_error: (cov - oracle.covariance()).norm(),
        tv: oracle.tv_distance(samples),
    })
}
