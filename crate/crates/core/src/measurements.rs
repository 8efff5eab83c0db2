//! Forward measurement operators `y = A(x) + n` with exact vector-Jacobian
//! products.
//!
//! Signals are flat vectors; 2-D operators interpret them in row-major order
//! through a [`SignalShape`].

use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use num_complex::Complex64;
use rand::seq::index;
use rand::Rng;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{RepsError, Result};
use crate::priors::standard_normal;
use crate::{Matrix, Vector};

/// Magnitudes below this are treated as zero when differentiating `|F x|`.
pub const MAGNITUDE_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SignalShape {
    Line(usize),
    Grid { rows: usize, cols: usize },
}

impl SignalShape {
    pub fn len(&self) -> usize {
        match *self {
            SignalShape::Line(n) => n,
            SignalShape::Grid { rows, cols } => rows * cols,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `(rows, cols)`; a line is a single row.
    pub fn dims(&self) -> (usize, usize) {
        match *self {
            SignalShape::Line(n) => (1, n),
            SignalShape::Grid { rows, cols } => (rows, cols),
        }
    }
}

/// A dense convolution kernel stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Kernel {
    rows: usize,
    cols: usize,
    taps: Vec<f64>,
}

impl Kernel {
    pub fn new(rows: usize, cols: usize, taps: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 || taps.len() != rows * cols {
            return Err(RepsError::InvalidConfig(format!(
                "kernel {rows}x{cols} needs {} taps, got {}",
                rows * cols,
                taps.len()
            )));
        }
        if taps.iter().any(|t| !t.is_finite()) {
            return Err(RepsError::NonFinite("kernel taps".into()));
        }
        Ok(Self { rows, cols, taps })
    }

    pub fn line(taps: Vec<f64>) -> Result<Self> {
        Self::new(1, taps.len(), taps)
    }

    /// Normalized sampled Gaussian of odd `size` (per axis) and standard deviation `std`.
    /// `two_d` selects a `size × size` kernel instead of `1 × size`.
    pub fn gaussian(size: usize, std: f64, two_d: bool) -> Result<Self> {
        if size.is_multiple_of(2) || !(std > 0.0) {
            return Err(RepsError::InvalidConfig(format!(
                "gaussian kernel needs odd size and positive std (size={size}, std={std})"
            )));
        }
        let c = (size / 2) as f64;
        let g: Vec<f64> = (0..size)
            .map(|i| (-0.5 * ((i as f64 - c) / std).powi(2)).exp())
            .collect();
        let (rows, mut taps) = if two_d {
            (size, g.iter().flat_map(|a| g.iter().map(move |b| a * b)).collect::<Vec<_>>())
        } else {
            (1, g)
        };
        let total: f64 = taps.iter().sum();
        taps.iter_mut().for_each(|t| *t /= total);
        Self::new(rows, size, taps)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn taps(&self) -> &[f64] {
        &self.taps
    }
}

/// User-supplied operator, e.g. a learned degradation evaluated elsewhere.
pub trait CustomOperator: Send + Sync {
    fn input_dim(&self) -> usize;
    fn output_dim(&self) -> usize;
    fn apply(&self, x: &Vector) -> Vector;
    fn vjp(&self, x: &Vector, v: &Vector) -> Vector;
    fn is_linear(&self) -> bool {
        false
    }
}

/// An explicit matrix, plugged in through [`Operator::Custom`].
#[derive(Debug, Clone)]
pub struct DenseOperator {
    matrix: Matrix,
}

impl DenseOperator {
    pub fn new(matrix: Matrix) -> Self {
        Self { matrix }
    }

    pub fn matrix(&self) -> &Matrix {
        &self.matrix
    }
}

impl CustomOperator for DenseOperator {
    fn input_dim(&self) -> usize {
        self.matrix.ncols()
    }
    fn output_dim(&self) -> usize {
        self.matrix.nrows()
    }
    fn apply(&self, x: &Vector) -> Vector {
        &self.matrix * x
    }
    fn vjp(&self, _x: &Vector, v: &Vector) -> Vector {
        self.matrix.tr_mul(v)
    }
    fn is_linear(&self) -> bool {
        true
    }
}

#[derive(Clone)]
pub enum Operator {
    Identity { n: usize },
    /// Keeps the listed coordinates, in order.
    Mask { n: usize, keep: Vec<usize> },
    /// Non-overlapping average pooling by `factor` along every axis.
    Downsample { shape: SignalShape, factor: usize },
    /// Zero-padded "same" convolution.
    Convolve { shape: SignalShape, kernel: Kernel },
    /// `|DFT(pad(x))|` with the signal zero-padded to `oversample · n`.
    FourierMagnitude { n: usize, oversample: usize, fft: Arc<dyn Fft<f64>> },
    /// `clip(x / factor, −1, 1)`.
    HdrCompress { n: usize, factor: f64 },
    Custom(Arc<dyn CustomOperator>),
}

impl fmt::Debug for Operator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Operator::Identity { n } => write!(f, "Identity({n})"),
            Operator::Mask { n, keep } => write!(f, "Mask({n}, keep {})", keep.len()),
            Operator::Downsample { shape, factor } => write!(f, "Downsample({shape:?}, x{factor})"),
            Operator::Convolve { shape, kernel } => {
                write!(f, "Convolve({shape:?}, {}x{})", kernel.rows, kernel.cols)
            }
            Operator::FourierMagnitude { n, oversample, .. } => {
                write!(f, "FourierMagnitude({n}, x{oversample})")
            }
            Operator::HdrCompress { n, factor } => write!(f, "HdrCompress({n}, /{factor})"),
            Operator::Custom(op) => write!(f, "Custom({} -> {})", op.input_dim(), op.output_dim()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OperatorKind {
    Identity,
    Mask,
    Downsample,
    Convolve,
    FourierMagnitude,
    HdrCompress,
    Custom,
}

/// A forward operator together with its additive noise level `σ_n`.
#[derive(Debug, Clone)]
pub struct MeasurementModel {
    op: Operator,
    sigma_n: f64,
}

/// Measurements `y`, optionally with the signal that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub y: Vector,
    pub ground_truth: Option<Vector>,
}

impl Observation {
    pub fn new(model: &MeasurementModel, y: Vector) -> Result<Self> {
        RepsError::check_dim("observation", model.output_dim(), y.len())?;
        Ok(Self { y, ground_truth: None })
    }
}

impl MeasurementModel {
    pub fn new(op: Operator, sigma_n: f64) -> Result<Self> {
        if !(sigma_n >= 0.0) || !sigma_n.is_finite() {
            return Err(RepsError::Domain(format!("noise level {sigma_n} must be >= 0")));
        }
        match &op {
            Operator::Mask { n, keep } => {
                if let Some(bad) = keep.iter().find(|&&i| i >= *n) {
                    return Err(RepsError::InvalidConfig(format!("mask index {bad} out of range for length {n}")));
                }
            }
            Operator::Downsample { shape, factor } => {
                let (r, c) = shape.dims();
                let divisible = *factor > 0
                    && c % factor == 0
                    && (matches!(shape, SignalShape::Line(_)) || r % factor == 0);
                if !divisible {
                    return Err(RepsError::InvalidConfig(format!(
                        "signal {shape:?} is not divisible by pooling factor {factor}"
                    )));
                }
            }
            Operator::Convolve { shape, kernel } => {
                if matches!(shape, SignalShape::Line(_)) && kernel.rows != 1 {
                    return Err(RepsError::InvalidConfig("1-D signals need a single-row kernel".into()));
                }
            }
            Operator::FourierMagnitude { oversample, .. } if *oversample == 0 => {
                return Err(RepsError::InvalidConfig("oversampling factor must be >= 1".into()));
            }
            Operator::HdrCompress { factor, .. } if !(*factor > 0.0) => {
                return Err(RepsError::InvalidConfig("compression factor must be positive".into()));
            }
            _ => {}
        }
        Ok(Self { op, sigma_n })
    }

    pub fn identity(n: usize, sigma_n: f64) -> Result<Self> {
        Self::new(Operator::Identity { n }, sigma_n)
    }

    pub fn mask(n: usize, mut keep: Vec<usize>, sigma_n: f64) -> Result<Self> {
        keep.sort_unstable();
        keep.dedup();
        Self::new(Operator::Mask { n, keep }, sigma_n)
    }

    pub fn downsample(shape: SignalShape, factor: usize, sigma_n: f64) -> Result<Self> {
        Self::new(Operator::Downsample { shape, factor }, sigma_n)
    }

    pub fn convolve(shape: SignalShape, kernel: Kernel, sigma_n: f64) -> Result<Self> {
        Self::new(Operator::Convolve { shape, kernel }, sigma_n)
    }

    pub fn fourier_magnitude(n: usize, oversample: usize, sigma_n: f64) -> Result<Self> {
        let len = n * oversample;
        let fft = FftPlanner::new().plan_fft_forward(len.max(1));
        Self::new(Operator::FourierMagnitude { n, oversample, fft }, sigma_n)
    }

    pub fn hdr_compress(n: usize, factor: f64, sigma_n: f64) -> Result<Self> {
        Self::new(Operator::HdrCompress { n, factor }, sigma_n)
    }

    pub fn custom(op: Arc<dyn CustomOperator>, sigma_n: f64) -> Result<Self> {
        Self::new(Operator::Custom(op), sigma_n)
    }

    pub fn dense(matrix: Matrix, sigma_n: f64) -> Result<Self> {
        Self::custom(Arc::new(DenseOperator::new(matrix)), sigma_n)
    }

    pub fn operator(&self) -> &Operator {
        &self.op
    }

    pub fn kind(&self) -> OperatorKind {
        match self.op {
            Operator::Identity { .. } => OperatorKind::Identity,
            Operator::Mask { .. } => OperatorKind::Mask,
            Operator::Downsample { .. } => OperatorKind::Downsample,
            Operator::Convolve { .. } => OperatorKind::Convolve,
            Operator::FourierMagnitude { .. } => OperatorKind::FourierMagnitude,
            Operator::HdrCompress { .. } => OperatorKind::HdrCompress,
            Operator::Custom(_) => OperatorKind::Custom,
        }
    }

    pub fn sigma_n(&self) -> f64 {
        self.sigma_n
    }

    pub fn with_sigma_n(mut self, sigma_n: f64) -> Result<Self> {
        if !(sigma_n >= 0.0) || !sigma_n.is_finite() {
            return Err(RepsError::Domain(format!("noise level {sigma_n} must be >= 0")));
        }
        self.sigma_n = sigma_n;
        Ok(self)
    }

    pub fn is_linear(&self) -> bool {
        match &self.op {
            Operator::FourierMagnitude { .. } | Operator::HdrCompress { .. } => false,
            Operator::Custom(op) => op.is_linear(),
            _ => true,
        }
    }

    pub fn input_dim(&self) -> usize {
        match &self.op {
            Operator::Identity { n }
            | Operator::Mask { n, .. }
            | Operator::FourierMagnitude { n, .. }
            | Operator::HdrCompress { n, .. } => *n,
            Operator::Downsample { shape, .. } | Operator::Convolve { shape, .. } => shape.len(),
            Operator::Custom(op) => op.input_dim(),
        }
    }

    pub fn output_dim(&self) -> usize {
        match &self.op {
            Operator::Identity { n } | Operator::HdrCompress { n, .. } => *n,
            Operator::Mask { keep, .. } => keep.len(),
            Operator::Downsample { shape, factor } => match *shape {
                SignalShape::Line(n) => n / factor,
                SignalShape::Grid { rows, cols } => (rows / factor) * (cols / factor),
            },
            Operator::Convolve { shape, .. } => shape.len(),
            Operator::FourierMagnitude { n, oversample, .. } => n * oversample,
            Operator::Custom(op) => op.output_dim(),
        }
    }

    /// `A(x)` without noise.
    pub fn apply(&self, x: &Vector) -> Result<Vector> {
        RepsError::check_dim("operator input", self.input_dim(), x.len())?;
        Ok(match &self.op {
            Operator::Identity { .. } => x.clone(),
            Operator::Mask { keep, .. } => Vector::from_iterator(keep.len(), keep.iter().map(|&i| x[i])),
            Operator::Downsample { shape, factor } => pool(x, *shape, *factor),
            Operator::Convolve { shape, kernel } => convolve(x, *shape, kernel),
            Operator::FourierMagnitude { n, oversample, fft } => {
                let spec = padded_spectrum(x, n * oversample, fft.as_ref());
                Vector::from_iterator(spec.len(), spec.iter().map(|c| c.norm()))
            }
            Operator::HdrCompress { factor, .. } => x.map(|v| (v / factor).clamp(-1.0, 1.0)),
            Operator::Custom(op) => op.apply(x),
        })
    }

    /// `J_A(x)ᵀ v`.
    pub fn vjp(&self, x: &Vector, v: &Vector) -> Result<Vector> {
        RepsError::check_dim("vjp state", self.input_dim(), x.len())?;
        RepsError::check_dim("vjp cotangent", self.output_dim(), v.len())?;
        Ok(match &self.op {
            Operator::Identity { .. } => v.clone(),
            Operator::Mask { n, keep } => {
                let mut out = Vector::zeros(*n);
                for (&i, &vi) in keep.iter().zip(v.iter()) {
                    out[i] = vi;
                }
                out
            }
            Operator::Downsample { shape, factor } => unpool(v, *shape, *factor),
            Operator::Convolve { shape, kernel } => convolve_adjoint(v, *shape, kernel),
            Operator::FourierMagnitude { n, oversample, fft } => {
                let len = n * oversample;
                let spec = padded_spectrum(x, len, fft.as_ref());
                // d|F_k|/dx_j = Re(conj(F_k) e^{-2πikj/N}) / |F_k|
                let mut buf: Vec<Complex64> = spec
                    .iter()
                    .zip(v.iter())
                    .map(|(f, &vk)| {
                        let mag = f.norm();
                        if mag < MAGNITUDE_FLOOR {
                            Complex64::new(0.0, 0.0)
                        } else {
                            f.conj() * (vk / mag)
                        }
                    })
                    .collect();
                fft.process(&mut buf);
                Vector::from_iterator(*n, buf[..*n].iter().map(|c| c.re))
            }
            Operator::HdrCompress { factor, .. } => x.zip_map(v, |xi, vi| {
                if (xi / factor).abs() <= 1.0 {
                    vi / factor
                } else {
                    0.0
                }
            }),
            Operator::Custom(op) => op.vjp(x, v),
        })
    }

    /// Dense matrix of a linear operator, built column by column.
    pub fn dense_matrix(&self) -> Result<Matrix> {
        if !self.is_linear() {
            return Err(RepsError::InvalidConfig(format!("{:?} is not linear", self.op)));
        }
        let (n, m) = (self.input_dim(), self.output_dim());
        let mut a = Matrix::zeros(m, n);
        let mut e = Vector::zeros(n);
        for j in 0..n {
            e[j] = 1.0;
            a.set_column(j, &self.apply(&e)?);
            e[j] = 0.0;
        }
        Ok(a)
    }

    /// `y = A(x_true) + σ_n z` with `z ~ N(0, I)` drawn from `rng`.
    pub fn observe<R: Rng + ?Sized>(&self, x_true: &Vector, rng: &mut R) -> Result<Observation> {
        let mut y = self.apply(x_true)?;
        if self.sigma_n > 0.0 {
            y.axpy(self.sigma_n, &standard_normal(rng, y.len()), 1.0);
        }
        Ok(Observation { y, ground_truth: Some(x_true.clone()) })
    }
}

fn padded_spectrum(x: &Vector, len: usize, fft: &dyn Fft<f64>) -> Vec<Complex64> {
    let mut buf = vec![Complex64::new(0.0, 0.0); len];
    for (b, &v) in buf.iter_mut().zip(x.iter()) {
        b.re = v;
    }
    fft.process(&mut buf);
    buf
}

fn pool(x: &Vector, shape: SignalShape, factor: usize) -> Vector {
    match shape {
        SignalShape::Line(n) => Vector::from_iterator(
            n / factor,
            x.as_slice().chunks_exact(factor).map(|c| c.iter().sum::<f64>() / factor as f64),
        ),
        SignalShape::Grid { rows, cols } => {
            let (orows, ocols) = (rows / factor, cols / factor);
            let scale = (factor * factor) as f64;
            let mut out = Vector::zeros(orows * ocols);
            for r in 0..rows {
                for c in 0..cols {
                    out[(r / factor) * ocols + c / factor] += x[r * cols + c] / scale;
                }
            }
            out
        }
    }
}

fn unpool(v: &Vector, shape: SignalShape, factor: usize) -> Vector {
    match shape {
        SignalShape::Line(n) => {
            Vector::from_iterator(n, (0..n).map(|i| v[i / factor] / factor as f64))
        }
        SignalShape::Grid { rows, cols } => {
            let ocols = cols / factor;
            let scale = (factor * factor) as f64;
            Vector::from_iterator(
                rows * cols,
                (0..rows * cols).map(|k| {
                    let (r, c) = (k / cols, k % cols);
                    v[(r / factor) * ocols + c / factor] / scale
                }),
            )
        }
    }
}

/// Visits every `(output index, input index, tap)` triple of the zero-padded
/// "same" convolution `out[p] = Σ_q k[q] x[p + c − q]`.
fn for_each_tap(shape: SignalShape, kernel: &Kernel, mut f: impl FnMut(usize, usize, f64)) {
    let (rows, cols) = shape.dims();
    let (cr, cc) = ((kernel.rows - 1) / 2, (kernel.cols - 1) / 2);
    for r in 0..rows {
        for c in 0..cols {
            for a in 0..kernel.rows {
                let Some(ir) = (r + cr).checked_sub(a).filter(|&i| i < rows) else { continue };
                for b in 0..kernel.cols {
                    let Some(ic) = (c + cc).checked_sub(b).filter(|&i| i < cols) else { continue };
                    f(r * cols + c, ir * cols + ic, kernel.taps[a * kernel.cols + b]);
                }
            }
        }
    }
}

fn convolve(x: &Vector, shape: SignalShape, kernel: &Kernel) -> Vector {
    let mut out = Vector::zeros(shape.len());
    for_each_tap(shape, kernel, |o, i, k| out[o] += k * x[i]);
    out
}

fn convolve_adjoint(v: &Vector, shape: SignalShape, kernel: &Kernel) -> Vector {
    let mut out = Vector::zeros(shape.len());
    for_each_tap(shape, kernel, |o, i, k| out[i] += k * v[o]);
    out
}

/// Task knobs shared by the registry in [`make_task`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskParams {
    pub sigma_n: f64,
    /// Fraction of coordinates kept by `inpaint_random`.
    pub keep_fraction: f64,
    /// Pooling factor for `sr_x4`.
    pub factor: usize,
    /// Gaussian blur size per axis; defaults to 61/256 of the signal side, made odd.
    pub kernel_size: Option<usize>,
    /// Gaussian blur std; defaults to 3.0 scaled like the kernel size.
    pub kernel_std: Option<f64>,
    pub oversample: usize,
    pub hdr_factor: f64,
    /// Whitespace-separated kernel taps for `deblur_custom`, one row per line.
    pub kernel_file: Option<PathBuf>,
    /// Kept indices for `inpaint_file`.
    pub mask_file: Option<PathBuf>,
}

impl Default for TaskParams {
    fn default() -> Self {
        Self {
            sigma_n: 0.05,
            keep_fraction: 0.3,
            factor: 4,
            kernel_size: None,
            kernel_std: None,
            oversample: 2,
            hdr_factor: 2.0,
            kernel_file: None,
            mask_file: None,
        }
    }
}

pub const TASK_NAMES: &[&str] = &[
    "identity",
    "inpaint_box",
    "inpaint_random",
    "inpaint_file",
    "sr_x4",
    "deblur_gauss",
    "deblur_custom",
    "phase_retrieval",
    "hdr",
];

/// Builds one of the registered tasks for a signal of the given shape.
///
/// Random parts (mask placement) are drawn from `rng`.
pub fn make_task<R: Rng + ?Sized>(
    name: &str,
    shape: SignalShape,
    params: &TaskParams,
    rng: &mut R,
) -> Result<MeasurementModel> {
    let n = shape.len();
    let sigma_n = params.sigma_n;
    match name {
        "identity" => MeasurementModel::identity(n, sigma_n),
        "inpaint_box" => MeasurementModel::mask(n, box_mask_keep(shape, rng), sigma_n),
        "inpaint_random" => {
            if !(0.0..=1.0).contains(&params.keep_fraction) {
                return Err(RepsError::InvalidConfig("keep_fraction must lie in [0, 1]".into()));
            }
            let m = (params.keep_fraction * n as f64).round() as usize;
            let keep = index::sample(rng, n, m).into_vec();
            MeasurementModel::mask(n, keep, sigma_n)
        }
        "inpaint_file" => {
            let path = params
                .mask_file
                .as_ref()
                .ok_or_else(|| RepsError::InvalidConfig("inpaint_file needs mask_file".into()))?;
            MeasurementModel::mask(n, load_mask(path)?, sigma_n)
        }
        "sr_x4" => MeasurementModel::downsample(shape, params.factor, sigma_n),
        "deblur_gauss" => {
            let (rows, cols) = shape.dims();
            let side = if rows == 1 { cols } else { rows.min(cols) };
            let size = params.kernel_size.unwrap_or_else(|| {
                let s = ((61.0 * side as f64) / 256.0).round() as usize;
                (s.max(3)) | 1
            });
            let std = params.kernel_std.unwrap_or(3.0 * size as f64 / 61.0);
            let kernel = Kernel::gaussian(size, std, rows > 1)?;
            MeasurementModel::convolve(shape, kernel, sigma_n)
        }
        "deblur_custom" => {
            let path = params
                .kernel_file
                .as_ref()
                .ok_or_else(|| RepsError::InvalidConfig("deblur_custom needs kernel_file".into()))?;
            MeasurementModel::convolve(shape, load_kernel(path)?, sigma_n)
        }
        "phase_retrieval" => MeasurementModel::fourier_magnitude(n, params.oversample, sigma_n),
        "hdr" => MeasurementModel::hdr_compress(n, params.hdr_factor, sigma_n),
        other => Err(RepsError::UnknownTask(other.to_string())),
    }
}

/// Indices kept outside a randomly placed box covering half of each axis.
fn box_mask_keep<R: Rng + ?Sized>(shape: SignalShape, rng: &mut R) -> Vec<usize> {
    let (rows, cols) = shape.dims();
    let (bh, bw) = (if rows == 1 { 1 } else { rows / 2 }, cols / 2);
    let r0 = rng.random_range(0..=rows - bh);
    let c0 = rng.random_range(0..=cols - bw);
    (0..rows * cols)
        .filter(|k| {
            let (r, c) = (k / cols, k % cols);
            !((r0..r0 + bh).contains(&r) && (c0..c0 + bw).contains(&c))
        })
        .collect()
}

/// Reads kept indices separated by whitespace or commas.
pub fn load_mask(path: impl AsRef<Path>) -> Result<Vec<usize>> {
    let text = std::fs::read_to_string(path)?;
    text.split(|c: char| c.is_whitespace() || c == ',')
        .filter(|t| !t.is_empty())
        .map(|t| t.parse::<usize>().map_err(|e| RepsError::Parse(format!("mask index `{t}`: {e}"))))
        .collect()
}

/// Reads a kernel: one row per non-empty line, taps separated by whitespace.
/// Lines starting with `#` are comments.
pub fn load_kernel(path: impl AsRef<Path>) -> Result<Kernel> {
    let text = std::fs::read_to_string(path)?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
        let row = line
            .split_whitespace()
            .map(|t| t.parse::<f64>().map_err(|e| RepsError::Parse(format!("kernel tap `{t}`: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    let cols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != cols) {
        return Err(RepsError::Parse("kernel rows have different lengths".into()));
    }
    Kernel::new(rows.len(), cols, rows.concat())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn linear_models() -> Vec<MeasurementModel> {
        let mut r = rng(0);
        let p = TaskParams::default();
        vec![
            make_task("identity", SignalShape::Line(12), &p, &mut r).unwrap(),
            make_task("inpaint_box", SignalShape::Line(12), &p, &mut r).unwrap(),
            make_task("inpaint_box", SignalShape::Grid { rows: 6, cols: 8 }, &p, &mut r).unwrap(),
            make_task("inpaint_random", SignalShape::Line(20), &p, &mut r).unwrap(),
            make_task("sr_x4", SignalShape::Line(16), &p, &mut r).unwrap(),
            make_task("sr_x4", SignalShape::Grid { rows: 8, cols: 12 }, &p, &mut r).unwrap(),
            make_task("deblur_gauss", SignalShape::Line(64), &p, &mut r).unwrap(),
            make_task("deblur_gauss", SignalShape::Grid { rows: 16, cols: 16 }, &p, &mut r).unwrap(),
            MeasurementModel::convolve(
                SignalShape::Grid { rows: 5, cols: 7 },
                Kernel::new(2, 3, vec![0.1, -0.4, 0.2, 0.3, 0.5, -0.2]).unwrap(),
                0.0,
            )
            .unwrap(),
        ]
    }

    fn fd_vjp(model: &MeasurementModel, x: &Vector, v: &Vector, h: f64) -> Vector {
        Vector::from_iterator(
            x.len(),
            (0..x.len()).map(|j| {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[j] += h;
                xm[j] -= h;
                (v.dot(&model.apply(&xp).unwrap()) - v.dot(&model.apply(&xm).unwrap())) / (2.0 * h)
            }),
        )
    }

    #[test]
    fn identity_passes_through() {
        let m = MeasurementModel::identity(3, 0.0).unwrap();
        let x = Vector::from_vec(vec![1.0, -2.0, 3.0]);
        assert_eq!(m.apply(&x).unwrap(), x);
        assert_eq!(m.vjp(&x, &x).unwrap(), x);
    }

    #[test]
    fn random_mask_keeps_thirty_percent() {
        let m = make_task("inpaint_random", SignalShape::Line(10), &TaskParams::default(), &mut rng(0)).unwrap();
        assert_eq!(m.output_dim(), 3);
        let Operator::Mask { keep, .. } = m.operator() else { panic!() };
        let x = Vector::from_iterator(10, (0..10).map(|i| i as f64 * 1.5));
        let y = m.apply(&x).unwrap();
        for (yi, &k) in y.iter().zip(keep) {
            assert_eq!(*yi, x[k]);
        }
        let v = Vector::from_vec(vec![1.0, 2.0, 3.0]);
        let back = m.vjp(&x, &v).unwrap();
        assert_eq!(back.iter().filter(|b| **b != 0.0).count(), 3);
        for (i, &k) in keep.iter().enumerate() {
            assert_eq!(back[k], v[i]);
        }
        let m = make_task("inpaint_random", SignalShape::Line(256), &TaskParams::default(), &mut rng(1)).unwrap();
        assert_eq!(m.output_dim(), 77);
    }

    #[test]
    fn box_mask_removes_half() {
        let m = make_task("inpaint_box", SignalShape::Line(16), &TaskParams::default(), &mut rng(2)).unwrap();
        assert_eq!(m.output_dim(), 8);
        let Operator::Mask { keep, .. } = m.operator() else { panic!() };
        let missing: Vec<usize> = (0..16).filter(|i| !keep.contains(i)).collect();
        assert!(missing.windows(2).all(|w| w[1] == w[0] + 1), "{missing:?}");
    }

    #[test]
    fn hdr_compression() {
        let m = MeasurementModel::hdr_compress(2, 2.0, 0.0).unwrap();
        let y = m.apply(&Vector::from_vec(vec![0.9, -0.9])).unwrap();
        assert_eq!(y.as_slice(), &[0.45, -0.45]);
        let y = m.apply(&Vector::from_vec(vec![3.0, -3.0])).unwrap();
        assert_eq!(y.as_slice(), &[1.0, -1.0]);
        let g = m.vjp(&Vector::from_vec(vec![0.5, 3.0]), &Vector::from_vec(vec![1.0, 1.0])).unwrap();
        assert_eq!(g.as_slice(), &[0.5, 0.0]);
    }

    #[test]
    fn hdr_is_lipschitz_and_idempotent_in_range() {
        let m = MeasurementModel::hdr_compress(6, 2.0, 0.0).unwrap();
        let mut r = rng(4);
        for _ in 0..200 {
            let a = standard_normal(&mut r, 6) * 3.0;
            let b = standard_normal(&mut r, 6) * 3.0;
            let (fa, fb) = (m.apply(&a).unwrap(), m.apply(&b).unwrap());
            assert!((fa - fb).norm() <= (&a - &b).norm());
            // Inside the unclipped range the map is exactly x / 2.
            let small = a.map(|v| v.clamp(-1.0, 1.0));
            let once = m.apply(&small).unwrap();
            assert_eq!(once, &small / 2.0);
        }
    }

    #[test]
    fn output_lengths() {
        let p = TaskParams::default();
        let m = make_task("phase_retrieval", SignalShape::Line(8), &p, &mut rng(0)).unwrap();
        assert_eq!(m.output_dim(), 16);
        let m = make_task("sr_x4", SignalShape::Line(16), &p, &mut rng(0)).unwrap();
        assert_eq!(m.output_dim(), 4);
        assert!(make_task("sr_x4", SignalShape::Line(10), &p, &mut rng(0)).is_err());
        assert!(matches!(
            make_task("motion_blur", SignalShape::Line(8), &p, &mut rng(0)),
            Err(RepsError::UnknownTask(_))
        ));
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let m = MeasurementModel::identity(3, 0.0).unwrap();
        assert!(m.apply(&Vector::zeros(4)).is_err());
        assert!(m.vjp(&Vector::zeros(3), &Vector::zeros(2)).is_err());
    }

    #[test]
    fn adjoint_identity_for_linear_operators() {
        let mut r = rng(7);
        for m in linear_models() {
            assert!(m.is_linear());
            for _ in 0..100 {
                let x = standard_normal(&mut r, m.input_dim());
                let v = standard_normal(&mut r, m.output_dim());
                let lhs = m.apply(&x).unwrap().dot(&v);
                let other = standard_normal(&mut r, m.input_dim());
                let rhs = x.dot(&m.vjp(&other, &v).unwrap());
                assert!((lhs - rhs).abs() < 1e-10, "{:?}: {lhs} vs {rhs}", m.operator());
            }
        }
    }

    #[test]
    fn dense_matrix_matches_apply() {
        let mut r = rng(8);
        for m in linear_models() {
            let a = m.dense_matrix().unwrap();
            let x = standard_normal(&mut r, m.input_dim());
            assert!((&a * &x - m.apply(&x).unwrap()).norm() < 1e-12);
        }
        assert!(MeasurementModel::hdr_compress(2, 2.0, 0.0).unwrap().dense_matrix().is_err());
    }

    #[test]
    fn fourier_magnitude_vjp_matches_finite_differences() {
        let m = MeasurementModel::fourier_magnitude(8, 2, 0.0).unwrap();
        let mut r = rng(9);
        for _ in 0..100 {
            let x = standard_normal(&mut r, 8);
            let v = standard_normal(&mut r, 16);
            let g = m.vjp(&x, &v).unwrap();
            let fd = fd_vjp(&m, &x, &v, 1e-6);
            assert!((&g - &fd).norm() <= 1e-5 * fd.norm().max(1.0));
        }
    }

    #[test]
    fn fourier_magnitude_symmetries() {
        let m = MeasurementModel::fourier_magnitude(7, 2, 0.0).unwrap();
        let mut r = rng(10);
        for _ in 0..20 {
            let x = standard_normal(&mut r, 7);
            let a = m.apply(&x).unwrap();
            let reflected = Vector::from_iterator(7, x.iter().rev().copied());
            assert!((m.apply(&reflected).unwrap() - &a).amax() < 1e-12);
            assert!((m.apply(&-&x).unwrap() - &a).amax() < 1e-12);
        }
        // Zero signal: every bin sits on the floor, gradient is zero by convention.
        let g = m.vjp(&Vector::zeros(7), &Vector::from_element(14, 1.0)).unwrap();
        assert_eq!(g, Vector::zeros(7));
    }

    #[test]
    fn two_point_phase_retrieval_magnitudes() {
        let m = MeasurementModel::fourier_magnitude(2, 2, 0.0).unwrap();
        let (a, b) = (0.8, -0.3);
        let y = m.apply(&Vector::from_vec(vec![a, b])).unwrap();
        let r = (a * a + b * b).sqrt();
        let want = [(a + b).abs(), r, (a - b).abs(), r];
        for (got, want) in y.iter().zip(want) {
            assert!((got - want).abs() < 1e-14);
        }
    }

    #[test]
    fn observe_noise_statistics() {
        let m = MeasurementModel::identity(4, 0.05).unwrap();
        let x = Vector::from_vec(vec![0.1, 0.2, -0.3, 1.0]);
        let mut r = rng(11);
        let n = 100_000;
        let mut sq = Vector::zeros(4);
        for _ in 0..n {
            let d = m.observe(&x, &mut r).unwrap().y - &x;
            sq += d.component_mul(&d);
        }
        for s in sq.iter() {
            let std = (s / n as f64).sqrt();
            assert!((std - 0.05).abs() < 0.02 * 0.05, "{std}");
        }
        let a = m.observe(&x, &mut rng(3)).unwrap();
        let b = m.observe(&x, &mut rng(3)).unwrap();
        assert_eq!(a, b);
        let clean = MeasurementModel::identity(4, 0.0).unwrap().observe(&x, &mut r).unwrap();
        assert_eq!(clean.y, x);
        assert_eq!(clean.ground_truth, Some(x));
    }

    #[test]
    fn loads_mask_and_kernel_files() {
        let dir = std::env::temp_dir().join(format!("reps-meas-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let mask = dir.join("mask.txt");
        std::fs::write(&mask, "0 3, 5\n7\n").unwrap();
        assert_eq!(load_mask(&mask).unwrap(), vec![0, 3, 5, 7]);
        let kern = dir.join("kernel.txt");
        std::fs::write(&kern, "# 2x2\n0.25 0.25\n0.25 0.25\n").unwrap();
        let k = load_kernel(&kern).unwrap();
        assert_eq!((k.rows(), k.cols()), (2, 2));
        std::fs::write(&kern, "1 2\n3\n").unwrap();
        assert!(load_kernel(&kern).is_err());
        std::fs::remove_dir_all(&dir).unwrap();
    }
}
