//! Reconstruction metrics. SSIM is the 1-D variant with a uniform window,
//! population moments, and stride one, averaged over all window positions.

use crate::error::{RepsError, Result};
use crate::Vector;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SsimParams {
    pub window: usize,
    pub k1: f64,
    pub k2: f64,
    pub peak: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        Self { window: 8, k1: 0.01, k2: 0.03, peak: 1.0 }
    }
}

fn check_pair(x: &Vector, x_ref: &Vector) -> Result<()> {
    RepsError::check_dim("metric signals", x_ref.len(), x.len())?;
    if x.is_empty() {
        return Err(RepsError::Domain("metrics need non-empty signals".into()));
    }
    Ok(())
}

pub fn mse(x: &Vector, x_ref: &Vector) -> Result<f64> {
    check_pair(x, x_ref)?;
    Ok((x - x_ref).norm_squared() / x.len() as f64)
}

/// `10 log10(peak² / MSE)`; `+∞` when the signals are identical.
pub fn psnr(x: &Vector, x_ref: &Vector, peak: f64) -> Result<f64> {
    if !(peak > 0.0) {
        return Err(RepsError::Domain(format!("peak {peak} must be positive")));
    }
    let e = mse(x, x_ref)?;
    if e == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / e).log10())
}

pub fn ssim(x: &Vector, x_ref: &Vector, params: &SsimParams) -> Result<f64> {
    check_pair(x, x_ref)?;
    let w = params.window;
    if w == 0 || w > x.len() {
        return Err(RepsError::Domain(format!("window {w} does not fit a signal of length {}", x.len())));
    }
    if !(params.peak > 0.0) {
        return Err(RepsError::Domain(format!("peak {} must be positive", params.peak)));
    }
    let c1 = (params.k1 * params.peak).powi(2);
    let c2 = (params.k2 * params.peak).powi(2);
    let n_windows = x.len() - w + 1;
    let inv_w = 1.0 / w as f64;
    let mut total = 0.0;
    for start in 0..n_windows {
        let a = x.rows(start, w);
        let b = x_ref.rows(start, w);
        let ma = a.sum() * inv_w;
        let mb = b.sum() * inv_w;
        let (mut va, mut vb, mut cab) = (0.0, 0.0, 0.0);
        for (u, v) in a.iter().zip(b.iter()) {
            let (du, dv) = (u - ma, v - mb);
            va += du * du;
            vb += dv * dv;
            cab += du * dv;
        }
        let (va, vb, cab) = (va * inv_w, vb * inv_w, cab * inv_w);
        total += (2.0 * ma * mb + c1) * (2.0 * cab + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    Ok(total / n_windows as f64)
}

/// Per-run quality summary. Fields that do not apply to a run are `None`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MetricReport {
    pub psnr: Option<f64>,
    pub ssim: Option<f64>,
    pub mse: Option<f64>,
    pub posterior_mean_err: Option<f64>,
    pub tv_distance: Option<f64>,
}

impl MetricReport {
    /// PSNR and MSE against `x_ref`; SSIM only when the signal is at least one window long.
    pub fn reconstruction(x: &Vector, x_ref: &Vector, params: &SsimParams) -> Result<Self> {
        let ssim = (x.len() >= params.window).then(|| ssim(x, x_ref, params)).transpose()?;
        Ok(Self {
            psnr: Some(psnr(x, x_ref, params.peak)?),
            ssim,
            mse: Some(mse(x, x_ref)?),
            ..Self::default()
        })
    }
}
