//! Pre-averages Ȳ, noise offsets Ŷ and jump-truncation masks.
//!
//! Row r of the pre-averaged matrix holds Ȳ_{r+1}, built from increments
//! r .. r+lₙ−2 (0-based). Offset r holds Ŷ_{r+1}, built from increments
//! r .. r+lₙ−1, so there is one fewer offset than pre-average.

use std::sync::Arc;

use rustfft::{num_complex::Complex, Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::IncrementSeries;
use crate::kernel::DiscreteKernel;
use crate::linalg::Mat;

/// Above this n·lₙ the FFT path is used.
pub const FFT_SWITCH: usize = 1 << 22;

/// Sliding correlation out[r] = Σ_q w[q]·x[r+q] over all full overlaps.
pub struct Correlator {
    w: Vec<f64>,
    n_x: usize,
    fft: Option<FftPlan>,
}

struct FftPlan {
    size: usize,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
    w_hat: Vec<Complex<f64>>,
}

impl Correlator {
    pub fn new(w: &[f64], n_x: usize, use_fft: bool) -> Self {
        let fft = if use_fft {
            let size = (n_x + w.len() - 1).next_power_of_two();
            let mut planner = FftPlanner::new();
            let fwd = planner.plan_fft_forward(size);
            let inv = planner.plan_fft_inverse(size);
            // correlation = convolution with the reversed filter
            let mut w_hat = vec![Complex::new(0.0, 0.0); size];
            for (q, &wq) in w.iter().rev().enumerate() {
                w_hat[q].re = wq;
            }
            fwd.process(&mut w_hat);
            Some(FftPlan { size, fwd, inv, w_hat })
        } else {
            None
        };
        Correlator { w: w.to_vec(), n_x, fft }
    }

    pub fn out_len(&self) -> usize {
        self.n_x + 1 - self.w.len()
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.n_x);
        match &self.fft {
            None => correlate_direct(x, &self.w),
            Some(p) => {
                let mut buf = vec![Complex::new(0.0, 0.0); p.size];
                for (b, &v) in buf.iter_mut().zip(x) {
                    b.re = v;
                }
                p.fwd.process(&mut buf);
                for (b, wh) in buf.iter_mut().zip(&p.w_hat) {
                    *b *= wh;
                }
                p.inv.process(&mut buf);
                let norm = 1.0 / p.size as f64;
                let off = self.w.len() - 1;
                (0..self.out_len()).map(|r| buf[r + off].re * norm).collect()
            }
        }
    }
}

pub fn correlate_direct(x: &[f64], w: &[f64]) -> Vec<f64> {
    let m = x.len() + 1 - w.len();
    (0..m).map(|r| w.iter().zip(&x[r..]).map(|(a, b)| a * b).sum()).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConvPath {
    Auto,
    Direct,
    Fft,
}

fn choose(path: ConvPath, n: usize, l: usize) -> bool {
    match path {
        ConvPath::Auto => n.saturating_mul(l) > FFT_SWITCH,
        ConvPath::Direct => false,
        ConvPath::Fft => true,
    }
}

fn check_len(incr: &IncrementSeries, need: usize) -> Result<()> {
    if incr.len() < need {
        return Err(Error::Size(format!("{} increments, window needs at least {need}", incr.len())));
    }
    Ok(())
}

/// Ȳ for every valid index; (n_incr − lₙ + 2) × d.
pub fn preaverage_with(incr: &IncrementSeries, dk: &DiscreteKernel, path: ConvPath) -> Result<Mat> {
    check_len(incr, dk.l_n - 1)?;
    let n = incr.len();
    let d = incr.d();
    let c = Correlator::new(&dk.weights, n, choose(path, n, dk.l_n));
    let rows = c.out_len();
    let norm = dk.psi_n.sqrt().recip();
    let mut out = Mat::zeros(rows, d);
    for j in 0..d {
        let col = c.apply(incr.values.column(j).as_slice());
        for (r, v) in col.into_iter().enumerate() {
            out[(r, j)] = v * norm;
        }
    }
    Ok(out)
}

pub fn preaverage(incr: &IncrementSeries, dk: &DiscreteKernel) -> Result<Mat> {
    preaverage_with(incr, dk, ConvPath::Auto)
}

/// Sequence of symmetric d×d offsets Ŷ, stored packed row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseOffsets {
    pub d: usize,
    pub count: usize,
    data: Vec<f64>,
}

impl NoiseOffsets {
    pub fn get(&self, i: usize) -> Mat {
        let d = self.d;
        Mat::from_row_slice(d, d, &self.data[i * d * d..(i + 1) * d * d])
    }

    /// Σ_{i ∈ [from, to)} Ŷ_i
    pub fn window_sum(&self, from: usize, to: usize) -> Mat {
        let d = self.d;
        let mut acc = vec![0.0; d * d];
        for i in from..to {
            for (a, v) in acc.iter_mut().zip(&self.data[i * d * d..(i + 1) * d * d]) {
                *a += v;
            }
        }
        Mat::from_row_slice(d, d, &acc)
    }
}

pub fn noise_offset_with(incr: &IncrementSeries, dk: &DiscreteKernel, path: ConvPath) -> Result<NoiseOffsets> {
    check_len(incr, dk.l_n)?;
    let n = incr.len();
    let d = incr.d();
    let w2: Vec<f64> = dk.diff_weights.iter().map(|w| w * w).collect();
    let c = Correlator::new(&w2, n, choose(path, n, dk.l_n));
    let count = c.out_len();
    let norm = 0.5 / dk.psi_n;
    let mut data = vec![0.0; count * d * d];
    let mut z = vec![0.0; n];
    for a in 0..d {
        for b in a..d {
            let xa = incr.values.column(a);
            let xb = incr.values.column(b);
            for i in 0..n {
                z[i] = xa[i] * xb[i];
            }
            let col = c.apply(&z);
            for (r, v) in col.into_iter().enumerate() {
                let v = v * norm;
                data[r * d * d + a * d + b] = v;
                data[r * d * d + b * d + a] = v;
            }
        }
    }
    Ok(NoiseOffsets { d, count, data })
}

pub fn noise_offset(incr: &IncrementSeries, dk: &DiscreteKernel) -> Result<NoiseOffsets> {
    noise_offset_with(incr, dk, ConvPath::Auto)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreAveragedSeries {
    pub ybar: Mat,
    pub yhat: Option<NoiseOffsets>,
    pub l_n: usize,
    /// One-based index of row 0.
    pub base_index: usize,
}

impl PreAveragedSeries {
    pub fn build(incr: &IncrementSeries, dk: &DiscreteKernel, with_offsets: bool, path: ConvPath) -> Result<Self> {
        let ybar = preaverage_with(incr, dk, path)?;
        let yhat = if with_offsets { Some(noise_offset_with(incr, dk, path)?) } else { None };
        Ok(PreAveragedSeries { ybar, yhat, l_n: dk.l_n, base_index: 1 })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TruncationMode {
    GlobalNorm,
    Elementwise,
    Off,
}

/// How σ̄² enters the threshold scale α.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ThresholdScale {
    /// α = α_mult·σ̄², as written in the tuning tables.
    Variance,
    /// α = α_mult·σ̄, which has the units of Ȳ/Δₙ^{1/2}.
    Volatility,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruncationSpec {
    pub mode: TruncationMode,
    pub alpha_mult: f64,
    pub rho: f64,
    pub scale: ThresholdScale,
    /// Resolved α (length 1 for global mode, d for elementwise); empty until resolved.
    #[serde(default)]
    pub alpha: Vec<f64>,
    /// Resolved νₙ = α·Δₙ^ρ.
    #[serde(default)]
    pub nu_n: Vec<f64>,
}

impl TruncationSpec {
    pub fn new(mode: TruncationMode, alpha_mult: f64, rho: f64, scale: ThresholdScale) -> Self {
        TruncationSpec { mode, alpha_mult, rho, scale, alpha: vec![], nu_n: vec![] }
    }

    pub fn off() -> Self {
        Self::new(TruncationMode::Off, 1.0, 0.47, ThresholdScale::Variance)
    }

    pub fn is_resolved(&self) -> bool {
        self.mode == TruncationMode::Off || !self.nu_n.is_empty()
    }
}

/// Resolve νₙ from per-asset variance estimates σ̄².
pub fn threshold(delta_n: f64, spec: &TruncationSpec, sigma_bar2: &[f64]) -> Result<TruncationSpec> {
    let mut out = spec.clone();
    if spec.mode == TruncationMode::Off {
        out.alpha.clear();
        out.nu_n.clear();
        return Ok(out);
    }
    if !(spec.alpha_mult > 0.0) {
        return Err(Error::Config(format!("truncation multiplier must be positive, got {}", spec.alpha_mult)));
    }
    if sigma_bar2.is_empty() {
        return Err(Error::Data("no variance estimates supplied for truncation".into()));
    }
    if let Some(bad) = sigma_bar2.iter().find(|&&v| !(v > 0.0 && v.is_finite())) {
        return Err(Error::Data(format!("variance estimate {bad} must be positive for truncation")));
    }
    let level = |v: f64| match spec.scale {
        ThresholdScale::Variance => v,
        ThresholdScale::Volatility => v.sqrt(),
    };
    let dr = delta_n.powf(spec.rho);
    out.alpha = match spec.mode {
        TruncationMode::GlobalNorm => {
            let d = sigma_bar2.len() as f64;
            let mean = sigma_bar2.iter().sum::<f64>() / d;
            vec![spec.alpha_mult * level(mean) * d.sqrt()]
        }
        TruncationMode::Elementwise => sigma_bar2.iter().map(|&v| spec.alpha_mult * level(v)).collect(),
        TruncationMode::Off => unreachable!(),
    };
    out.nu_n = out.alpha.iter().map(|a| a * dr).collect();
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TruncationMask {
    pub keep: Vec<bool>,
}

impl TruncationMask {
    pub fn kept_fraction(&self) -> f64 {
        if self.keep.is_empty() {
            return 1.0;
        }
        self.keep.iter().filter(|&&k| k).count() as f64 / self.keep.len() as f64
    }
}

pub fn truncate(ybar: &Mat, spec: &TruncationSpec) -> Result<TruncationMask> {
    let n = ybar.nrows();
    let d = ybar.ncols();
    let keep = match spec.mode {
        TruncationMode::Off => vec![true; n],
        TruncationMode::GlobalNorm => {
            let nu = *spec.nu_n.first().ok_or_else(|| Error::Config("truncation threshold not resolved".into()))?;
            (0..n).map(|i| ybar.row(i).norm() <= nu).collect()
        }
        TruncationMode::Elementwise => {
            if spec.nu_n.len() != d {
                return Err(Error::Config(format!("{} thresholds for {d} assets", spec.nu_n.len())));
            }
            (0..n).map(|i| (0..d).all(|j| ybar[(i, j)].abs() <= spec.nu_n[j])).collect()
        }
    };
    Ok(TruncationMask { keep })
}
