//! Bipower variation pre-estimators of average variance.

use std::f64::consts::FRAC_PI_2;

use crate::error::{Error, Result};
use crate::grid::{IncrementSeries, LogPriceGrid};
use crate::kernel::DiscreteKernel;
use crate::preavg::PreAveragedSeries;

/// Standard bipower variation per asset, (π/2)(1/t) Σ |Δ_{i−1}||Δ_i|.
pub fn bipower(grid: &LogPriceGrid) -> Result<Vec<f64>> {
    if grid.n() < 3 {
        return Err(Error::Size(format!("bipower needs n >= 3 observations, got {}", grid.n())));
    }
    let incr = grid.increments();
    let t = grid.horizon();
    Ok((0..grid.d())
        .map(|r| {
            let x = incr.values.column(r);
            let s: f64 = x.as_slice().windows(2).map(|w| w[0].abs() * w[1].abs()).sum();
            FRAC_PI_2 * s / t
        })
        .collect())
}

/// Bipower on pre-averaged returns lₙ apart, minus the noise offset.
///
/// At one-second sampling raw bipower is dominated by the noise; this version
/// targets the average spot variance instead. Floors at zero.
pub fn preaveraged_bipower(incr: &IncrementSeries, pre: &PreAveragedSeries, dk: &DiscreteKernel) -> Result<Vec<f64>> {
    let l = pre.l_n;
    let rows = pre.ybar.nrows();
    if rows <= l {
        return Err(Error::Size(format!("{rows} pre-averaged returns leave no pairs {l} apart")));
    }
    let pairs = rows - l;
    let n = incr.len();
    // Ŷ rows r use increments r..r+l−1
    let count = (n + 1).saturating_sub(l).min(rows);
    if count == 0 {
        return Err(Error::Size("no noise offsets available".into()));
    }
    let norm = 0.5 / dk.psi_n;
    let mut out = Vec::with_capacity(incr.d());
    for r in 0..incr.d() {
        let y = pre.ybar.column(r);
        let bv: f64 = (0..pairs).map(|i| y[i].abs() * y[i + l].abs()).sum::<f64>() / pairs as f64;
        let x = incr.values.column(r);
        let mut prefix = vec![0.0; n + 1];
        for i in 0..n {
            prefix[i + 1] = prefix[i] + x[i] * x[i];
        }
        let mut off = 0.0;
        for (h, w) in dk.diff_weights.iter().enumerate() {
            off += w * w * (prefix[h + count] - prefix[h]);
        }
        off *= norm / count as f64;
        out.push(((FRAC_PI_2 * bv - off) / incr.delta_n).max(0.0));
    }
    Ok(out)
}
