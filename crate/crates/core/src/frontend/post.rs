use std::f64::consts::LN_10;

use crate::error::{Error, Result};
use crate::matrix::{mean_and_variance, FeatureMatrix};

/// Numerator taps of the RASTA band-pass, `0.1 * (2 + z^-1 - z^-3 - 2 z^-4)`.
pub const RASTA_NUMERATOR: [f64; 5] = [0.2, 0.1, 0.0, -0.1, -0.2];
/// Pole of the RASTA integrator, `1 / (1 - 0.98 z^-1)`.
pub const RASTA_POLE: f64 = 0.98;

/// Band-pass filters every coefficient trajectory. Initial state is zero and
/// the start-up transient is kept.
pub fn rasta_filter(features: &FeatureMatrix) -> Result<FeatureMatrix> {
    features.check_finite("rasta input")?;
    let (rows, dim) = (features.rows(), features.dim());
    let mut out = FeatureMatrix::zeros(rows, dim);
    for d in 0..dim {
        let mut prev_y = 0.0;
        for t in 0..rows {
            let mut y = RASTA_POLE * prev_y;
            for (lag, &b) in RASTA_NUMERATOR.iter().enumerate() {
                if lag <= t && b != 0.0 {
                    y += b * features.get(t - lag, d);
                }
            }
            out.row_mut(t)[d] = y;
            prev_y = y;
        }
    }
    Ok(out)
}

fn regression_deltas(features: &FeatureMatrix, window: usize) -> FeatureMatrix {
    let (rows, dim) = (features.rows(), features.dim());
    let denom: f64 = 2.0 * (1..=window).map(|n| (n * n) as f64).sum::<f64>();
    let clamp = |t: isize| t.clamp(0, rows as isize - 1) as usize;
    let mut out = FeatureMatrix::zeros(rows, dim);
    for t in 0..rows {
        for n in 1..=window {
            let ahead = features.row(clamp(t as isize + n as isize));
            let behind = features.row(clamp(t as isize - n as isize));
            let w = n as f64 / denom;
            for (o, (a, b)) in out.row_mut(t).iter_mut().zip(ahead.iter().zip(behind)) {
                *o += w * (a - b);
            }
        }
    }
    out
}

/// Appends deltas and double-deltas (regression over `±window` frames with
/// edge replication), tripling the dimension.
pub fn add_dynamics(features: &FeatureMatrix, window: usize) -> Result<FeatureMatrix> {
    if window < 1 {
        return Err(Error::invalid("delta window must be >= 1"));
    }
    if features.is_empty() {
        return Ok(FeatureMatrix::empty(features.dim() * 3));
    }
    let delta = regression_deltas(features, window);
    let delta2 = regression_deltas(&delta, window);
    let dim = features.dim();
    let mut out = FeatureMatrix::zeros(features.rows(), 3 * dim);
    for t in 0..features.rows() {
        let row = out.row_mut(t);
        row[..dim].copy_from_slice(features.row(t));
        row[dim..2 * dim].copy_from_slice(delta.row(t));
        row[2 * dim..].copy_from_slice(delta2.row(t));
    }
    Ok(out)
}

/// Utterance-level mean and variance normalization. Dimensions with
/// variance below 1e-12 are only mean-subtracted.
pub fn cmvn(features: &FeatureMatrix) -> Result<FeatureMatrix> {
    features.check_finite("cmvn input")?;
    let (mean, var) = mean_and_variance(features);
    let scale: Vec<f64> = var
        .iter()
        .map(|&v| if v < 1e-12 { 1.0 } else { 1.0 / v.sqrt() })
        .collect();
    let mut out = features.clone();
    for t in 0..out.rows() {
        for ((x, m), s) in out.row_mut(t).iter_mut().zip(&mean).zip(&scale) {
            *x = (*x - m) * s;
        }
    }
    Ok(out)
}

/// Keeps frames whose log-energy lies within `drop_db` of the utterance
/// maximum and above `abs_floor` (both in natural-log energy units).
pub fn energy_sad(
    features: &FeatureMatrix,
    energy_column: usize,
    drop_db: f64,
    abs_floor: f64,
) -> Result<Vec<bool>> {
    if features.is_empty() {
        return Err(Error::empty("no frames for SAD"));
    }
    if energy_column >= features.dim() {
        return Err(Error::invalid(format!(
            "energy column {energy_column} out of range for dim {}",
            features.dim()
        )));
    }
    let energies = features.column(energy_column);
    let max = energies.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let rel = max - drop_db / 10.0 * LN_10;
    Ok(energies.iter().map(|&e| e > rel && e > abs_floor).collect())
}
