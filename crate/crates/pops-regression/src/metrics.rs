//! Calibration metrics: envelope violation, MAE ratio against box resamples,
//! Gaussian k-sigma coverage, and an overlaid observed/predicted error
//! histogram.

use ndarray::prelude::*;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::hypercube::{predict_envelope, Hypercube, PredictionBundle};
use crate::ridge::{epistemic_predict, RidgeFit};

/// Relative slack when testing a target against envelope bounds. Boundary
/// hits count as covered, and training extremes land on the bounds up to
/// rounding, so "outside" means beyond the bound by more than
/// `BOUNDARY_TOL * (1 + |y|)`.
pub const BOUNDARY_TOL: f64 = 1e-9;

/// Hard cap on histogram resolution regardless of what the bin-width rule
/// asks for.
pub const MAX_HIST_BINS: usize = 4096;

#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct HistBin {
    pub lo: f64,
    pub hi: f64,
    pub observed: usize,
    pub predicted: usize,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct CalibrationReport {
    pub n_test: usize,
    pub envelope_violation_rate: f64,
    pub observed_mae: f64,
    pub predicted_mae: f64,
    pub mae_ratio: f64,
    pub gaussian_3sigma_coverage: f64,
    pub histogram: Vec<HistBin>,
}

/// Fraction of targets strictly outside their envelope's [min, max] band,
/// with the [`BOUNDARY_TOL`] slack on each side.
pub fn envelope_violation(bundles: &[PredictionBundle], targets: &ArrayView1<f64>) -> Result<f64> {
    if bundles.len() != targets.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} bundles vs {} targets",
            bundles.len(),
            targets.len()
        )));
    }
    if bundles.is_empty() {
        return Ok(0.0);
    }
    let violations = bundles
        .iter()
        .zip(targets.iter())
        .filter(|(b, &y)| is_violation(b, y))
        .count();
    Ok(violations as f64 / bundles.len() as f64)
}

fn is_violation(bundle: &PredictionBundle, y: f64) -> bool {
    let slack = BOUNDARY_TOL * (1.0 + y.abs());
    y > bundle.max + slack || y < bundle.min - slack
}

/// Signed prediction deltas `θ_s·f − θ*_L·f` for `resamples` box draws at
/// every test row, flattened row-major. Each row gets its own ChaCha stream
/// so the draws for a given (seed, row) never depend on how many other rows
/// are present.
fn predicted_deltas(hc: &Hypercube, test: &Dataset, resamples: usize, seed: u64) -> Vec<f64> {
    let rank = hc.rank();
    let mut deltas = Vec::with_capacity(test.n_rows() * resamples);
    for (row, f) in test.features.rows().into_iter().enumerate() {
        let g = hc.basis.dot(&f);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(row as u64);
        for _ in 0..resamples {
            let mut delta = 0.0;
            for r in 0..rank {
                let u: f64 = rng.random();
                let coord = hc.lower[r] + (hc.upper[r] - hc.lower[r]) * u;
                delta += coord * g[r];
            }
            deltas.push(delta);
        }
    }
    deltas
}

/// Observed vs predicted mean absolute error around the min-loss fit.
///
/// Observed is `mean |y − θ*_L·f|` over test rows; predicted is the mean
/// absolute delta over uniform box resamples at the same rows. When both are
/// exactly zero (a happily specified model) the ratio is 1 by convention.
pub fn mae_ratio(
    fit: &RidgeFit,
    hc: &Hypercube,
    test: &Dataset,
    resamples: usize,
    seed: u64,
) -> Result<(f64, f64, f64)> {
    if resamples == 0 {
        return Err(Error::InvalidSpec("resamples must be >= 1".into()));
    }
    check_test_dims(fit, hc, test)?;
    let preds = test.features.dot(&fit.theta_star);
    let observed = (&test.targets - &preds).mapv(f64::abs).sum() / test.n_rows() as f64;
    let deltas = predicted_deltas(hc, test, resamples, seed);
    let predicted = deltas.iter().map(|d| d.abs()).sum::<f64>() / deltas.len() as f64;
    let ratio = if observed == 0.0 && predicted == 0.0 {
        1.0
    } else {
        predicted / observed
    };
    Ok((observed, predicted, ratio))
}

/// Fraction of test rows whose residual against the posterior mean sits
/// within `k_sigma` epistemic standard deviations.
pub fn gaussian_coverage(fit: &RidgeFit, test: &Dataset, k_sigma: f64) -> Result<f64> {
    if !(k_sigma.is_finite() && k_sigma > 0.0) {
        return Err(Error::InvalidSpec(format!(
            "k_sigma must be a positive real, got {k_sigma}"
        )));
    }
    if test.n_features() != fit.theta_star.len() {
        return Err(Error::DimensionMismatch(format!(
            "model has {} features, test data has {}",
            fit.theta_star.len(),
            test.n_features()
        )));
    }
    let covered = test
        .features
        .rows()
        .into_iter()
        .zip(test.targets.iter())
        .filter(|(f, &y)| {
            let (mean, std) = epistemic_predict(fit, *f);
            (y - mean).abs() <= k_sigma * std
        })
        .count();
    Ok(covered as f64 / test.n_rows() as f64)
}

fn check_test_dims(fit: &RidgeFit, hc: &Hypercube, test: &Dataset) -> Result<()> {
    let p = fit.theta_star.len();
    if test.n_features() != p {
        return Err(Error::DimensionMismatch(format!(
            "model has {} features, test data has {}",
            p,
            test.n_features()
        )));
    }
    if hc.basis.ncols() != p {
        return Err(Error::DimensionMismatch(format!(
            "hypercube basis over {} features, fit over {}",
            hc.basis.ncols(),
            p
        )));
    }
    Ok(())
}

/// Interpolated quantile (linear between order statistics) of a sorted slice.
fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = q * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let frac = pos - lo as f64;
    if lo + 1 >= n {
        sorted[n - 1]
    } else {
        sorted[lo] + frac * (sorted[lo + 1] - sorted[lo])
    }
}

/// Common bin edges for the observed/predicted overlay: Freedman–Diaconis
/// width on the observed errors, range covering both samples. Falls back to
/// ceil(sqrt(n)) equal bins when the interquartile range is degenerate.
fn histogram_edges(observed: &[f64], predicted: &[f64]) -> (f64, f64, usize) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in observed.iter().chain(predicted.iter()) {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !(lo.is_finite() && hi.is_finite()) || observed.is_empty() {
        return (0.0, 1.0, 1);
    }
    if hi <= lo {
        return (lo - 0.5, 1.0, 1);
    }
    let range = hi - lo;
    let mut sorted = observed.to_vec();
    sorted.sort_by(f64::total_cmp);
    let iqr = quantile_sorted(&sorted, 0.75) - quantile_sorted(&sorted, 0.25);
    let fd_width = 2.0 * iqr / (observed.len() as f64).cbrt();
    if fd_width.is_finite() && fd_width > 0.0 {
        let bins = ((range / fd_width).ceil() as usize).clamp(1, MAX_HIST_BINS);
        if bins == MAX_HIST_BINS {
            // Cap hit: spread the capped bin count evenly over the range.
            (lo, range / MAX_HIST_BINS as f64, MAX_HIST_BINS)
        } else {
            (lo, fd_width, bins)
        }
    } else {
        let bins = ((observed.len() as f64).sqrt().ceil() as usize).clamp(1, MAX_HIST_BINS);
        (lo, range / bins as f64, bins)
    }
}

fn fill_histogram(
    lo: f64,
    width: f64,
    bins: usize,
    observed: &[f64],
    predicted: &[f64],
) -> Vec<HistBin> {
    let index = |v: f64| -> usize {
        let idx = ((v - lo) / width).floor();
        if idx < 0.0 {
            0
        } else {
            (idx as usize).min(bins - 1)
        }
    };
    let mut out: Vec<HistBin> = (0..bins)
        .map(|i| HistBin {
            lo: lo + i as f64 * width,
            hi: lo + (i + 1) as f64 * width,
            observed: 0,
            predicted: 0,
        })
        .collect();
    for &v in observed {
        out[index(v)].observed += 1;
    }
    for &v in predicted {
        out[index(v)].predicted += 1;
    }
    out
}

/// Full calibration summary of a fitted model on held-out data: envelope
/// violation through the hypercube bounds, observed/predicted MAE and their
/// ratio, three-sigma Gaussian coverage of the baseline posterior, and the
/// overlaid signed-error histogram.
pub fn calibration_report(
    fit: &RidgeFit,
    hc: &Hypercube,
    test: &Dataset,
    resamples: usize,
    seed: u64,
) -> Result<CalibrationReport> {
    if resamples == 0 {
        return Err(Error::InvalidSpec("resamples must be >= 1".into()));
    }
    check_test_dims(fit, hc, test)?;
    let bundles: Vec<PredictionBundle> = test
        .features
        .rows()
        .into_iter()
        .map(|f| predict_envelope(hc, f))
        .collect();
    let ev = envelope_violation(&bundles, &test.targets.view())?;
    let preds = test.features.dot(&fit.theta_star);
    let observed_errors: Vec<f64> = test
        .targets
        .iter()
        .zip(preds.iter())
        .map(|(&y, &m)| y - m)
        .collect();
    let observed_mae =
        observed_errors.iter().map(|e| e.abs()).sum::<f64>() / observed_errors.len() as f64;
    let deltas = predicted_deltas(hc, test, resamples, seed);
    let predicted_mae = deltas.iter().map(|d| d.abs()).sum::<f64>() / deltas.len() as f64;
    let ratio = if observed_mae == 0.0 && predicted_mae == 0.0 {
        1.0
    } else {
        predicted_mae / observed_mae
    };
    let coverage = gaussian_coverage(fit, test, 3.0)?;
    let (lo, width, bins) = histogram_edges(&observed_errors, &deltas);
    let histogram = fill_histogram(lo, width, bins, &observed_errors, &deltas);
    Ok(CalibrationReport {
        n_test: test.n_rows(),
        envelope_violation_rate: ev,
        observed_mae,
        predicted_mae,
        mae_ratio: ratio,
        gaussian_3sigma_coverage: coverage,
        histogram,
    })
}
