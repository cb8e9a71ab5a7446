//! Pointwise-optimal fits: for each training row, the parameter vector that
//! interpolates that row exactly while staying minimal in the penalized loss.
//!
//! Each such fit is a rank-one update of the global minimum-loss solution:
//!
//!   θ*ᵢ = θ*_L + (eᵢ / hᵢ) · A fᵢ,   eᵢ = yᵢ − θ*_L·fᵢ,   hᵢ = fᵢᵀ A fᵢ,
//!
//! so the whole family costs one extra N×P×P product on top of the base fit.
//! [`constrained_fit_oracle`] solves the same problem as an explicit
//! equality-constrained quadratic program through a KKT saddle system; it
//! shares no code with the rank-one path and exists to cross-check it.

use ndarray::prelude::*;
use ndarray_linalg::Solve;

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::ridge::RidgeFit;

/// Leverages below this are treated as numerically empty rows: the rank-one
/// update divides by h, and a vanishing h means the row is invisible to the
/// quadratic form.
pub const LEVERAGE_MIN: f64 = 1e-12;

/// The corrections tᵢ = θ*ᵢ − θ*_L for every training row, with the residuals
/// and leverages that produced them, and the base fit they perturb.
#[derive(Debug, Clone)]
pub struct CorrectionSet {
    /// N×P; row i is tᵢ.
    pub corrections: Array2<f64>,
    /// eᵢ = yᵢ − θ*_L·fᵢ.
    pub residuals: Array1<f64>,
    /// hᵢ = fᵢᵀ A fᵢ.
    pub leverages: Array1<f64>,
    /// The fit the corrections are relative to.
    pub base: RidgeFit,
}

impl CorrectionSet {
    pub fn n_rows(&self) -> usize {
        self.corrections.nrows()
    }

    /// θ*ᵢ = θ*_L + tᵢ.
    pub fn pointwise_parameters(&self, i: usize) -> Array1<f64> {
        &self.base.theta_star + &self.corrections.row(i)
    }
}

/// Computes all pointwise fits for the rows of `data` around `fit`.
pub fn pointwise_fits(fit: &RidgeFit, data: &Dataset) -> Result<CorrectionSet> {
    let n = data.n_rows();
    let p = data.n_features();
    if fit.theta_star.len() != p {
        return Err(Error::DimensionMismatch(format!(
            "fit has P = {}, data has P = {p}",
            fit.theta_star.len()
        )));
    }
    if fit.n_train != n {
        return Err(Error::DimensionMismatch(format!(
            "fit was built from N = {}, data has N = {n}",
            fit.n_train
        )));
    }

    // B = F·A gives each row's A fᵢ; leverages are row dots with F.
    let b = data.features.dot(&fit.a_matrix);
    let leverages = Array1::from_shape_fn(n, |i| b.row(i).dot(&data.features.row(i)));
    for (i, &h) in leverages.iter().enumerate() {
        if !(h.is_finite() && h >= LEVERAGE_MIN) {
            return Err(Error::LeverageUnderflow {
                row: i,
                leverage: h,
            });
        }
    }
    let residuals = &data.targets - &data.features.dot(&fit.theta_star);
    let scale = &residuals / &leverages;
    let corrections = &b * &scale.view().insert_axis(Axis(1));
    Ok(CorrectionSet {
        corrections,
        residuals,
        leverages,
        base: fit.clone(),
    })
}

/// Independent oracle: minimize the penalized weighted loss subject to
/// θ·fᵢ = yᵢ, via the (P+1)×(P+1) KKT saddle system
///
///   [ C_reg  fᵢ ] [θ]   [⟨f y⟩]
///   [ fᵢᵀ    0  ] [ν] = [ yᵢ  ],   C_reg = ⟨f fᵀ⟩ + noise_var·α/N · I.
///
/// Builds the Gram matrix explicitly and LU-solves; deliberately disjoint
/// from the SVD/rank-one machinery so the two routes can check each other.
pub fn constrained_fit_oracle(data: &Dataset, row: usize, fit: &RidgeFit) -> Result<Array1<f64>> {
    let n = data.n_rows();
    let p = data.n_features();
    if row >= n {
        return Err(Error::DimensionMismatch(format!(
            "row {row} out of range for N = {n}"
        )));
    }
    let mut kkt = Array2::<f64>::zeros((p + 1, p + 1));
    for i in 0..n {
        let w = data.weights[i];
        let f = data.features.row(i);
        for a in 0..p {
            for b in 0..p {
                kkt[[a, b]] += w * f[a] * f[b];
            }
        }
    }
    let reg = fit.noise_var * fit.prior_precision_scale / n as f64;
    for a in 0..p {
        kkt[[a, a]] += reg;
    }
    let fi = data.features.row(row);
    for a in 0..p {
        kkt[[a, p]] = fi[a];
        kkt[[p, a]] = fi[a];
    }
    let mut rhs = Array1::<f64>::zeros(p + 1);
    for i in 0..n {
        let w = data.weights[i];
        let f = data.features.row(i);
        for a in 0..p {
            rhs[a] += w * f[a] * data.targets[i];
        }
    }
    rhs[p] = data.targets[row];
    let sol = kkt.solve(&rhs).map_err(|_| Error::SingularSystem)?;
    Ok(sol.slice(s![..p]).to_owned())
}

/// Relative gap of the leverage-weighted centroid of the pointwise fits from
/// θ*_L:  ‖Σᵢ wᵢhᵢθ*ᵢ / Σᵢ wᵢhᵢ − θ*_L‖ / ‖θ*_L‖.
/// Vanishes with a zero prior, where Σᵢ wᵢhᵢ = P exactly.
pub fn leverage_centroid_check(cs: &CorrectionSet, data: &Dataset) -> f64 {
    let p = cs.base.theta_star.len();
    let mut acc = Array1::<f64>::zeros(p);
    let mut mass = 0.0;
    for i in 0..cs.n_rows() {
        let wh = data.weights[i] * cs.leverages[i];
        acc += &(cs.pointwise_parameters(i) * wh);
        mass += wh;
    }
    let centroid = acc / mass;
    let diff = &centroid - &cs.base.theta_star;
    let num = diff.dot(&diff).sqrt();
    let den = cs.base.theta_star.dot(&cs.base.theta_star).sqrt();
    if den > 0.0 {
        num / den
    } else {
        num
    }
}
