//! Ensemble posterior over the pointwise fits: mass-matrix weights that make
//! the discrete family a calibrated mixture.
//!
//! The mass of member i at training point j is the Gaussian density of that
//! member's residual there, with variance mass_scale·Σ*_L. The variational
//! optimum reweights members by how much of each point's mass they carry:
//!
//!   w*ᵢ = λ Σⱼ wⱼ · M[i][j] / (Σₖ wₖ M[k][j]),   Σᵢ wᵢ w*ᵢ = 1.
//!
//! All mass arithmetic is in log space with per-column max subtraction; the
//! densities themselves can underflow long before the ratios do.

use ndarray::prelude::*;

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::hypercube::PredictionBundle;
use crate::pointwise::CorrectionSet;
use crate::ridge::{epistemic_predict, RidgeFit};

/// N×N member-by-point mass matrix, stored as log densities.
#[derive(Debug, Clone)]
pub struct MassMatrix {
    /// log M[i][j]: member i's log density at training point j.
    pub log_density: Array2<f64>,
    /// The Gaussian variance used: mass_scale · loss_residual_var.
    pub variance: f64,
    /// The σ² regularization multiplier the variance was built from.
    pub mass_scale: f64,
}

impl MassMatrix {
    /// Density M[i][j] (exponentiated on demand; may underflow to 0).
    pub fn density(&self, i: usize, j: usize) -> f64 {
        self.log_density[[i, j]].exp()
    }
}

/// Ensemble weights w*ᵢ for the pointwise members.
#[derive(Debug, Clone)]
pub struct EnsembleWeights {
    /// Length N, strictly positive, normalized so Σᵢ wᵢ·valuesᵢ = 1.
    pub values: Array1<f64>,
    /// The σ² regularization scale the mass matrix was built with.
    pub mass_scale: f64,
    /// The Lagrange normalization λ.
    pub normalization: f64,
}

/// Builds the mass matrix of all pointwise members against all training
/// points. O(N²P) — callers gate the O(N²) memory at the CLI layer.
pub fn mass_matrix(cs: &CorrectionSet, data: &Dataset, sigma_scale: f64) -> Result<MassMatrix> {
    if !(sigma_scale.is_finite() && sigma_scale > 0.0) {
        return Err(Error::InvalidSpec(format!(
            "sigma_scale must be a positive real, got {sigma_scale}"
        )));
    }
    if cs.base.loss_residual_var <= 0.0 {
        return Err(Error::SpecifiedModel);
    }
    let n = data.n_rows();
    if cs.n_rows() != n {
        return Err(Error::DimensionMismatch(format!(
            "{} members vs {} data rows",
            cs.n_rows(),
            n
        )));
    }
    let variance = sigma_scale * cs.base.loss_residual_var;
    let log_norm = -0.5 * (2.0 * std::f64::consts::PI * variance).ln();

    // Member i's prediction at point j: θ*_L·fⱼ + tᵢ·fⱼ.
    let base_pred = data.features.dot(&cs.base.theta_star);
    let member_shift = cs.corrections.dot(&data.features.t());
    let mut log_density = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for j in 0..n {
            let r = data.targets[j] - (base_pred[j] + member_shift[[i, j]]);
            log_density[[i, j]] = log_norm - r * r / (2.0 * variance);
        }
    }
    Ok(MassMatrix {
        log_density,
        variance,
        mass_scale: sigma_scale,
    })
}

/// Variational-optimal member weights from the mass matrix.
pub fn optimal_weights(mass: &MassMatrix, data: &Dataset) -> Result<EnsembleWeights> {
    let n = data.n_rows();
    if mass.log_density.nrows() != n || mass.log_density.ncols() != n {
        return Err(Error::DimensionMismatch(format!(
            "mass matrix is {}×{}, data has {n} rows",
            mass.log_density.nrows(),
            mass.log_density.ncols()
        )));
    }
    let mut unnorm = Array1::<f64>::zeros(n);
    for j in 0..n {
        let col = mass.log_density.column(j);
        let m = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if m == f64::NEG_INFINITY || !m.is_finite() {
            return Err(Error::DegenerateColumn(j));
        }
        let denom: f64 = col
            .iter()
            .zip(data.weights.iter())
            .map(|(&l, &w)| w * (l - m).exp())
            .sum();
        if denom <= 0.0 {
            return Err(Error::DegenerateColumn(j));
        }
        let wj = data.weights[j];
        for i in 0..n {
            unnorm[i] += wj * (mass.log_density[[i, j]] - m).exp() / denom;
        }
    }
    let mass_total: f64 = unnorm
        .iter()
        .zip(data.weights.iter())
        .map(|(&u, &w)| w * u)
        .sum();
    let lambda = 1.0 / mass_total;
    let values = unnorm * lambda;
    if values.iter().any(|&v| !(v.is_finite() && v > 0.0)) {
        return Err(Error::DegenerateColumn(
            values
                .iter()
                .position(|&v| !(v.is_finite() && v > 0.0))
                .unwrap_or(0),
        ));
    }
    Ok(EnsembleWeights {
        values,
        mass_scale: mass.mass_scale,
        normalization: lambda,
    })
}

/// Mixture prediction of the weighted pointwise family at one feature
/// vector: mean and std under member mass wᵢ·w*ᵢ, extremes over all members.
pub fn ensemble_predict(
    cs: &CorrectionSet,
    weights: &EnsembleWeights,
    data: &Dataset,
    f: ArrayView1<f64>,
) -> Result<PredictionBundle> {
    let n = cs.n_rows();
    if weights.values.len() != n || data.n_rows() != n {
        return Err(Error::DimensionMismatch(format!(
            "{} corrections vs {} weights vs {} rows",
            n,
            weights.values.len(),
            data.n_rows()
        )));
    }
    let masses = &data.weights * &weights.values;
    ensemble_predict_from(&cs.base, &cs.corrections, masses.view(), f)
}

/// [`ensemble_predict`] from raw parts: the base fit, the member correction
/// rows, and per-member probability masses (the products wᵢ·w*ᵢ, which sum
/// to one). This is the form a saved model can replay without the training
/// dataset.
pub fn ensemble_predict_from(
    base: &RidgeFit,
    corrections: &Array2<f64>,
    masses: ArrayView1<f64>,
    f: ArrayView1<f64>,
) -> Result<PredictionBundle> {
    let n = corrections.nrows();
    if masses.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "{} corrections vs {} masses",
            n,
            masses.len()
        )));
    }
    if corrections.ncols() != f.len() || base.theta_star.len() != f.len() {
        return Err(Error::DimensionMismatch(format!(
            "feature vector of length {} against {}-column corrections",
            f.len(),
            corrections.ncols()
        )));
    }
    let base_mean = base.theta_star.dot(&f);
    let shifts = corrections.dot(&f);
    let mut mean = 0.0;
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for i in 0..n {
        let pred = base_mean + shifts[i];
        mean += masses[i] * pred;
        lo = lo.min(pred);
        hi = hi.max(pred);
    }
    let mut var = 0.0;
    for i in 0..n {
        let pred = base_mean + shifts[i];
        var += masses[i] * (pred - mean) * (pred - mean);
    }
    let (_, std_epistemic) = epistemic_predict(base, f);
    Ok(PredictionBundle {
        mean,
        std_misspec: var.max(0.0).sqrt(),
        std_epistemic,
        max: hi,
        min: lo,
    })
}
