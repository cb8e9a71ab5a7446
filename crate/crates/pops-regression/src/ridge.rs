//! Weighted Bayesian ridge: the minimum-loss surrogate fit and its epistemic
//! posterior.
//!
//! With weighted second moments ⟨g⟩ = Σᵢ wᵢ gᵢ, the fit solves
//!
//!   A = [noise_var·α/N · I + ⟨f fᵀ⟩]⁻¹,    θ* = A ⟨f y⟩,
//!
//! where α is the prior precision scale. A is materialized explicitly because
//! leverages h(f) = fᵀA f and epistemic variances reuse it everywhere.
//! Internally the fit runs on the economy SVD of the √w-scaled design matrix,
//! the classical route for Bayesian ridge: it avoids squaring the condition
//! number and exposes rank deficiency directly through the spectrum.

use ndarray::prelude::*;
use ndarray_linalg::{JobSvd, SVDDC};

use crate::dataset::Dataset;
use crate::error::{Error, Result};

/// Default observation noise variance. The data are treated as
/// near-deterministic; this is a floor, never fitted.
pub const DEFAULT_NOISE_VAR: f64 = 1e-8;

/// Scale factor of the default prior precision relative to the feature
/// second-moment trace.
pub const DEFAULT_PRIOR_REL: f64 = 1e-10;

#[derive(Debug, Clone)]
pub struct RidgeFit {
    /// Minimum-loss parameters θ*, length P.
    pub theta_star: Array1<f64>,
    /// P×P posterior shape matrix A (symmetric positive definite).
    pub a_matrix: Array2<f64>,
    /// Observation noise variance σ_y².
    pub noise_var: f64,
    /// Prior precision scale α (0 = improper flat prior).
    pub prior_precision_scale: f64,
    /// Number of training rows N.
    pub n_train: usize,
    /// Weighted mean squared residual Σᵢ wᵢ (yᵢ − θ*·fᵢ)².
    pub loss_residual_var: f64,
}

/// Default prior precision: a vanishing fraction of the average feature
/// scale, α = 1e-10 · Tr(⟨f fᵀ⟩)/P, so the prior never competes with data.
pub fn default_prior_scale(data: &Dataset) -> f64 {
    let p = data.n_features();
    let trace: f64 = data
        .features
        .rows()
        .into_iter()
        .zip(data.weights.iter())
        .map(|(f, &w)| w * f.dot(&f))
        .sum();
    DEFAULT_PRIOR_REL * trace / p as f64
}

/// Fits the weighted penalized least-squares surrogate.
/// `prior_precision_scale: None` uses [`default_prior_scale`]; `Some(0.0)` is
/// the improper flat prior and requires full-rank features.
pub fn fit_min_loss(
    data: &Dataset,
    prior_precision_scale: Option<f64>,
    noise_var: f64,
) -> Result<RidgeFit> {
    if !(noise_var.is_finite() && noise_var > 0.0) {
        return Err(Error::InvalidSpec(format!(
            "noise_var must be a positive real, got {noise_var}"
        )));
    }
    let alpha = match prior_precision_scale {
        Some(a) if a.is_finite() && a >= 0.0 => a,
        Some(a) => {
            return Err(Error::InvalidSpec(format!(
                "prior_precision_scale must be finite and >= 0, got {a}"
            )))
        }
        None => default_prior_scale(data),
    };
    let n = data.n_rows();
    let p = data.n_features();
    let reg = noise_var * alpha / n as f64;

    let sw = data.weights.mapv(f64::sqrt);
    let fw = &data.features * &sw.view().insert_axis(Axis(1));
    let yw = &data.targets * &sw;

    let (u, s, vt) = fw.svddc(JobSvd::Some)?;
    let u = u.expect("JobSvd::Some returns U");
    let vt = vt.expect("JobSvd::Some returns VT");
    let k = s.len();

    let s_max = s.iter().cloned().fold(0.0, f64::max);
    if reg == 0.0 {
        let cutoff = f64::EPSILON * s_max * n.max(p) as f64;
        if k < p || s.iter().any(|&sv| sv <= cutoff) {
            return Err(Error::SingularSystem);
        }
    }

    // A = V diag(1/(s²+reg)) Vᵀ, plus the prior-only complement
    // (1/reg)(I − VVᵀ) when the economy SVD spans fewer than P directions.
    // The complement is omitted when K = P: analytically zero there, and
    // numerically it would amplify VVᵀ rounding by 1/reg.
    let inv_diag = s.mapv(|sv| 1.0 / (sv * sv + reg));
    let vd = &vt.t() * &inv_diag.view().insert_axis(Axis(0));
    let mut a_matrix = vd.dot(&vt);
    if k < p {
        let vv = vt.t().dot(&vt);
        let inv_reg = 1.0 / reg;
        for i in 0..p {
            for j in 0..p {
                let compl = if i == j {
                    1.0 - vv[[i, j]]
                } else {
                    -vv[[i, j]]
                };
                a_matrix[[i, j]] += inv_reg * compl;
            }
        }
    }

    // θ* = V diag(s/(s²+reg)) Uᵀ (√w ∘ y)
    let uty = u.t().dot(&yw);
    let scaled = Array1::from_shape_fn(k, |i| s[i] * uty[i] * inv_diag[i]);
    let theta_star = vt.t().dot(&scaled);

    let residuals = &data.targets - &data.features.dot(&theta_star);
    let loss_residual_var = residuals
        .iter()
        .zip(data.weights.iter())
        .map(|(r, &w)| w * r * r)
        .sum();

    Ok(RidgeFit {
        theta_star,
        a_matrix,
        noise_var,
        prior_precision_scale: alpha,
        n_train: n,
        loss_residual_var,
    })
}

/// Posterior-mean prediction with its epistemic standard deviation
/// sqrt(noise_var/N · fᵀA f). This band reflects parameter uncertainty only;
/// it shrinks as 1/√N regardless of misspecification.
pub fn epistemic_predict(fit: &RidgeFit, f: ArrayView1<f64>) -> (f64, f64) {
    let mean = fit.theta_star.dot(&f);
    let q = f.dot(&fit.a_matrix.dot(&f)).max(0.0);
    let std = (fit.noise_var / fit.n_train as f64 * q).sqrt();
    (mean, std)
}

/// Deterministic-limit BIC:
///   N·(loss_residual_var / noise_var) + P·ln N + ln det(⟨f fᵀ⟩ / noise_var).
/// The determinant term comes from the unregularized second moment; a
/// rank-deficient feature set has no finite BIC and errors.
pub fn bic_deterministic(fit: &RidgeFit, data: &Dataset) -> Result<f64> {
    let n = data.n_rows();
    let p = data.n_features();
    let sw = data.weights.mapv(f64::sqrt);
    let fw = &data.features * &sw.view().insert_axis(Axis(1));
    let (_, s, _) = fw.svddc(JobSvd::None)?;
    let s_max = s.iter().cloned().fold(0.0, f64::max);
    let cutoff = f64::EPSILON * s_max * n.max(p) as f64;
    if s.len() < p || s.iter().any(|&sv| sv <= cutoff) {
        return Err(Error::SingularSystem);
    }
    let ln_det_c: f64 = s.iter().map(|&sv| 2.0 * sv.ln()).sum();
    Ok(
        n as f64 * fit.loss_residual_var / fit.noise_var + p as f64 * (n as f64).ln() + ln_det_c
            - p as f64 * fit.noise_var.ln(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use ndarray_linalg::Cholesky;

    /// SVD assembly of a tiny exact-rational system is good to a few ulps;
    /// 1e-12 leaves two orders of headroom.
    const EXACT_TOL: f64 = 1e-12;
    /// Contract tolerance for the stationarity (gradient) invariant.
    const GRAD_TOL: f64 = 1e-8;

    /// Hand-solved system: rows f=(1,0),(0,1),(1,1), y=(1,2,4), uniform
    /// weights, zero prior. Normal equations give θ* = (4/3, 7/3) and
    /// A = [[2,−1],[−1,2]], Σ*_L = 1/9.
    fn hand_case() -> Dataset {
        Dataset::new(
            array![[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]],
            array![1.0, 2.0, 4.0],
            None,
        )
        .unwrap()
    }

    #[test]
    fn hand_solved_fit_matches_normal_equations() {
        let fit = fit_min_loss(&hand_case(), Some(0.0), DEFAULT_NOISE_VAR).unwrap();
        assert_relative_eq!(fit.theta_star[0], 4.0 / 3.0, max_relative = EXACT_TOL);
        assert_relative_eq!(fit.theta_star[1], 7.0 / 3.0, max_relative = EXACT_TOL);
        assert_relative_eq!(fit.a_matrix[[0, 0]], 2.0, max_relative = EXACT_TOL);
        assert_relative_eq!(fit.a_matrix[[0, 1]], -1.0, max_relative = EXACT_TOL);
        assert_relative_eq!(fit.a_matrix[[1, 1]], 2.0, max_relative = EXACT_TOL);
        assert_relative_eq!(fit.loss_residual_var, 1.0 / 9.0, max_relative = EXACT_TOL);
    }

    #[test]
    fn a_matrix_is_symmetric_positive_definite() {
        let data = crate::dataset::synth_engine(
            &crate::dataset::EngineSpec {
                kind: crate::dataset::EngineKind::Cubic,
                input_dim: 5,
                feature_degree: 1,
                noise_std: 0.0,
                coefficient_seed: 2,
            },
            80,
            3,
        )
        .unwrap();
        let fit = fit_min_loss(&data, None, DEFAULT_NOISE_VAR).unwrap();
        let a = &fit.a_matrix;
        let scale = a.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for i in 0..a.nrows() {
            for j in 0..a.ncols() {
                assert!((a[[i, j]] - a[[j, i]]).abs() <= 1e-10 * scale);
            }
        }
        a.cholesky(ndarray_linalg::UPLO::Lower)
            .expect("A must be positive definite");
    }

    #[test]
    fn weighted_loss_gradient_vanishes_at_theta_star() {
        for (seed, prior) in [(1u64, None), (2, Some(0.0)), (3, Some(5.0))] {
            let data = crate::dataset::synth_engine(
                &crate::dataset::EngineSpec {
                    kind: crate::dataset::EngineKind::Quadratic,
                    input_dim: 4,
                    feature_degree: 1,
                    noise_std: 0.1,
                    coefficient_seed: seed,
                },
                60,
                seed,
            )
            .unwrap();
            let fit = fit_min_loss(&data, prior, DEFAULT_NOISE_VAR).unwrap();
            let mut grad = Array1::<f64>::zeros(data.n_features());
            for i in 0..data.n_rows() {
                let f = data.features.row(i);
                let r = fit.theta_star.dot(&f) - data.targets[i];
                grad.scaled_add(data.weights[i] * r, &f);
            }
            grad.scaled_add(
                fit.noise_var * fit.prior_precision_scale / fit.n_train as f64,
                &fit.theta_star,
            );
            let norm = grad.dot(&grad).sqrt();
            let theta_norm = fit.theta_star.dot(&fit.theta_star).sqrt();
            assert!(
                norm <= GRAD_TOL * (1.0 + theta_norm),
                "gradient norm {norm} at seed {seed}"
            );
        }
    }

    #[test]
    fn duplicating_rows_keeps_theta_and_halves_epistemic_variance() {
        let d = hand_case();
        let doubled = Dataset::new(
            ndarray::concatenate![Axis(0), d.features, d.features],
            ndarray::concatenate![Axis(0), d.targets, d.targets],
            None,
        )
        .unwrap();
        let fit1 = fit_min_loss(&d, Some(0.0), DEFAULT_NOISE_VAR).unwrap();
        let fit2 = fit_min_loss(&doubled, Some(0.0), DEFAULT_NOISE_VAR).unwrap();
        let f = array![1.0, 2.0];
        let (m1, s1) = epistemic_predict(&fit1, f.view());
        let (m2, s2) = epistemic_predict(&fit2, f.view());
        assert_relative_eq!(m1, m2, max_relative = EXACT_TOL);
        assert_relative_eq!(
            fit1.loss_residual_var,
            fit2.loss_residual_var,
            max_relative = EXACT_TOL
        );
        assert_relative_eq!(s1 * s1, 2.0 * s2 * s2, max_relative = 1e-10);
    }

    #[test]
    fn identical_feature_columns_with_zero_prior_are_singular() {
        let data = Dataset::new(
            array![[1.0, 1.0], [2.0, 2.0], [3.0, 3.0]],
            array![1.0, 2.0, 3.0],
            None,
        )
        .unwrap();
        assert!(matches!(
            fit_min_loss(&data, Some(0.0), DEFAULT_NOISE_VAR).unwrap_err(),
            Error::SingularSystem
        ));
        // A positive prior regularizes the same system.
        assert!(fit_min_loss(&data, Some(1.0), DEFAULT_NOISE_VAR).is_ok());
    }

    #[test]
    fn underparametrized_data_needs_a_prior() {
        // N = 2 < P = 3: flat prior singular, positive prior fine and the
        // nullspace carries prior-only variance.
        let data = Dataset::new(
            array![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
            array![1.0, 2.0],
            None,
        )
        .unwrap();
        assert!(matches!(
            fit_min_loss(&data, Some(0.0), DEFAULT_NOISE_VAR).unwrap_err(),
            Error::SingularSystem
        ));
        let fit = fit_min_loss(&data, Some(2.0), 1e-4).unwrap();
        // Third axis is untouched by data: A there must equal N/(noise·α).
        let reg = fit.noise_var * 2.0 / 2.0;
        assert_relative_eq!(fit.a_matrix[[2, 2]], 1.0 / reg, max_relative = 1e-9);
    }

    #[test]
    fn default_prior_tracks_feature_scale() {
        let d = hand_case();
        // Tr⟨ffᵀ⟩ = (1 + 1 + 2)/3 = 4/3, P = 2.
        assert_relative_eq!(
            default_prior_scale(&d),
            DEFAULT_PRIOR_REL * (4.0 / 3.0) / 2.0,
            max_relative = EXACT_TOL
        );
    }

    #[test]
    fn bic_shifts_by_p_ln2_when_noise_halves() {
        let data = crate::dataset::synth_engine(
            &crate::dataset::EngineSpec {
                kind: crate::dataset::EngineKind::Cubic,
                input_dim: 3,
                feature_degree: 1,
                noise_std: 0.0,
                coefficient_seed: 7,
            },
            120,
            1,
        )
        .unwrap();
        let p = data.n_features() as f64;
        let n = data.n_rows() as f64;
        let fit1 = fit_min_loss(&data, Some(0.0), 2e-8).unwrap();
        let fit2 = fit_min_loss(&data, Some(0.0), 1e-8).unwrap();
        let b1 = bic_deterministic(&fit1, &data).unwrap();
        let b2 = bic_deterministic(&fit2, &data).unwrap();
        // Halving noise_var doubles the residual term and adds P·ln 2 to the
        // determinant term.
        let residual_term1 = n * fit1.loss_residual_var / fit1.noise_var;
        let expected = b1 + residual_term1 + p * 2.0f64.ln();
        assert_relative_eq!(b2, expected, max_relative = 1e-10);
    }

    #[test]
    fn bic_prefers_the_richer_basis_on_cubic_data() {
        // Cubic engine, d = 3, N = 600: compare raw linear features against
        // linear + all pairwise products. The richer surrogate halves the
        // residual and wins despite 6 extra parameters.
        let data = crate::dataset::synth_engine(
            &crate::dataset::EngineSpec {
                kind: crate::dataset::EngineKind::Cubic,
                input_dim: 3,
                feature_degree: 1,
                noise_std: 0.0,
                coefficient_seed: 7,
            },
            600,
            2,
        )
        .unwrap();
        let n = data.n_rows();
        let mut rich = Array2::<f64>::zeros((n, 9));
        for i in 0..n {
            let x = data.features.row(i);
            rich[[i, 0]] = x[0];
            rich[[i, 1]] = x[1];
            rich[[i, 2]] = x[2];
            let mut c = 3;
            for a in 0..3 {
                for b in a..3 {
                    rich[[i, c]] = x[a] * x[b];
                    c += 1;
                }
            }
        }
        let rich_data = Dataset::new(rich, data.targets.clone(), None).unwrap();
        let fit_lin = fit_min_loss(&data, Some(0.0), DEFAULT_NOISE_VAR).unwrap();
        let fit_rich = fit_min_loss(&rich_data, Some(0.0), DEFAULT_NOISE_VAR).unwrap();
        let bic_lin = bic_deterministic(&fit_lin, &data).unwrap();
        let bic_rich = bic_deterministic(&fit_rich, &rich_data).unwrap();
        assert!(
            bic_rich < bic_lin,
            "rich {bic_rich} should beat linear {bic_lin}"
        );
    }
}
