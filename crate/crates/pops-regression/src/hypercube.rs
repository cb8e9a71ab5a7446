//! Hypercube posterior: an axis-aligned box in the right singular basis of
//! the pointwise corrections, tight enough to touch every training
//! correction and cheap enough to sample and to bound predictions in closed
//! form.

use ndarray::prelude::*;
use ndarray_linalg::{JobSvd, SVDDC};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::pointwise::CorrectionSet;
use crate::ridge::{epistemic_predict, RidgeFit};

/// Singular directions below this fraction of the leading singular value are
/// treated as numerical rank padding and dropped.
pub const DEFAULT_RANK_REL_TOL: f64 = 1e-10;

#[derive(Debug, Clone)]
pub struct Hypercube {
    /// R×P matrix with orthonormal rows: the retained right singular
    /// directions of the corrections. Sign convention: the
    /// largest-magnitude entry of each row is positive.
    pub basis: Array2<f64>,
    /// Componentwise minima of the projected corrections, length R.
    pub lower: Array1<f64>,
    /// Componentwise maxima, length R.
    pub upper: Array1<f64>,
    /// The relative singular-value cutoff the box was built with.
    pub rank_rel_tol: f64,
    /// The minimum-loss fit the box perturbs.
    pub base: RidgeFit,
}

impl Hypercube {
    pub fn rank(&self) -> usize {
        self.basis.nrows()
    }
}

/// One prediction with every uncertainty the posterior carries: box mean and
/// worst-case bounds, the box (misspecification) standard deviation, and the
/// epistemic standard deviation of the base fit.
#[derive(Debug, Clone, Copy)]
pub struct PredictionBundle {
    pub mean: f64,
    pub std_misspec: f64,
    pub std_epistemic: f64,
    pub max: f64,
    pub min: f64,
}

/// Builds the box: SVD of the corrections, truncate at
/// `rank_rel_tol`·s_max (default [`DEFAULT_RANK_REL_TOL`]), bound the
/// projections. The projections are taken from the U·S factors, which are
/// the exact floats whose componentwise min/max define the bounds.
pub fn build_hypercube(cs: &CorrectionSet, rank_rel_tol: Option<f64>) -> Result<Hypercube> {
    let rank_rel_tol = rank_rel_tol.unwrap_or(DEFAULT_RANK_REL_TOL);
    if !(rank_rel_tol.is_finite() && rank_rel_tol > 0.0) {
        return Err(Error::InvalidSpec(format!(
            "rank_rel_tol must be a positive real, got {rank_rel_tol}"
        )));
    }
    let p = cs.corrections.ncols();
    let (u, s, vt) = cs.corrections.svddc(JobSvd::Some)?;
    let mut u = u.expect("JobSvd::Some returns U");
    let mut vt = vt.expect("JobSvd::Some returns VT");
    let s_max = s.iter().cloned().fold(0.0, f64::max);
    let rank = if s_max == 0.0 {
        0
    } else {
        s.iter()
            .take_while(|&&sv| sv >= rank_rel_tol * s_max)
            .count()
    };

    // Orient each retained row so its largest-magnitude entry is positive,
    // flipping the matching U column to keep U·S·Vᵀ intact.
    for r in 0..rank {
        let row = vt.row(r);
        let lead = row
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
            .map(|(i, _)| i)
            .unwrap_or(0);
        if row[lead] < 0.0 {
            vt.row_mut(r).mapv_inplace(|v| -v);
            u.column_mut(r).mapv_inplace(|v| -v);
        }
    }

    let basis = vt.slice(s![..rank, ..]).to_owned();
    let mut lower = Array1::<f64>::zeros(rank);
    let mut upper = Array1::<f64>::zeros(rank);
    for r in 0..rank {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for i in 0..u.nrows() {
            let proj = u[[i, r]] * s[r];
            lo = lo.min(proj);
            hi = hi.max(proj);
        }
        lower[r] = lo;
        upper[r] = hi;
    }
    debug_assert_eq!(basis.ncols(), p);
    Ok(Hypercube {
        basis,
        lower,
        upper,
        rank_rel_tol,
        base: cs.base.clone(),
    })
}

/// Draws `m` parameter vectors uniformly from the box, mapped back to
/// parameter space around θ*_L. Deterministic per seed.
pub fn sample_hypercube(hc: &Hypercube, m: usize, seed: u64) -> Array2<f64> {
    let p = hc.base.theta_star.len();
    let r = hc.rank();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut coords = Array2::<f64>::zeros((m, r));
    for i in 0..m {
        for j in 0..r {
            coords[[i, j]] = hc.lower[j] + (hc.upper[j] - hc.lower[j]) * rng.random::<f64>();
        }
    }
    let mut thetas = coords.dot(&hc.basis);
    for mut row in thetas.rows_mut() {
        row += &hc.base.theta_star;
    }
    debug_assert_eq!(thetas.ncols(), p);
    thetas
}

/// Closed-form envelope of the box posterior at one feature vector. With
/// g = basis·f, center c = (l+u)/2 and half-width d = (u−l)/2 per direction:
///
///   mean = θ*_L·f + Σ gᵣcᵣ,  max/min = mean ± Σ|gᵣ|dᵣ,
///   std_misspec = sqrt(Σ gᵣ²dᵣ²/3)   (independent uniforms on the box).
pub fn predict_envelope(hc: &Hypercube, f: ArrayView1<f64>) -> PredictionBundle {
    let (base_mean, std_epistemic) = epistemic_predict(&hc.base, f);
    let g = hc.basis.dot(&f);
    let mut shift = 0.0;
    let mut half = 0.0;
    let mut var = 0.0;
    for r in 0..hc.rank() {
        let c = 0.5 * (hc.lower[r] + hc.upper[r]);
        let d = 0.5 * (hc.upper[r] - hc.lower[r]);
        shift += g[r] * c;
        half += g[r].abs() * d;
        var += g[r] * g[r] * d * d / 3.0;
    }
    let mean = base_mean + shift;
    PredictionBundle {
        mean,
        std_misspec: var.sqrt(),
        std_epistemic,
        max: mean + half,
        min: mean - half,
    }
}
