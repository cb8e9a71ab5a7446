//! Saved-model format: a versioned JSON artifact holding the min-loss fit,
//! the hypercube, and (optionally) the ensemble masses, written so that
//! loading reproduces every prediction bit for bit.
//!
//! Floats are serialized with 17 significant digits, which is always enough
//! to reconstruct the exact binary value; writes go through a temp file and
//! rename so readers never observe a half-written model.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use ndarray::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::ser::{Formatter, PrettyFormatter};

use crate::error::{Error, Result};
use crate::hypercube::Hypercube;
use crate::ridge::RidgeFit;

pub const FORMAT_VERSION: u32 = 1;

/// Tolerance on the saved ensemble masses summing to one.
const MASS_SUM_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HypercubeFile {
    /// Orthonormal direction rows, rank × P.
    pub basis: Vec<Vec<f64>>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub rank: usize,
    pub rank_rel_tol: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EnsembleFile {
    /// Member corrections relative to θ*_L, one row per member.
    pub corrections: Vec<Vec<f64>>,
    /// Per-member probability masses wᵢ·w*ᵢ; they sum to one.
    pub weights: Vec<f64>,
    pub mass_scale: f64,
}

/// Runtime form of a stored ensemble: corrections, masses, mass scale.
pub type EnsembleArrays = (Array2<f64>, Array1<f64>, f64);

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelFile {
    pub format_version: u32,
    /// Column names the feature matrix was assembled from, in order.
    /// May be empty for models built outside the CSV pipeline.
    pub feature_columns: Vec<String>,
    pub target_column: String,
    pub theta_star: Vec<f64>,
    /// Posterior shape matrix; optional because only the epistemic standard
    /// deviation needs it.
    pub a_matrix: Option<Vec<Vec<f64>>>,
    pub noise_var: f64,
    pub prior_precision_scale: f64,
    pub n_train: usize,
    pub loss_residual_var: f64,
    pub hypercube: HypercubeFile,
    pub ensemble: Option<EnsembleFile>,
}

/// Ensemble data handed to [`ModelFile::from_parts`] when the fit included
/// the mixture stage.
pub struct EnsembleExport<'a> {
    pub corrections: &'a Array2<f64>,
    /// Probability masses wᵢ·w*ᵢ, length = member count.
    pub masses: Array1<f64>,
    pub mass_scale: f64,
}

fn matrix_to_rows(m: &Array2<f64>) -> Vec<Vec<f64>> {
    m.rows().into_iter().map(|r| r.to_vec()).collect()
}

fn rows_to_matrix(rows: &[Vec<f64>], ncols: usize, what: &str) -> Result<Array2<f64>> {
    let mut out = Array2::zeros((rows.len(), ncols));
    for (i, row) in rows.iter().enumerate() {
        if row.len() != ncols {
            return Err(Error::ModelFormat(format!(
                "{what} row {i} has {} entries, expected {ncols}",
                row.len()
            )));
        }
        for (j, v) in row.iter().enumerate() {
            out[[i, j]] = *v;
        }
    }
    Ok(out)
}

fn all_finite<'a>(values: impl IntoIterator<Item = &'a f64>) -> bool {
    values.into_iter().all(|v| v.is_finite())
}

impl ModelFile {
    pub fn from_parts(
        fit: &RidgeFit,
        hc: &Hypercube,
        ensemble: Option<EnsembleExport<'_>>,
        feature_columns: Vec<String>,
        target_column: String,
    ) -> ModelFile {
        ModelFile {
            format_version: FORMAT_VERSION,
            feature_columns,
            target_column,
            theta_star: fit.theta_star.to_vec(),
            a_matrix: Some(matrix_to_rows(&fit.a_matrix)),
            noise_var: fit.noise_var,
            prior_precision_scale: fit.prior_precision_scale,
            n_train: fit.n_train,
            loss_residual_var: fit.loss_residual_var,
            hypercube: HypercubeFile {
                basis: matrix_to_rows(&hc.basis),
                lower: hc.lower.to_vec(),
                upper: hc.upper.to_vec(),
                rank: hc.rank(),
                rank_rel_tol: hc.rank_rel_tol,
            },
            ensemble: ensemble.map(|e| EnsembleFile {
                corrections: matrix_to_rows(e.corrections),
                weights: e.masses.to_vec(),
                mass_scale: e.mass_scale,
            }),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::ModelFormat(msg));
        if self.format_version != FORMAT_VERSION {
            return fail(format!(
                "unsupported format_version {} (this build reads {FORMAT_VERSION})",
                self.format_version
            ));
        }
        let p = self.theta_star.len();
        if p == 0 {
            return fail("theta_star is empty".into());
        }
        if !all_finite(&self.theta_star) {
            return fail("theta_star contains a non-finite value".into());
        }
        if !self.feature_columns.is_empty() && self.feature_columns.len() != p {
            return fail(format!(
                "{} feature_columns for {} parameters",
                self.feature_columns.len(),
                p
            ));
        }
        if let Some(a) = &self.a_matrix {
            if a.len() != p || a.iter().any(|row| row.len() != p) {
                return fail(format!("a_matrix is not {p}×{p}"));
            }
            if !all_finite(a.iter().flatten()) {
                return fail("a_matrix contains a non-finite value".into());
            }
        }
        if !(self.noise_var.is_finite() && self.noise_var > 0.0) {
            return fail(format!(
                "noise_var must be a positive real, got {}",
                self.noise_var
            ));
        }
        if !(self.prior_precision_scale.is_finite() && self.prior_precision_scale >= 0.0) {
            return fail(format!(
                "prior_precision_scale must be a nonnegative real, got {}",
                self.prior_precision_scale
            ));
        }
        if self.n_train == 0 {
            return fail("n_train must be >= 1".into());
        }
        if !(self.loss_residual_var.is_finite() && self.loss_residual_var >= 0.0) {
            return fail(format!(
                "loss_residual_var must be a nonnegative real, got {}",
                self.loss_residual_var
            ));
        }
        let hc = &self.hypercube;
        if hc.rank != hc.basis.len() || hc.rank != hc.lower.len() || hc.rank != hc.upper.len() {
            return fail(format!(
                "hypercube rank {} disagrees with basis/lower/upper lengths {}/{}/{}",
                hc.rank,
                hc.basis.len(),
                hc.lower.len(),
                hc.upper.len()
            ));
        }
        if hc.basis.iter().any(|row| row.len() != p) {
            return fail(format!("hypercube basis rows must have {p} entries"));
        }
        if !all_finite(hc.basis.iter().flatten().chain(&hc.lower).chain(&hc.upper)) {
            return fail("hypercube contains a non-finite value".into());
        }
        if hc.lower.iter().zip(&hc.upper).any(|(l, u)| l > u) {
            return fail("hypercube has lower > upper".into());
        }
        if !(hc.rank_rel_tol.is_finite() && hc.rank_rel_tol > 0.0) {
            return fail(format!(
                "rank_rel_tol must be a positive real, got {}",
                hc.rank_rel_tol
            ));
        }
        if let Some(e) = &self.ensemble {
            if e.corrections.len() != e.weights.len() {
                return fail(format!(
                    "{} ensemble corrections vs {} weights",
                    e.corrections.len(),
                    e.weights.len()
                ));
            }
            if e.corrections.is_empty() {
                return fail("ensemble block is present but empty".into());
            }
            if e.corrections.iter().any(|row| row.len() != p) {
                return fail(format!("ensemble correction rows must have {p} entries"));
            }
            if !all_finite(e.corrections.iter().flatten().chain(&e.weights)) {
                return fail("ensemble contains a non-finite value".into());
            }
            if e.weights.iter().any(|w| *w <= 0.0) {
                return fail("ensemble weights must be strictly positive".into());
            }
            let sum: f64 = e.weights.iter().sum();
            if (sum - 1.0).abs() > MASS_SUM_TOL {
                return fail(format!("ensemble weights sum to {sum}, expected 1"));
            }
            if !(e.mass_scale.is_finite() && e.mass_scale > 0.0) {
                return fail(format!(
                    "mass_scale must be a positive real, got {}",
                    e.mass_scale
                ));
            }
        }
        Ok(())
    }

    /// Rebuilds the runtime fit and hypercube. Requires `a_matrix`: the
    /// envelope's epistemic standard deviation cannot be formed without it.
    pub fn instantiate(&self) -> Result<(RidgeFit, Hypercube)> {
        self.validate()?;
        let p = self.theta_star.len();
        let a = match &self.a_matrix {
            Some(rows) => rows_to_matrix(rows, p, "a_matrix")?,
            None => {
                return Err(Error::ModelFormat(
                    "model lacks a_matrix; refit or save with it to predict".into(),
                ))
            }
        };
        let fit = RidgeFit {
            theta_star: Array1::from(self.theta_star.clone()),
            a_matrix: a,
            noise_var: self.noise_var,
            prior_precision_scale: self.prior_precision_scale,
            n_train: self.n_train,
            loss_residual_var: self.loss_residual_var,
        };
        let hc = Hypercube {
            basis: rows_to_matrix(&self.hypercube.basis, p, "hypercube basis")?,
            lower: Array1::from(self.hypercube.lower.clone()),
            upper: Array1::from(self.hypercube.upper.clone()),
            rank_rel_tol: self.hypercube.rank_rel_tol,
            base: fit.clone(),
        };
        Ok((fit, hc))
    }

    /// The stored ensemble as runtime arrays, if the model carries one.
    pub fn ensemble_arrays(&self) -> Result<Option<EnsembleArrays>> {
        let Some(e) = &self.ensemble else {
            return Ok(None);
        };
        let p = self.theta_star.len();
        let corrections = rows_to_matrix(&e.corrections, p, "ensemble corrections")?;
        let masses = Array1::from(e.weights.clone());
        Ok(Some((corrections, masses, e.mass_scale)))
    }

    pub fn to_json(&self) -> Result<String> {
        self.validate()?;
        let mut buf = Vec::new();
        let mut ser = serde_json::Serializer::with_formatter(
            &mut buf,
            ModelFormatter {
                inner: PrettyFormatter::new(),
            },
        );
        self.serialize(&mut ser)
            .map_err(|e| Error::ModelFormat(e.to_string()))?;
        buf.push(b'\n');
        Ok(String::from_utf8(buf).expect("serializer emits UTF-8"))
    }

    pub fn from_json(text: &str) -> Result<ModelFile> {
        let model: ModelFile =
            serde_json::from_str(text).map_err(|e| Error::ModelFormat(e.to_string()))?;
        model.validate()?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_json()?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<ModelFile> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}

/// Writes through `<path>.tmp` + rename, so a crash mid-write can never
/// leave a truncated file at the destination.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Pretty JSON with every f64 printed at 17 significant digits — the
/// shortest count guaranteed to reproduce any double exactly on parse.
struct ModelFormatter<'a> {
    inner: PrettyFormatter<'a>,
}

impl Formatter for ModelFormatter<'_> {
    fn write_f64<W>(&mut self, writer: &mut W, value: f64) -> io::Result<()>
    where
        W: ?Sized + io::Write,
    {
        if !value.is_finite() {
            return Err(io::Error::new(
                io::ErrorKind::InvalidData,
                "non-finite float has no JSON representation",
            ));
        }
        write!(writer, "{value:.16e}")
    }

    fn begin_array<W>(&mut self, writer: &mut W) -> io::Result<()>
    where
        W: ?Sized + io::Write,
    {
        self.inner.begin_array(writer)
    }

    fn end_array<W>(&mut self, writer: &mut W) -> io::Result<()>
    where
        W: ?Sized + io::Write,
    {
        self.inner.end_array(writer)
    }

    fn begin_array_value<W>(&mut self, writer: &mut W, first: bool) -> io::Result<()>
    where
        W: ?Sized + io::Write,
    {
        self.inner.begin_array_value(writer, first)
    }

    fn end_array_value<W>(&mut self, writer: &mut W) -> io::Result<()>
    where
        W: ?Sized + io::Write,
    {
        self.inner.end_array_value(writer)
    }

    fn begin_object<W>(&mut self, writer: &mut W) -> io::Result<()>
    where
        W: ?Sized + io::Write,
    {
        self.inner.begin_object(writer)
    }

    fn end_object<W>(&mut self, writer: &mut W) -> io::Result<()>
    where
        W: ?Sized + io::Write,
    {
        self.inner.end_object(writer)
    }

    fn begin_object_key<W>(&mut self, writer: &mut W, first: bool) -> io::Result<()>
    where
        W: ?Sized + io::Write,
    {
        self.inner.begin_object_key(writer, first)
    }

    fn begin_object_value<W>(&mut self, writer: &mut W) -> io::Result<()>
    where
        W: ?Sized + io::Write,
    {
        self.inner.begin_object_value(writer)
    }

    fn end_object_value<W>(&mut self, writer: &mut W) -> io::Result<()>
    where
        W: ?Sized + io::Write,
    {
        self.inner.end_object_value(writer)
    }
}
