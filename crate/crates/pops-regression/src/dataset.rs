//! Weighted regression datasets: CSV loading, synthetic engines, splits.
//!
//! A [`Dataset`] couples an N×P feature matrix with N targets and N positive
//! weights normalized to sum to 1, so weighted averages over rows are plain
//! dot products with the weight vector.

use ndarray::prelude::*;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct Dataset {
    /// N×P feature matrix; rows are observations.
    pub features: Array2<f64>,
    /// Length-N target vector.
    pub targets: Array1<f64>,
    /// Length-N probability mass over rows; strictly positive, sums to 1.
    pub weights: Array1<f64>,
}

impl Dataset {
    /// Validates and normalizes. `weights: None` means uniform 1/N.
    ///
    /// Rejects rows whose features are all exactly zero while the target is
    /// nonzero: no parameter vector can interpolate such a row, so every
    /// downstream pointwise fit would be empty.
    pub fn new(
        features: Array2<f64>,
        targets: Array1<f64>,
        weights: Option<Array1<f64>>,
    ) -> Result<Self> {
        let n = features.nrows();
        let p = features.ncols();
        if n == 0 || p == 0 {
            return Err(Error::InvalidSpec(format!(
                "dataset needs N >= 1 and P >= 1, got N = {n}, P = {p}"
            )));
        }
        if targets.len() != n {
            return Err(Error::DimensionMismatch(format!(
                "{n} feature rows vs {} targets",
                targets.len()
            )));
        }
        let weights = match weights {
            Some(w) => {
                if w.len() != n {
                    return Err(Error::DimensionMismatch(format!(
                        "{n} feature rows vs {} weights",
                        w.len()
                    )));
                }
                w
            }
            None => Array1::from_elem(n, 1.0 / n as f64),
        };
        for (i, row) in features.rows().into_iter().enumerate() {
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidSpec(format!("non-finite feature in row {i}")));
            }
            if !targets[i].is_finite() {
                return Err(Error::InvalidSpec(format!("non-finite target in row {i}")));
            }
            if !(weights[i].is_finite() && weights[i] > 0.0) {
                return Err(Error::InvalidSpec(format!(
                    "weight {} in row {i} is not a positive real",
                    weights[i]
                )));
            }
            if targets[i] != 0.0 && row.iter().all(|&v| v == 0.0) {
                return Err(Error::EmptyPopsRow(i));
            }
        }
        let sum: f64 = weights.sum();
        let weights = weights / sum;
        Ok(Self {
            features,
            targets,
            weights,
        })
    }

    pub fn n_rows(&self) -> usize {
        self.features.nrows()
    }

    pub fn n_features(&self) -> usize {
        self.features.ncols()
    }

    /// Disjoint train/test partition by seeded uniform shuffle. The test part
    /// gets round(test_fraction·N) rows; each part keeps the original row
    /// order and renormalizes its weights to sum to 1.
    pub fn split(&self, test_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
        let n = self.n_rows();
        if !(test_fraction.is_finite() && 0.0 < test_fraction && test_fraction < 1.0) {
            return Err(Error::DegenerateSplit {
                fraction: test_fraction,
                n,
            });
        }
        let n_test = (test_fraction * n as f64).round() as usize;
        if n_test == 0 || n_test >= n {
            return Err(Error::DegenerateSplit {
                fraction: test_fraction,
                n,
            });
        }
        let mut idx: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        idx.shuffle(&mut rng);
        let mut test_idx: Vec<usize> = idx[..n_test].to_vec();
        let mut train_idx: Vec<usize> = idx[n_test..].to_vec();
        test_idx.sort_unstable();
        train_idx.sort_unstable();
        Ok((self.take(&train_idx)?, self.take(&test_idx)?))
    }

    fn take(&self, idx: &[usize]) -> Result<Dataset> {
        let features = self.features.select(Axis(0), idx);
        let targets = self.targets.select(Axis(0), idx);
        let weights = self.weights.select(Axis(0), idx);
        Dataset::new(features, targets, Some(weights))
    }
}

/// A dataset loaded from CSV, with the header names that produced it.
#[derive(Debug, Clone)]
pub struct CsvData {
    pub dataset: Dataset,
    pub feature_columns: Vec<String>,
    pub target_column: String,
}

/// Loads a UTF-8 CSV with a header row. Every column other than the target
/// and the optional weight column is a feature, in header order.
pub fn load_csv(
    path: impl AsRef<Path>,
    target_column: &str,
    weight_column: Option<&str>,
) -> Result<CsvData> {
    let mut reader = csv::Reader::from_path(path.as_ref())?;
    let headers: Vec<String> = reader.headers()?.iter().map(str::to_owned).collect();
    let target_pos = headers
        .iter()
        .position(|h| h == target_column)
        .ok_or_else(|| Error::MissingColumn(target_column.to_owned()))?;
    let weight_pos = match weight_column {
        Some(wc) => Some(
            headers
                .iter()
                .position(|h| h == wc)
                .ok_or_else(|| Error::MissingColumn(wc.to_owned()))?,
        ),
        None => None,
    };
    let feature_pos: Vec<usize> = (0..headers.len())
        .filter(|&i| i != target_pos && Some(i) != weight_pos)
        .collect();
    if feature_pos.is_empty() {
        return Err(Error::InvalidSpec(
            "CSV has no feature columns besides target/weight".into(),
        ));
    }

    let parse = |row: usize, col: usize, field: &str| -> Result<f64> {
        match field.trim().parse::<f64>() {
            Ok(v) if v.is_finite() => Ok(v),
            _ => Err(Error::NonFiniteValue {
                row,
                column: headers[col].clone(),
                value: field.to_owned(),
            }),
        }
    };

    let mut feats: Vec<f64> = Vec::new();
    let mut targets: Vec<f64> = Vec::new();
    let mut weights: Vec<f64> = Vec::new();
    let mut n = 0usize;
    for (row, record) in reader.records().enumerate() {
        let record = record?;
        for &c in &feature_pos {
            let field = record.get(c).unwrap_or("");
            feats.push(parse(row, c, field)?);
        }
        targets.push(parse(
            row,
            target_pos,
            record.get(target_pos).unwrap_or(""),
        )?);
        if let Some(wp) = weight_pos {
            weights.push(parse(row, wp, record.get(wp).unwrap_or(""))?);
        }
        n += 1;
    }
    if n == 0 {
        return Err(Error::EmptyFile);
    }
    let features = Array2::from_shape_vec((n, feature_pos.len()), feats)
        .expect("row-major feature buffer matches (n, p)");
    let dataset = Dataset::new(
        features,
        Array1::from_vec(targets),
        weight_pos.map(|_| Array1::from_vec(weights)),
    )?;
    Ok(CsvData {
        dataset,
        feature_columns: feature_pos.iter().map(|&i| headers[i].clone()).collect(),
        target_column: target_column.to_owned(),
    })
}

/// Loads only the named feature columns, in the given order, from a CSV with
/// a header row. For scoring data that may not carry the target column.
pub fn load_feature_csv(path: impl AsRef<Path>, feature_columns: &[String]) -> Result<Array2<f64>> {
    let mut reader = csv::Reader::from_path(path.as_ref())?;
    let headers: Vec<String> = reader.headers()?.iter().map(str::to_owned).collect();
    let positions: Vec<usize> = feature_columns
        .iter()
        .map(|name| {
            headers
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| Error::MissingColumn(name.clone()))
        })
        .collect::<Result<_>>()?;
    let mut feats: Vec<f64> = Vec::new();
    let mut n = 0usize;
    for (row, record) in reader.records().enumerate() {
        let record = record?;
        for &c in &positions {
            let field = record.get(c).unwrap_or("");
            match field.trim().parse::<f64>() {
                Ok(v) if v.is_finite() => feats.push(v),
                _ => {
                    return Err(Error::NonFiniteValue {
                        row,
                        column: headers[c].clone(),
                        value: field.to_owned(),
                    })
                }
            }
        }
        n += 1;
    }
    if n == 0 {
        return Err(Error::EmptyFile);
    }
    Ok(Array2::from_shape_vec((n, positions.len()), feats)
        .expect("row-major feature buffer matches (n, p)"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EngineKind {
    /// y = sin(π·x) on one input; features are monomials 1, x, …, x^degree.
    Sinusoid,
    /// Linear + random quadratic + random cubic monomials on the target side.
    Cubic,
    /// Linear + random quadratic monomials.
    Quadratic,
    /// Coefficients drawn over a fixed pool of linear and pairwise-product
    /// features; the surrogate only sees the linear part.
    RandomLinear,
}

impl EngineKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "sinusoid" => Ok(Self::Sinusoid),
            "cubic" => Ok(Self::Cubic),
            "quadratic" => Ok(Self::Quadratic),
            "random-linear" => Ok(Self::RandomLinear),
            other => Err(Error::InvalidSpec(format!(
                "unknown engine {other:?}; expected sinusoid|cubic|quadratic|random-linear"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Sinusoid => "sinusoid",
            Self::Cubic => "cubic",
            Self::Quadratic => "quadratic",
            Self::RandomLinear => "random-linear",
        }
    }
}

/// Synthetic near-deterministic data generator. The surrogate feature map is
/// linear while the target mixes features nonlinearly, so the linear model is
/// misspecified by construction (except for `Sinusoid` with a rich enough
/// monomial basis, where it is merely underparametrized).
#[derive(Debug, Clone)]
pub struct EngineSpec {
    pub kind: EngineKind,
    /// Input dimension d; must be 1 for `Sinusoid`. For the polynomial
    /// engines the features are the raw inputs, so P = d.
    pub input_dim: usize,
    /// Monomial degree for `Sinusoid` (P = degree + 1). Ignored by the
    /// polynomial engines.
    pub feature_degree: usize,
    /// Standard deviation of additive Gaussian target noise; 0 draws nothing
    /// and the engine is exactly deterministic.
    pub noise_std: f64,
    /// Seed for the engine's internal coefficient draws, separate from the
    /// data seed so one engine can be resampled.
    pub coefficient_seed: u64,
}

impl EngineSpec {
    fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::InvalidSpec("input_dim must be >= 1".into()));
        }
        if self.kind == EngineKind::Sinusoid {
            if self.input_dim != 1 {
                return Err(Error::InvalidSpec(format!(
                    "sinusoid engine requires input_dim = 1, got {}",
                    self.input_dim
                )));
            }
            if self.feature_degree == 0 {
                return Err(Error::InvalidSpec(
                    "sinusoid engine requires feature_degree >= 1".into(),
                ));
            }
        }
        if !(self.noise_std.is_finite() && self.noise_std >= 0.0) {
            return Err(Error::InvalidSpec(format!(
                "noise_std must be a finite non-negative real, got {}",
                self.noise_std
            )));
        }
        Ok(())
    }

    /// Feature dimension P of the datasets this engine emits.
    pub fn n_features(&self) -> usize {
        match self.kind {
            EngineKind::Sinusoid => self.feature_degree + 1,
            _ => self.input_dim,
        }
    }
}

/// Monomial with coefficient; factor indices point into the input vector.
struct Monomial {
    coef: f64,
    factors: Vec<usize>,
}

fn draw_monomials(rng: &mut ChaCha8Rng, count: usize, arity: usize, dim: usize) -> Vec<Monomial> {
    (0..count)
        .map(|_| {
            let factors = (0..arity).map(|_| rng.random_range(0..dim)).collect();
            let coef: f64 = rng.sample(StandardNormal);
            Monomial { coef, factors }
        })
        .collect()
}

fn eval_monomials(terms: &[Monomial], x: ArrayView1<f64>) -> f64 {
    terms
        .iter()
        .map(|m| m.coef * m.factors.iter().map(|&j| x[j]).product::<f64>())
        .sum()
}

/// Draws `n` rows from the engine. Deterministic: identical
/// (spec, n, seed) triples produce bitwise-identical datasets. Weights are
/// uniform.
pub fn synth_engine(spec: &EngineSpec, n: usize, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::InvalidSpec("n must be >= 1".into()));
    }
    let d = spec.input_dim;
    let mut data_rng = ChaCha8Rng::seed_from_u64(seed);
    let mut inputs = Array2::<f64>::zeros((n, d));
    for v in inputs.iter_mut() {
        *v = 2.0 * data_rng.random::<f64>() - 1.0;
    }

    let mut coef_rng = ChaCha8Rng::seed_from_u64(spec.coefficient_seed);
    // Target-side terms per engine; the linear block is the part a linear
    // surrogate on raw inputs could represent exactly.
    let (linear, terms): (Vec<f64>, Vec<Monomial>) = match spec.kind {
        EngineKind::Sinusoid => (vec![], vec![]),
        EngineKind::Cubic => {
            let a: Vec<f64> = (0..d).map(|_| coef_rng.sample(StandardNormal)).collect();
            let mut t = draw_monomials(&mut coef_rng, d, 2, d);
            t.extend(draw_monomials(&mut coef_rng, d, 3, d));
            (a, t)
        }
        EngineKind::Quadratic => {
            let a: Vec<f64> = (0..d).map(|_| coef_rng.sample(StandardNormal)).collect();
            let t = draw_monomials(&mut coef_rng, d, 2, d);
            (a, t)
        }
        EngineKind::RandomLinear => {
            // Pool: d linear features + d pairwise products, all with fresh
            // standard-normal coefficients.
            let a: Vec<f64> = (0..d).map(|_| coef_rng.sample(StandardNormal)).collect();
            let t = draw_monomials(&mut coef_rng, d, 2, d);
            (a, t)
        }
    };

    let p = spec.n_features();
    let mut features = Array2::<f64>::zeros((n, p));
    let mut targets = Array1::<f64>::zeros(n);
    for i in 0..n {
        let x = inputs.row(i);
        match spec.kind {
            EngineKind::Sinusoid => {
                let mut pow = 1.0;
                for j in 0..p {
                    features[[i, j]] = pow;
                    pow *= x[0];
                }
                targets[i] = (std::f64::consts::PI * x[0]).sin();
            }
            _ => {
                features.row_mut(i).assign(&x);
                let lin: f64 = linear.iter().zip(x.iter()).map(|(a, v)| a * v).sum();
                targets[i] = lin + eval_monomials(&terms, x);
            }
        }
    }
    if spec.noise_std > 0.0 {
        for t in targets.iter_mut() {
            let z: f64 = data_rng.sample(StandardNormal);
            *t += spec.noise_std * z;
        }
    }
    Dataset::new(features, targets, None)
}
