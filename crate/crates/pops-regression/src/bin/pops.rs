//! Command-line surface over the library: synthesize data, fit, predict,
//! evaluate, benchmark, and run the reference minimizer.
//!
//! Exit codes: 0 success, 1 user/data error, 2 internal numerical failure.
//! All output files are written atomically (temp + rename); all floats in
//! CSV artifacts carry 17 significant digits so reruns are byte-identical.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use pops_regression::dataset::{load_csv, load_feature_csv, synth_engine, EngineKind, EngineSpec};
use pops_regression::ensemble::{mass_matrix, optimal_weights};
use pops_regression::error::{Error, Result};
use pops_regression::hypercube::{build_hypercube, predict_envelope, PredictionBundle};
use pops_regression::metrics::{
    calibration_report, envelope_violation, gaussian_coverage, mae_ratio,
};
use pops_regression::model::{write_atomic, EnsembleExport, ModelFile};
use pops_regression::pointwise::pointwise_fits;
use pops_regression::refmin::{minimize_ge, GeConfig, InitStrategy};
use pops_regression::ridge::{fit_min_loss, DEFAULT_NOISE_VAR};

/// The ensemble stage materializes an N×N mass matrix; beyond this many
/// training rows it must be forced explicitly.
const ENSEMBLE_ROW_GATE: usize = 20_000;

#[derive(Parser)]
#[command(
    name = "pops",
    version,
    about = "Misspecification-aware linear regression: envelope bounds from pointwise-optimal parameter sets"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic benchmark data from a deterministic engine
    Synth(SynthArgs),
    /// Fit a model to a training CSV and write a model file
    Fit(FitArgs),
    /// Score a CSV with a saved model
    Predict(PredictArgs),
    /// Calibration report of a saved model against held-out data
    Eval(EvalArgs),
    /// Seeded sweep over engine sizes, one CSV row per (P, N/P, seed) cell
    Bench(BenchArgs),
    /// Gradient-descent reference minimizer of the ensemble cross-entropy
    Refmin(RefminArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Engine: sinusoid | cubic | quadratic | random-linear
    #[arg(long)]
    engine: String,
    /// Number of rows to draw
    #[arg(long)]
    n: usize,
    /// Data seed (inputs and noise)
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Input dimension (must be 1 for sinusoid)
    #[arg(long, default_value_t = 1)]
    input_dim: usize,
    /// Monomial feature degree (sinusoid only)
    #[arg(long, default_value_t = 3)]
    degree: usize,
    /// Additive Gaussian target noise; 0 keeps the engine deterministic
    #[arg(long, default_value_t = 0.0)]
    noise_std: f64,
    /// Seed of the engine's internal coefficient draws
    #[arg(long, default_value_t = 0)]
    coef_seed: u64,
    /// Output CSV path
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct FitArgs {
    /// Training data CSV with a header row
    train_csv: PathBuf,
    /// Name of the target column; all other columns are features
    target_column: String,
    /// Optional column holding per-row weights
    #[arg(long)]
    weight_column: Option<String>,
    /// Observation noise variance (never fitted)
    #[arg(long, default_value_t = DEFAULT_NOISE_VAR)]
    noise_var: f64,
    /// Prior precision scale; defaults to a vanishing data-derived value
    #[arg(long)]
    prior_scale: Option<f64>,
    /// Also fit the weighted ensemble stage (O(N²))
    #[arg(long)]
    with_ensemble: bool,
    /// Width multiplier of the ensemble mass Gaussians
    #[arg(long, default_value_t = 1.0)]
    sigma_scale: f64,
    /// Relative singular-value cutoff for the hypercube rank
    #[arg(long)]
    rank_tol: Option<f64>,
    /// Allow the ensemble stage past the row-count gate
    #[arg(long)]
    force_ensemble: bool,
    /// Output model file path
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PredictArgs {
    /// Saved model file
    model_file: PathBuf,
    /// CSV to score; must contain the model's feature columns
    test_csv: PathBuf,
    /// Include max,min envelope columns
    #[arg(long)]
    bounds: bool,
    /// Include std_misspec,std_epistemic columns
    #[arg(long)]
    std: bool,
    /// Include a combined_std column (misspecification and epistemic in quadrature)
    #[arg(long)]
    combined_std: bool,
    /// Output CSV path
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Saved model file
    model_file: PathBuf,
    /// Held-out CSV including the target column
    test_csv: PathBuf,
    /// Optional column holding per-row weights
    #[arg(long)]
    weight_column: Option<String>,
    /// Uniform box resamples per test row for the predicted-error side
    #[arg(long, default_value_t = 64)]
    resamples: usize,
    /// Resampling seed
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write the observed/predicted error histogram as CSV
    #[arg(long)]
    hist_out: Option<PathBuf>,
    /// Write per-point (abs_error, std_misspec, band_width) rows as CSV
    #[arg(long)]
    points_out: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    /// Engine: sinusoid | cubic | quadratic | random-linear
    #[arg(long, default_value = "cubic")]
    engine: String,
    /// Comma-separated parameter counts
    #[arg(long, default_value = "10,20,50")]
    p_grid: String,
    /// Comma-separated training N/P ratios
    #[arg(long, default_value = "10,30,100")]
    ratio_grid: String,
    /// Seeds 0..seeds per cell
    #[arg(long, default_value_t = 5)]
    seeds: u64,
    /// Held-out fraction of each generated pool
    #[arg(long, default_value_t = 0.9)]
    test_fraction: f64,
    /// Box resamples per test row for the MAE ratio
    #[arg(long, default_value_t = 16)]
    resamples: usize,
    /// Fit and time only the baseline ridge stage
    #[arg(long)]
    baseline_only: bool,
    /// Output CSV path
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RefminArgs {
    /// Training data CSV
    train_csv: PathBuf,
    /// Name of the target column
    #[arg(long, default_value = "y")]
    target_column: String,
    /// Member count; defaults to the number of training rows
    #[arg(long)]
    members: Option<usize>,
    /// Mixture width multiplier σ (variance σ²·loss_residual_var)
    #[arg(long, default_value_t = 1.0)]
    sigma_scale: f64,
    /// Initialization: min-loss | pops
    #[arg(long, default_value = "min-loss")]
    init: String,
    /// Maximum descent iterations
    #[arg(long, default_value_t = 200)]
    steps: usize,
    /// Initial line-search step length
    #[arg(long, default_value_t = 1.0)]
    step_size: f64,
    /// Seed for the jittered initialization
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write final member parameters as CSV
    #[arg(long)]
    members_out: Option<PathBuf>,
    /// Write the iteration log as CSV
    #[arg(long)]
    log_out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let usage_ok = matches!(
                e.kind(),
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion
            );
            let _ = e.print();
            return if usage_ok {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            };
        }
    };
    let outcome = match cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Fit(a) => cmd_fit(a),
        Command::Predict(a) => cmd_predict(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Bench(a) => cmd_bench(a),
        Command::Refmin(a) => cmd_refmin(a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// 1 = user or data error; 2 = numerical invariant failure inside the
/// pipeline (conditions input validation cannot anticipate).
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Linalg(_) | Error::DegenerateColumn(_) | Error::LeverageUnderflow { .. } => 2,
        _ => 1,
    }
}

/// 17 significant digits: file artifacts reload to the exact same doubles.
fn sci(v: f64) -> String {
    format!("{v:.16e}")
}

fn write_csv_atomic(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for row in rows {
        w.write_record(row)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| std::io::Error::other(e.to_string()))?;
    write_atomic(path, &bytes)
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    let spec = EngineSpec {
        kind: EngineKind::parse(&a.engine)?,
        input_dim: a.input_dim,
        feature_degree: a.degree,
        noise_std: a.noise_std,
        coefficient_seed: a.coef_seed,
    };
    let data = synth_engine(&spec, a.n, a.seed)?;
    let p = data.n_features();
    let header: Vec<String> = (0..p)
        .map(|j| format!("f{j}"))
        .chain(["y".into()])
        .collect();
    let header_refs: Vec<&str> = header.iter().map(String::as_str).collect();
    let rows: Vec<Vec<String>> = (0..data.n_rows())
        .map(|i| {
            data.features
                .row(i)
                .iter()
                .map(|v| sci(*v))
                .chain([sci(data.targets[i])])
                .collect()
        })
        .collect();
    write_csv_atomic(&a.out, &header_refs, &rows)?;
    println!(
        "wrote {} rows ({} feature columns + target \"y\") to {}",
        data.n_rows(),
        p,
        a.out.display()
    );
    Ok(())
}

fn cmd_fit(a: FitArgs) -> Result<()> {
    let csv = load_csv(&a.train_csv, &a.target_column, a.weight_column.as_deref())?;
    let data = csv.dataset;
    let n = data.n_rows();
    let p = data.n_features();
    let fit = fit_min_loss(&data, a.prior_scale, a.noise_var)?;
    let cs = pointwise_fits(&fit, &data)?;
    let hc = build_hypercube(&cs, a.rank_tol)?;
    let ensemble = if a.with_ensemble {
        if n > ENSEMBLE_ROW_GATE && !a.force_ensemble {
            return Err(Error::InvalidSpec(format!(
                "ensemble stage is O(N²) in memory and time and N = {n} exceeds \
                 {ENSEMBLE_ROW_GATE}; pass --force-ensemble to proceed anyway"
            )));
        }
        let mass = mass_matrix(&cs, &data, a.sigma_scale)?;
        let weights = optimal_weights(&mass, &data)?;
        let masses = &data.weights * &weights.values;
        Some((masses, weights.mass_scale))
    } else {
        None
    };
    let model = ModelFile::from_parts(
        &fit,
        &hc,
        ensemble
            .as_ref()
            .map(|(masses, mass_scale)| EnsembleExport {
                corrections: &cs.corrections,
                masses: masses.clone(),
                mass_scale: *mass_scale,
            }),
        csv.feature_columns,
        csv.target_column,
    );
    model.save(&a.out)?;
    println!("n_train: {n}");
    println!("n_features: {p}");
    println!("ratio: {}", n as f64 / p as f64);
    println!("loss_residual_var: {}", fit.loss_residual_var);
    println!("hypercube_rank: {}", hc.rank());
    if hc.rank() == 0 {
        println!(
            "warning: model appears specified; every pointwise correction is \
             negligible and the envelope has zero width"
        );
    }
    println!("model written to {}", a.out.display());
    Ok(())
}

fn cmd_predict(a: PredictArgs) -> Result<()> {
    let model = ModelFile::load(&a.model_file)?;
    let (_fit, hc) = model.instantiate()?;
    if model.feature_columns.is_empty() {
        return Err(Error::ModelFormat(
            "model lacks feature column names; cannot align CSV columns".into(),
        ));
    }
    let features = load_feature_csv(&a.test_csv, &model.feature_columns)?;
    let mut header: Vec<&str> = vec!["mean"];
    if a.std {
        header.extend(["std_misspec", "std_epistemic"]);
    }
    if a.combined_std {
        header.push("combined_std");
    }
    if a.bounds {
        header.extend(["max", "min"]);
    }
    let rows: Vec<Vec<String>> = features
        .rows()
        .into_iter()
        .map(|f| {
            let b = predict_envelope(&hc, f);
            let mut row = vec![sci(b.mean)];
            if a.std {
                row.push(sci(b.std_misspec));
                row.push(sci(b.std_epistemic));
            }
            if a.combined_std {
                row.push(sci(b.std_misspec.hypot(b.std_epistemic)));
            }
            if a.bounds {
                row.push(sci(b.max));
                row.push(sci(b.min));
            }
            row
        })
        .collect();
    write_csv_atomic(&a.out, &header, &rows)?;
    println!("wrote {} predictions to {}", rows.len(), a.out.display());
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let model = ModelFile::load(&a.model_file)?;
    let (fit, hc) = model.instantiate()?;
    let csv = load_csv(
        &a.test_csv,
        &model.target_column,
        a.weight_column.as_deref(),
    )?;
    if !model.feature_columns.is_empty() && csv.feature_columns != model.feature_columns {
        return Err(Error::InvalidSpec(format!(
            "test CSV feature columns {:?} do not match the model's {:?}",
            csv.feature_columns, model.feature_columns
        )));
    }
    let test = csv.dataset;
    let report = calibration_report(&fit, &hc, &test, a.resamples, a.seed)?;
    println!("n_test: {}", report.n_test);
    println!(
        "envelope_violation_rate: {}",
        report.envelope_violation_rate
    );
    println!("observed_mae: {}", report.observed_mae);
    println!("predicted_mae: {}", report.predicted_mae);
    println!("mae_ratio: {}", report.mae_ratio);
    println!(
        "gaussian_3sigma_coverage: {}",
        report.gaussian_3sigma_coverage
    );
    println!("histogram_bins: {}", report.histogram.len());
    if let Some(path) = &a.hist_out {
        let rows: Vec<Vec<String>> = report
            .histogram
            .iter()
            .map(|b| {
                vec![
                    sci(b.lo),
                    sci(b.hi),
                    b.observed.to_string(),
                    b.predicted.to_string(),
                ]
            })
            .collect();
        write_csv_atomic(path, &["lo", "hi", "observed", "predicted"], &rows)?;
        println!("histogram written to {}", path.display());
    }
    if let Some(path) = &a.points_out {
        let rows: Vec<Vec<String>> = test
            .features
            .rows()
            .into_iter()
            .zip(test.targets.iter())
            .map(|(f, &y)| {
                let b = predict_envelope(&hc, f);
                vec![
                    sci((y - b.mean).abs()),
                    sci(b.std_misspec),
                    sci(b.max - b.min),
                ]
            })
            .collect();
        write_csv_atomic(path, &["abs_error", "std_misspec", "band_width"], &rows)?;
        println!("per-point errors written to {}", path.display());
    }
    Ok(())
}

fn parse_grid(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|t| {
            t.trim()
                .parse::<usize>()
                .map_err(|_| Error::InvalidSpec(format!("grid entry {t:?} is not a count")))
        })
        .collect()
}

/// Maps a requested parameter count to engine settings. The polynomial
/// engines expose exactly one feature per input dimension; the sinusoid's
/// features are monomials 1..x^(p−1).
fn engine_spec_for(kind: EngineKind, p: usize) -> Result<EngineSpec> {
    let spec = match kind {
        EngineKind::Sinusoid => {
            if p < 2 {
                return Err(Error::InvalidSpec(
                    "sinusoid bench cells need p >= 2 (degree = p − 1)".into(),
                ));
            }
            EngineSpec {
                kind,
                input_dim: 1,
                feature_degree: p - 1,
                noise_std: 0.0,
                coefficient_seed: 0,
            }
        }
        _ => EngineSpec {
            kind,
            input_dim: p,
            feature_degree: 1,
            noise_std: 0.0,
            coefficient_seed: 0,
        },
    };
    Ok(spec)
}

struct BenchCell {
    n_train: usize,
    n_test: usize,
    ev: Option<f64>,
    mae_ratio: Option<f64>,
    coverage: f64,
    fit_seconds: f64,
    predict_seconds: f64,
}

fn bench_cell(
    kind: EngineKind,
    p: usize,
    ratio: usize,
    seed: u64,
    test_fraction: f64,
    resamples: usize,
    baseline_only: bool,
) -> Result<BenchCell> {
    let spec = engine_spec_for(kind, p)?;
    let n_train_target = p
        .checked_mul(ratio)
        .ok_or_else(|| Error::InvalidSpec(format!("cell p = {p}, ratio = {ratio} overflows")))?;
    if !(test_fraction.is_finite() && (0.0..1.0).contains(&test_fraction)) {
        return Err(Error::InvalidSpec(format!(
            "test_fraction must be in [0, 1), got {test_fraction}"
        )));
    }
    let n_total = ((n_train_target as f64) / (1.0 - test_fraction))
        .round()
        .max(2.0) as usize;
    let pool = synth_engine(&spec, n_total, seed)?;
    let (train, test) = pool.split(test_fraction, seed)?;

    let started = Instant::now();
    let fit = fit_min_loss(&train, None, DEFAULT_NOISE_VAR)?;
    if baseline_only {
        let fit_seconds = started.elapsed().as_secs_f64();
        let predict_start = Instant::now();
        let coverage = gaussian_coverage(&fit, &test, 3.0)?;
        return Ok(BenchCell {
            n_train: train.n_rows(),
            n_test: test.n_rows(),
            ev: None,
            mae_ratio: None,
            coverage,
            fit_seconds,
            predict_seconds: predict_start.elapsed().as_secs_f64(),
        });
    }
    let cs = pointwise_fits(&fit, &train)?;
    let hc = build_hypercube(&cs, None)?;
    let fit_seconds = started.elapsed().as_secs_f64();

    let predict_start = Instant::now();
    let bundles: Vec<PredictionBundle> = test
        .features
        .rows()
        .into_iter()
        .map(|f| predict_envelope(&hc, f))
        .collect();
    let predict_seconds = predict_start.elapsed().as_secs_f64();

    let ev = envelope_violation(&bundles, &test.targets.view())?;
    let (_, _, ratio_val) = mae_ratio(&fit, &hc, &test, resamples, seed)?;
    let coverage = gaussian_coverage(&fit, &test, 3.0)?;
    Ok(BenchCell {
        n_train: train.n_rows(),
        n_test: test.n_rows(),
        ev: Some(ev),
        mae_ratio: Some(ratio_val),
        coverage,
        fit_seconds,
        predict_seconds,
    })
}

fn cmd_bench(a: BenchArgs) -> Result<()> {
    let kind = EngineKind::parse(&a.engine)?;
    let p_grid = parse_grid(&a.p_grid)?;
    let ratio_grid = parse_grid(&a.ratio_grid)?;
    if p_grid.is_empty() || ratio_grid.is_empty() || a.seeds == 0 {
        return Err(Error::InvalidSpec(
            "bench needs nonempty p/ratio grids and seeds >= 1".into(),
        ));
    }
    let mut rows: Vec<Vec<String>> = Vec::new();
    for &p in &p_grid {
        for &ratio in &ratio_grid {
            for seed in 0..a.seeds {
                let cell = bench_cell(
                    kind,
                    p,
                    ratio,
                    seed,
                    a.test_fraction,
                    a.resamples,
                    a.baseline_only,
                );
                let row = match cell {
                    Ok(c) => {
                        println!(
                            "p={p} ratio={ratio} seed={seed} ev={} mae_ratio={} coverage={} fit={:.3}s",
                            c.ev.map_or("-".into(), |v| v.to_string()),
                            c.mae_ratio.map_or("-".into(), |v| v.to_string()),
                            c.coverage,
                            c.fit_seconds,
                        );
                        vec![
                            kind.name().to_string(),
                            p.to_string(),
                            ratio.to_string(),
                            seed.to_string(),
                            c.n_train.to_string(),
                            c.n_test.to_string(),
                            c.ev.map_or(String::new(), sci),
                            c.mae_ratio.map_or(String::new(), sci),
                            sci(c.coverage),
                            sci(c.fit_seconds),
                            sci(c.predict_seconds),
                            String::new(),
                        ]
                    }
                    Err(e) => {
                        println!("p={p} ratio={ratio} seed={seed} error: {e}");
                        vec![
                            kind.name().to_string(),
                            p.to_string(),
                            ratio.to_string(),
                            seed.to_string(),
                            String::new(),
                            String::new(),
                            String::new(),
                            String::new(),
                            String::new(),
                            String::new(),
                            String::new(),
                            e.to_string(),
                        ]
                    }
                };
                rows.push(row);
            }
        }
    }
    write_csv_atomic(
        &a.out,
        &[
            "engine",
            "p",
            "ratio",
            "seed",
            "n_train",
            "n_test",
            "ev",
            "mae_ratio",
            "coverage_3sigma",
            "fit_seconds",
            "predict_seconds",
            "error",
        ],
        &rows,
    )?;
    println!("{} rows written to {}", rows.len(), a.out.display());
    Ok(())
}

fn cmd_refmin(a: RefminArgs) -> Result<()> {
    let csv = load_csv(&a.train_csv, &a.target_column, None)?;
    let data = csv.dataset;
    let fit = fit_min_loss(&data, None, DEFAULT_NOISE_VAR)?;
    let init = match a.init.as_str() {
        "min-loss" => InitStrategy::MinLossJitter,
        "pops" => InitStrategy::PopsEnsemble,
        other => {
            return Err(Error::InvalidSpec(format!(
                "unknown init {other:?}; expected min-loss|pops"
            )))
        }
    };
    let cfg = GeConfig {
        members: a.members.unwrap_or_else(|| data.n_rows()),
        sigma_scale: a.sigma_scale,
        max_iters: a.steps,
        step_size: a.step_size,
        init,
        seed: a.seed,
    };
    let result = match minimize_ge(&data, &fit, &cfg) {
        Ok(r) => r,
        Err(Error::ScaleTooSmall { context }) => {
            println!("status: scale-too-small");
            println!("detail: {context}; the mixture density underflowed — increase --sigma-scale");
            return Ok(());
        }
        Err(e) => return Err(e),
    };
    let last = result
        .trace
        .last()
        .expect("trace always has the initialization");
    println!("members: {}", cfg.members);
    println!("sigma_scale: {}", cfg.sigma_scale);
    println!("iterations: {}", last.iter);
    println!("converged: {}", result.converged);
    println!("objective: {}", result.objective);
    println!("grad_norm: {}", last.grad_norm);
    if let Some(path) = &a.members_out {
        let header: Vec<&str> = csv.feature_columns.iter().map(String::as_str).collect();
        let rows: Vec<Vec<String>> = result
            .members
            .rows()
            .into_iter()
            .map(|r| r.iter().map(|v| sci(*v)).collect())
            .collect();
        write_csv_atomic(path, &header, &rows)?;
        println!("members written to {}", path.display());
    }
    if let Some(path) = &a.log_out {
        let rows: Vec<Vec<String>> = result
            .trace
            .iter()
            .map(|t| vec![t.iter.to_string(), sci(t.objective), sci(t.grad_norm)])
            .collect();
        write_csv_atomic(path, &["iter", "objective", "grad_norm"], &rows)?;
        println!("iteration log written to {}", path.display());
    }
    Ok(())
}
