//! Black-box tests of the `pops` binary: exit codes, output files, and the
//! printed report lines, driven through real subprocesses.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pops"))
        .args(args)
        .env("OPENBLAS_NUM_THREADS", "1")
        .output()
        .expect("binary should spawn")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("no exit code")
}

fn path_str(dir: &Path, name: &str) -> String {
    dir.join(name).to_str().unwrap().to_owned()
}

/// Draws a cubic-engine training CSV with P=3 features into `dir`.
fn synth_cubic(dir: &Path, n: usize, seed: u64, name: &str) -> String {
    let out = path_str(dir, name);
    let o = run(&[
        "synth",
        "--engine",
        "cubic",
        "--n",
        &n.to_string(),
        "--seed",
        &seed.to_string(),
        "--input-dim",
        "3",
        "--out",
        &out,
    ]);
    assert_eq!(code(&o), 0, "synth failed: {}", stderr(&o));
    out
}

/// Draws a degree-2 sinusoid CSV (features 1, x, x²) into `dir`.
fn synth_sine(dir: &Path, n: usize, seed: u64, name: &str) -> String {
    let out = path_str(dir, name);
    let o = run(&[
        "synth",
        "--engine",
        "sinusoid",
        "--n",
        &n.to_string(),
        "--seed",
        &seed.to_string(),
        "--degree",
        "2",
        "--out",
        &out,
    ]);
    assert_eq!(code(&o), 0, "synth failed: {}", stderr(&o));
    out
}

#[test]
fn synth_fit_predict_eval_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let train = synth_cubic(dir.path(), 120, 1, "train.csv");

    let text = fs::read_to_string(&train).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "f0,f1,f2,y");
    assert_eq!(text.lines().count(), 121);

    let model = path_str(dir.path(), "model.json");
    let o = run(&["fit", &train, "y", "--with-ensemble", "--out", &model]);
    assert_eq!(code(&o), 0, "fit failed: {}", stderr(&o));
    let log = stdout(&o);
    assert!(log.contains("n_train: 120"), "fit output: {log}");
    assert!(log.contains("n_features: 3"), "fit output: {log}");
    assert!(log.contains("hypercube_rank:"), "fit output: {log}");
    assert!(log.contains("loss_residual_var:"), "fit output: {log}");

    let preds = path_str(dir.path(), "preds.csv");
    let o = run(&[
        "predict",
        &model,
        &train,
        "--bounds",
        "--std",
        "--combined-std",
        "--out",
        &preds,
    ]);
    assert_eq!(code(&o), 0, "predict failed: {}", stderr(&o));
    let text = fs::read_to_string(&preds).unwrap();
    assert_eq!(
        text.lines().next().unwrap(),
        "mean,std_misspec,std_epistemic,combined_std,max,min"
    );
    assert_eq!(text.lines().count(), 121);

    let hist = path_str(dir.path(), "hist.csv");
    let points = path_str(dir.path(), "points.csv");
    let o = run(&[
        "eval",
        &model,
        &train,
        "--resamples",
        "8",
        "--hist-out",
        &hist,
        "--points-out",
        &points,
    ]);
    assert_eq!(code(&o), 0, "eval failed: {}", stderr(&o));
    let log = stdout(&o);
    assert!(log.contains("n_test: 120"), "eval output: {log}");
    // The envelope covers every training row by construction.
    assert!(
        log.contains("envelope_violation_rate: 0\n"),
        "eval output: {log}"
    );
    assert!(log.contains("mae_ratio:"), "eval output: {log}");
    assert_eq!(
        fs::read_to_string(&hist).unwrap().lines().next().unwrap(),
        "lo,hi,observed,predicted"
    );
    assert_eq!(
        fs::read_to_string(&points).unwrap().lines().next().unwrap(),
        "abs_error,std_misspec,band_width"
    );
}

#[test]
fn help_and_version_exit_zero() {
    let o = run(&["--help"]);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).contains("synth"));
    let o = run(&["--version"]);
    assert_eq!(code(&o), 0);
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let o = run(&["synth", "--bogus"]);
    assert_eq!(code(&o), 1);
}

#[test]
fn missing_target_column_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let train = synth_cubic(dir.path(), 30, 0, "train.csv");
    let model = path_str(dir.path(), "model.json");
    let o = run(&["fit", &train, "z", "--out", &model]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("error:"), "stderr: {}", stderr(&o));
    assert!(!Path::new(&model).exists());
}

#[test]
fn corrupt_model_file_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let train = synth_cubic(dir.path(), 20, 0, "train.csv");
    let model = path_str(dir.path(), "model.json");
    fs::write(&model, "{ not json").unwrap();
    let o = run(&[
        "predict",
        &model,
        &train,
        "--out",
        &path_str(dir.path(), "p.csv"),
    ]);
    assert_eq!(code(&o), 1);
}

#[test]
fn predict_needs_every_model_feature_column() {
    let dir = tempfile::tempdir().unwrap();
    let train = synth_cubic(dir.path(), 40, 2, "train.csv");
    let model = path_str(dir.path(), "model.json");
    let o = run(&["fit", &train, "y", "--out", &model]);
    assert_eq!(code(&o), 0);

    // A two-feature table cannot feed a three-feature model.
    let narrow = path_str(dir.path(), "narrow.csv");
    fs::write(&narrow, "f0,f1\n0.1,0.2\n0.3,0.4\n").unwrap();
    let o = run(&[
        "predict",
        &model,
        &narrow,
        "--out",
        &path_str(dir.path(), "p.csv"),
    ]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("f2"), "stderr: {}", stderr(&o));
}

#[test]
fn fit_accepts_a_weight_column() {
    let dir = tempfile::tempdir().unwrap();
    let csv = path_str(dir.path(), "data.csv");
    let mut text = String::from("f0,f1,w,t\n");
    for i in 0..12 {
        let x = i as f64 / 6.0 - 1.0;
        text += &format!("1.0,{x},{},{}\n", 1.0 + (i % 3) as f64, x * x);
    }
    fs::write(&csv, text).unwrap();
    let model = path_str(dir.path(), "model.json");
    let o = run(&["fit", &csv, "t", "--weight-column", "w", "--out", &model]);
    assert_eq!(code(&o), 0, "fit failed: {}", stderr(&o));
    assert!(stdout(&o).contains("n_features: 2"));
}

#[test]
fn refmin_desk_scale_gate_is_a_user_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = path_str(dir.path(), "wide.csv");
    let o = run(&[
        "synth",
        "--engine",
        "cubic",
        "--n",
        "50",
        "--input-dim",
        "9",
        "--out",
        &out,
    ]);
    assert_eq!(code(&o), 0);
    let o = run(&["refmin", &out]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("error:"), "stderr: {}", stderr(&o));
}

#[test]
fn refmin_reports_scale_too_small_and_exits_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let train = synth_sine(dir.path(), 100, 9, "train.csv");
    let o = run(&["refmin", &train, "--sigma-scale", "0.05", "--seed", "2"]);
    assert_eq!(code(&o), 0, "stderr: {}", stderr(&o));
    assert!(
        stdout(&o).contains("status: scale-too-small"),
        "stdout: {}",
        stdout(&o)
    );
}

#[test]
fn refmin_success_writes_members_and_log() {
    let dir = tempfile::tempdir().unwrap();
    let train = synth_sine(dir.path(), 80, 3, "train.csv");
    let members = path_str(dir.path(), "members.csv");
    let log = path_str(dir.path(), "log.csv");
    let o = run(&[
        "refmin",
        &train,
        "--sigma-scale",
        "2",
        "--members",
        "10",
        "--init",
        "pops",
        "--steps",
        "50",
        "--members-out",
        &members,
        "--log-out",
        &log,
    ]);
    assert_eq!(code(&o), 0, "stderr: {}", stderr(&o));
    let text = stdout(&o);
    assert!(text.contains("members: 10"), "stdout: {text}");
    assert!(text.contains("converged:"), "stdout: {text}");
    assert!(text.contains("objective:"), "stdout: {text}");

    let members_text = fs::read_to_string(&members).unwrap();
    assert_eq!(members_text.lines().next().unwrap(), "f0,f1,f2");
    assert_eq!(members_text.lines().count(), 11);

    let log_text = fs::read_to_string(&log).unwrap();
    assert_eq!(log_text.lines().next().unwrap(), "iter,objective,grad_norm");
    assert!(log_text.lines().count() >= 2);
}

#[test]
fn bench_emits_one_row_per_cell() {
    let dir = tempfile::tempdir().unwrap();
    let out = path_str(dir.path(), "bench.csv");
    let o = run(&[
        "bench",
        "--p-grid",
        "3,4",
        "--ratio-grid",
        "5",
        "--seeds",
        "2",
        "--resamples",
        "4",
        "--out",
        &out,
    ]);
    assert_eq!(code(&o), 0, "bench failed: {}", stderr(&o));
    let text = fs::read_to_string(&out).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next().unwrap(),
        "engine,p,ratio,seed,n_train,n_test,ev,mae_ratio,coverage_3sigma,\
         fit_seconds,predict_seconds,error"
    );
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 4);
    for row in &rows {
        let fields: Vec<&str> = row.split(',').collect();
        assert_eq!(fields.len(), 12, "row: {row}");
        assert_eq!(fields[0], "cubic");
        assert!(fields[11].is_empty(), "cell reported an error: {row}");
    }
    // First cell: p=3, ratio=5 means 15 training rows against 135 held out.
    assert!(
        rows[0].starts_with("cubic,3,5,0,15,135,"),
        "row: {}",
        rows[0]
    );
}

#[test]
fn bench_baseline_only_leaves_envelope_fields_empty() {
    let dir = tempfile::tempdir().unwrap();
    let out = path_str(dir.path(), "bench.csv");
    let o = run(&[
        "bench",
        "--p-grid",
        "3",
        "--ratio-grid",
        "5",
        "--seeds",
        "1",
        "--baseline-only",
        "--out",
        &out,
    ]);
    assert_eq!(code(&o), 0, "bench failed: {}", stderr(&o));
    let text = fs::read_to_string(&out).unwrap();
    let row = text.lines().nth(1).unwrap();
    let fields: Vec<&str> = row.split(',').collect();
    assert!(fields[6].is_empty(), "ev should be empty, row: {row}");
    assert!(fields[7].is_empty(), "mae should be empty, row: {row}");
    assert!(
        !fields[8].is_empty(),
        "coverage should be present, row: {row}"
    );
}

#[test]
fn ensemble_row_gate_requires_force() {
    // The O(N²) ensemble refuses row counts past the gate unless forced, and
    // the refusal names the escape hatch.
    let dir = tempfile::tempdir().unwrap();
    let train = path_str(dir.path(), "train.csv");
    let mut text = String::from("f0,f1,y\n");
    for i in 0..20_001 {
        let x = (i % 97) as f64 / 48.5 - 1.0;
        text += &format!("1.0,{x},{}\n", x * x * x);
    }
    fs::write(&train, text).unwrap();
    let model = path_str(dir.path(), "model.json");
    let o = run(&["fit", &train, "y", "--with-ensemble", "--out", &model]);
    assert_eq!(code(&o), 1);
    assert!(
        stderr(&o).contains("--force-ensemble"),
        "stderr: {}",
        stderr(&o)
    );
}
