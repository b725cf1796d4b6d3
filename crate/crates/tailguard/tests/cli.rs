//! End-to-end runs of the `tailguard` binary: exit codes, artifact
//! schemas, and determinism.

use std::path::{Path, PathBuf};
use std::process::Command;

const PEAK: f64 = 0.398_942_280_401_432_7;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_tailguard"))
}

fn run(cmd: &mut Command) -> (i32, String, String) {
    let output = cmd.output().expect("binary should spawn");
    (
        output.status.code().expect("no exit code"),
        String::from_utf8_lossy(&output.stdout).into_owned(),
        String::from_utf8_lossy(&output.stderr).into_owned(),
    )
}

/// 260 hourly rows, a date column, and two forecastable channels.
fn write_series(path: &Path) {
    let mut text = String::from("date,alpha,beta\n");
    for i in 0..260 {
        let t = i as f64;
        let a = (0.26 * t).sin() + 0.004 * t;
        let b = (0.11 * t + 1.0).cos() - 0.002 * t;
        text.push_str(&format!("2016-07-{:02} {:02}:00:00,{a},{b}\n", 1 + i / 24, i % 24));
    }
    std::fs::write(path, text).unwrap();
}

fn data_flags(csv: &Path) -> Vec<String> {
    [
        "--data",
        csv.to_str().unwrap(),
        "--lookback",
        "8",
        "--horizon",
        "4",
        "--split",
        "frac:0.6,0.2,0.2",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect()
}

fn smoke_flags(csv: &Path, out: &Path) -> Vec<String> {
    let mut flags = data_flags(csv);
    flags.extend(
        [
            "--epochs",
            "5",
            "--patience",
            "5",
            "--batch-size",
            "16",
            "--lr",
            "0.005",
            "--seed",
            "3",
            "--out",
        ]
        .iter()
        .map(|s| s.to_string()),
    );
    flags.push(out.to_str().unwrap().to_owned());
    flags
}

fn read_json(path: &Path) -> serde_json::Value {
    let text = std::fs::read_to_string(path)
        .unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    serde_json::from_str(&text).unwrap()
}

fn strip_wall_secs(value: &mut serde_json::Value) {
    match value {
        serde_json::Value::Object(map) => {
            map.remove("wall_secs");
            for v in map.values_mut() {
                strip_wall_secs(v);
            }
        }
        serde_json::Value::Array(items) => items.iter_mut().for_each(strip_wall_secs),
        _ => {}
    }
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    let mut reader = csv::ReaderBuilder::new().has_headers(false).from_path(path).unwrap();
    reader
        .records()
        .map(|r| r.unwrap().iter().map(str::to_owned).collect())
        .collect()
}

#[test]
fn usage_errors_exit_one() {
    let (code, _, _) = run(&mut bin());
    assert_eq!(code, 1);

    let (code, stdout, _) = run(bin().arg("--help"));
    assert_eq!(code, 0);
    assert!(stdout.contains("train"));
    assert!(stdout.contains("verify-theory"));

    let (code, _, _) = run(bin().arg("--version"));
    assert_eq!(code, 0);

    let (code, _, stderr) = run(bin().args(["train", "--no-such-flag"]));
    assert_eq!(code, 1);
    assert!(!stderr.is_empty());

    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("series.csv");
    write_series(&csv);

    let mut flags = smoke_flags(&csv, &dir.path().join("out"));
    flags.extend(["--sigma".to_owned(), "0".to_owned()]);
    let (code, _, stderr) = run(bin().arg("train").args(&flags));
    assert_eq!(code, 1);
    assert!(stderr.contains("sigma"));

    let mut flags = smoke_flags(&csv, &dir.path().join("out"));
    flags.extend(["--sampler".to_owned(), "focal".to_owned()]);
    let (code, _, stderr) = run(bin().arg("train").args(&flags));
    assert_eq!(code, 1);
    assert!(stderr.contains("focal"));

    let mut flags = smoke_flags(&csv, &dir.path().join("out"));
    flags.extend(["--sampler".to_owned(), "uniform".to_owned(), "--mu".to_owned(), "1".to_owned()]);
    let (code, _, stderr) = run(bin().arg("train").args(&flags));
    assert_eq!(code, 1);
    assert!(stderr.contains("--mu"));

    let flags = smoke_flags(&csv, &dir.path().join("out"));
    let (code, _, stderr) = run(bin().arg("train").args(&flags).env("TAILGUARD_THREADS", "zero"));
    assert_eq!(code, 1);
    assert!(stderr.contains("TAILGUARD_THREADS"));
}

#[test]
fn missing_data_file_exits_two_naming_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.csv");
    let flags = smoke_flags(&missing, &dir.path().join("out"));
    let (code, _, stderr) = run(bin().arg("train").args(&flags));
    assert_eq!(code, 2);
    assert!(stderr.contains("nope.csv"));
}

#[test]
fn train_smoke_writes_valid_artifacts_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("series.csv");
    write_series(&csv);

    let out_a = dir.path().join("a");
    let (code, stdout, stderr) = run(bin()
        .arg("train")
        .args(smoke_flags(&csv, &out_a))
        .env("TAILGUARD_THREADS", "2"));
    assert_eq!(code, 0, "stderr: {stderr}");
    assert!(stdout.contains("best epoch"));

    let mut doc_a = read_json(&out_a.join("run.json"));
    assert_eq!(doc_a["schema_version"], 1);
    assert_eq!(doc_a["sampler"], "gaussian");
    assert_eq!(doc_a["model"]["lookback"], 8);
    let records = doc_a["records"].as_array().unwrap();
    assert!(!records.is_empty() && records.len() <= 5);
    for r in records {
        assert!(r["val_mse"].as_f64().unwrap().is_finite());
        assert!(r["tmse"].as_f64().unwrap().is_finite());
    }
    let k = records.len();
    assert!(out_a.join(format!("weights_epoch_{k}.csv")).exists());
    assert!(out_a.join(format!("loss_hist_epoch_{k}.csv")).exists());

    let out_b = dir.path().join("b");
    let (code, _, _) = run(bin().arg("train").args(smoke_flags(&csv, &out_b)));
    assert_eq!(code, 0);
    let mut doc_b = read_json(&out_b.join("run.json"));
    strip_wall_secs(&mut doc_a);
    strip_wall_secs(&mut doc_b);
    assert_eq!(doc_a, doc_b);
}

#[test]
fn diverging_run_exits_three() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("series.csv");
    write_series(&csv);
    let mut flags = smoke_flags(&csv, &dir.path().join("out"));
    let lr_at = flags.iter().position(|f| f == "--lr").unwrap();
    flags[lr_at + 1] = "1e300".to_owned();
    let (code, _, stderr) = run(bin().arg("train").args(&flags));
    assert_eq!(code, 3, "stderr: {stderr}");
    assert!(stderr.contains("non-finite"));
}

#[test]
fn compare_same_sampler_same_seed_gives_identical_rows() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("series.csv");
    write_series(&csv);
    let out = dir.path().join("cmp");
    let mut flags = smoke_flags(&csv, &out);
    flags.extend([
        "--sampler".to_owned(),
        "uniform".to_owned(),
        "--sampler".to_owned(),
        "uniform".to_owned(),
    ]);
    let (code, _, stderr) = run(bin().arg("compare").args(&flags));
    assert_eq!(code, 0, "stderr: {stderr}");

    let doc = read_json(&out.join("compare.json"));
    let rows = doc["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0]["test_mse"], rows[1]["test_mse"]);
    assert_eq!(rows[0]["top5_mmse"], rows[1]["top5_mmse"]);
    assert_eq!(rows[0]["best_epoch"], rows[1]["best_epoch"]);
    assert_eq!(doc["baseline"], "uniform");
    let epochs = rows[0]["epochs_to_baseline_best"].as_u64().unwrap();
    assert!((1..=5).contains(&epochs));
}

#[test]
fn compare_emits_all_requested_samplers() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("series.csv");
    write_series(&csv);
    let out = dir.path().join("cmp");
    let mut flags = smoke_flags(&csv, &out);
    for sampler in ["gaussian", "uniform", "infobatch:0.3", "infobatch:0.5"] {
        flags.extend(["--sampler".to_owned(), sampler.to_owned()]);
    }
    let (code, _, stderr) = run(bin().arg("compare").args(&flags));
    assert_eq!(code, 0, "stderr: {stderr}");

    let doc = read_json(&out.join("compare.json"));
    let rows = doc["rows"].as_array().unwrap();
    let labels: Vec<&str> = rows.iter().map(|r| r["sampler"].as_str().unwrap()).collect();
    assert_eq!(labels, ["gaussian", "uniform", "infobatch:0.3", "infobatch:0.5"]);
    for row in rows {
        assert!(row["error"].is_null());
        assert!(row["test_mse"].as_f64().unwrap().is_finite());
        assert!(row["top5_mmse"].as_f64().unwrap().is_finite());
        assert!(out
            .join(row["dir"].as_str().unwrap())
            .join("run.json")
            .exists());
    }

    let table = csv_rows(&out.join("compare.csv"));
    assert_eq!(
        table[0],
        vec![
            "sampler",
            "best_epoch",
            "best_val_mse",
            "test_mse",
            "top5_mmse",
            "epochs_to_baseline_best",
            "error"
        ]
    );
    assert_eq!(table.len(), 5);

    let (code, _, _) = run(bin().arg("compare").args(smoke_flags(&csv, &out)));
    assert_eq!(code, 1, "one sampler is not a comparison");
}

#[test]
fn verify_theory_classifies_pareto_and_writes_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("theory");
    let (code, stdout, stderr) = run(bin().args([
        "verify-theory",
        "--density",
        "pareto:1,1.5",
        "--lambda",
        "0.1",
        "--cutoffs",
        "100,1000,10000",
        "--out",
        out.to_str().unwrap(),
    ]));
    assert_eq!(code, 0, "stderr: {stderr}");
    assert!(stdout.contains("raw heavy"));
    assert!(stdout.contains("reweighted light"));

    let reports = read_json(&out.join("tail_report.json"));
    let report = &reports.as_array().unwrap()[0];
    assert_eq!(report["verdict_raw"], "heavy");
    assert_eq!(report["verdict_weighted"], "light");
    assert!(report["bound_holds"].as_bool().unwrap());
    assert!(report["hill_raw"].as_f64().unwrap() > report["hill_weighted"].as_f64().unwrap());

    let rows = csv_rows(&out.join("tail_moments.csv"));
    assert_eq!(
        rows[0],
        vec![
            "lambda",
            "cutoff",
            "raw_moment",
            "ln_raw_moment",
            "weighted_moment",
            "ln_weighted_moment"
        ]
    );
    assert_eq!(rows.len(), 4);

    let (code, _, stderr) = run(bin().args(["verify-theory", "--lambda", "-0.5"]));
    assert_eq!(code, 1);
    assert!(stderr.contains("lambda") || stderr.contains("> 0"));
}

#[test]
fn demo_synth_weights_stay_in_the_gaussian_range() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("demo");
    let (code, _, stderr) = run(bin().args([
        "demo-synth",
        "--n",
        "400",
        "--seed",
        "5",
        "--out",
        out.to_str().unwrap(),
    ]));
    assert_eq!(code, 0, "stderr: {stderr}");

    let rows = csv_rows(&out.join("demo_points.csv"));
    assert_eq!(rows[0], vec!["x1", "x2", "class", "loss", "weight"]);
    assert_eq!(rows.len(), 401);

    let mut losses = Vec::new();
    let mut weights = Vec::new();
    let mut correct = 0usize;
    for row in &rows[1..] {
        assert!(matches!(row[2].as_str(), "0" | "1"));
        let loss: f64 = row[3].parse().unwrap();
        let weight: f64 = row[4].parse().unwrap();
        assert!(loss >= 0.0);
        assert!(weight > 0.0 && weight <= PEAK + 1e-12, "weight {weight}");
        if loss < std::f64::consts::LN_2 {
            correct += 1;
        }
        losses.push((row[0].parse::<f64>().unwrap(), row[1].parse::<f64>().unwrap(), loss));
        weights.push(weight);
    }
    assert!(correct >= 360, "classifier should separate the clusters, got {correct}/400");

    let mean_loss = losses.iter().map(|(_, _, l)| l).sum::<f64>() / losses.len() as f64;
    let (center_idx, _) = losses
        .iter()
        .enumerate()
        .map(|(i, &(x, y, _))| (i, (x - 0.5f64).hypot(y - 0.5)))
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .unwrap();
    assert!(losses[center_idx].2 < mean_loss, "a cluster-center point should have easy loss");
    assert!(weights[center_idx] < PEAK);

    let grid = csv_rows(&out.join("demo_grid.csv"));
    assert_eq!(grid[0], vec!["x1", "x2", "prob"]);
    assert_eq!(grid.len(), 61 * 61 + 1);
    for row in &grid[1..] {
        let p: f64 = row[2].parse().unwrap();
        assert!((0.0..=1.0).contains(&p));
    }
}

#[test]
fn grid_search_and_report_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("series.csv");
    write_series(&csv);
    let out = dir.path().join("grid");
    let mut flags = smoke_flags(&csv, &out);
    flags.extend([
        "--mu-grid".to_owned(),
        "0".to_owned(),
        "--sigma-grid".to_owned(),
        "1".to_owned(),
    ]);
    let (code, stdout, stderr) = run(bin().arg("grid-search").args(&flags));
    assert_eq!(code, 0, "stderr: {stderr}");
    assert!(stdout.contains("best cell"));

    let doc = read_json(&out.join("grid.json"));
    assert_eq!(doc["best"], 0);
    let cells = doc["cells"].as_array().unwrap();
    assert_eq!(cells.len(), 1);
    assert_eq!(cells[0]["mu"], 0.0);
    assert_eq!(cells[0]["sigma"], 1.0);
    let cell_mse = cells[0]["test_mse"].as_f64().unwrap();

    let train_out = dir.path().join("direct");
    let (code, _, _) = run(bin().arg("train").args(smoke_flags(&csv, &train_out)));
    assert_eq!(code, 0);
    let direct = read_json(&train_out.join("run.json"));
    assert_eq!(cell_mse, direct["final_test_mse"].as_f64().unwrap());

    let (code, _, _) = run(bin().args(["report", "--run", out.to_str().unwrap()]));
    assert_eq!(code, 0);
    let surface = csv_rows(&out.join("grid_surface.csv"));
    assert_eq!(surface[0], vec!["mu", "sigma", "test_mse", "top5_mmse", "error"]);
    assert_eq!(surface[1][0], "0");
    assert_eq!(surface[1][1], "1");

    let bad_sigma: Vec<String> = flags
        .iter()
        .map(|f| if f == "1" { "0,-1".to_owned() } else { f.clone() })
        .collect();
    let (code, _, stderr) = run(bin().arg("grid-search").args(&bad_sigma));
    assert_eq!(code, 1);
    assert!(stderr.contains("sigma-grid"));
}

#[test]
fn report_on_compare_emits_three_csvs() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("series.csv");
    write_series(&csv);
    let out = dir.path().join("cmp");
    let mut flags = smoke_flags(&csv, &out);
    for sampler in ["gaussian", "uniform"] {
        flags.extend(["--sampler".to_owned(), sampler.to_owned()]);
    }
    let (code, _, _) = run(bin().arg("compare").args(&flags));
    assert_eq!(code, 0);

    let report_out = dir.path().join("plots");
    let (code, stdout, stderr) = run(bin().args([
        "report",
        "--run",
        out.to_str().unwrap(),
        "--out",
        report_out.to_str().unwrap(),
    ]));
    assert_eq!(code, 0, "stderr: {stderr}");
    assert!(stdout.contains("curves.csv"));

    let curves = csv_rows(&report_out.join("curves.csv"));
    assert_eq!(curves[0], vec!["run", "epoch", "train_loss", "val_mse", "test_mse", "tmse"]);
    let labels: std::collections::BTreeSet<String> =
        curves[1..].iter().map(|r| r[0].clone()).collect();
    assert_eq!(labels.into_iter().collect::<Vec<_>>(), ["gaussian", "uniform"]);

    let hist = csv_rows(&report_out.join("loss_hist.csv"));
    assert_eq!(hist[0], vec!["run", "bin_lo", "bin_hi", "count", "reweighted_count"]);
    let gaussian_total: usize = hist[1..]
        .iter()
        .filter(|r| r[0] == "gaussian")
        .map(|r| r[3].parse::<usize>().unwrap())
        .sum();
    let train_windows = read_json(&out.join("gaussian").join("run.json"))["dataset"]
        ["train_windows"]
        .as_u64()
        .unwrap() as usize;
    assert_eq!(gaussian_total, train_windows);

    let table = csv_rows(&report_out.join("table.csv"));
    assert_eq!(
        table[0],
        vec!["run", "best_epoch", "best_val_mse", "test_mse", "top5_mmse", "epochs_to_own_best"]
    );
    assert_eq!(table.len(), 3);

    let empty = dir.path().join("empty");
    std::fs::create_dir_all(&empty).unwrap();
    let (code, _, stderr) = run(bin().args(["report", "--run", empty.to_str().unwrap()]));
    assert_eq!(code, 2);
    assert!(stderr.contains("run.json"));
}

#[test]
fn month_splits_and_date_columns_load() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("monthly.csv");
    let mut text = String::from("date,alpha\n");
    for i in 0..2200 {
        let t = i as f64;
        text.push_str(&format!("stamp-{i},{}\n", (0.05 * t).sin() + 0.001 * t));
    }
    std::fs::write(&csv, text).unwrap();

    let out: PathBuf = dir.path().join("out");
    let (code, _, stderr) = run(bin().args([
        "train",
        "--data",
        csv.to_str().unwrap(),
        "--lookback",
        "16",
        "--horizon",
        "8",
        "--split",
        "months:1,1,1",
        "--freq",
        "hourly",
        "--epochs",
        "2",
        "--patience",
        "2",
        "--lr",
        "0.005",
        "--out",
        out.to_str().unwrap(),
    ]));
    assert_eq!(code, 0, "stderr: {stderr}");
    let doc = read_json(&out.join("run.json"));
    assert_eq!(doc["dataset"]["train_windows"], 720 - 16 - 8 + 1);
    assert_eq!(doc["dataset"]["val_windows"], 720 + 16 - 16 - 8 + 1);

    let (code, _, stderr) = run(bin().args([
        "train",
        "--data",
        csv.to_str().unwrap(),
        "--lookback",
        "16",
        "--horizon",
        "8",
        "--split",
        "months:2,1,1",
        "--epochs",
        "2",
        "--patience",
        "2",
        "--out",
        out.to_str().unwrap(),
    ]));
    assert_eq!(code, 2, "2200 rows cannot hold 4 months, stderr: {stderr}");
    assert!(stderr.contains("rows"));
}
