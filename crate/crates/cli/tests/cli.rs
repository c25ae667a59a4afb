use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use lossmix::curve::{write_curve, CurveRow, EvalRecord, COLUMNS};
use lossmix::data::Manifest;

fn lossmix(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lossmix"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn small_config(dir: &Path, methods: &str, seeds: &str, n_train: usize, n_val: usize) -> PathBuf {
    let text = format!(
        r#"
steps = 12
eval_every = 4
batch_size = 2
seeds = {seeds}
methods = {methods}
out = "runs"

[dataset]
dir = "data"
seed = 3
n_train = {n_train}
n_val = {n_val}

[dataset.generator]
height = 16
width = 16
size_scale = 1.5

[model]
height = 16
width = 16
encoder = [4]
dropout_layers = []
"#
    );
    let path = dir.join("experiment.toml");
    fs::write(&path, text).unwrap();
    path
}

fn curve_files(dir: &Path) -> Vec<String> {
    let mut v: Vec<String> = fs::read_dir(dir)
        .map(|rd| {
            rd.filter_map(|e| e.ok())
                .map(|e| e.file_name().to_string_lossy().into_owned())
                .filter(|n| n.ends_with(".csv"))
                .collect()
        })
        .unwrap_or_default();
    v.sort();
    v
}

#[test]
fn gen_data_writes_counted_deterministic_records() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), r#"["iou"]"#, "[1]", 200, 50);
    let cfg = cfg.to_str().unwrap();
    let o = lossmix(&["gen-data", "--config", cfg], tmp.path());
    assert!(o.status.success(), "{}", stderr(&o));

    let data = tmp.path().join("data");
    let m = Manifest::read(&data).unwrap();
    assert_eq!((m.n_train, m.n_val, m.seed), (200, 50, 3));
    assert_eq!(m.records.len(), 250);
    let lmxs = fs::read_dir(&data).unwrap().filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "lmxs")).count();
    assert_eq!(lmxs, 250);
    let mut seeds: Vec<u64> = m.records.iter().map(|r| r.seed).collect();
    seeds.sort();
    seeds.dedup();
    assert_eq!(seeds.len(), 250);

    let o = lossmix(&["gen-data", "--config", cfg], tmp.path());
    assert!(!o.status.success());
    assert!(stderr(&o).contains("--force"), "{}", stderr(&o));
    assert_eq!(Manifest::read(&data).unwrap(), m);

    let o = lossmix(&["gen-data", "--config", cfg, "--out", "again"], tmp.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let again = Manifest::read(&tmp.path().join("again")).unwrap();
    assert_eq!(again.checksums(), m.checksums());

    let o = lossmix(&["gen-data", "--config", cfg, "--force"], tmp.path());
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(Manifest::read(&data).unwrap().checksums(), m.checksums());
}

#[test]
fn sweep_writes_one_curve_per_run_and_resumes() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), r#"["iou", "kgc_eps"]"#, "[1, 2, 3]", 6, 3);
    let cfg = cfg.to_str().unwrap();
    assert!(lossmix(&["gen-data", "--config", cfg], tmp.path()).status.success());

    let o = lossmix(&["sweep", "--config", cfg, "--jobs", "2"], tmp.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let runs = tmp.path().join("runs");
    let files = curve_files(&runs);
    assert_eq!(
        files,
        ["iou_seed1.csv", "iou_seed2.csv", "iou_seed3.csv", "kgc_eps_seed1.csv", "kgc_eps_seed2.csv", "kgc_eps_seed3.csv"]
    );
    let header = fs::read_to_string(runs.join("iou_seed1.csv")).unwrap();
    assert_eq!(header.lines().next().unwrap(), COLUMNS.join(","));

    // Runs 4 to 6 lost, as if the sweep had been killed after run 3.
    let kept = fs::read(runs.join("kgc_eps_seed2.csv")).unwrap();
    for f in &files[3..] {
        fs::remove_file(runs.join(f)).unwrap();
    }
    let o = lossmix(&["sweep", "--config", cfg, "--out", runs.to_str().unwrap()], tmp.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    assert_eq!(out.lines().filter(|l| l.ends_with("skipped")).count(), 3, "{out}");
    assert!(out.lines().any(|l| l.starts_with("kgc_eps_seed3\tCompleted")), "{out}");
    assert_eq!(curve_files(&runs).len(), 6);
    assert_eq!(fs::read(runs.join("kgc_eps_seed2.csv")).unwrap(), kept);

    let o = lossmix(&["sweep", "--config", cfg, "--out", "shifted", "--seed-offset", "10"], tmp.path());
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(curve_files(&tmp.path().join("shifted")).contains(&"iou_seed13.csv".to_string()));
}

#[test]
fn sweep_refuses_unknown_strategy_before_running() {
    let tmp = tempfile::tempdir().unwrap();
    let good = small_config(tmp.path(), r#"["iou"]"#, "[1]", 4, 2);
    assert!(lossmix(&["gen-data", "--config", good.to_str().unwrap()], tmp.path()).status.success());
    let bad = small_config(tmp.path(), r#"["iou", "kgc_turbo"]"#, "[1]", 4, 2);
    let o = lossmix(&["sweep", "--config", bad.to_str().unwrap()], tmp.path());
    assert!(!o.status.success());
    assert!(curve_files(&tmp.path().join("runs")).is_empty());
    assert!(!tmp.path().join("runs").exists());
}

#[test]
fn sweep_refuses_missing_dataset() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), r#"["iou"]"#, "[1]", 4, 2);
    let o = lossmix(&["sweep", "--config", cfg.to_str().unwrap()], tmp.path());
    assert!(!o.status.success());
    assert!(stderr(&o).contains("gen-data"), "{}", stderr(&o));
}

/// A curve whose combined error steps from `hi` down to `lo` at `drop`.
fn synthetic(dir: &Path, method: &str, seed: u64, drop: usize, hi: f64, lo: f64) {
    let rows: Vec<CurveRow> = (0..30)
        .map(|i| {
            let e = if i < drop { hi - 0.01 * (seed as usize + i) as f64 } else { lo };
            let w = 0.5 + 0.01 * i as f64;
            CurveRow {
                step: i * 10,
                loss_iou: e,
                loss_distance_px: 2.0 * e,
                w_iou: w,
                w_distance: 1.0 - w * 0.5,
                eval: EvalRecord {
                    iou_error: e / 2.0,
                    distance_px: e,
                    distance_cm: e / 10.0,
                    pickup_error: e / 2.0,
                    combined: e,
                },
            }
        })
        .collect();
    write_curve(&dir.join(format!("{method}_seed{seed}.csv")), &rows).unwrap();
}

#[test]
fn analyze_single_method_has_empty_matrix() {
    let tmp = tempfile::tempdir().unwrap();
    for s in 1..=3 {
        synthetic(tmp.path(), "sum", s, 5 + s as usize, 0.8, 0.2);
    }
    let o = lossmix(&["analyze", "."], tmp.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(tmp.path().join("summary.json")).unwrap()).unwrap();
    let methods = json["methods"].as_array().unwrap();
    assert_eq!(methods.len(), 1);
    assert_eq!(methods[0]["dead"], 0);
    assert_eq!(methods[0]["converged"], 3);
    assert_eq!(methods[0]["convergence_step"]["median"], 70.0);
    assert!(json["comparison"]["convergence_ks"]["cells"].as_array().unwrap().is_empty());
    assert!(json["comparison"]["deltas"].as_array().unwrap().is_empty());
    assert!(fs::read_to_string(tmp.path().join("summary.txt")).unwrap().contains("dead"));
}

#[test]
fn analyze_compares_methods_and_names_bad_files() {
    let tmp = tempfile::tempdir().unwrap();
    for s in 1..=4 {
        synthetic(tmp.path(), "iou", s, 12, 0.9, 0.3);
        synthetic(tmp.path(), "auxnet", s, 6, 0.9, 0.2);
    }
    let o = lossmix(&["analyze", ".", "--out", "report"], tmp.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(tmp.path().join("report/summary.json")).unwrap()).unwrap();
    let ks = &json["comparison"]["convergence_ks"];
    assert_eq!(ks["methods"], serde_json::json!(["auxnet", "iou"]));
    for i in 0..2 {
        assert_eq!(ks["cells"][i][i]["d"], 0.0);
        assert_eq!(ks["cells"][i][i]["reject"], false);
    }
    let delta = json["comparison"]["deltas"]
        .as_array()
        .unwrap()
        .iter()
        .find(|d| d["method"] == "auxnet" && d["baseline"] == "iou")
        .unwrap()
        .clone();
    assert_eq!(delta["convergence_median_pct"], -50.0);

    fs::write(tmp.path().join("distance_seed1.csv"), "step,nonsense\n0,1\n").unwrap();
    let o = lossmix(&["analyze", ".", "--out", "report"], tmp.path());
    assert!(!o.status.success());
    assert!(stderr(&o).contains("distance_seed1.csv"), "{}", stderr(&o));
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(tmp.path().join("report/summary.json")).unwrap()).unwrap();
    assert_eq!(json["methods"].as_array().unwrap().len(), 2);
}

#[test]
fn doublebox_draws_one_box_per_method() {
    let tmp = tempfile::tempdir().unwrap();
    for (m, d) in [("iou", 12), ("sum", 8), ("auxnet", 6)] {
        for s in 1..=3 {
            synthetic(tmp.path(), m, s, d + s as usize, 0.9, 0.1 + d as f64 / 100.0);
        }
    }
    let o = lossmix(&["plot", "doublebox", ".", "--out", "plots"], tmp.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let svg = fs::read_to_string(tmp.path().join("plots/doublebox.svg")).unwrap();
    assert!(svg.starts_with("<svg"));
    assert_eq!(svg.matches(r#"<g class="box""#).count(), 3);
    assert!(svg.contains(">convergence step</text>"));
    assert!(svg.contains(">combined error</text>"));
}

#[test]
fn weights_and_curves_plots() {
    let tmp = tempfile::tempdir().unwrap();
    synthetic(tmp.path(), "auxnet", 1, 5, 0.9, 0.2);
    let o = lossmix(&["plot", "weights", ".", "--out", "plots"], tmp.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let svg = fs::read_to_string(tmp.path().join("plots/weights_auxnet.svg")).unwrap();
    assert_eq!(svg.matches(r#"class="share""#).count(), 2);
    let o = lossmix(&["plot", "curves", ".", "--out", "plots", "--metric", "eval_iou_error"], tmp.path());
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(tmp.path().join("plots/curves_eval_iou_error.svg").exists());
}

#[test]
fn plot_refusals() {
    let tmp = tempfile::tempdir().unwrap();
    let rows: Vec<CurveRow> = (0..12)
        .map(|i| CurveRow {
            step: i,
            loss_iou: 0.5,
            loss_distance_px: 3.0,
            w_iou: 1.0,
            w_distance: f64::NAN,
            eval: EvalRecord { iou_error: 0.5, distance_px: 3.0, distance_cm: 0.3, pickup_error: 0.1, combined: 0.6 },
        })
        .collect();
    write_curve(&tmp.path().join("iou_seed1.csv"), &rows).unwrap();

    let o = lossmix(&["plot", "scatter", "."], tmp.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("possible values"));

    let o = lossmix(&["plot", "curves", ".", "--metric", "w_distance"], tmp.path());
    assert!(!o.status.success());
    assert!(stderr(&o).contains("w_distance"), "{}", stderr(&o));

    let o = lossmix(&["plot", "weights", "."], tmp.path());
    assert!(!o.status.success());
    assert!(stderr(&o).contains("w_distance"), "{}", stderr(&o));
}
