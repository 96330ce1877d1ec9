use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn bayescal(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bayescal"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = bayescal(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn json(path: impl AsRef<Path>) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

const QUICK_SVI: &str = "[svi]\nmax_steps = 300\n";

#[test]
fn fit_recovers_identity_map() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    ok(d, &["--seed", "5", "synth", "--n", "50000", "--out", "data.jsonl"]);
    ok(
        d,
        &["fit", "--samples", "data.jsonl", "--methods", "LC", "--subsets", "conf_only", "--estimator", "ml"],
    );
    let m = json(d.join("models/LC_conf_only_ml.json"));
    let w = m["weights"][0].as_f64().unwrap();
    let b = m["bias"].as_f64().unwrap();
    assert!((w - 1.0).abs() <= 0.05 && b.abs() <= 0.05, "w={w} b={b}");
    assert_eq!(m["method"], "logistic");
    assert_eq!(m["subset"], "conf_only");
}

#[test]
fn fit_enumerates_models() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    fs::write(d.join("cfg.toml"), QUICK_SVI).unwrap();
    ok(d, &["synth", "--n", "3000", "--true-weights", "1.5,0.4", "--true-bias", "-0.5", "--out", "data.jsonl"]);
    ok(
        d,
        &[
            "--config", "cfg.toml", "fit", "--samples", "data.jsonl", "--methods", "HB,BC", "--subsets", "full",
            "--estimator", "both",
        ],
    );
    let hb = json(d.join("models/HB_full_binning.json"));
    assert_eq!(hb["bins"].as_array().unwrap().len(), 5usize.pow(5));
    assert!(d.join("models/BC_full_ml.json").exists());
    let svi = json(d.join("models/BC_full_svi.json"));
    assert_eq!(svi["posterior"]["mu"].as_array().unwrap().len(), 2 * 5 + 1);
    // the resolved configuration is written next to the outputs and reloads
    let resolved = fs::read_to_string(d.join("config.toml")).unwrap();
    assert!(resolved.contains("max_steps = 300"));
    ok(d, &["--config", "config.toml", "fit", "--out-dir", "again"]);
    assert!(d.join("again/models/HB_full_binning.json").exists());
}

#[test]
fn eval_reports_baseline_and_deltas() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    fs::write(d.join("cfg.toml"), QUICK_SVI).unwrap();
    ok(d, &["--seed", "1", "synth", "--n", "4000", "--true-weights", "2", "--true-bias", "-1", "--out", "train.jsonl"]);
    ok(d, &["--seed", "2", "synth", "--n", "50000", "--out", "calibrated.jsonl"]);
    ok(
        d,
        &["--config", "cfg.toml", "fit", "--samples", "train.jsonl", "--methods", "LC", "--subsets", "conf_only"],
    );
    let stdout = ok(
        d,
        &[
            "--config", "cfg.toml", "--out-dir", "ev", "eval", "--samples", "calibrated.jsonl", "--models",
            "models/LC_conf_only_ml.json", "models/LC_conf_only_svi.json",
        ],
    );
    assert!(stdout.starts_with("subset,method,estimator,d_ece_pct_mean"));
    let baseline = json(d.join("ev/reports/baseline_conf_only.json"));
    // identity map: raw scores are calibrated up to binomial noise
    assert!(baseline["d_ece"].as_f64().unwrap() <= 0.01);
    let svi = json(d.join("ev/reports/LC_conf_only_svi.json"));
    assert!(svi["picp"].is_f64() && svi["mpiw"].is_f64());
    assert_eq!(svi["reliability"].as_array().unwrap().len(), 20);
    let summary = json(d.join("ev/eval.json"));
    let delta = &summary["deltas"][0];
    let diff = delta["d_ece_ml"].as_f64().unwrap() - delta["d_ece_svi"].as_f64().unwrap();
    assert_eq!(delta["ml_minus_svi"].as_f64().unwrap(), diff);
}

#[test]
fn experiment_is_byte_identical_and_complete() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    fs::write(d.join("cfg.toml"), format!("repeats = 20\nsamples_t = 200\n{QUICK_SVI}")).unwrap();
    ok(d, &["synth", "--n", "1500", "--true-weights", "1.2,0.3", "--out", "data.jsonl"]);
    let args = |out: &'static str| {
        [
            "--config", "cfg.toml", "--seed", "9", "--out-dir", out, "experiment", "--samples", "data.jsonl",
            "--methods", "LC,HB", "--subsets", "conf_only",
        ]
    };
    ok(d, &args("a"));
    ok(d, &args("b"));
    let a = fs::read(d.join("a/experiment.json")).unwrap();
    assert_eq!(a, fs::read(d.join("b/experiment.json")).unwrap());
    let v: Value = serde_json::from_slice(&a).unwrap();
    for agg in v["aggregate"].as_array().unwrap() {
        assert_eq!(agg["n_repeats"], 20);
    }
    let svi_rows = v["rows"]
        .as_array()
        .unwrap()
        .iter()
        .filter(|r| r["method"] == "LC" && r["subset"] == "conf_only" && r["estimator"] == "svi")
        .count();
    assert_eq!(svi_rows, 20);
    // derived seeds base + repeat
    assert_eq!(v["rows"].as_array().unwrap().last().unwrap()["seed"], 9 + 19);
    let table = fs::read_to_string(d.join("a/experiment_d_ece.csv")).unwrap();
    assert!(table.lines().any(|l| l.starts_with("conf_only,LC,ml,") && l.split(',').nth(5).unwrap().starts_with(['+', '-'])));
}

#[test]
fn shift_on_identical_sets_has_equal_medians() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    fs::write(d.join("cfg.toml"), QUICK_SVI).unwrap();
    ok(d, &["synth", "--n", "3000", "--region", "cx=0:0.5", "--out", "in.jsonl"]);
    ok(
        d,
        &[
            "--config", "cfg.toml", "fit", "--samples", "in.jsonl", "--methods", "BC", "--subsets", "conf_pos",
            "--estimator", "svi",
        ],
    );
    ok(
        d,
        &[
            "--samples-t", "300", "shift", "--model", "models/BC_conf_pos_svi.json", "--in", "in.jsonl", "--out",
            "in.jsonl",
        ],
    );
    let s = json(d.join("shift_summary.json"));
    assert_eq!(s["comparison"]["median_width_in"], s["comparison"]["median_width_out"]);
    assert_eq!(s["in_distribution"]["percentiles"], serde_json::json!([25.0, 50.0, 75.0]));
    let csv = fs::read_to_string(d.join("shift_out.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "index,q_mean,ci_low,ci_high,ci_width,est_precision,abs_gap");
    assert_eq!(csv.lines().count(), 3001);
}

#[test]
fn match_writes_labelled_samples() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    fs::write(
        d.join("dets.jsonl"),
        concat!(
            "{\"image_id\":\"a\",\"score\":0.9,\"cx\":0.5,\"cy\":0.5,\"w\":0.2,\"h\":0.2}\n",
            "{\"image_id\":\"a\",\"score\":0.8,\"cx\":0.51,\"cy\":0.5,\"w\":0.2,\"h\":0.2}\n",
            "{\"image_id\":\"b\",\"score\":0.4,\"cx\":0.2,\"cy\":0.2,\"w\":0.1,\"h\":0.1}\n",
        ),
    )
    .unwrap();
    fs::write(d.join("gts.jsonl"), "{\"image_id\":\"a\",\"cx\":0.5,\"cy\":0.5,\"w\":0.2,\"h\":0.2}\n").unwrap();
    ok(d, &["match", "--dets", "dets.jsonl", "--gts", "gts.jsonl", "--iou", "0.5", "--out", "samples.jsonl"]);
    let lines: Vec<Value> = fs::read_to_string(d.join("samples.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    let labels: Vec<i64> = lines.iter().map(|v| v["matched"].as_i64().unwrap()).collect();
    assert_eq!(labels, vec![1, 0, 0]);
}

#[test]
fn synth_respects_region() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    ok(d, &["synth", "--n", "500", "--region", "cx=0.5:1,h=0.2:0.3", "--out", "s.jsonl"]);
    for line in fs::read_to_string(d.join("s.jsonl")).unwrap().lines() {
        let v: Value = serde_json::from_str(line).unwrap();
        assert!(v["cx"].as_f64().unwrap() >= 0.5);
        let h = v["h"].as_f64().unwrap();
        assert!((0.2..=0.3).contains(&h));
    }
}

#[test]
fn exit_codes_follow_error_class() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    let code = |args: &[&str]| bayescal(d, args).status.code().unwrap();
    ok(d, &["synth", "--n", "300", "--out", "data.jsonl"]);
    // configuration
    assert_eq!(code(&["fit"]), 2);
    assert_eq!(code(&["--tau", "1.5", "fit", "--samples", "data.jsonl"]), 2);
    fs::write(d.join("bad.toml"), "repeats = \"many\"\n").unwrap();
    assert_eq!(code(&["--config", "bad.toml", "fit", "--samples", "data.jsonl"]), 2);
    assert_eq!(code(&["synth", "--n", "10", "--region", "cx=0.7:0.2", "--out", "x.jsonl"]), 2);
    // data
    assert_eq!(code(&["fit", "--samples", "missing.jsonl"]), 3);
    fs::write(d.join("empty.jsonl"), "").unwrap();
    assert_eq!(code(&["fit", "--samples", "empty.jsonl"]), 3);
    fs::write(
        d.join("all_matched.jsonl"),
        "{\"image_id\":\"a\",\"score\":0.9,\"cx\":0.5,\"cy\":0.5,\"w\":0.2,\"h\":0.2,\"matched\":1}\n",
    )
    .unwrap();
    assert_eq!(code(&["fit", "--samples", "all_matched.jsonl", "--methods", "LC"]), 3);
    // numeric: a variational scale so large the ELBO overflows
    fs::write(d.join("wild.toml"), "[svi]\ninit_log_sigma = 400.0\n").unwrap();
    assert_eq!(
        code(&[
            "--config", "wild.toml", "fit", "--samples", "data.jsonl", "--methods", "LC", "--subsets", "conf_only",
            "--estimator", "svi",
        ]),
        4
    );
    assert!(!d.join("models/LC_conf_only_svi.json").exists());
}
