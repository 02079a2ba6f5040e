use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn avdgp(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_avdgp"))
        .args(args)
        .current_dir(dir)
        .env_remove("AVDGP_DATA_DIR")
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) {
    assert!(out.status.success(), "exit {:?}\nstderr: {}", out.status.code(), String::from_utf8_lossy(&out.stderr));
}

const SMALL_TOY: &str = r#"{"task":"binary","dataset":"toy","toy_n":150,"rule":"AR2P","layers":2,"dims":[2],
    "inducing":[6,4],"samples":3,"eval_samples":4,"epochs":3,"batch":50,"seed":7,
    "likelihood":"bernoulli_probit","inference_fn":"affine_mlp"}"#;

fn small_regression_csv(dir: &Path) -> String {
    let mut text = String::new();
    for i in 0..120 {
        let x = -2.0 + 4.0 * i as f64 / 119.0;
        let noise = 0.05 * ((i * 37 % 11) as f64 / 11.0 - 0.5);
        text.push_str(&format!("{x},{}\n", (3.0 * x).sin() + noise));
    }
    fs::write(dir.join("sine.csv"), text).unwrap();
    "sine.csv".into()
}

#[test]
fn gen_toy_is_deterministic_with_n_rows() {
    let dir = tempfile::tempdir().unwrap();
    ok(&avdgp(&["gen-toy", "--n", "1000", "--seed", "0", "--out", "a.csv"], dir.path()));
    ok(&avdgp(&["gen-toy", "--n", "1000", "--seed", "0", "--out", "b.csv"], dir.path()));
    let a = fs::read(dir.path().join("a.csv")).unwrap();
    assert_eq!(a, fs::read(dir.path().join("b.csv")).unwrap());
    let text = String::from_utf8(a).unwrap();
    assert_eq!(text.lines().count(), 1000);
    assert!(text.lines().all(|l| l.split(',').count() == 3));
}

#[test]
fn train_then_eval_reports_scores() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("cfg.json"), SMALL_TOY).unwrap();
    ok(&avdgp(&["train", "--config", "cfg.json", "--out-dir", "run", "--quiet", "--export-splits"], dir.path()));
    let run = dir.path().join("run");
    for f in ["model.ckpt", "model.best.ckpt", "epochs.csv", "test.json", "train.csv", "val.csv", "test.csv"] {
        assert!(run.join(f).exists(), "{f} missing");
    }
    let log = fs::read_to_string(run.join("epochs.csv")).unwrap();
    assert_eq!(log.lines().count(), 4);
    assert!(log.starts_with("epoch,steps,train_loss,val_nll,val_rmse,val_error_rate"));

    let out = avdgp(&["eval", "--checkpoint", "run/model.ckpt", "--data", "run/test.csv"], dir.path());
    ok(&out);
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    for key in ["nll", "rmse", "crps", "error_rate", "n_test"] {
        assert!(report.get(key).is_some(), "{key} missing in {report}");
    }
    let stored: serde_json::Value = serde_json::from_str(&fs::read_to_string(run.join("test.json")).unwrap()).unwrap();
    assert_eq!(report, stored);
}

#[test]
fn eval_matches_final_validation_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_regression_csv(dir.path());
    let cfg = format!(
        r#"{{"task":"regression","dataset":"{data}","rule":"AR2","layers":2,"dims":[2],"inducing":[5,3],
            "samples":3,"eval_samples":6,"epochs":2,"batch":40,"likelihood":"gaussian","inference_fn":"affine_mlp"}}"#
    );
    fs::write(dir.path().join("cfg.json"), cfg).unwrap();
    ok(&avdgp(&["train", "--config", "cfg.json", "--out-dir", "run", "--quiet", "--export-splits"], dir.path()));
    let log = fs::read_to_string(dir.path().join("run/epochs.csv")).unwrap();
    let last: Vec<&str> = log.lines().last().unwrap().split(',').collect();
    let (val_nll, val_rmse): (f64, f64) = (last[3].parse().unwrap(), last[4].parse().unwrap());
    for args in [
        vec!["eval", "--checkpoint", "run/model.ckpt", "--split", "val"],
        vec!["eval", "--checkpoint", "run/model.ckpt", "--data", "run/val.csv"],
    ] {
        let out = avdgp(&args, dir.path());
        ok(&out);
        let r: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
        assert!((r["nll"].as_f64().unwrap() - val_nll).abs() <= 1e-12);
        assert!((r["rmse"].as_f64().unwrap() - val_rmse).abs() <= 1e-12);
    }
}

#[test]
fn repeated_training_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("cfg.json"), SMALL_TOY).unwrap();
    for d in ["r1", "r2"] {
        ok(&avdgp(&["train", "--config", "cfg.json", "--out-dir", d, "--quiet"], dir.path()));
    }
    for f in ["model.ckpt", "model.best.ckpt", "epochs.csv", "test.json"] {
        let a = fs::read(dir.path().join("r1").join(f)).unwrap();
        assert_eq!(a, fs::read(dir.path().join("r2").join(f)).unwrap(), "{f} differs");
    }
}

#[test]
fn bad_config_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("bad.json"), SMALL_TOY.replace("\"seed\":7", "\"seed\":7,\"colour\":1")).unwrap();
    let out = avdgp(&["train", "--config", "bad.json", "--out-dir", "run"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("colour"));

    fs::write(dir.path().join("pp.json"), SMALL_TOY.replace("AR2P", "AR2PP")).unwrap();
    let out = avdgp(&["train", "--config", "pp.json", "--out-dir", "run"], dir.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn numeric_failure_exits_with_three() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("cfg.json"), SMALL_TOY.replace("\"seed\":7", "\"seed\":7,\"lr\":1e300")).unwrap();
    let out = avdgp(&["train", "--config", "cfg.json", "--out-dir", "run", "--quiet"], dir.path());
    assert_eq!(out.status.code(), Some(3), "stderr: {}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn missing_dataset_falls_back_to_data_dir() {
    let dir = tempfile::tempdir().unwrap();
    let data_dir = dir.path().join("datasets");
    fs::create_dir(&data_dir).unwrap();
    small_regression_csv(&data_dir);
    let cfg = r#"{"task":"regression","dataset":"sine.csv","rule":"AR2","layers":1,"inducing":[4],
        "samples":2,"epochs":1,"likelihood":"gaussian","inference_fn":"affine_mlp"}"#;
    fs::write(dir.path().join("cfg.json"), cfg).unwrap();
    let without = avdgp(&["train", "--config", "cfg.json", "--quiet"], dir.path());
    assert_eq!(without.status.code(), Some(1));
    let with = Command::new(env!("CARGO_BIN_EXE_avdgp"))
        .args(["train", "--config", "cfg.json", "--quiet"])
        .current_dir(dir.path())
        .env("AVDGP_DATA_DIR", &data_dir)
        .output()
        .unwrap();
    ok(&with);
}

#[test]
fn sample_prior_writes_paths_and_statistics() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = r#"{"grid_min":-3,"grid_max":3,"grid_points":50,"depth":3,"paths":2,"seeds":[0,1],
        "modes":["conventional","amortized"],"conventional_inducing":20,"amortized_inducing":4}"#;
    fs::write(dir.path().join("prior.json"), cfg).unwrap();
    let args = ["sample-prior", "--config", "prior.json", "--out", "paths.csv", "--stats", "stats.csv"];
    ok(&avdgp(&args, dir.path()));
    let paths = fs::read_to_string(dir.path().join("paths.csv")).unwrap();
    // 2 modes × 2 seeds × 3 depths × 2 paths × 50 points
    assert_eq!(paths.lines().count(), 1 + 2 * 2 * 3 * 2 * 50);
    let stats = fs::read_to_string(dir.path().join("stats.csv")).unwrap();
    assert_eq!(stats.lines().count(), 1 + 2 * 2 * 3);
    let first = fs::read(dir.path().join("paths.csv")).unwrap();
    ok(&avdgp(&args, dir.path()));
    assert_eq!(first, fs::read(dir.path().join("paths.csv")).unwrap());
}

#[test]
fn benchmark_fills_the_layer_by_inducing_grid() {
    let dir = tempfile::tempdir().unwrap();
    let args = [
        "benchmark",
        "--suite",
        "toy",
        "--M",
        "16,32,64,128",
        "--L",
        "1,2,3,4",
        "--seeds",
        "2",
        "--epochs",
        "1",
        "--n",
        "30",
        "--out",
        "table.csv",
    ];
    ok(&avdgp(&args, dir.path()));
    let table = fs::read_to_string(dir.path().join("table.csv")).unwrap();
    let rows: Vec<Vec<&str>> = table.lines().skip(1).map(|l| l.split(',').collect()).collect();
    let errors: Vec<&Vec<&str>> = rows.iter().filter(|r| r[4] == "error_rate").collect();
    assert_eq!(errors.len(), 16);
    let mut cells: Vec<(&str, &str)> = errors.iter().map(|r| (r[0], r[1])).collect();
    cells.dedup();
    assert_eq!(cells.len(), 16);
    assert!(errors.iter().all(|r| r[7] == "2" && r[9].ends_with("%)")));
    let l3 = errors.iter().find(|r| r[0] == "3" && r[1] == "64").unwrap();
    assert_eq!(l3[2], "32/16/16");
}

#[test]
fn cost_reports_ar1_multiplier() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("cfg.json"), SMALL_TOY.replace("AR2P", "AR1")).unwrap();
    let out = avdgp(&["cost", "--config", "cfg.json", "--json"], dir.path());
    ok(&out);
    let r: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let layers = r["layers"].as_array().unwrap();
    assert_eq!(layers[0]["multiplier"], 1);
    assert_eq!(layers[1]["multiplier"], 3);
    let text = avdgp(&["cost", "--config", "cfg.json"], dir.path());
    ok(&text);
    assert!(String::from_utf8_lossy(&text.stdout).contains("rule AR1"));
}

#[test]
fn shipped_configs_parse() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    for f in ["toy_3layer.json", "kin8nm_ar2p.json"] {
        let out = avdgp(&["cost", "--config", root.join(f).to_str().unwrap(), "--input-dim", "8"], &root);
        ok(&out);
    }
    let dir = tempfile::tempdir().unwrap();
    let prior = root.join("prior_demo.json");
    let out = avdgp(
        &[
            "sample-prior",
            "--config",
            prior.to_str().unwrap(),
            "--depth",
            "2",
            "--paths",
            "1",
            "--seeds",
            "0",
            "--out",
            "p.csv",
        ],
        dir.path(),
    );
    ok(&out);
}
