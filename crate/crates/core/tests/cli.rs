use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_affine-fence"));
    c.env_remove("AFFINE_FENCE_SEED");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn read(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn write(path: &Path, v: &Value) {
    std::fs::write(path, serde_json::to_string_pretty(v).unwrap()).unwrap();
}

/// Sin preset shrunk to a couple of seconds.
fn small_sin(tolerance: f64) -> Value {
    let out = run(&["preset", "sin"]);
    assert_eq!(code(&out), 0);
    let mut v: Value = serde_json::from_slice(&out.stdout).unwrap();
    v["dataset"]["n"] = 200.into();
    v["architecture"]["hidden"] = serde_json::json!([16, 16]);
    v["certify_samples"] = 500.into();
    let t = &mut v["train"];
    t["learning_rate"] = 3e-3.into();
    t["batch_size"] = 32.into();
    t["pretrain_epochs"] = 1600.into();
    t["min_epochs"] = 5.into();
    t["max_epochs"] = 150.into();
    t["patience_threshold"] = 3.into();
    t["violation_tolerance"] = tolerance.into();
    v
}

#[test]
fn every_preset_prints_valid_json() {
    for name in ["sin", "spiral", "saddle", "bench"] {
        let out = run(&["preset", name]);
        assert_eq!(code(&out), 0, "{name}");
        let v: Value = serde_json::from_slice(&out.stdout).unwrap();
        assert!(v["regions"].is_array(), "{name}");
    }
}

#[test]
fn train_end_to_end_then_enforce_and_verify() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("sin.json");
    write(&cfg, &small_sin(0.3));
    let art = dir.path().join("run");
    let out = bin().args(["train", "--config"]).arg(&cfg).arg("--output").arg(&art).output().unwrap();
    assert_eq!(code(&out), 0, "{}\n{}", String::from_utf8_lossy(&out.stdout), stderr(&out));
    for f in ["model.json", "baseline_model.json", "report.json", "curves.csv", "predictions.csv"] {
        assert!(art.join(f).is_file(), "{f} missing");
    }
    let curves = std::fs::read_to_string(art.join("curves.csv")).unwrap();
    assert_eq!(curves.lines().next().unwrap(), "epoch,task_loss,V,lambda,L_balanced");
    assert_eq!(read(&art.join("report.json"))["passed"], Value::Bool(true));

    // Re-enforcing the trained model changes nothing.
    let model = art.join("model.json");
    let again = dir.path().join("again.json");
    let out = bin().arg("enforce").arg("--model").arg(&model).arg("--output").arg(&again).output().unwrap();
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let rep = read(&dir.path().join("again.json.report.json"));
    assert!(rep["total_shift"].as_f64().unwrap() <= 1e-9);
    assert!(rep["min_margin"].as_f64().unwrap() >= -1e-8);

    let out = bin().arg("verify").arg("--model").arg(&again).args(["--samples", "500"]).output().unwrap();
    assert_eq!(code(&out), 0, "{}", stderr(&out));

    // Negating the first layer flips every first-layer sign.
    let mut m = read(&again);
    for row in m["layers"][0]["weights"].as_array_mut().unwrap() {
        for w in row.as_array_mut().unwrap() {
            *w = (-w.as_f64().unwrap()).into();
        }
    }
    for b in m["layers"][0]["biases"].as_array_mut().unwrap() {
        *b = (-b.as_f64().unwrap()).into();
    }
    let tampered = dir.path().join("tampered.json");
    write(&tampered, &m);
    let out = bin().arg("verify").arg("--model").arg(&tampered).args(["--samples", "500"]).output().unwrap();
    assert_eq!(code(&out), 1);

    let out = bin().arg("enforce").arg("--model").arg(&model).args(["--margin", "-1", "--output"]).arg(&again).output().unwrap();
    assert_eq!(code(&out), 2);
}

#[test]
fn unreachable_tolerance_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("sin.json");
    let mut v = small_sin(1e-300);
    v["train"]["lambda_max"] = 2.0.into();
    write(&cfg, &v);
    let art = dir.path().join("run");
    let out = bin().args(["train", "--config"]).arg(&cfg).arg("--output").arg(&art).output().unwrap();
    assert_eq!(code(&out), 1, "{}", stderr(&out));
    let rep = read(&art.join("report.json"));
    assert_eq!(rep["train"]["stop_reason"], "patience_exhausted");
}

#[test]
fn config_errors_exit_two_and_name_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let mut v = small_sin(0.3);
    v.as_object_mut().unwrap().remove("regions");
    let cfg = dir.path().join("noregions.json");
    write(&cfg, &v);
    let out = bin().args(["train", "--config"]).arg(&cfg).output().unwrap();
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("regions"), "{}", stderr(&out));

    let mut v = small_sin(0.3);
    v["train"]["batch_size"] = "many".into();
    let cfg = dir.path().join("badtype.json");
    write(&cfg, &v);
    let out = bin().args(["train", "--config"]).arg(&cfg).output().unwrap();
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("train.batch_size"), "{}", stderr(&out));

    let out = bin().args(["train", "--config"]).arg(dir.path().join("absent.json")).output().unwrap();
    assert_eq!(code(&out), 2);
}

#[test]
fn usage_errors_exit_two() {
    assert_eq!(code(&run(&["frobnicate"])), 2);
    assert_eq!(code(&run(&["bench", "--widths", "wide"])), 2);
    assert_eq!(code(&run(&["--jobs", "0", "demo", "bias-only"])), 2);
    assert_eq!(code(&bin().env("AFFINE_FENCE_SEED", "abc").args(["demo", "bias-only"]).output().unwrap()), 2);
    assert_eq!(code(&run(&["train"])), 2);
}

#[test]
fn single_cell_bench_writes_one_row() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin()
        .args(["bench", "--widths", "8", "--depths", "1", "--regions", "2", "--input-dim", "2", "--output"])
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let csv = std::fs::read_to_string(dir.path().join("bench.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "N_Regions,Total_Vertices,Net_Width,Num_Hidden_L,T_Assign_s,T_Enforce_s");
    assert_eq!(lines.len(), 2);
    assert!(lines[1].starts_with("2,8,8,1,"));
}

#[test]
fn demos_pass() {
    let out = run(&["demo", "bias-only"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("infeasible"), "{text}");
    let out = run(&["--seed", "3", "demo", "hull", "--samples", "500"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
}
