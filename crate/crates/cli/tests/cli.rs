use std::path::Path;
use std::process::{Command, Output};

fn rlls(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rlls")).args(args).output().unwrap()
}

fn write_config(dir: &Path, body: &str) -> String {
    let path = dir.join("exp.json");
    std::fs::write(&path, body).unwrap();
    path.to_str().unwrap().to_string()
}

const RVFS_CONFIG: &str = r#"{
    "seed": 1,
    "instance": {"kind": "twochain"},
    "algorithm": "rvfs_bc",
    "eps": 0.25,
    "delta": 0.1,
    "scale": {"n_sim": 32, "n_test": 16, "n_reg": 16, "n_est": 8, "n_bc": 20}
}"#;

#[test]
fn oracle_defaults_to_twochain() {
    let out = rlls(&["oracle"]);
    assert!(out.status.success());
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["j_star"], 1.0);
    assert_eq!(v["c_cov"], 4.0);

    let out = rlls(&["oracle", "--format", "csv"]);
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text.lines().next(), Some("layer,states,c_cov,c_push"));
    assert_eq!(text.lines().count(), 3);
}

#[test]
fn gen_then_oracle_on_flattened() {
    let dir = tempfile::tempdir().unwrap();
    let targets = dir.path().join("targets.json");
    std::fs::write(&targets, r#"{"num_latent": 2, "num_exo": 2, "num_actions": 2, "horizon": 2, "lambda": 0.3}"#).unwrap();
    let bundle = dir.path().join("bundle.json");
    let out = rlls(&["gen", "--config", targets.to_str().unwrap(), "--seed", "5", "--out", bundle.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&bundle).unwrap()).unwrap();
    let flat = dir.path().join("flat.json");
    std::fs::write(&flat, serde_json::to_string(&v["flattened"]).unwrap()).unwrap();
    let out = rlls(&["oracle", "--config", flat.to_str().unwrap()]);
    assert!(out.status.success());
    let s: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(s["horizon"], 2);
}

#[test]
fn run_writes_csv_and_json() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), RVFS_CONFIG);
    let csv = dir.path().join("m.csv");
    let out = rlls(&["run", "--config", &cfg, "--seed", "3", "--scale", "0.01", "--out", csv.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(&csv).unwrap();
    assert!(text.starts_with("step,event,layer,size,metric_a,metric_b,transitions"));
    assert!(String::from_utf8_lossy(&out.stderr).contains("seed=3"));

    let json = dir.path().join("m.json");
    let out = rlls(&["run", "--config", &cfg, "--format", "json", "--out", json.to_str().unwrap()]);
    assert!(out.status.success());
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&json).unwrap()).unwrap();
    assert_eq!(v["algorithm"], "rvfs_bc");
    assert_eq!(v["j_star"], 1.0);
}

#[test]
fn sweep_reports_every_combination() {
    let dir = tempfile::tempdir().unwrap();
    let body = RVFS_CONFIG.replace("\"seed\": 1,", "\"seed\": 1, \"seeds\": [0, 1, 2], \"sweep_eps\": [0.5, 0.25],");
    let cfg = write_config(dir.path(), &body);
    let out = rlls(&["sweep", "--config", &cfg, "--scale", "0.01"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text.lines().count(), 7);
    assert_eq!(String::from_utf8_lossy(&out.stderr).matches("median_subopt").count(), 2);
}

#[test]
fn bad_inputs_fail() {
    assert!(!rlls(&["run"]).status.success());
    assert!(!rlls(&["run", "--format", "xml"]).status.success());
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &RVFS_CONFIG.replace("0.25", "1.5"));
    assert!(!rlls(&["run", "--config", &cfg]).status.success());
}
