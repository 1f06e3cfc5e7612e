use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const TINY: &str = r#"
system = "dubins"
seed = 4
[network]
hidden_layers = [8]
[data]
n_safe = 64
n_unsafe = 64
n_domain = 128
[training]
epochs_phase0 = 2
epochs_refine = 1
max_refinements = 1
[conformal]
n_samples = 500
alpha = 0.05
[simulation]
n_rollouts = 4
horizon_steps = 20
[levelset]
resolution = 2
fixed_values = [0.5]
"#;

fn ncbf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ncbf"))
        .args(args)
        .env_remove("NCBF_OUT_DIR")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let path = dir.join("run.toml");
    fs::write(&path, text).unwrap();
    path
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn schema_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../docs/schemas")
}

fn assert_schema(doc: &Path, schema: &str) {
    let schema = read_json(&schema_dir().join(schema));
    let validator = jsonschema::validator_for(&schema).unwrap();
    let value = read_json(doc);
    let errors: Vec<String> = validator.iter_errors(&value).map(|e| format!("{} at {}", e, e.instance_path)).collect();
    assert!(errors.is_empty(), "{}: {errors:?}", doc.display());
}

/// A trained tiny Dubins run shared by the downstream command tests.
fn trained(tmp: &Path) -> (PathBuf, PathBuf) {
    let config = write_config(tmp, TINY);
    let out = tmp.join("train");
    let res = ncbf(&["train", "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(matches!(code(&res), 0 | 2), "{}", stderr(&res));
    (config, out.join("certificate.json"))
}

#[test]
fn train_writes_valid_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let (_, cert) = trained(tmp.path());
    let dir = cert.parent().unwrap();
    assert_schema(&dir.join("certificate.json"), "certificate.schema.json");
    assert_schema(&dir.join("history.json"), "history.schema.json");
    assert_schema(&dir.join("report.json"), "report.schema.json");
    assert_schema(&dir.join("run_config.json"), "run_config.schema.json");
    assert_schema(&dir.join("checkpoints/phase_0.json"), "certificate.schema.json");
    let loss = fs::read_to_string(dir.join("loss.csv")).unwrap();
    assert!(loss.starts_with("phase,epoch,psi,l1,l2,l3,total,best"));

    let history = read_json(&dir.join("history.json"));
    let status = fs::read_to_string(dir.join("STATUS")).unwrap();
    assert_eq!(status.trim(), history["status"].as_str().unwrap());
    assert_eq!(read_json(&dir.join("run_config.json"))["training"]["batch_size"], 256);
}

#[test]
fn exit_code_tracks_certification() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), TINY);
    let out = tmp.path().join("o");
    let res = ncbf(&["train", "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    let certified = read_json(&out.join("report.json"))["quantile"].as_f64().unwrap() <= 0.0;
    assert_eq!(code(&res), if certified { 0 } else { 2 });
}

#[test]
fn invalid_quantile_index_fails_before_writing() {
    let tmp = tempfile::tempdir().unwrap();
    let text = TINY.replace("n_samples = 500\nalpha = 0.05", "n_samples = 100\nalpha = 0.001");
    let config = write_config(tmp.path(), &text);
    let out = tmp.path().join("never");
    let res = ncbf(&["train", "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(code(&res), 1);
    let msg = stderr(&res);
    assert!(msg.contains("conformal.alpha") && msg.contains("N = 100"), "{msg}");
    assert!(!out.exists());
}

#[test]
fn unknown_keys_and_missing_files_exit_one() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), &format!("{TINY}\n[extra]\nx = 1\n"));
    assert_eq!(code(&ncbf(&["train", "--config", config.to_str().unwrap()])), 1);
    assert_eq!(code(&ncbf(&["train", "--config", "/nonexistent/run.toml"])), 1);
    assert_eq!(code(&ncbf(&["frobnicate"])), 1);

    let good = write_config(tmp.path(), TINY);
    let res = ncbf(&[
        "verify",
        "--config",
        good.to_str().unwrap(),
        "--cert",
        "/nonexistent/certificate.json",
        "--out",
        tmp.path().join("v").to_str().unwrap(),
    ]);
    assert_eq!(code(&res), 1);
    assert!(stderr(&res).contains("certificate"));
    assert!(!tmp.path().join("v").exists());
}

#[test]
fn identical_runs_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), TINY);
    let mut certs = Vec::new();
    for name in ["a", "b"] {
        let out = tmp.path().join(name);
        ncbf(&["train", "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()]);
        certs.push(fs::read(out.join("certificate.json")).unwrap());
    }
    assert_eq!(certs[0], certs[1]);
}

#[test]
fn seed_flag_overrides_config() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), TINY);
    let out = tmp.path().join("s");
    ncbf(&["train", "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap(), "--seed", "99"]);
    assert_eq!(read_json(&out.join("run_config.json"))["seed"], 99);
}

#[test]
fn output_root_from_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), TINY);
    let root = tmp.path().join("root");
    let res = Command::new(env!("CARGO_BIN_EXE_ncbf"))
        .args(["train", "--config", config.to_str().unwrap()])
        .env("NCBF_OUT_DIR", &root)
        .output()
        .unwrap();
    assert!(matches!(code(&res), 0 | 2));
    assert!(root.join("dubins/train/certificate.json").is_file());
}

#[test]
fn verify_constant_positive_certificate_is_not_certified() {
    let tmp = tempfile::tempdir().unwrap();
    // α = 0.005 is below the unsafe-box measure 0.16 / 16 = 0.01.
    let text = TINY.replace("n_samples = 500\nalpha = 0.05", "n_samples = 20000\nalpha = 0.005");
    let config = write_config(tmp.path(), &text);
    // h ≡ 1: unsafe samples score q2 = 1 + δ, every other sample scores −1.
    let cert = tmp.path().join("const.json");
    fs::write(
        &cert,
        r#"{"layer_sizes":[3,1],"weights":[[[0.0,0.0,0.0]]],"biases":[[1.0]],"format_version":1}"#,
    )
    .unwrap();
    let out = tmp.path().join("v");
    let res = ncbf(&[
        "verify",
        "--config",
        config.to_str().unwrap(),
        "--cert",
        cert.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&res), 0, "{}", stderr(&res));
    assert_schema(&out.join("report.json"), "report.schema.json");
    let report = read_json(&out.join("report.json"));
    let summary = &report["score_summary"];
    assert_eq!(summary["max"].as_f64().unwrap(), 1.0 + 0.01);
    assert_eq!(summary["min"].as_f64().unwrap(), -1.0);
    // The k-th smallest score is positive iff at least l = N + 1 − k scores are.
    let positive = summary["n_positive"].as_u64().unwrap();
    let l = report["index_l"].as_u64().unwrap();
    assert!(positive >= l, "{positive} < {l}");
    assert_eq!(report["quantile"].as_f64().unwrap(), 1.0 + 0.01);
    assert_eq!(fs::read_to_string(out.join("STATUS")).unwrap().trim(), "not_certified");

    let again: Value = serde_json::from_str(&serde_json::to_string(&report).unwrap()).unwrap();
    assert_eq!(again, report);
}

#[test]
fn simulate_counts_match_status_lines() {
    let tmp = tempfile::tempdir().unwrap();
    let (config, cert) = trained(tmp.path());
    let out = tmp.path().join("sim");
    let res = ncbf(&[
        "simulate",
        "--config",
        config.to_str().unwrap(),
        "--cert",
        cert.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&res), 0, "{}", stderr(&res));
    assert_schema(&out.join("summary.json"), "summary.schema.json");
    let summary = read_json(&out.join("summary.json"));
    let rate = summary["rate"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&rate));

    let mut reader = csv::Reader::from_path(out.join("rollouts.csv")).unwrap();
    let safe: Vec<bool> = reader.records().map(|r| r.unwrap()[2].parse().unwrap()).collect();
    assert_eq!(safe.len(), 4);
    let recount = safe.iter().filter(|&&s| s).count() as f64 / safe.len() as f64;
    assert_eq!(rate, recount);
    assert!(out.join("trajectory_0.csv").is_file());
    assert!(!out.join("trajectory_1.csv").exists());
}

#[test]
fn levelset_grid_and_sidecar() {
    let tmp = tempfile::tempdir().unwrap();
    let (config, cert) = trained(tmp.path());
    let out = tmp.path().join("ls");
    let res = ncbf(&[
        "levelset",
        "--config",
        config.to_str().unwrap(),
        "--cert",
        cert.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&res), 0, "{}", stderr(&res));
    assert_schema(&out.join("levelset.json"), "levelset.schema.json");
    let sidecar = read_json(&out.join("levelset.json"));
    assert_eq!(sidecar["fixed_values"], serde_json::json!([0.5]));

    let text = fs::read_to_string(out.join("levelset.csv")).unwrap();
    let rows: Vec<Vec<f64>> =
        text.lines().skip(1).map(|l| l.split(',').map(|v| v.parse().unwrap()).collect()).collect();
    assert_eq!(rows.len(), 2);
    assert!(rows.iter().all(|r| r.len() == 3));
    // Corner (x0, x1) = (−2, −2) at φ = 0.5, evaluated directly from the JSON weights.
    let doc = read_json(&cert);
    let x = [-2.0, -2.0, 0.5];
    let mut a: Vec<f64> = x.to_vec();
    let layers = doc["weights"].as_array().unwrap();
    for (l, w) in layers.iter().enumerate() {
        let b = doc["biases"][l].as_array().unwrap();
        let z: Vec<f64> = w
            .as_array()
            .unwrap()
            .iter()
            .zip(b)
            .map(|(row, bi)| {
                row.as_array().unwrap().iter().zip(&a).map(|(wij, aj)| wij.as_f64().unwrap() * aj).sum::<f64>()
                    + bi.as_f64().unwrap()
            })
            .collect();
        a = if l + 1 < layers.len() { z.iter().map(|v| v.exp().ln_1p()).collect() } else { z };
    }
    assert!((rows[0][1] - a[0]).abs() < 1e-12, "{} vs {}", rows[0][1], a[0]);
}

#[test]
fn curve_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("c");
    let res = ncbf(&[
        "curve", "--n", "500,100000", "--beta", "0.001", "--alpha-min", "0.01", "--alpha-max", "0.1", "--alpha-steps",
        "10", "--out", out.to_str().unwrap(),
    ]);
    assert_eq!(code(&res), 0, "{}", stderr(&res));
    let mut reader = csv::Reader::from_path(out.join("curve.csv")).unwrap();
    let rows: Vec<(usize, f64, f64)> = reader
        .records()
        .map(|r| {
            let r = r.unwrap();
            (r[0].parse().unwrap(), r[2].parse().unwrap(), r[3].parse().unwrap())
        })
        .collect();
    assert_eq!(rows.len(), 20);
    for i in 0..10 {
        let (small, large) = (rows[i], rows[i + 10]);
        assert_eq!((small.0, large.0), (500, 100_000));
        assert!(large.2 - large.1 < small.2 - small.1);
        assert!(large.2 >= large.1);
    }

    let empty = tmp.path().join("e");
    ncbf(&["curve", "--n", "1000", "--alpha-steps", "0", "--out", empty.to_str().unwrap()]);
    assert_eq!(fs::read_to_string(empty.join("curve.csv")).unwrap(), "n_samples,beta,alpha,epsilon,error\n");

    let bad = ncbf(&["curve", "--n", "1000", "--beta", "0", "--out", tmp.path().join("b").to_str().unwrap()]);
    assert_eq!(code(&bad), 1);
    assert!(!tmp.path().join("b").exists());
}

#[test]
fn curve_records_invalid_points() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("c");
    ncbf(&["curve", "--n", "100", "--alpha-min", "0.001", "--alpha-max", "0.05", "--alpha-steps", "2", "--out", out.to_str().unwrap()]);
    let text = fs::read_to_string(out.join("curve.csv")).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 3);
    assert!(lines[1].contains("insufficient samples"));
    assert!(lines[2].split(',').nth(3).unwrap().parse::<f64>().is_ok());
}

#[test]
fn schemas_reject_malformed_documents() {
    let schema = read_json(&schema_dir().join("report.schema.json"));
    let validator = jsonschema::validator_for(&schema).unwrap();
    let good = serde_json::json!({
        "n_samples": 10, "alpha": 0.1, "index_l": 1, "rank_k": 10, "quantile": -0.5, "epsilon": 0.4,
        "beta": 0.01, "seed": 3, "score_summary": {"min": -1.0, "max": 0.0, "mean": -0.5, "n_positive": 0}
    });
    assert!(validator.is_valid(&good));
    let mut missing = good.clone();
    missing.as_object_mut().unwrap().remove("epsilon");
    assert!(!validator.is_valid(&missing));
    let mut extra = good;
    extra["note"] = serde_json::json!("x");
    assert!(!validator.is_valid(&extra));
}

#[test]
fn shipped_configs_validate() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let registry = ncbf_core::dynamics::SystemRegistry::with_builtins();
    let mut seen = 0;
    for entry in fs::read_dir(&dir).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "toml") {
            let config = ncbf_core::config::RunConfig::load(&path).unwrap();
            config.validate(&registry).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            seen += 1;
        }
    }
    assert_eq!(seen, 3);
}
