use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use drinfer::sim::{gen_data, DgpConfig};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_drinfer"))
}

fn setting2_csv(dir: &Path, n: usize) -> PathBuf {
    let data = gen_data(&DgpConfig { setting: 2, n, seed: 11 }).unwrap();
    let p = dir.join("data.csv");
    data.write_csv(&p, "a", "y").unwrap();
    p
}

fn write_config(dir: &Path, name: &str, json: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, json).unwrap();
    p
}

fn run(args: &[&str]) -> (i32, String, String) {
    let out = bin().args(args).output().unwrap();
    (
        out.status.code().unwrap_or(-1),
        String::from_utf8_lossy(&out.stdout).into_owned(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn test_command_reports_fields_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let data = setting2_csv(dir.path(), 200);
    let cfg = write_config(
        dir.path(),
        "cfg.json",
        &format!(r#"{{"input": "{}", "seed": 5, "bootstrap_samples": 300}}"#, s(&data)),
    );
    let out1 = dir.path().join("r1.json");
    let out2 = dir.path().join("r2.json");
    for o in [&out1, &out2] {
        let (code, _, err) = run(&["test", "--config", s(&cfg), "--output", s(o)]);
        assert_eq!(code, 0, "{err}");
    }
    let a = fs::read(&out1).unwrap();
    assert_eq!(a, fs::read(&out2).unwrap());
    let v: serde_json::Value = serde_json::from_slice(&a).unwrap();
    assert_eq!(v["seed"], 5);
    assert_eq!(v["config_hash"].as_str().unwrap().len(), 64);
    for key in ["psi_stat", "p_value", "kappa", "estimator", "seed"] {
        assert!(!v["result"][key].is_null(), "missing {key}");
    }
}

#[test]
fn missing_exposure_column_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let data = setting2_csv(dir.path(), 50);
    let cfg = write_config(
        dir.path(),
        "cfg.json",
        &format!(r#"{{"input": "{}", "seed": 1, "exposure": "dose"}}"#, s(&data)),
    );
    let (code, _, err) = run(&["test", "--config", s(&cfg)]);
    assert_eq!(code, 2);
    assert!(err.contains("dose"), "{err}");
}

#[test]
fn missing_seed_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let data = setting2_csv(dir.path(), 50);
    let cfg = write_config(dir.path(), "cfg.json", &format!(r#"{{"input": "{}"}}"#, s(&data)));
    let (code, _, err) = run(&["test", "--config", s(&cfg)]);
    assert_eq!(code, 2);
    assert!(err.contains("seed"));
    let (code, _, _) = run(&["test", "--config", s(&cfg), "--seed", "3", "--bootstrap-samples", "100", "--kappa", "3000"]);
    assert_eq!(code, 0);
}

#[test]
fn unknown_config_field_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "cfg.json", r#"{"seed": 1, "aplha": 0.1}"#);
    let (code, _, _) = run(&["test", "--config", s(&cfg)]);
    assert_eq!(code, 2);
}

fn read_band_csv(p: &Path) -> Vec<(f64, f64, f64)> {
    let text = fs::read_to_string(p).unwrap();
    let mut lines = text.lines().filter(|l| !l.starts_with('#'));
    assert_eq!(lines.next().unwrap(), "a,lower,upper");
    lines
        .map(|l| {
            let f: Vec<f64> = l.split(',').map(|x| x.parse().unwrap()).collect();
            (f[0], f[1], f[2])
        })
        .collect()
}

#[test]
fn bands_grid_alpha_and_nu() {
    let dir = tempfile::tempdir().unwrap();
    let data = setting2_csv(dir.path(), 200);
    let cfg = write_config(
        dir.path(),
        "cfg.json",
        &format!(r#"{{"input": "{}", "seed": 2, "bootstrap_samples": 400, "grid_size": 3}}"#, s(&data)),
    );
    let small = dir.path().join("b3.csv");
    let (code, _, err) = run(&["bands", "--config", s(&cfg), "--output", s(&small)]);
    assert_eq!(code, 0, "{err}");
    assert_eq!(read_band_csv(&small).len(), 3);
    let first = fs::read_to_string(&small).unwrap();
    assert!(first.starts_with("# config_hash="));
    assert!(small.with_extension("json").exists());

    let wide = dir.path().join("a05.csv");
    let narrow = dir.path().join("a50.csv");
    for (o, a) in [(&wide, "0.05"), (&narrow, "0.5")] {
        let (code, _, err) = run(&["bands", "--config", s(&cfg), "--grid-size", "21", "--alpha", a, "--output", s(o)]);
        assert_eq!(code, 0, "{err}");
    }
    for (w, n) in read_band_csv(&wide).iter().zip(read_band_csv(&narrow)) {
        assert!(n.2 - n.1 <= w.2 - w.1 + 1e-9);
    }

    let (code, _, err) = run(&["bands", "--config", s(&cfg), "--nu", "0", "--output", s(&small)]);
    assert_eq!(code, 2);
    assert!(err.contains("increase nu"), "{err}");
}

#[test]
fn simulate_small_and_bad_setting() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "cfg.json",
        r#"{"seed": 9, "bootstrap_samples": 200,
            "simulate": {"setting": 1, "n_list": [100], "reps": 2, "oracle_draws": 2000}}"#,
    );
    let out = dir.path().join("sim");
    let (code, _, err) = run(&["simulate", "--config", s(&cfg), "--output", s(&out), "--threads", "1"]);
    assert_eq!(code, 0, "{err}");
    let v: serde_json::Value = serde_json::from_slice(&fs::read(out.join("report.json")).unwrap()).unwrap();
    let records = v["result"]["records"].as_array().unwrap();
    for m in ["one_step_oracle", "one_step_adaptive", "tml_oracle", "tml_adaptive", "primitive"] {
        let k = records
            .iter()
            .filter(|r| r["method"] == m && r["p_value"].is_number())
            .count();
        assert_eq!(k, 2, "{m}");
    }
    assert!(out.join("pvalues.csv").exists());

    let bad = write_config(dir.path(), "bad.json", r#"{"seed": 1, "simulate": {"setting": 3}}"#);
    let (code, _, _) = run(&["simulate", "--config", s(&bad), "--output", s(&out)]);
    assert_eq!(code, 2);
}
