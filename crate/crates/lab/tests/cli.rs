use std::path::Path;
use std::process::Command;

fn lab(args: &[&str]) -> (i32, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_sdmd-lab"))
        .args(args)
        .output()
        .expect("binary runs");
    (out.status.code().unwrap_or(-1), String::from_utf8_lossy(&out.stderr).into_owned())
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p.display().to_string()
}

#[test]
fn spectrum_succeeds_and_writes_a_report() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "ou.json", r#"{"experiment": "ou"}"#);
    let out = tmp.path().join("run");
    let (code, err) = lab(&["spectrum", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(code, 0, "{err}");
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["command"], "spectrum");
    assert_eq!(report["input_hashes"].as_object().unwrap().len(), 1);
    assert!(out.join("sdmd_eigenvalues.csv").exists());
    assert!(out.join("config.resolved.json").exists());
}

#[test]
fn unknown_keys_are_config_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "bad.json", r#"{"experiment": "ou", "delta_tt": 0.1}"#);
    let (code, err) = lab(&["spectrum", "--config", &cfg, "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(code, 4, "{err}");
    assert!(err.contains("delta_tt"), "{err}");
}

#[test]
fn invalid_values_are_config_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "bad.json", r#"{"experiment": "ou", "delta_t": -0.1}"#);
    let (code, _) = lab(&["spectrum", "--config", &cfg, "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(code, 4);
}

#[test]
fn missing_config_is_an_io_error() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("none.json");
    let (code, _) = lab(&["spectrum", "--config", missing.to_str().unwrap()]);
    assert_eq!(code, 1);
}

#[test]
fn failed_invariants_exit_with_two_and_still_report() {
    // With 21 angular modes on 19 distinct grid angles the dictionary aliases,
    // so the constant is no longer an exact eigenfunction.
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(
        tmp.path(),
        "sl.json",
        r#"{"experiment": "stuart-landau",
            "dictionary": {"angular_modes": 10, "radial_modes": 3, "r_min": 0.4, "r_max": 0.8}}"#,
    );
    let out = tmp.path().join("run");
    let (code, err) = lab(&["spectrum", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(code, 2, "{err}");
    assert!(err.contains("constant eigenpair"), "{err}");
    assert!(out.join("report.json").exists());
}

#[test]
fn simulate_is_byte_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(
        tmp.path(),
        "sim.json",
        r#"{"experiment": "ou", "sampler": {"kind": "uniform-random", "domain": [[-2.0, 2.0]], "m": 500}}"#,
    );
    let run = |name: &str, seed: &str| {
        let out = tmp.path().join(name);
        let (code, err) = lab(&["simulate", "--config", &cfg, "--out", out.to_str().unwrap(), "--seed", seed]);
        assert_eq!(code, 0, "{err}");
        (
            std::fs::read(out.join("ensemble_x.csv")).unwrap(),
            std::fs::read(out.join("ensemble_y.csv")).unwrap(),
        )
    };
    let a = run("a", "7");
    assert_eq!(a, run("b", "7"));
    assert_ne!(a.1, run("c", "8").1);
}
