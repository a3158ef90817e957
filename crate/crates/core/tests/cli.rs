use std::path::Path;
use std::process::{Command, Output};

fn tdks(args: &[&str], config: Option<&Path>, out: &Path) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_tdks"));
    cmd.args(args).arg("--quiet").arg("--out").arg(out);
    if let Some(c) = config {
        cmd.arg("--config").arg(c);
    }
    cmd.output().expect("binary runs")
}

fn write(dir: &Path, name: &str, body: &str) -> std::path::PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, body).unwrap();
    p
}

#[test]
fn corrupt_config_exits_2_without_output() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "bad.json", "{ \"modes\": [8], ");
    let out = dir.path().join("out");
    let o = tdks(&["simulate"], Some(&cfg), &out);
    assert_eq!(o.status.code(), Some(2));
    assert!(!out.exists());
}

#[test]
fn positive_exchange_constant_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.json", r#"{ "potential": { "exchange_c": 1.0 } }"#);
    let out = dir.path().join("out");
    let o = tdks(&["simulate"], Some(&cfg), &out);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("potential.exchange_c"), "{err}");
    assert!(err.contains("negative constant"), "{err}");
    assert!(!out.exists());
}

#[test]
fn unknown_key_is_rejected_with_its_path() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "u.json", r#"{ "potential": { "hartre": false } }"#);
    let out = dir.path().join("out");
    let o = tdks(&["simulate"], Some(&cfg), &out);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("hartre"), "{err}");
}

const FREE: &str = r#"{
    "domain": { "lengths": [1.0], "grid_points": [32], "particles": 1, "horizon": 0.5, "steps": 100 },
    "modes": [8],
    "potential": { "hartree": false, "exchange": false, "correlation": false,
                   "v0": { "preset": "zero" }, "vu": { "preset": "zero" } },
    "control": { "preset": "zero" },
    "initial": INITIAL
}"#;

fn column(path: &Path, name: &str) -> Vec<f64> {
    let mut reader = csv::Reader::from_path(path).unwrap();
    let col = reader.headers().unwrap().iter().position(|h| h == name).unwrap();
    reader.records().map(|r| r.unwrap()[col].parse().unwrap()).collect()
}

fn failures(out: &Path) -> Vec<String> {
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("report.json")).unwrap()).unwrap();
    report["failures"].as_array().unwrap().iter().map(|v| v.as_str().unwrap().to_string()).collect()
}

#[test]
fn free_simulation_keeps_norm_column_constant() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "free.json", &FREE.replace("INITIAL", r#"{ "preset": "random", "norm": 1.5 }"#));
    let out = dir.path().join("out");
    let o = tdks(&["simulate"], Some(&cfg), &out);
    assert_ne!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));
    let l2 = column(&out.join("diagnostics.csv"), "l2");
    assert_eq!(l2.len(), 101);
    for v in &l2 {
        assert!((v - 1.5).abs() < 1e-12, "{v}");
    }
    let h1 = column(&out.join("diagnostics.csv"), "h1");
    assert!(h1.iter().all(|v| (v - h1[0]).abs() < 1e-9 * h1[0]));
    for f in ["trajectory.csv", "density.csv", "report.json"] {
        assert!(out.join(f).exists(), "{f}");
    }
    assert!(!failures(&out).iter().any(|f| f == "norm_drift" || f.starts_with("energy_l2")));
}

// The H1 sup and X bounds see only L2 data, while free evolution conserves
// the H1 norm. With every potential switched off their constants collapse,
// so the second sine mode (|Psi|_H1^2 = 1 + 4 pi^2) already exceeds them.
// The run has to report that and exit 1.
#[test]
fn single_free_mode_falsifies_h1_bounds() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "mode.json", &FREE.replace("INITIAL", r#"{ "preset": "modes", "offset": 1 }"#));
    let out = dir.path().join("out");
    let o = tdks(&["simulate"], Some(&cfg), &out);
    assert_eq!(o.status.code(), Some(1));
    let h1 = column(&out.join("diagnostics.csv"), "h1");
    let exact = (1.0 + 4.0 * std::f64::consts::PI.powi(2)).sqrt();
    assert!(h1.iter().all(|v| (v - exact).abs() < 1e-9 * exact), "{}", h1[0]);
    let mut failed = failures(&out);
    failed.sort();
    assert_eq!(failed, ["energy_h1_sup_forward", "energy_x_norm_forward"]);
}

#[test]
fn seed_flag_overrides_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "s.json",
        r#"{ "domain": { "lengths": [1.0], "grid_points": [32], "particles": 1, "horizon": 0.2, "steps": 20 },
             "modes": [4], "seed": 1 }"#,
    );
    let out = dir.path().join("out");
    let o = tdks(&["simulate", "--seed", "9"], Some(&cfg), &out);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["seed"], 9);
}
