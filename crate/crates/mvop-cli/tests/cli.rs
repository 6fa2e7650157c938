use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn mvop(args: &[&str], config: &Path, out: &Path) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_mvop"));
    cmd.args(&args[..1]).arg("--config").arg(config).arg("--out").arg(out).args(&args[1..]);
    cmd.output().unwrap()
}

fn config(dir: &Path, text: &str) -> PathBuf {
    let p = dir.join("run.toml");
    std::fs::write(&p, text).unwrap();
    p
}

const SMALL_2D: &str = "levels = 4\nseed = 3\n\n[measure]\ndim = 2\n";

#[test]
fn compute_writes_legendre_norms() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "levels = 4\n\n[measure]\ndim = 1\n\n[flow]\nq = [-2.5]\ntimes = []\n");
    let out = dir.path().join("out");
    let o = mvop(&["compute"], &cfg, &out);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["h.dump", "beta.dump", "s.dump", "jacobi_0.dump", "index.json"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let dump = std::fs::read_to_string(out.join("h.dump")).unwrap();
    let values: Vec<f64> = dump.lines().filter(|l| !l.starts_with(['D', 'L', 'b'])).map(|l| l.parse().unwrap()).collect();
    let expected = [2.0, 2.0 / 3.0, 8.0 / 45.0, 8.0 / 175.0];
    assert_eq!(values.len(), 4);
    for (v, e) in values.iter().zip(&expected) {
        assert!((v - e).abs() < 1e-13, "{v} vs {e}");
    }
    let index: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("index.json")).unwrap()).unwrap();
    assert_eq!(index["schema_version"], 1);
    assert_eq!(index["levels"], 4);
}

#[test]
fn verify_report_shape_and_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), SMALL_2D);
    let out = dir.path().join("ok");
    let o = mvop(&["verify", "--suite", "orthogonality,quasidet,toda"], &cfg, &out);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stdout));
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["schema_version"], 1);
    let rows = report["rows"].as_array().unwrap();
    assert!(!rows.is_empty());
    for r in rows {
        for key in ["suite", "identity", "paper_anchor", "levels", "residual", "tolerance", "pass", "millis"] {
            assert!(r.get(key).is_some(), "missing {key}");
        }
        assert!(r["millis"].is_null());
    }

    let strict = mvop(&["verify", "--suite", "toda,kp,miwa", "--tolerance-scale", "1e-3"], &cfg, &dir.path().join("strict"));
    assert_eq!(strict.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&strict.stdout).contains("FAIL"));

    let timed = mvop(&["verify", "--suite", "orthogonality", "--timing"], &cfg, &dir.path().join("timed"));
    assert_eq!(timed.status.code(), Some(0));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("timed/report.json")).unwrap()).unwrap();
    assert!(report["rows"][0]["millis"].is_number());
}

#[test]
fn zero_offset_is_a_config_error_with_location() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "levels = 4\n[measure]\ndim = 2\n[flow]\nq = [-2.5, 0.0]\n");
    let o = mvop(&["verify"], &cfg, &dir.path().join("out"));
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("run.toml:5") && err.contains("flow.q"), "{err}");
}

#[test]
fn usage_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), SMALL_2D);
    let out = dir.path().join("out");
    assert_eq!(mvop(&["convergence", "--steps"], &cfg, &out).status.code(), Some(2));
    assert_eq!(mvop(&["verify", "--suite", "nope"], &cfg, &out).status.code(), Some(2));
    let bad = config(dir.path(), "levels = 4\nlevls = 3\n");
    assert_eq!(mvop(&["compute"], &bad, &out).status.code(), Some(2));
}

#[test]
fn convergence_writes_csv() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), SMALL_2D);
    let out = dir.path().join("conv");
    let o = mvop(&["convergence", "--suite", "lax", "--steps", "4e-3,2e-3"], &cfg, &out);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(out.join("convergence.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("suite,identity,h,residual"));
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert!(rows.len() >= 4);
    for r in &rows {
        assert_eq!(r[0], "lax");
        assert!(r[3].parse::<f64>().unwrap() >= 0.0);
    }
}
