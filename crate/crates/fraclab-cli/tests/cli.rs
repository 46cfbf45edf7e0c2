//! End-to-end command-line checks: exit codes, diagnostics, manifest
//! determinism and file round-trips.

use std::path::Path;
use std::process::Command;

fn fraclab() -> Command {
    Command::new(env!("CARGO_BIN_EXE_fraclab"))
}

fn config_dir() -> &'static Path {
    Path::new(concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs"))
}

#[test]
fn forward_run_writes_loadable_outputs() {
    let out = tempfile::tempdir().unwrap();
    let status = fraclab()
        .args(["--config"])
        .arg(config_dir().join("exterior_p2.cfg"))
        .args(["--out"])
        .arg(out.path())
        .arg("forward")
        .status()
        .unwrap();
    assert!(status.success());
    // every emitted file round-trips through the loaders
    let solution = fraclab_core::io::read_field(&out.path().join("solution.bin")).unwrap();
    assert_eq!(solution.grid().points_per_axis(), 32);
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.path().join("manifest.json")).unwrap())
            .unwrap();
    assert_eq!(manifest["config"]["problem"]["p"], 2.0);
    let result: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.path().join("result.json")).unwrap())
            .unwrap();
    assert_eq!(result["converged"], true);
}

#[test]
fn manifests_are_bit_identical_across_runs() {
    let out1 = tempfile::tempdir().unwrap();
    let out2 = tempfile::tempdir().unwrap();
    for out in [&out1, &out2] {
        let status = fraclab()
            .args(["--config"])
            .arg(config_dir().join("poincare_p2.cfg"))
            .args(["--out"])
            .arg(out.path())
            .args(["--seed", "99"])
            .arg("poincare")
            .status()
            .unwrap();
        assert!(status.success());
    }
    let m1 = std::fs::read(out1.path().join("manifest.json")).unwrap();
    let m2 = std::fs::read(out2.path().join("manifest.json")).unwrap();
    assert_eq!(m1, m2);
    let r1 = std::fs::read(out1.path().join("result.json")).unwrap();
    let r2 = std::fs::read(out2.path().join("result.json")).unwrap();
    assert_eq!(r1, r2);
    // the emitted minimizer carries unit L^p norm
    let minimizer = fraclab_core::io::read_field(&out1.path().join("minimizer.bin")).unwrap();
    let norm = fraclab_core::grid::lp_norm(&minimizer, 2.0).unwrap();
    assert!((norm - 1.0).abs() <= 1e-10, "minimizer norm {norm}");
}

#[test]
fn missing_field_is_a_config_error() {
    let out = tempfile::tempdir().unwrap();
    let config = out.path().join("broken.cfg");
    std::fs::write(
        &config,
        "[grid]\nn = 1\npoints = 32\nperiod = 6.28\n\n[problem]\np = 2.0\n",
    )
    .unwrap();
    let output = fraclab()
        .args(["--config"])
        .arg(&config)
        .args(["--out"])
        .arg(out.path())
        .arg("poincare")
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(stderr.contains("missing field `s`"), "stderr: {stderr}");
}

#[test]
fn out_of_range_extension_order_is_rejected() {
    let out = tempfile::tempdir().unwrap();
    let config = out.path().join("bad_s.cfg");
    let text = std::fs::read_to_string(config_dir().join("extend_s05.cfg"))
        .unwrap()
        .replace("s = 0.5", "s = 1.3");
    std::fs::write(&config, text).unwrap();
    let output = fraclab()
        .args(["--config"])
        .arg(&config)
        .args(["--out"])
        .arg(out.path())
        .arg("extend")
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(stderr.contains("0 < s < 1"), "stderr: {stderr}");
}

#[test]
fn nonconvergence_exits_with_numerical_failure() {
    let out = tempfile::tempdir().unwrap();
    let config = out.path().join("starved.cfg");
    let text = std::fs::read_to_string(config_dir().join("interior_p15.cfg"))
        .unwrap()
        .replace("tol = 1e-9", "tol = 1e-13\nmax_iterations = 2");
    std::fs::write(&config, text).unwrap();
    let output = fraclab()
        .args(["--config"])
        .arg(&config)
        .args(["--out"])
        .arg(out.path())
        .arg("forward")
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(stderr.contains("did not converge"), "stderr: {stderr}");
}

#[test]
fn verify_subset_passes() {
    let out = tempfile::tempdir().unwrap();
    let output = fraclab()
        .args(["--config"])
        .arg(config_dir().join("verify_fast.cfg"))
        .args(["--out"])
        .arg(out.path())
        .arg("verify")
        .output()
        .unwrap();
    assert!(output.status.success());
    let stdout = String::from_utf8_lossy(&output.stdout);
    assert_eq!(stdout.matches("[PASS]").count(), 3, "stdout: {stdout}");
    let outcomes: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.path().join("result.json")).unwrap())
            .unwrap();
    assert_eq!(outcomes.as_array().unwrap().len(), 3);
}

#[test]
fn dn_matrix_exports_csv() {
    let out = tempfile::tempdir().unwrap();
    let status = fraclab()
        .args(["--config"])
        .arg(config_dir().join("dn_p2.cfg"))
        .args(["--out"])
        .arg(out.path())
        .arg("dn")
        .status()
        .unwrap();
    assert!(status.success());
    let csv = std::fs::read_to_string(out.path().join("dn_matrix.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().collect();
    // 16x16 grid with an 8x8 interior leaves 192 exterior DOFs
    assert_eq!(rows.len(), 192);
    assert_eq!(rows[0].split(',').count(), 192);
}
