use std::path::PathBuf;
use std::process::Command;

fn wglab() -> Command {
    Command::new(env!("CARGO_BIN_EXE_wglab"))
}

fn config(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("configs").join(name)
}

#[test]
fn bundled_configs_parse() {
    for name in ["regular.json", "window.json", "patch.json", "resonance.json"] {
        wglab::harness::ExperimentConfig::load(&config(name)).unwrap().validate().unwrap();
    }
}

#[test]
fn basis_prints_thresholds() {
    let out = wglab().args(["basis", "--modes", "3"]).output().unwrap();
    assert!(out.status.success());
    let rows: Vec<(usize, f64, f64, f64)> = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(rows.len(), 3);
    assert!((rows[2].1 - 9.0).abs() < 1e-12);
}

#[test]
fn pole_matches_leading_law() {
    let out = wglab().arg("pole").arg("--config").arg(config("regular.json")).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let first = &v[0];
    assert_eq!(first["classification"], "BoundState");
    assert!((first["k"][0].as_f64().unwrap() - 0.08).abs() < 5.0 * 0.08 * 0.08);
}

#[test]
fn asym_reports_resonance() {
    let out = wglab().arg("asym").arg("--config").arg(config("resonance.json")).output().unwrap();
    assert!(out.status.success());
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v[0]["width"]["classification"], "Resonance");
}

#[test]
fn missing_config_is_a_config_error() {
    let out = wglab().args(["pole", "--config", "/nonexistent/cfg.json"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let out = wglab().arg("pole").output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn unknown_key_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    let mut text = std::fs::read_to_string(config("resonance.json")).unwrap();
    text = text.replacen("\"m\": 2", "\"m\": 2, \"mystery\": 1", 1);
    std::fs::write(&path, text).unwrap();
    let out = wglab().arg("asym").arg("--config").arg(&path).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn failed_check_exits_with_four() {
    // no oracle section, so the declared rel_err tolerance cannot be met
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cfg.json");
    let text = std::fs::read_to_string(config("regular.json")).unwrap();
    let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
    v.as_object_mut().unwrap().remove("oracle");
    std::fs::write(&path, v.to_string()).unwrap();
    let out = wglab()
        .args(["sweep", "--check", "--threads", "1"])
        .arg("--config")
        .arg(&path)
        .arg("--out")
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("report.json")).unwrap()).unwrap();
    assert_eq!(report["pass"], false);
    assert!(dir.path().join("sweep.csv").exists());

    let again = wglab()
        .arg("report")
        .arg("--config")
        .arg(&path)
        .arg("--csv")
        .arg(dir.path().join("sweep.csv"))
        .arg("--out")
        .arg(dir.path().join("re"))
        .output()
        .unwrap();
    assert!(again.status.success(), "{}", String::from_utf8_lossy(&again.stderr));
}
