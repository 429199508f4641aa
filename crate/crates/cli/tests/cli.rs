use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use magsep::config::default_config;
use serde_json::{json, Value};

fn magsep(args: &[&str], threads: Option<&str>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_magsep"));
    cmd.args(args).env_remove("MAGSEP_THREADS");
    if let Some(t) = threads {
        cmd.env("MAGSEP_THREADS", t);
    }
    cmd.output().expect("binary runs")
}

fn small_config(dir: &Path, n: usize) -> PathBuf {
    let cfg = default_config()
        .with_parameter("populations.0.count", json!(n))
        .unwrap()
        .with_parameter("populations.1.count", json!(n))
        .unwrap();
    let path = dir.join("scenario.json");
    fs::write(&path, cfg.to_json()).unwrap();
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn run_writes_all_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let config = small_config(tmp.path(), 60);
    let out = tmp.path().join("out");
    let o = magsep(&["run", s(&config), "--out", s(&out)], None);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));

    let stats: Value = serde_json::from_str(&fs::read_to_string(out.join("stats.json")).unwrap()).unwrap();
    assert_eq!(stats["schema_version"], 1);
    assert_eq!(stats["species"].as_array().unwrap().len(), 2);
    let csv = fs::read_to_string(out.join("capture_by_species.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    for label in ["RBC-deoxy", "WBC"] {
        let dir = out.join("trajectories").join(label);
        let files = fs::read_dir(&dir).unwrap().count();
        assert_eq!(files, 50, "{label}");
        let first = fs::read_to_string(dir.join("cell_0000.csv")).unwrap();
        assert!(first.starts_with("t,x,y,z,outcome\n"));
    }
    let leftovers: Vec<_> = walk(&out).into_iter().filter(|p| p.file_name().unwrap().to_string_lossy().contains(".tmp")).collect();
    assert!(leftovers.is_empty(), "{leftovers:?}");
}

fn walk(dir: &Path) -> Vec<PathBuf> {
    let mut all = Vec::new();
    for e in fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            all.extend(walk(&p));
        } else {
            all.push(p);
        }
    }
    all
}

#[test]
fn stats_are_byte_identical_across_thread_counts() {
    let tmp = tempfile::tempdir().unwrap();
    let config = small_config(tmp.path(), 40);
    let mut outputs = Vec::new();
    for threads in ["1", "3"] {
        let out = tmp.path().join(format!("out{threads}"));
        let o = magsep(&["run", s(&config), "--out", s(&out)], Some(threads));
        assert_eq!(o.status.code(), Some(0));
        outputs.push(fs::read(out.join("stats.json")).unwrap());
    }
    assert_eq!(outputs[0], outputs[1]);
}

#[test]
fn invalid_config_exits_2_without_output() {
    let tmp = tempfile::tempdir().unwrap();
    let mut doc = default_config().to_value();
    doc["channel"].as_object_mut().unwrap().remove("depth");
    let config = tmp.path().join("bad.json");
    fs::write(&config, doc.to_string()).unwrap();
    let out = tmp.path().join("out");
    let o = magsep(&["run", s(&config), "--out", s(&out)], None);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("channel.depth"));
    assert!(!out.exists());
}

#[test]
fn missing_config_file_is_a_validation_error() {
    let tmp = tempfile::tempdir().unwrap();
    let o = magsep(&["run", "/nonexistent/scenario.json", "--out", s(tmp.path())], None);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn sweep_writes_tidy_csv() {
    let tmp = tempfile::tempdir().unwrap();
    let config = small_config(tmp.path(), 10);
    let out = tmp.path().join("sweep");
    let o = magsep(
        &["sweep", s(&config), "--param", "fluid.flow_rate", "--values", "0.25 ml/h,1 ml/h", "--per-point", "12", "--out", s(&out)],
        Some("1"),
    );
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(out.join("sweep.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 5);
    assert!(lines[0].starts_with("parameter,value,species,"));
    assert!(lines[1].starts_with("fluid.flow_rate,"));
    assert!(lines[1].contains(",12,"));
}

#[test]
fn sweep_with_bad_path_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let config = small_config(tmp.path(), 10);
    let out = tmp.path().join("sweep");
    let o = magsep(&["sweep", s(&config), "--param", "fluid.nope", "--values", "1", "--out", s(&out)], None);
    assert_eq!(o.status.code(), Some(2));
    assert!(!out.exists());
}

#[test]
fn calibrate_rejects_bracket_that_misses_target() {
    let tmp = tempfile::tempdir().unwrap();
    let config = small_config(tmp.path(), 10);
    let o = magsep(
        &["calibrate", s(&config), "--target", "0.9", "--bracket", "1.5 ml/h,2 ml/h", "--species", "RBC-deoxy"],
        Some("1"),
    );
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stderr).contains("does not straddle"));
}

#[test]
fn calibrate_reports_flow_rate() {
    let tmp = tempfile::tempdir().unwrap();
    let config = small_config(tmp.path(), 40);
    let out = tmp.path().join("cal.json");
    let o = magsep(
        &["calibrate", s(&config), "--target", "0.5", "--bracket", "0.1 ml/h,2 ml/h", "--tolerance", "0.1", "--out", s(&out)],
        Some("1"),
    );
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let record: Value = serde_json::from_str(&fs::read_to_string(out).unwrap()).unwrap();
    let q = record["calibration"]["flow_rate"].as_f64().unwrap();
    assert!(q > 0.1 / 3.6e9 && q < 2.0 / 3.6e9);
    assert_eq!(record["species"], "RBC-deoxy");
}

#[test]
fn fieldmap_exports_grid() {
    let tmp = tempfile::tempdir().unwrap();
    let config = small_config(tmp.path(), 1);
    let out = tmp.path().join("map.csv");
    let o = magsep(&["fieldmap", s(&config), "--out", s(&out), "--n-r", "4", "--n-phi", "8"], None);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(out).unwrap();
    assert_eq!(csv.lines().count(), 33);
    assert!(csv.starts_with("r,phi,F_r,F_phi\n"));
}
