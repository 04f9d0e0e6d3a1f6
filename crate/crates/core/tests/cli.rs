use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use fedavg_sde::experiment::{ExperimentConfig, RunManifest, MANIFEST_NAME};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_fedavg-sde"))
}

fn config(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

fn run(cfg: &Path, out: &Path, threads: &str) -> Output {
    bin().arg("run").arg(cfg).arg("--out").arg(out).args(["--threads", threads]).output().unwrap()
}

fn artifacts(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.file_name().unwrap() != MANIFEST_NAME)
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    files.sort();
    files
}

/// Fast variants of the shipped configs.
fn small(name: &str, dir: &Path) -> PathBuf {
    let mut cfg: ExperimentConfig = serde_json::from_str(&fs::read_to_string(config(name)).unwrap()).unwrap();
    if let Some(b) = cfg.bounds.as_mut() {
        b.runs = 4;
        b.time_draws = 20;
        b.vstar_replicates = 32;
    }
    if let Some(s) = cfg.sde.as_mut() {
        s.paths = 20;
        s.inner_replicates = 16;
    }
    if let Some(n) = cfg.normality.as_mut() {
        n.replicates = 500;
    }
    let path = dir.join(name);
    fs::write(&path, cfg.to_json()).unwrap();
    path
}

#[test]
fn every_kind_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    for name in [
        "simulate_discrete.json",
        "simulate_sde.json",
        "analytic_quadratic.json",
        "check_normality.json",
        "check_bounds_theorem1.json",
        "check_bounds_corollary2.json",
    ] {
        let cfg = small(name, tmp.path());
        let (a, b) = (tmp.path().join(format!("{name}.a")), tmp.path().join(format!("{name}.b")));
        let ra = run(&cfg, &a, "1");
        assert!(ra.status.success(), "{name}: {}", String::from_utf8_lossy(&ra.stderr));
        assert!(run(&cfg, &b, "2").status.success());
        let (fa, fb) = (artifacts(&a), artifacts(&b));
        assert!(!fa.is_empty());
        assert_eq!(fa, fb, "{name}");
        let manifest: RunManifest = serde_json::from_slice(&fs::read(a.join(MANIFEST_NAME)).unwrap()).unwrap();
        let listed: Vec<_> = manifest.artifacts.iter().map(|e| e.name.clone()).collect();
        let present: Vec<_> = fa.iter().map(|(n, _)| n.clone()).collect();
        let mut listed_sorted = listed.clone();
        listed_sorted.sort();
        assert_eq!(listed_sorted, present, "{name}: manifest must list every artifact");
    }
}

#[test]
fn analytic_csv_schema() {
    let tmp = tempfile::tempdir().unwrap();
    assert!(run(&config("analytic_quadratic.json"), tmp.path(), "1").status.success());
    let csv = fs::read_to_string(tmp.path().join("analytic.csv")).unwrap();
    assert!(csv.starts_with("t,m_0,v_0_ode,v_0_paper_form\n"));
    assert_eq!(csv.lines().count(), 7);
}

fn write_variant(dir: &Path, name: &str, edit: impl FnOnce(&mut serde_json::Value)) -> PathBuf {
    let mut v: serde_json::Value = serde_json::from_str(&fs::read_to_string(config("simulate_discrete.json")).unwrap()).unwrap();
    edit(&mut v);
    let p = dir.join(name);
    fs::write(&p, serde_json::to_string(&v).unwrap()).unwrap();
    p
}

#[test]
fn validation_errors_exit_2_without_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_variant(tmp.path(), "weights.json", |v| v["problem"]["clients"][0]["weight"] = 0.7.into());
    let out = tmp.path().join("never");
    let r = run(&cfg, &out, "1");
    assert_eq!(r.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&r.stderr).contains("sum to"));
    assert!(!out.exists());
}

#[test]
fn validate_reports_all_problems() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_variant(tmp.path(), "many.json", |v| {
        v["fedavg"]["local_steps"] = 0.into();
        v["problem"]["clients"][1]["noise_covariance"] = serde_json::json!([[-0.5]]);
    });
    let r = bin().arg("validate").arg(&cfg).output().unwrap();
    assert_eq!(r.status.code(), Some(2));
    let text = String::from_utf8_lossy(&r.stdout);
    assert!(text.contains("E must be >= 1"), "{text}");
    assert!(text.contains("PSD"), "{text}");

    let ok = bin().arg("validate").arg(config("simulate_discrete.json")).output().unwrap();
    assert!(ok.status.success());
    assert_eq!(String::from_utf8_lossy(&ok.stdout).trim(), "ok");
}

#[test]
fn unknown_kind_and_missing_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let kind = write_variant(tmp.path(), "kind.json", |v| v["kind"] = "simulate-everything".into());
    let r = run(&kind, &tmp.path().join("o"), "1");
    assert_eq!(r.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&r.stderr).contains("unknown variant"));
    let seed = write_variant(tmp.path(), "seed.json", |v| {
        v.as_object_mut().unwrap().remove("seed");
    });
    let r = run(&seed, &tmp.path().join("o"), "1");
    assert_eq!(r.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&r.stderr).contains("seed"));
}

#[test]
fn divergence_exits_3_without_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_variant(tmp.path(), "diverge.json", |v| {
        v["fedavg"]["client_schedule"] = serde_json::json!({"kind": "constant", "value": 10.0});
        v["fedavg"]["rounds"] = 2000.into();
    });
    let out = tmp.path().join("never");
    let r = run(&cfg, &out, "1");
    assert_eq!(r.status.code(), Some(3), "{}", String::from_utf8_lossy(&r.stderr));
    assert!(!out.exists());
}

#[test]
fn unreadable_config_exits_1() {
    let r = bin().args(["validate", "/nonexistent/config.json"]).output().unwrap();
    assert_eq!(r.status.code(), Some(1));
}

#[test]
fn thread_env_var_is_checked() {
    let tmp = tempfile::tempdir().unwrap();
    let r = bin().env("FEDSDE_THREADS", "many").arg("run").arg(config("analytic_quadratic.json")).arg("--out").arg(tmp.path()).output().unwrap();
    assert_eq!(r.status.code(), Some(2));
    let r = bin().env("FEDSDE_THREADS", "1").arg("run").arg(config("analytic_quadratic.json")).arg("--out").arg(tmp.path()).output().unwrap();
    assert!(r.status.success());
}
