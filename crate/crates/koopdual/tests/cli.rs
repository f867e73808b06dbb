use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use koopdual::config::ExperimentConfig;

const BIN: &str = env!("CARGO_BIN_EXE_koopctl");

fn koopctl(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut c = Command::new(BIN);
    c.args(args).env_remove("KOOPCTL_THREADS");
    for (k, v) in env {
        c.env(k, v);
    }
    c.output().expect("spawn koopctl")
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap_or(-1)
}

/// Degree-2 variant of the bundled config that runs in a few seconds.
fn small_config(dir: &Path) -> PathBuf {
    let mut cfg = ExperimentConfig::vdp_default();
    cfg.experiment = "small".into();
    cfg.basis.degree = 2;
    cfg.data.samples = 400;
    cfg.data.holdout_samples = 200;
    cfg.noise_levels = vec![0.0, 0.01, 0.05];
    cfg.synthesis.noise_levels = vec![0.01];
    cfg.synthesis.lambda_grid = vec![1e4];
    cfg.synthesis.sector_scales = vec![0.0];
    cfg.simulation.horizon = 2.0;
    cfg.simulation.seeds = vec![0, 1];
    let p = dir.join("small.json");
    std::fs::write(&p, cfg.to_json()).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn help_and_usage_errors() {
    assert_eq!(code(&koopctl(&["--help"], &[])), 0);
    assert_eq!(code(&koopctl(&["frobnicate"], &[])), 1);
    assert_eq!(code(&koopctl(&["generate"], &[])), 1);
}

#[test]
fn config_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.json");
    assert_eq!(code(&koopctl(&["generate", "--config", s(&missing)], &[])), 1);
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"schema_version": 1, "sneaky": true}"#).unwrap();
    let o = koopctl(&["generate", "--config", s(&bad)], &[]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("sneaky"));
    std::fs::write(&bad, r#"{"schema_version": 99}"#).unwrap();
    assert_eq!(code(&koopctl(&["generate", "--config", s(&bad)], &[])), 1);
}

#[test]
fn missing_inputs_exit_three() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let out = dir.path().join("empty");
    assert_eq!(code(&koopctl(&["identify", "--config", s(&cfg), "--out", s(&out)], &[])), 3);
    assert_eq!(code(&koopctl(&["synthesize", "--config", s(&cfg), "--out", s(&out)], &[])), 3);
}

#[test]
fn report_on_empty_dir_warns() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let out = dir.path().join("r");
    std::fs::create_dir_all(&out).unwrap();
    let o = koopctl(&["report", "--config", s(&cfg), "--out", s(&out)], &[]);
    assert_eq!(code(&o), 0);
    assert!(String::from_utf8_lossy(&o.stderr).contains("warning"));
    let m: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m["files"].as_array().unwrap().len(), 0);
    assert!(!m["warnings"].as_array().unwrap().is_empty());
}

#[test]
fn generate_is_deterministic_and_seed_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let (a, b, c) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
    for d in [&a, &b] {
        assert_eq!(code(&koopctl(&["generate", "--config", s(&cfg), "--out", s(d)], &[])), 0);
    }
    assert_eq!(code(&koopctl(&["generate", "--config", s(&cfg), "--out", s(&c), "--seed", "42"], &[])), 0);
    let f = "snapshots_0.01.csv";
    let ra = std::fs::read(a.join(f)).unwrap();
    assert_eq!(ra, std::fs::read(b.join(f)).unwrap());
    assert_ne!(ra, std::fs::read(c.join(f)).unwrap());
    let text = String::from_utf8(ra).unwrap();
    assert_eq!(text.lines().next(), Some("x1_1,x1_2,x2_1,x2_2,u_1,y_1,y_2"));
}

#[test]
fn invalid_thread_count_is_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let out = dir.path().join("t");
    let o = koopctl(&["simulate", "--config", s(&cfg), "--out", s(&out)], &[("KOOPCTL_THREADS", "zero")]);
    assert_eq!(code(&o), 1);
}

#[test]
fn corrupted_model_exits_three() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let out = dir.path().join("m");
    assert_eq!(code(&koopctl(&["generate", "--config", s(&cfg), "--out", s(&out)], &[])), 0);
    assert_eq!(code(&koopctl(&["identify", "--config", s(&cfg), "--out", s(&out)], &[])), 0);
    let model = out.join("model_0.01.json");
    let text = std::fs::read_to_string(&model).unwrap();
    std::fs::write(&model, &text[..text.len() / 3]).unwrap();
    assert_eq!(code(&koopctl(&["synthesize", "--config", s(&cfg), "--out", s(&out)], &[])), 3);
}

#[test]
fn small_pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let out = dir.path().join("run");
    for cmd in ["generate", "identify", "synthesize", "simulate", "report"] {
        let o = koopctl(&[cmd, "--config", s(&cfg), "--out", s(&out)], &[("KOOPCTL_THREADS", "1")]);
        assert_eq!(code(&o), 0, "{cmd}: {}", String::from_utf8_lossy(&o.stderr));
    }
    for f in [
        "model_0.01.json",
        "gains_0.01.json",
        "qfilter_0.01.json",
        "synthesis_0.01.json",
        "metrics.json",
        "comparison.csv",
        "small_0.01_0_dual.csv",
        "small_0.01_1_lqg.csv",
        "fig2.csv",
        "fig3.csv",
        "fig4.csv",
        "manifest.json",
    ] {
        assert!(out.join(f).exists(), "missing {f}");
    }
    let fig3 = std::fs::read_to_string(out.join("fig3.csv")).unwrap();
    assert_eq!(fig3.lines().next(), Some("figure,series,t,value"));
    // rerunning the report gives the same bytes
    let before: Vec<Vec<u8>> = ["fig2.csv", "fig3.csv", "fig4.csv", "manifest.json"]
        .iter()
        .map(|f| std::fs::read(out.join(f)).unwrap())
        .collect();
    assert_eq!(code(&koopctl(&["report", "--config", s(&cfg), "--out", s(&out)], &[])), 0);
    for (i, f) in ["fig2.csv", "fig3.csv", "fig4.csv", "manifest.json"].iter().enumerate() {
        assert_eq!(std::fs::read(out.join(f)).unwrap(), before[i], "{f} changed");
    }
}
