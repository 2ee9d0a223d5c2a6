mod common;

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use owl_core::pipeline::RunConfig;

fn owl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_owl"))
        .args(args)
        .output()
        .expect("spawn owl")
}

fn setup() -> (tempfile::TempDir, RunConfig) {
    let dir = tempfile::tempdir().unwrap();
    let model = common::random_model(common::tiny_config(), 61);
    let cfg = common::write_inputs(dir.path(), &model, 600, 200, 61);
    (dir, cfg)
}

/// Writes the fixture config to disk so commands only need `--config`.
fn config_file(dir: &Path, cfg: &RunConfig) -> String {
    let path = dir.join("run.json");
    fs::write(&path, cfg.to_json().unwrap()).unwrap();
    path.to_str().unwrap().to_string()
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "status {:?}\nstderr: {}",
        out.status,
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn analyze_then_plan_from_profile() {
    let (dir, cfg) = setup();
    let conf = config_file(dir.path(), &cfg);
    ok(&owl(&["analyze", "--config", &conf]));
    for f in ["profile.json", "profile.csv", "stats.json"] {
        assert!(cfg.out_dir.join(f).exists(), "{f}");
    }
    let profile = cfg.out_dir.join("profile.json");
    let plan_dir = dir.path().join("plan");
    ok(&owl(&["plan", "--config", &conf, "--profile", p(&profile), "--out", p(&plan_dir)]));
    let plan: serde_json::Value = serde_json::from_str(&fs::read_to_string(plan_dir.join("plan.json")).unwrap()).unwrap();
    assert_eq!(plan["entries"].as_array().unwrap().len(), 14);
}

#[test]
fn prune_and_eval_with_dense_reference() {
    let (dir, cfg) = setup();
    let conf = config_file(dir.path(), &cfg);
    let stdout = ok(&owl(&["prune", "--config", &conf, "--sparsity", "0.5", "--lambda", "0.05", "--m-outlier", "4"]));
    assert!(stdout.contains("perplexity"));
    let pruned = cfg.out_dir.join("pruned.owlc");
    let plan = cfg.out_dir.join("plan.json");
    let eval_dir = dir.path().join("eval");
    let table = dir.path().join("units.csv");
    ok(&owl(&[
        "eval",
        "--config",
        &conf,
        "--model",
        p(&pruned),
        "--dense",
        p(&cfg.model),
        "--plan",
        p(&plan),
        "--csv",
        p(&table),
        "--bench",
        "--out",
        p(&eval_dir),
    ]));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(eval_dir.join("eval.json")).unwrap()).unwrap();
    let pruned_report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(cfg.out_dir.join("report.json")).unwrap()).unwrap();
    // Per-row rounding on 16-wide rows moves realized sparsity off the target.
    let overall = report["sparsity"]["overall"].as_f64().unwrap();
    assert_eq!(overall, pruned_report["sparsity"]["overall"].as_f64().unwrap());
    assert!((overall - 0.5).abs() < 0.03, "{overall}");
    assert_eq!(report["perplexity"], pruned_report["perplexity"]);
    assert!(report["lod_after"].is_object());
    assert!(report["spmv"].is_object());
    let csv = fs::read_to_string(&table).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "unit,realized,planned,d_before,d_after");
    // 14 layers plus 2 blocks, every field filled for layers.
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 16);
    assert!(rows[0].split(',').all(|f| !f.is_empty()));
}

#[test]
fn compress_both_modes() {
    let (dir, cfg) = setup();
    let conf = config_file(dir.path(), &cfg);
    for mode in ["svd", "quant"] {
        let out = dir.path().join(mode);
        ok(&owl(&["compress", "--config", &conf, "--mode", mode, "--out", p(&out)]));
        for f in ["compress_plan.json", "compressed.owlc", "report.json"] {
            assert!(out.join(f).exists(), "{mode} {f}");
        }
    }
}

#[test]
fn compare_and_single_point_sweep() {
    let (dir, cfg) = setup();
    let conf = config_file(dir.path(), &cfg);
    let stdout = ok(&owl(&["compare", "--config", &conf, "--schemes", "uniform,owl", "--sparsities", "0.5"]));
    assert!(stdout.starts_with("dense perplexity"));
    assert_eq!(fs::read_to_string(cfg.out_dir.join("compare.csv")).unwrap().lines().count(), 3);

    let stdout = ok(&owl(&["sweep", "--config", &conf, "--lambdas", "0.05", "--ms", "4", "--granularity", "layer"]));
    assert!(stdout.contains("best lambda 0.05 M 4"), "{stdout}");
}

#[test]
fn flags_override_config_and_seed_is_global() {
    let (dir, cfg) = setup();
    let conf = config_file(dir.path(), &cfg);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    ok(&owl(&["--seed", "9", "prune", "--config", &conf, "--scheme", "uniform", "--out", p(&a)]));
    ok(&owl(&["prune", "--config", &conf, "--scheme", "uniform", "--seed", "9", "--threads", "1", "--out", p(&b)]));
    let plan: serde_json::Value = serde_json::from_str(&fs::read_to_string(a.join("plan.json")).unwrap()).unwrap();
    assert_eq!(plan["scheme"], "uniform");
    assert_eq!(fs::read(a.join("report.json")).unwrap(), fs::read(b.join("report.json")).unwrap());
}

#[test]
fn exit_codes_separate_config_and_stage_failures() {
    let (dir, cfg) = setup();
    let conf = config_file(dir.path(), &cfg);
    assert_eq!(owl(&["prune", "--config", &conf, "--scheme", "bogus"]).status.code(), Some(2));
    let missing = dir.path().join("missing.owlc");
    assert_eq!(owl(&["prune", "--config", &conf, "--model", p(&missing)]).status.code(), Some(2));

    let corrupt = dir.path().join("corrupt.owlc");
    let mut bytes = fs::read(&cfg.model).unwrap();
    bytes.truncate(bytes.len() / 2);
    fs::write(&corrupt, bytes).unwrap();
    let out = owl(&["prune", "--config", &conf, "--model", p(&corrupt)]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("load"));
}
