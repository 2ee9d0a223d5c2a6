mod common;

use std::fs;

use owl_core::alloc::{Scheme, SparsityPlan};
use owl_core::calib::TokenCorpus;
use owl_core::eval::perplexity;
use owl_core::pipeline::{
    run_compare, run_pipeline, sweep, CompareScheme, PipelineError, RunConfig, Stage, StatsCache, PARTIAL_MARKER,
};
use owl_core::prune::decode_masks;
use owl_core::{Checkpoint, Granularity, Grouping, ModelConfig, OutlierProfile};

fn setup(seed: u64) -> (tempfile::TempDir, RunConfig) {
    let dir = tempfile::tempdir().unwrap();
    let model = common::random_model(ModelConfig::new(16, 2, 2, 32, 48), seed);
    let cfg = common::write_inputs(dir.path(), &model, 600, 200, seed);
    (dir, cfg)
}

fn read_plan(cfg: &RunConfig) -> SparsityPlan {
    SparsityPlan::from_json(&fs::read_to_string(cfg.out_dir.join("plan.json")).unwrap()).unwrap()
}

#[test]
fn uniform_zero_sparsity_is_a_no_op() {
    let (_dir, mut cfg) = setup(41);
    cfg.scheme = Scheme::Uniform;
    cfg.sparsity = 0.0;
    let report = run_pipeline(&cfg).unwrap();
    assert_eq!(
        fs::read(&cfg.model).unwrap(),
        fs::read(cfg.out_dir.join("pruned.owlc")).unwrap()
    );
    let dense = Checkpoint::load(&cfg.model).unwrap();
    let eval = TokenCorpus::load(cfg.eval_tokens.as_ref().unwrap()).unwrap();
    assert_eq!(report.perplexity, perplexity(&dense, &eval.tokens, cfg.seqlen).unwrap());
    assert_eq!(report.sparsity.overall, 0.0);
}

#[test]
fn repeated_runs_write_identical_reports() {
    let (dir, cfg) = setup(42);
    run_pipeline(&cfg).unwrap();
    let again = RunConfig {
        out_dir: dir.path().join("again"),
        ..cfg.clone()
    };
    run_pipeline(&again).unwrap();
    for name in ["report.json", "plan.json", "masks.bin", "pruned.owlc", "profile.csv", "sparsity.csv"] {
        assert_eq!(
            fs::read(cfg.out_dir.join(name)).unwrap(),
            fs::read(again.out_dir.join(name)).unwrap(),
            "{name}"
        );
    }
}

#[test]
fn owl_plan_is_non_uniform_when_profile_varies() {
    let (_dir, mut cfg) = setup(43);
    cfg.m_outlier = 3.0;
    run_pipeline(&cfg).unwrap();
    let profile = OutlierProfile::from_json(&fs::read_to_string(cfg.out_dir.join("profile.json")).unwrap()).unwrap();
    let d = profile.ratios();
    assert!(d.iter().any(|&x| x != d[0]), "profile is constant: {d:?}");
    let plan = read_plan(&cfg);
    let s = plan.sparsities();
    assert!(s.iter().any(|&x| (x - s[0]).abs() > 1e-9));
    assert!((plan.weighted_mean() - cfg.sparsity).abs() < 1e-9);

    let masks = decode_masks(&fs::read(cfg.out_dir.join("masks.bin")).unwrap()).unwrap();
    assert_eq!(masks.len(), 14);
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(cfg.out_dir.join("report.json")).unwrap()).unwrap();
    let overall = report["sparsity"]["overall"].as_f64().unwrap();
    assert!((overall - 0.7).abs() < 0.02, "{overall}");
    assert!(report["perplexity"].as_f64().unwrap() >= 1.0);
}

#[test]
fn single_scheme_compare_equals_pipeline() {
    let (dir, mut cfg) = setup(44);
    cfg.scheme = Scheme::Uniform;
    cfg.sparsity = 0.6;
    let report = run_pipeline(&cfg).unwrap();
    let compare_cfg = RunConfig {
        out_dir: dir.path().join("compare"),
        ..cfg.clone()
    };
    let table = run_compare(&compare_cfg, &[CompareScheme::Alloc(Scheme::Uniform)], &[0.6]).unwrap();
    assert_eq!(table.rows.len(), 1);
    assert_eq!(table.rows[0].perplexity, report.perplexity);
    assert_eq!(
        fs::read(cfg.out_dir.join("pruned.owlc")).unwrap(),
        fs::read(compare_cfg.out_dir.join("uniform_s0.6").join("pruned.owlc")).unwrap()
    );
}

#[test]
fn compare_owl_and_inverse_reflect() {
    let (_dir, mut cfg) = setup(45);
    cfg.m_outlier = 3.0;
    let schemes = [
        CompareScheme::Alloc(Scheme::Owl),
        CompareScheme::Alloc(Scheme::OwlInverse),
        CompareScheme::Global,
        CompareScheme::Alloc(Scheme::Er),
        CompareScheme::Alloc(Scheme::ErPlus),
        CompareScheme::Alloc(Scheme::Uniform),
    ];
    let table = run_compare(&cfg, &schemes, &[0.5, 0.6]).unwrap();
    assert_eq!(table.rows.len(), 12);
    for s in [0.5, 0.6] {
        let owl = &table.get("owl", s).unwrap().plan;
        let inv = &table.get("owl-inverse", s).unwrap().plan;
        for (a, b) in owl.iter().zip(inv) {
            assert!((a + b - 2.0 * s).abs() < 1e-9);
        }
        let global = table.get("global", s).unwrap();
        assert!((global.realized_sparsity - s).abs() < 1e-3);
    }
    let csv = fs::read_to_string(cfg.out_dir.join("compare.csv")).unwrap();
    assert_eq!(csv.lines().count(), 13);
    assert!(cfg.out_dir.join("compare.json").exists());
    assert!(cfg.out_dir.join("er-plus_s0.5").join("plan.json").exists());
}

#[test]
fn sweep_matches_independent_runs() {
    let (dir, cfg) = setup(46);
    let result = sweep(&cfg, &[0.05, 0.1], &[3.0, 5.0]).unwrap();
    assert_eq!(result.rows.len(), 4);
    for (i, row) in result.rows.iter().enumerate() {
        let single = RunConfig {
            lambda: row.lambda,
            m_outlier: row.m_outlier,
            out_dir: dir.path().join(format!("single{i}")),
            ..cfg.clone()
        };
        assert_eq!(run_pipeline(&single).unwrap().perplexity, row.perplexity);
    }
    let best = result
        .rows
        .iter()
        .min_by(|a, b| a.perplexity.total_cmp(&b.perplexity))
        .unwrap();
    assert_eq!(result.best_perplexity, best.perplexity);
    assert!(cfg.out_dir.join("sweep.csv").exists());
}

#[test]
fn sweep_duplicates_and_single_point() {
    let (_dir, cfg) = setup(47);
    let dup = sweep(&cfg, &[0.08, 0.08], &[5.0]).unwrap();
    assert_eq!(dup.rows[0].perplexity, dup.rows[1].perplexity);
    let one = sweep(&cfg, &[0.1], &[7.0]).unwrap();
    assert_eq!((one.best_lambda, one.best_m), (0.1, 7.0));
    assert!(sweep(&cfg, &[], &[5.0]).is_err());
}

#[test]
fn mixed_nm_run() {
    let (_dir, mut cfg) = setup(48);
    cfg.nm = Some("2:4".parse().unwrap());
    let report = run_pipeline(&cfg).unwrap();
    assert!((report.sparsity.overall - 0.5).abs() < 1e-12);
    let masks = decode_masks(&fs::read(cfg.out_dir.join("masks.bin")).unwrap()).unwrap();
    for m in &masks {
        for r in 0..m.shape().0 {
            assert!(m.row(r).chunks(4).all(|g| g.iter().filter(|&&k| k).count() == 2));
        }
    }
}

#[test]
fn stage_failure_leaves_partial_marker() {
    let (dir, mut cfg) = setup(49);
    let plan_path = dir.path().join("bad_plan.json");
    fs::write(
        &plan_path,
        r#"{"scheme":"uniform","global_s":0.5,"lambda":0.0,"entries":[{"id":"blocks.0","s":0.5,"params":1}]}"#,
    )
    .unwrap();
    cfg.plan = Some(plan_path);
    let err = run_pipeline(&cfg).unwrap_err();
    assert_eq!(err.stage(), Some(Stage::Mask));
    let marker = fs::read_to_string(cfg.out_dir.join(PARTIAL_MARKER)).unwrap();
    assert!(marker.contains("mask"));

    // A later successful run clears the marker.
    cfg.plan = None;
    run_pipeline(&cfg).unwrap();
    assert!(!cfg.out_dir.join(PARTIAL_MARKER).exists());
}

#[test]
fn config_errors_are_reported_before_any_stage() {
    let (dir, cfg) = setup(50);
    let missing = RunConfig {
        model: dir.path().join("nope.owlc"),
        ..cfg.clone()
    };
    assert!(matches!(run_pipeline(&missing), Err(PipelineError::Config(_))));
    let bad_band = RunConfig {
        sparsity: 0.95,
        lambda: 0.08,
        ..cfg.clone()
    };
    assert!(matches!(run_pipeline(&bad_band), Err(PipelineError::Config(_))));
    let global = RunConfig {
        grouping: Some(Grouping::Global),
        scheme: Scheme::Uniform,
        ..cfg
    };
    assert!(run_pipeline(&global).is_ok());
}

#[test]
fn stats_cache_reuses_entries() {
    let model = common::random_model(common::tiny_config(), 51);
    let corpus = TokenCorpus::random(48, 300, &mut owl_core::SeededRng::new(52));
    let mut cache = StatsCache::new();
    let a = cache.get_or_compute(&model, &corpus, 4, 16, 0).unwrap().clone();
    let b = cache.get_or_compute(&model, &corpus, 4, 16, 0).unwrap().clone();
    assert_eq!(a, b);
    assert_eq!(cache.len(), 1);
    cache.get_or_compute(&model, &corpus, 4, 16, 1).unwrap();
    assert_eq!(cache.len(), 2);
}

#[test]
fn block_granularity_pools_each_block() {
    let (_dir, mut cfg) = setup(53);
    cfg.granularity = Granularity::PerBlock;
    cfg.m_outlier = 3.0;
    assert_eq!(cfg.effective_grouping(), Grouping::PerBlock);
    let report = run_pipeline(&cfg).unwrap();
    let plan = read_plan(&cfg);
    assert_eq!(plan.entries.len(), 2);
    for (block, entry) in report.sparsity.blocks.iter().zip(&plan.entries) {
        assert_eq!(block.id, entry.id);
        // One pooled group per block: off by at most half a weight.
        let want = entry.s * block.total as f64;
        assert!((block.zeros as f64 - want).abs() <= 0.5 + 1e-9, "{} vs {want}", block.zeros);
    }
}
