//! End-to-end runs: calibrate → profile → allocate → mask → apply → save →
//! evaluate, plus scheme comparisons and (λ, M) sweeps.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::alloc::{allocate_nm, allocate_sparsity, layer_shapes, NmPlan, Scheme, SparsityPlan};
use crate::calib::{collect_feature_norms, sample_calibration, CalibrationStats, TokenCorpus};
use crate::error::{OwlError, Result};
use crate::eval::{perplexity_with, sparsity_report, EvalReport, LodSummary};
use crate::model::Checkpoint;
use crate::numkernel::SeededRng;
use crate::outlier::{build_profile_with, post_prune_profile, BlockPooling, Granularity, OutlierProfile};
use crate::prune::{apply_masks, build_mask, build_nm_mask, encode_masks, score_layers, Grouping, Metric, PruneMask};

/// `N:M` request; `n` may be fractional for mixed allocations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NmSpec {
    pub n: f64,
    pub m: usize,
}

impl FromStr for NmSpec {
    type Err = OwlError;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || OwlError::Config(format!("expected N:M, got {s:?}"));
        let (n, m) = s.split_once(':').ok_or_else(bad)?;
        let n: f64 = n.trim().parse().map_err(|_| bad())?;
        let m: usize = m.trim().parse().map_err(|_| bad())?;
        if m == 0 || !(n > 0.0 && n <= m as f64) {
            return Err(OwlError::Config(format!("N:M needs 0 < N <= M, got {s}")));
        }
        Ok(Self { n, m })
    }
}

impl fmt::Display for NmSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.n, self.m)
    }
}

impl Serialize for NmSpec {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for NmSpec {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: PathBuf,
    pub tokens: PathBuf,
    /// Falls back to `tokens` when absent.
    pub eval_tokens: Option<PathBuf>,
    pub scheme: Scheme,
    pub metric: Metric,
    /// Per-block for block granularity, per-output otherwise, when absent.
    pub grouping: Option<Grouping>,
    pub granularity: Granularity,
    pub pooling: BlockPooling,
    pub sparsity: f64,
    pub lambda: f64,
    pub m_outlier: f64,
    pub nsamples: usize,
    pub seqlen: usize,
    /// Evaluation window; defaults to `seqlen`.
    pub eval_seqlen: Option<usize>,
    pub max_eval_windows: Option<usize>,
    /// Replaces allocation with a previously written plan.
    pub plan: Option<PathBuf>,
    /// Mixed N:M instead of unstructured sparsity.
    pub nm: Option<NmSpec>,
    pub seed: u64,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: PathBuf::new(),
            tokens: PathBuf::new(),
            eval_tokens: None,
            scheme: Scheme::Owl,
            metric: Metric::Wanda,
            grouping: None,
            granularity: Granularity::PerLayer,
            pooling: BlockPooling::Joint,
            sparsity: 0.7,
            lambda: 0.08,
            m_outlier: 5.0,
            nsamples: 32,
            seqlen: 256,
            eval_seqlen: None,
            max_eval_windows: None,
            plan: None,
            nm: None,
            seed: 0,
            out_dir: PathBuf::from("owl-out"),
        }
    }
}

impl RunConfig {
    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| OwlError::Config(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| OwlError::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn effective_grouping(&self) -> Grouping {
        self.grouping.unwrap_or(match self.granularity {
            Granularity::PerBlock => Grouping::PerBlock,
            Granularity::PerLayer => Grouping::PerOutput,
        })
    }

    pub fn eval_window(&self) -> usize {
        self.eval_seqlen.unwrap_or(self.seqlen)
    }

    /// Range checks on numeric fields. Path existence is checked when
    /// inputs are loaded.
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(OwlError::Config(m));
        if !(0.0..1.0).contains(&self.sparsity) {
            return fail(format!("sparsity {} must lie in [0, 1)", self.sparsity));
        }
        if self.lambda.is_nan() || self.lambda < 0.0 {
            return fail(format!("lambda {} must be non-negative", self.lambda));
        }
        if self.m_outlier.is_nan() || self.m_outlier <= 1.0 {
            return fail(format!("outlier multiplier {} must exceed 1", self.m_outlier));
        }
        if self.nsamples == 0 {
            return fail("nsamples must be >= 1".into());
        }
        if self.seqlen == 0 {
            return fail("seqlen must be >= 1".into());
        }
        if self.eval_window() < 2 {
            return fail("evaluation window must be >= 2".into());
        }
        if self.scheme.uses_band() && self.plan.is_none() && self.nm.is_none() {
            let (lo, hi) = (self.sparsity - self.lambda, self.sparsity + self.lambda);
            if lo < 0.0 || hi > 1.0 {
                return fail(format!("band [{lo}, {hi}] leaves [0, 1]"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Stage {
    Load,
    Calibrate,
    Profile,
    Allocate,
    Mask,
    Apply,
    Evaluate,
    Save,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Self::Load => "load",
            Self::Calibrate => "calibrate",
            Self::Profile => "profile",
            Self::Allocate => "allocate",
            Self::Mask => "mask",
            Self::Apply => "apply",
            Self::Evaluate => "evaluate",
            Self::Save => "save",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("invalid configuration: {0}")]
    Config(OwlError),
    #[error("{stage} stage failed: {source}")]
    Stage {
        stage: Stage,
        #[source]
        source: OwlError,
    },
}

impl PipelineError {
    pub fn stage(&self) -> Option<Stage> {
        match self {
            Self::Config(_) => None,
            Self::Stage { stage, .. } => Some(*stage),
        }
    }
}

trait AtStage<T> {
    fn at(self, stage: Stage) -> std::result::Result<T, PipelineError>;
}

impl<T> AtStage<T> for Result<T> {
    fn at(self, stage: Stage) -> std::result::Result<T, PipelineError> {
        self.map_err(|source| PipelineError::Stage { stage, source })
    }
}

pub type PipelineResult<T> = std::result::Result<T, PipelineError>;

/// Loaded model and token files.
#[derive(Debug, Clone)]
pub struct Inputs {
    pub model: Checkpoint,
    pub calib: TokenCorpus,
    pub eval: TokenCorpus,
}

impl Inputs {
    pub fn load(cfg: &RunConfig) -> PipelineResult<Self> {
        cfg.validate().map_err(PipelineError::Config)?;
        for p in [Some(&cfg.model), Some(&cfg.tokens), cfg.eval_tokens.as_ref(), cfg.plan.as_ref()]
            .into_iter()
            .flatten()
        {
            if !p.exists() {
                return Err(PipelineError::Config(OwlError::Config(format!(
                    "{} does not exist",
                    p.display()
                ))));
            }
        }
        let model = Checkpoint::load(&cfg.model).at(Stage::Load)?;
        let calib = TokenCorpus::load(&cfg.tokens).at(Stage::Load)?;
        let eval = match &cfg.eval_tokens {
            Some(p) => TokenCorpus::load(p).at(Stage::Load)?,
            None => calib.clone(),
        };
        for corpus in [&calib, &eval] {
            if corpus.vocab_size != model.config.vocab_size {
                return Err(PipelineError::Stage {
                    stage: Stage::Load,
                    source: OwlError::DimensionMismatch(format!(
                        "token vocabulary {} vs model vocabulary {}",
                        corpus.vocab_size, model.config.vocab_size
                    )),
                });
            }
        }
        Ok(Self { model, calib, eval })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct StatsKey {
    pub model_hash: String,
    pub tokens_hash: String,
    pub n_seq: usize,
    pub seq_len: usize,
    pub seed: u64,
}

/// Calibration statistics keyed by what determines them.
#[derive(Debug, Default)]
pub struct StatsCache {
    entries: BTreeMap<StatsKey, CalibrationStats>,
}

impl StatsCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get_or_compute(
        &mut self,
        model: &Checkpoint,
        corpus: &TokenCorpus,
        n_seq: usize,
        seq_len: usize,
        seed: u64,
    ) -> Result<&CalibrationStats> {
        let key = StatsKey {
            model_hash: model.content_hash()?,
            tokens_hash: corpus.content_hash(),
            n_seq,
            seq_len,
            seed,
        };
        if !self.entries.contains_key(&key) {
            let stats = calibrate(model, corpus, n_seq, seq_len, seed)?;
            self.entries.insert(key.clone(), stats);
        }
        Ok(&self.entries[&key])
    }
}

/// Samples calibration windows with `seed` and accumulates input norms.
pub fn calibrate(
    model: &Checkpoint,
    corpus: &TokenCorpus,
    n_seq: usize,
    seq_len: usize,
    seed: u64,
) -> Result<CalibrationStats> {
    let mut rng = SeededRng::new(seed);
    let sequences = sample_calibration(corpus, n_seq, seq_len, &mut rng)?;
    collect_feature_norms(model, &sequences)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Plan {
    Sparsity(SparsityPlan),
    Nm(NmPlan),
}

impl Plan {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn sparsity(&self) -> Option<&SparsityPlan> {
        match self {
            Self::Sparsity(p) => Some(p),
            Self::Nm(_) => None,
        }
    }
}

/// Everything a run produces, before it is written out.
#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub profile: OutlierProfile,
    pub plan: Plan,
    pub masks: Vec<PruneMask>,
    pub pruned: Checkpoint,
    pub report: EvalReport,
}

/// Reads a plan file written by a previous run: either a bare sparsity
/// plan or the tagged form.
pub fn load_plan(path: &Path) -> Result<Plan> {
    let text = fs::read_to_string(path)?;
    if let Ok(p) = serde_json::from_str::<Plan>(&text) {
        return Ok(p);
    }
    Ok(Plan::Sparsity(SparsityPlan::from_json(&text)?))
}

/// Runs every stage after calibration in memory.
pub fn execute(cfg: &RunConfig, inputs: &Inputs, stats: &CalibrationStats) -> PipelineResult<PipelineOutput> {
    cfg.validate().map_err(PipelineError::Config)?;
    let model = &inputs.model;
    let profile =
        build_profile_with(model, stats, cfg.m_outlier, cfg.granularity, cfg.pooling).at(Stage::Profile)?;

    let plan = match (&cfg.plan, cfg.nm) {
        (Some(path), _) => load_plan(path).at(Stage::Allocate)?,
        (None, Some(nm)) => Plan::Nm(allocate_nm(&profile, nm.m, nm.n).at(Stage::Allocate)?),
        (None, None) => Plan::Sparsity(
            allocate_sparsity(&profile, cfg.scheme, cfg.sparsity, cfg.lambda, &layer_shapes(model))
                .at(Stage::Allocate)?,
        ),
    };

    let scores = score_layers(model, stats, cfg.metric).at(Stage::Mask)?;
    let masks = match &plan {
        Plan::Sparsity(p) => build_mask(&scores, p, cfg.effective_grouping()),
        Plan::Nm(p) => build_nm_mask(&scores, p),
    }
    .at(Stage::Mask)?;
    drop(scores);
    let pruned = apply_masks(model, &masks).at(Stage::Apply)?;

    let report = evaluate(cfg, inputs, stats, &pruned, plan.sparsity(), Some(profile.clone()))?;
    Ok(PipelineOutput {
        profile,
        plan,
        masks,
        pruned,
        report,
    })
}

/// Perplexity, realized sparsity and LOD before/after for `pruned`.
pub fn evaluate(
    cfg: &RunConfig,
    inputs: &Inputs,
    stats: &CalibrationStats,
    pruned: &Checkpoint,
    plan: Option<&SparsityPlan>,
    dense_profile: Option<OutlierProfile>,
) -> PipelineResult<EvalReport> {
    let perplexity = perplexity_with(
        pruned,
        pruned,
        &inputs.eval.tokens,
        cfg.eval_window(),
        cfg.max_eval_windows,
    )
    .at(Stage::Evaluate)?;
    let sparsity = sparsity_report(pruned, plan).at(Stage::Evaluate)?;
    let dense_profile = match dense_profile {
        Some(p) => p,
        None => build_profile_with(&inputs.model, stats, cfg.m_outlier, cfg.granularity, cfg.pooling)
            .at(Stage::Evaluate)?,
    };
    let after = post_prune_profile(&inputs.model, pruned, stats, cfg.m_outlier, cfg.granularity, cfg.pooling)
        .at(Stage::Evaluate)?;
    Ok(EvalReport {
        perplexity,
        sparsity,
        lod_before: Some(LodSummary::from(dense_profile)),
        lod_after: Some(LodSummary::from(after)),
        spmv: None,
    })
}

pub const PARTIAL_MARKER: &str = "PARTIAL";

fn write_file(dir: &Path, name: &str, bytes: &[u8]) -> Result<()> {
    fs::write(dir.join(name), bytes)?;
    Ok(())
}

/// Writes `profile.json`, `profile.csv`, `plan.json`, `masks.bin`,
/// `pruned.owlc`, `report.json` and `sparsity.csv` into `dir`.
pub fn write_artifacts(dir: &Path, out: &PipelineOutput) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_file(dir, "profile.json", out.profile.to_json()?.as_bytes())?;
    write_file(dir, "profile.csv", out.profile.to_csv().as_bytes())?;
    let plan_json = match &out.plan {
        Plan::Sparsity(p) => p.to_json()?,
        Plan::Nm(_) => out.plan.to_json()?,
    };
    write_file(dir, "plan.json", plan_json.as_bytes())?;
    write_file(dir, "masks.bin", &encode_masks(&out.masks))?;
    out.pruned.save(dir.join("pruned.owlc"))?;
    write_file(dir, "report.json", out.report.to_json()?.as_bytes())?;
    write_file(dir, "sparsity.csv", out.report.sparsity.to_csv().as_bytes())?;
    Ok(())
}

fn mark_partial(dir: &Path, err: &PipelineError) {
    if fs::create_dir_all(dir).is_ok() {
        let _ = fs::write(dir.join(PARTIAL_MARKER), format!("{err}\n"));
    }
}

/// Runs the whole pipeline from `cfg` and writes its artifacts to
/// `cfg.out_dir`. On a stage failure, a `PARTIAL` marker naming the stage
/// is left beside whatever was written.
pub fn run_pipeline(cfg: &RunConfig) -> PipelineResult<EvalReport> {
    let mut cache = StatsCache::new();
    run_pipeline_cached(cfg, &mut cache)
}

pub fn run_pipeline_cached(cfg: &RunConfig, cache: &mut StatsCache) -> PipelineResult<EvalReport> {
    let inputs = Inputs::load(cfg)?;
    run_loaded(cfg, &inputs, cache, &cfg.out_dir)
}

fn run_loaded(cfg: &RunConfig, inputs: &Inputs, cache: &mut StatsCache, dir: &Path) -> PipelineResult<EvalReport> {
    let _ = fs::remove_file(dir.join(PARTIAL_MARKER));
    let result = (|| {
        let stats = cache
            .get_or_compute(&inputs.model, &inputs.calib, cfg.nsamples, cfg.seqlen, cfg.seed)
            .at(Stage::Calibrate)?;
        let out = execute(cfg, inputs, stats)?;
        write_artifacts(dir, &out).at(Stage::Save)?;
        Ok(out.report)
    })();
    if let Err(e) = &result {
        mark_partial(dir, e);
    }
    result
}

/// A compared configuration: an allocation scheme, or the pooled global
/// ranking.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CompareScheme {
    Alloc(Scheme),
    Global,
}

impl FromStr for CompareScheme {
    type Err = OwlError;

    fn from_str(s: &str) -> Result<Self> {
        if s.trim().eq_ignore_ascii_case("global") {
            Ok(Self::Global)
        } else {
            s.parse().map(Self::Alloc)
        }
    }
}

impl fmt::Display for CompareScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Alloc(s) => s.fmt(f),
            Self::Global => f.write_str("global"),
        }
    }
}

impl CompareScheme {
    fn apply(self, base: &RunConfig, s: f64) -> RunConfig {
        let mut cfg = base.clone();
        cfg.sparsity = s;
        cfg.plan = None;
        cfg.nm = None;
        match self {
            Self::Alloc(scheme) => cfg.scheme = scheme,
            Self::Global => {
                cfg.scheme = Scheme::Uniform;
                cfg.grouping = Some(Grouping::Global);
            }
        }
        cfg
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub scheme: String,
    pub sparsity: f64,
    pub perplexity: f64,
    pub realized_sparsity: f64,
    pub lod_before: f64,
    pub lod_after: f64,
    pub plan: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareTable {
    pub dense_perplexity: f64,
    pub rows: Vec<CompareRow>,
}

impl CompareTable {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("scheme,sparsity,perplexity,realized_sparsity,lod_before,lod_after\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.scheme, r.sparsity, r.perplexity, r.realized_sparsity, r.lod_before, r.lod_after
            ));
        }
        s
    }

    pub fn get(&self, scheme: &str, sparsity: f64) -> Option<&CompareRow> {
        self.rows.iter().find(|r| r.scheme == scheme && r.sparsity == sparsity)
    }
}

fn row_of(scheme: String, s: f64, out: &PipelineOutput) -> CompareRow {
    let lod = |l: &Option<LodSummary>| l.as_ref().map_or(0.0, |l| l.lod_sum);
    CompareRow {
        scheme,
        sparsity: s,
        perplexity: out.report.perplexity,
        realized_sparsity: out.report.sparsity.overall,
        lod_before: lod(&out.report.lod_before),
        lod_after: lod(&out.report.lod_after),
        plan: out.plan.sparsity().map(SparsityPlan::sparsities).unwrap_or_default(),
    }
}

/// One pipeline per (scheme, sparsity), all sharing one calibration pass.
/// Each run's artifacts go to `out_dir/<scheme>_s<sparsity>`; the table
/// goes to `out_dir/compare.{json,csv}`.
pub fn run_compare(cfg: &RunConfig, schemes: &[CompareScheme], sparsities: &[f64]) -> PipelineResult<CompareTable> {
    if schemes.is_empty() || sparsities.is_empty() {
        return Err(PipelineError::Config(OwlError::Config(
            "compare needs at least one scheme and one sparsity".into(),
        )));
    }
    let inputs = Inputs::load(cfg)?;
    let mut cache = StatsCache::new();
    let stats = cache
        .get_or_compute(&inputs.model, &inputs.calib, cfg.nsamples, cfg.seqlen, cfg.seed)
        .at(Stage::Calibrate)?
        .clone();
    let dense_perplexity = perplexity_with(
        &inputs.model,
        &inputs.model,
        &inputs.eval.tokens,
        cfg.eval_window(),
        cfg.max_eval_windows,
    )
    .at(Stage::Evaluate)?;
    let mut rows = Vec::new();
    for &s in sparsities {
        for &scheme in schemes {
            let run_cfg = scheme.apply(cfg, s);
            let dir = cfg.out_dir.join(format!("{scheme}_s{s}"));
            let _ = fs::remove_file(dir.join(PARTIAL_MARKER));
            let out = execute(&run_cfg, &inputs, &stats).and_then(|out| {
                write_artifacts(&dir, &out).at(Stage::Save)?;
                Ok(out)
            });
            let out = out.inspect_err(|e| mark_partial(&dir, e))?;
            rows.push(row_of(scheme.to_string(), s, &out));
        }
    }
    let table = CompareTable { dense_perplexity, rows };
    fs::create_dir_all(&cfg.out_dir).map_err(OwlError::from).at(Stage::Save)?;
    let json = serde_json::to_string_pretty(&table).map_err(OwlError::from).at(Stage::Save)?;
    write_file(&cfg.out_dir, "compare.json", json.as_bytes()).at(Stage::Save)?;
    write_file(&cfg.out_dir, "compare.csv", table.to_csv().as_bytes()).at(Stage::Save)?;
    Ok(table)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub lambda: f64,
    pub m_outlier: f64,
    pub perplexity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub best_lambda: f64,
    pub best_m: f64,
    pub best_perplexity: f64,
    pub rows: Vec<SweepRow>,
}

impl SweepResult {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("lambda,m,perplexity\n");
        for r in &self.rows {
            s.push_str(&format!("{},{},{}\n", r.lambda, r.m_outlier, r.perplexity));
        }
        s
    }
}

/// Prunes and evaluates at every (λ, M) grid point. Points share one
/// calibration pass and run in parallel; rows are in grid order (λ outer)
/// and the first minimum wins ties.
pub fn sweep_loaded(
    cfg: &RunConfig,
    inputs: &Inputs,
    stats: &CalibrationStats,
    lambdas: &[f64],
    ms: &[f64],
) -> PipelineResult<SweepResult> {
    if lambdas.is_empty() || ms.is_empty() {
        return Err(PipelineError::Config(OwlError::Config("sweep grids must be non-empty".into())));
    }
    let points: Vec<(f64, f64)> = lambdas
        .iter()
        .flat_map(|&l| ms.iter().map(move |&m| (l, m)))
        .collect();
    let rows: Vec<SweepRow> = points
        .par_iter()
        .map(|&(lambda, m)| {
            let mut c = cfg.clone();
            c.lambda = lambda;
            c.m_outlier = m;
            c.plan = None;
            let out = execute(&c, inputs, stats)?;
            Ok(SweepRow {
                lambda,
                m_outlier: m,
                perplexity: out.report.perplexity,
            })
        })
        .collect::<PipelineResult<_>>()?;
    let best = rows
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.perplexity.total_cmp(&b.1.perplexity).then(a.0.cmp(&b.0)))
        .map(|(_, r)| r.clone())
        .expect("non-empty grid");
    Ok(SweepResult {
        best_lambda: best.lambda,
        best_m: best.m_outlier,
        best_perplexity: best.perplexity,
        rows,
    })
}

/// Loads inputs, calibrates once, sweeps, and writes
/// `out_dir/sweep.{json,csv}`.
pub fn sweep(cfg: &RunConfig, lambdas: &[f64], ms: &[f64]) -> PipelineResult<SweepResult> {
    let inputs = Inputs::load(cfg)?;
    let stats = calibrate(&inputs.model, &inputs.calib, cfg.nsamples, cfg.seqlen, cfg.seed).at(Stage::Calibrate)?;
    let result = sweep_loaded(cfg, &inputs, &stats, lambdas, ms)?;
    fs::create_dir_all(&cfg.out_dir).map_err(OwlError::from).at(Stage::Save)?;
    let json = serde_json::to_string_pretty(&result).map_err(OwlError::from).at(Stage::Save)?;
    write_file(&cfg.out_dir, "sweep.json", json.as_bytes()).at(Stage::Save)?;
    write_file(&cfg.out_dir, "sweep.csv", result.to_csv().as_bytes()).at(Stage::Save)?;
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nm_spec_parse() {
        assert_eq!("2:4".parse::<NmSpec>().unwrap(), NmSpec { n: 2.0, m: 4 });
        assert_eq!("2.5:8".parse::<NmSpec>().unwrap().n, 2.5);
        assert!("5:4".parse::<NmSpec>().is_err());
        assert!("2-4".parse::<NmSpec>().is_err());
    }

    #[test]
    fn config_defaults_and_validation() {
        let cfg = RunConfig::from_json(r#"{"model": "m.owlc", "tokens": "t.owlt"}"#).unwrap();
        assert_eq!(cfg.lambda, 0.08);
        assert_eq!(cfg.m_outlier, 5.0);
        cfg.validate().unwrap();
        assert!(RunConfig::from_json(r#"{"bogus": 1}"#).is_err());
        let bad = RunConfig {
            sparsity: 1.0,
            ..cfg.clone()
        };
        assert!(bad.validate().is_err());
        let bad = RunConfig {
            m_outlier: 1.0,
            ..cfg
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn compare_scheme_names() {
        assert_eq!("global".parse::<CompareScheme>().unwrap(), CompareScheme::Global);
        assert_eq!(
            "er-plus".parse::<CompareScheme>().unwrap(),
            CompareScheme::Alloc(Scheme::ErPlus)
        );
        assert_eq!(CompareScheme::Alloc(Scheme::OwlInverse).to_string(), "owl-inverse");
    }
}
