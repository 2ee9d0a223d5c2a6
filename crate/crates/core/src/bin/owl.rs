use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use owl_core::alloc::{allocate_bits, allocate_nm, allocate_ranks, allocate_sparsity, layer_shapes, unit_l1_norms, BitSelector};
use owl_core::compress::{quantize_checkpoint, svd_compress};
use owl_core::eval::{perplexity_with, spmv_bench_largest, sparsity_report, EvalReport, LodSummary};
use owl_core::outlier::{build_profile_with, post_prune_profile, OutlierProfile};
use owl_core::pipeline::{
    calibrate, load_plan, run_compare, run_pipeline, sweep, CompareScheme, Inputs, NmSpec, PipelineError, Plan,
    RunConfig,
};
use owl_core::{Checkpoint, OwlError, SeededRng};

#[derive(Parser)]
#[command(name = "owl", version, about = "Outlier-weighted layerwise sparsity toolkit")]
struct Cli {
    /// JSON run configuration; flags override its keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Default)]
struct RunArgs {
    #[arg(long)]
    model: Option<PathBuf>,
    /// Calibration tokens (OWLT).
    #[arg(long)]
    tokens: Option<PathBuf>,
    #[arg(long)]
    eval_tokens: Option<PathBuf>,
    #[arg(long)]
    scheme: Option<String>,
    #[arg(long)]
    metric: Option<String>,
    #[arg(long)]
    grouping: Option<String>,
    #[arg(long)]
    granularity: Option<String>,
    #[arg(long)]
    sparsity: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    /// Outlier threshold multiplier M.
    #[arg(long = "m-outlier", alias = "m")]
    m_outlier: Option<f64>,
    #[arg(long)]
    nsamples: Option<usize>,
    #[arg(long)]
    seqlen: Option<usize>,
    #[arg(long)]
    eval_seqlen: Option<usize>,
    #[arg(long)]
    max_eval_windows: Option<usize>,
    #[arg(long = "out")]
    out_dir: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Calibrate and write the outlier profile.
    Analyze {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Write a sparsity (or mixed N:M) plan.
    Plan {
        #[command(flatten)]
        run: RunArgs,
        /// Reuse a profile written by `analyze`.
        #[arg(long)]
        profile: Option<PathBuf>,
        #[arg(long)]
        nm: Option<String>,
    },
    /// Full prune run: plan, masks, pruned checkpoint and report.
    Prune {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        nm: Option<String>,
        #[arg(long)]
        plan: Option<PathBuf>,
    },
    /// Low-rank or mixed-precision compression driven by the profile.
    Compress {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_enum)]
        mode: CompressMode,
        /// Average rank reduction for `svd`.
        #[arg(long, default_value_t = 0.5)]
        rank_reduction: f64,
        #[arg(long, value_delimiter = ',', default_value = "2,3,4")]
        bits_menu: Vec<u32>,
        #[arg(long, default_value_t = 3.0)]
        bits_avg: f64,
        #[arg(long, default_value = "owl")]
        selector: String,
    },
    /// Evaluate a checkpoint; with `--dense`, also report LOD before/after.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        dense: Option<PathBuf>,
        #[arg(long)]
        plan: Option<PathBuf>,
        /// Per-unit sparsity and LOD table.
        #[arg(long)]
        csv: Option<PathBuf>,
        /// Time dense vs CSR matvec on the largest layer.
        #[arg(long)]
        bench: bool,
    },
    /// Compare allocation schemes at several sparsities.
    Compare {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_delimiter = ',', default_value = "global,uniform,er,er-plus,owl-inverse,owl")]
        schemes: Vec<String>,
        #[arg(long, value_delimiter = ',', default_value = "0.5,0.6,0.7")]
        sparsities: Vec<f64>,
    },
    /// Grid search over λ and M.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_delimiter = ',', default_value = "0.02,0.05,0.08,0.1,0.2")]
        lambdas: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_value = "3,5,7,10")]
        ms: Vec<f64>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum CompressMode {
    Svd,
    Quant,
}

enum Failure {
    Config(String),
    Stage(String),
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Config(_) => Self::Config(e.to_string()),
            PipelineError::Stage { .. } => Self::Stage(e.to_string()),
        }
    }
}

impl From<OwlError> for Failure {
    fn from(e: OwlError) -> Self {
        match e {
            OwlError::Config(_) => Self::Config(e.to_string()),
            _ => Self::Stage(e.to_string()),
        }
    }
}

fn config_err(e: impl std::fmt::Display) -> Failure {
    Failure::Config(e.to_string())
}

fn parse<T: std::str::FromStr>(s: &Option<String>, field: &str) -> Result<Option<T>, Failure>
where
    T::Err: std::fmt::Display,
{
    s.as_deref()
        .map(|v| v.parse::<T>().map_err(|e| config_err(format!("--{field}: {e}"))))
        .transpose()
}

fn build_config(cli: &Cli, run: &RunArgs) -> Result<RunConfig, Failure> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    macro_rules! set {
        ($($field:ident),*) => {
            $(if let Some(v) = run.$field.clone() { cfg.$field = v; })*
        };
    }
    set!(model, tokens, sparsity, lambda, m_outlier, nsamples, seqlen, out_dir);
    if run.eval_tokens.is_some() {
        cfg.eval_tokens = run.eval_tokens.clone();
    }
    if run.eval_seqlen.is_some() {
        cfg.eval_seqlen = run.eval_seqlen;
    }
    if run.max_eval_windows.is_some() {
        cfg.max_eval_windows = run.max_eval_windows;
    }
    if let Some(v) = parse(&run.scheme, "scheme")? {
        cfg.scheme = v;
    }
    if let Some(v) = parse(&run.metric, "metric")? {
        cfg.metric = v;
    }
    if let Some(v) = parse(&run.grouping, "grouping")? {
        cfg.grouping = Some(v);
    }
    if let Some(v) = parse(&run.granularity, "granularity")? {
        cfg.granularity = v;
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write(path: &Path, text: &str) -> Result<(), Failure> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(OwlError::from)?;
    }
    fs::write(path, text).map_err(OwlError::from)?;
    Ok(())
}

fn profile_of(cfg: &RunConfig, inputs: &Inputs) -> Result<(owl_core::CalibrationStats, OutlierProfile), Failure> {
    let stats = calibrate(&inputs.model, &inputs.calib, cfg.nsamples, cfg.seqlen, cfg.seed)?;
    let profile = build_profile_with(&inputs.model, &stats, cfg.m_outlier, cfg.granularity, cfg.pooling)?;
    Ok((stats, profile))
}

fn run(cli: Cli) -> Result<(), Failure> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(config_err)?;
    }
    match &cli.command {
        Command::Analyze { run } => {
            let cfg = build_config(&cli, run)?;
            let inputs = Inputs::load(&cfg)?;
            let (stats, profile) = profile_of(&cfg, &inputs)?;
            let out = &cfg.out_dir;
            write(&out.join("profile.json"), &profile.to_json()?)?;
            write(&out.join("profile.csv"), &profile.to_csv())?;
            write(&out.join("stats.json"), &serde_json::to_string(&stats).map_err(OwlError::from)?)?;
            println!("{} units, LOD sum {:.6}", profile.len(), profile.lod_sum());
        }
        Command::Plan { run, profile, nm } => {
            let cfg = build_config(&cli, run)?;
            let nm = parse::<NmSpec>(nm, "nm")?;
            let (profile, shapes) = match profile {
                Some(p) => {
                    let profile = OutlierProfile::from_json(&fs::read_to_string(p).map_err(OwlError::from)?)?;
                    let shapes = if cfg.model.as_os_str().is_empty() {
                        Vec::new()
                    } else {
                        layer_shapes(&Checkpoint::load(&cfg.model)?)
                    };
                    (profile, shapes)
                }
                None => {
                    let inputs = Inputs::load(&cfg)?;
                    let (_, profile) = profile_of(&cfg, &inputs)?;
                    (profile, layer_shapes(&inputs.model))
                }
            };
            let plan = match nm {
                Some(nm) => Plan::Nm(allocate_nm(&profile, nm.m, nm.n)?),
                None => Plan::Sparsity(allocate_sparsity(&profile, cfg.scheme, cfg.sparsity, cfg.lambda, &shapes)?),
            };
            let text = match &plan {
                Plan::Sparsity(p) => p.to_json()?,
                Plan::Nm(_) => plan.to_json()?,
            };
            write(&cfg.out_dir.join("plan.json"), &text)?;
            println!("plan written to {}", cfg.out_dir.join("plan.json").display());
        }
        Command::Prune { run, nm, plan } => {
            let mut cfg = build_config(&cli, run)?;
            cfg.nm = parse(nm, "nm")?;
            if plan.is_some() {
                cfg.plan = plan.clone();
            }
            let report = run_pipeline(&cfg)?;
            println!(
                "perplexity {:.4}, sparsity {:.4}, artifacts in {}",
                report.perplexity,
                report.sparsity.overall,
                cfg.out_dir.display()
            );
        }
        Command::Compress {
            run,
            mode,
            rank_reduction,
            bits_menu,
            bits_avg,
            selector,
        } => {
            let cfg = build_config(&cli, run)?;
            let inputs = Inputs::load(&cfg)?;
            let (_, profile) = profile_of(&cfg, &inputs)?;
            let shapes = layer_shapes(&inputs.model);
            let (compressed, plan_json) = match mode {
                CompressMode::Svd => {
                    let plan = allocate_ranks(&profile, *rank_reduction, cfg.lambda, &shapes)?;
                    let (ckpt, _) = svd_compress(&inputs.model, &plan)?;
                    (ckpt, serde_json::to_string_pretty(&plan).map_err(OwlError::from)?)
                }
                CompressMode::Quant => {
                    let selector: BitSelector = selector.parse().map_err(config_err)?;
                    let l1 = unit_l1_norms(&inputs.model, &profile)?;
                    let mut rng = SeededRng::new(cfg.seed);
                    let plan = allocate_bits(&profile, bits_menu, *bits_avg, selector, Some(&l1), &mut rng)?;
                    let (ckpt, _) = quantize_checkpoint(&inputs.model, &plan)?;
                    (ckpt, serde_json::to_string_pretty(&plan).map_err(OwlError::from)?)
                }
            };
            let ppl = perplexity_with(
                &compressed,
                &compressed,
                &inputs.eval.tokens,
                cfg.eval_window(),
                cfg.max_eval_windows,
            )?;
            let report = EvalReport {
                perplexity: ppl,
                sparsity: sparsity_report(&compressed, None)?,
                lod_before: Some(LodSummary::from(profile)),
                lod_after: None,
                spmv: None,
            };
            let out = &cfg.out_dir;
            write(&out.join("compress_plan.json"), &plan_json)?;
            fs::create_dir_all(out).map_err(OwlError::from)?;
            compressed.save(out.join("compressed.owlc"))?;
            write(&out.join("report.json"), &report.to_json()?)?;
            println!("perplexity {ppl:.4}, artifacts in {}", out.display());
        }
        Command::Eval {
            run,
            dense,
            plan,
            csv,
            bench,
        } => {
            let cfg = build_config(&cli, run)?;
            let inputs = Inputs::load(&cfg)?;
            let ckpt = &inputs.model;
            let plan = plan.as_deref().map(load_plan).transpose()?;
            let ppl = perplexity_with(ckpt, ckpt, &inputs.eval.tokens, cfg.eval_window(), cfg.max_eval_windows)?;
            let sparsity = sparsity_report(ckpt, plan.as_ref().and_then(Plan::sparsity))?;
            let (lod_before, lod_after) = match dense {
                Some(path) => {
                    let dense = Checkpoint::load(path)?;
                    let stats = calibrate(&dense, &inputs.calib, cfg.nsamples, cfg.seqlen, cfg.seed)?;
                    let before = build_profile_with(&dense, &stats, cfg.m_outlier, cfg.granularity, cfg.pooling)?;
                    let after = post_prune_profile(&dense, ckpt, &stats, cfg.m_outlier, cfg.granularity, cfg.pooling)?;
                    (Some(LodSummary::from(before)), Some(LodSummary::from(after)))
                }
                None => (None, None),
            };
            let spmv = if *bench {
                Some(spmv_bench_largest(ckpt, 20, &mut SeededRng::new(cfg.seed))?)
            } else {
                None
            };
            let report = EvalReport {
                perplexity: ppl,
                sparsity,
                lod_before,
                lod_after,
                spmv,
            };
            write(&cfg.out_dir.join("eval.json"), &report.to_json()?)?;
            if let Some(path) = csv {
                write(path, &unit_table(&report))?;
            }
            println!("{}", report.to_json()?);
        }
        Command::Compare {
            run,
            schemes,
            sparsities,
        } => {
            let cfg = build_config(&cli, run)?;
            let schemes = schemes
                .iter()
                .map(|s| s.parse::<CompareScheme>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(config_err)?;
            let table = run_compare(&cfg, &schemes, sparsities)?;
            println!("dense perplexity {:.4}", table.dense_perplexity);
            print!("{}", table.to_csv());
        }
        Command::Sweep { run, lambdas, ms } => {
            let cfg = build_config(&cli, run)?;
            let result = sweep(&cfg, lambdas, ms)?;
            print!("{}", result.to_csv());
            println!(
                "best lambda {} M {} perplexity {:.4}",
                result.best_lambda, result.best_m, result.best_perplexity
            );
        }
    }
    Ok(())
}

/// `unit,realized,planned,d_before,d_after`, one row per layer and block.
fn unit_table(report: &EvalReport) -> String {
    let lookup = |l: &Option<LodSummary>, id: &str| {
        l.as_ref()
            .and_then(|l| l.profile.units.iter().find(|u| u.id == id))
            .map(|u| u.d.to_string())
            .unwrap_or_default()
    };
    let mut s = String::from("unit,realized,planned,d_before,d_after\n");
    for u in report.sparsity.layers.iter().chain(&report.sparsity.blocks) {
        s.push_str(&format!(
            "{},{},{},{},{}\n",
            u.id,
            u.realized,
            u.planned.map(|p| p.to_string()).unwrap_or_default(),
            lookup(&report.lod_before, &u.id),
            lookup(&report.lod_after, &u.id)
        ));
    }
    s
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(msg)) => {
            eprintln!("owl: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Stage(msg)) => {
            eprintln!("owl: {msg}");
            ExitCode::from(3)
        }
    }
}
