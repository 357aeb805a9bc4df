//! The `fgd` command line: training runs, gradient checks, mask export and
//! hyper-parameter sweeps.
//!
//! Exit codes: 0 success, 1 failed checks or runtime error, 2 invalid
//! config or arguments, 3 non-finite loss.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::info;
use rayon::prelude::*;

use fgd_core::checks::{run_checks, Scope, DEFAULT_SEED};
use fgd_core::config::RunConfig;
use fgd_core::graph::OpKind;
use fgd_core::io::write_atomic;
use fgd_core::masks::BoxSet;
use fgd_core::pipeline::run::{dump_masks, load_state, METRICS_FILE};
use fgd_core::pipeline::{distill_run, generate_scene, scene_from_boxes, Dataset, RunSummary, TrainState};
use fgd_core::FgdError;

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_NON_FINITE: i32 = 3;

pub const SWEEP_PARAMS: [&str; 5] = ["temperature", "alpha", "beta", "gamma", "lambda"];
pub const SUMMARY_HEADER: &str = "value,steps,fea_fg,fea_bg,attention,focal,global,task,total,total_distill";

#[derive(Debug, Parser)]
#[command(name = "fgd", version, about = "Focal and global feature distillation on toy detectors")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Run config file; defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides the config output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a student with the configured distillation loss.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Finite-difference checks of every backward rule.
    Gradcheck {
        /// ops, masks, gcblock, losses or all.
        #[arg(long, default_value = "all")]
        scope: String,
        #[arg(long, default_value_t = DEFAULT_SEED)]
        seed: u64,
        /// Corrupt one backward rule (negative control).
        #[arg(long, hide = true)]
        sabotage: Option<String>,
    },
    /// Dump teacher and student masks for one scene.
    Masks {
        #[command(flatten)]
        common: Common,
        /// Seed of the generated scene.
        #[arg(long, default_value_t = 0)]
        image_seed: u64,
        /// Student checkpoint; without it the freshly initialised student is used.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Box file replacing the generated rectangles.
        #[arg(long)]
        boxes: Option<PathBuf>,
    },
    /// One training run per value of a hyper-parameter.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// temperature, alpha, beta, gamma or lambda.
        #[arg(long)]
        param: String,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', num_args = 0..)]
        values: Vec<String>,
        /// Run the values concurrently.
        #[arg(long)]
        parallel: bool,
    },
}

fn exit_code(e: &FgdError) -> i32 {
    match e {
        FgdError::Config(_) | FgdError::Parameter(_) | FgdError::Format(_) => EXIT_USAGE,
        FgdError::NonFinite { .. } => EXIT_NON_FINITE,
        _ => EXIT_FAILURE,
    }
}

fn fail(e: FgdError) -> i32 {
    eprintln!("error: {e}");
    exit_code(&e)
}

/// Loads the config (or defaults) and applies `--seed` and `--out`.
pub fn load_config(common: &Common) -> Result<RunConfig, FgdError> {
    let mut cfg = match &common.config {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| FgdError::Config(format!("cannot read {}: {e}", p.display())))?;
            RunConfig::parse(&text)?
        }
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(o) = &common.out {
        cfg.out_dir = o.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn init_logging() {
    let env = env_logger::Env::new().filter_or("FGD_LOG_LEVEL", "error");
    let _ = env_logger::Builder::from_env(env).format_timestamp(None).try_init();
}

/// Parses `args` (program name first) and runs the command.
pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    match Cli::try_parse_from(args) {
        Ok(cli) => run(cli),
        Err(e) => {
            let _ = e.print();
            if e.use_stderr() {
                EXIT_USAGE
            } else {
                EXIT_OK
            }
        }
    }
}

pub fn run(cli: Cli) -> i32 {
    match cli.command {
        Command::Train { common } => cmd_train(&common),
        Command::Gradcheck { scope, seed, sabotage } => cmd_gradcheck(&scope, seed, sabotage.as_deref()),
        Command::Masks { common, image_seed, checkpoint, boxes } => {
            cmd_masks(&common, image_seed, checkpoint.as_deref(), boxes.as_deref())
        }
        Command::Sweep { common, param, values, parallel } => cmd_sweep(&common, &param, &values, parallel),
    }
}

fn report_run(s: &RunSummary) {
    let n = s.reports.len();
    print!("wrote {} ({n} steps)", s.out_dir.join(METRICS_FILE).display());
    if let (Some(a), Some(b)) = (s.reports.first(), s.reports.last()) {
        print!("; total_distill {} -> {}", a.total_distill, b.total_distill);
    }
    if let Some((a, b)) = s.spatial_gap_change() {
        print!("; spatial attention gap {a} -> {b}");
    }
    println!();
}

pub fn cmd_train(common: &Common) -> i32 {
    let cfg = match load_config(common) {
        Ok(c) => c,
        Err(e) => return fail(e),
    };
    match distill_run(&cfg) {
        Ok(s) => {
            report_run(&s);
            EXIT_OK
        }
        Err(e) => fail(e),
    }
}

fn fault_kind(name: &str) -> Option<OpKind> {
    Some(match name {
        "weighted_sq_err" | "feature_loss" => OpKind::WeightedSqErr,
        "softmax" => OpKind::SoftmaxT,
        "layer_norm" => OpKind::LayerNorm,
        "conv1x1" => OpKind::Conv1x1,
        "matmul" => OpKind::MatMul,
        "abs" => OpKind::Abs,
        "relu" => OpKind::Relu,
        _ => return None,
    })
}

pub fn cmd_gradcheck(scope: &str, seed: u64, sabotage: Option<&str>) -> i32 {
    let scope: Scope = match scope.parse() {
        Ok(s) => s,
        Err(e) => return fail(e),
    };
    let fault = match sabotage.map(|s| (s, fault_kind(s))) {
        None => None,
        Some((_, Some(k))) => Some(k),
        Some((s, None)) => return fail(FgdError::Parameter(format!("unknown sabotage target {s:?}"))),
    };
    let outcomes = match run_checks(scope, seed, fault) {
        Ok(o) => o,
        Err(e) => return fail(e),
    };
    for o in &outcomes {
        println!("{o}");
    }
    let failed: Vec<&str> = outcomes.iter().filter(|o| !o.passed).map(|o| o.name.as_str()).collect();
    println!("{} checks, {} failed", outcomes.len(), failed.len());
    if failed.is_empty() {
        EXIT_OK
    } else {
        eprintln!("failing checks: {}", failed.join(", "));
        EXIT_FAILURE
    }
}

pub fn cmd_masks(common: &Common, image_seed: u64, checkpoint: Option<&Path>, boxes: Option<&Path>) -> i32 {
    let result = (|| {
        let cfg = load_config(common)?;
        let scene = match boxes {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| FgdError::Config(format!("cannot read box file {}: {e}", p.display())))?;
                scene_from_boxes(&cfg.scene, BoxSet::parse_text(&text)?, image_seed)?
            }
            None => generate_scene(&cfg.scene, image_seed)?,
        };
        let data = Dataset::generate(&cfg.scene, cfg.seed, cfg.num_scenes)?;
        let state = match checkpoint {
            Some(p) if !p.is_file() => {
                return Err(FgdError::Config(format!("checkpoint {} does not exist", p.display())))
            }
            Some(p) => load_state(&cfg, &data, p)?,
            None => TrainState::init(&cfg, &data)?,
        };
        let gaps = dump_masks(&cfg.out_dir, &state, &scene, &cfg.hyper_params()?)?;
        Ok((cfg.out_dir, gaps))
    })();
    match result {
        Ok((out, gaps)) => {
            println!("wrote masks to {}", out.display());
            for g in gaps {
                println!("level {}: spatial_l1={} channel_l1={}", g.level, g.spatial_l1, g.channel_l1);
            }
            EXIT_OK
        }
        Err(e) => fail(e),
    }
}

/// Subdirectory of a sweep run.
pub fn sweep_dir(out: &Path, param: &str, value: &str) -> PathBuf {
    out.join(format!("{param}_{value}"))
}

pub fn cmd_sweep(common: &Common, param: &str, values: &[String], parallel: bool) -> i32 {
    if values.is_empty() {
        return fail(FgdError::Config("sweep needs at least one value".into()));
    }
    if !SWEEP_PARAMS.contains(&param) {
        return fail(FgdError::Config(format!("cannot sweep {param:?}; expected one of {SWEEP_PARAMS:?}")));
    }
    let base = match load_config(common) {
        Ok(c) => c,
        Err(e) => return fail(e),
    };
    let mut configs = Vec::with_capacity(values.len());
    for v in values {
        let mut c = base.clone();
        if let Err(e) = c.set(param, v).and_then(|_| c.validate()) {
            return fail(e);
        }
        c.out_dir = sweep_dir(&base.out_dir, param, v);
        configs.push(c);
    }
    let run_one = |c: &RunConfig| {
        info!("sweep run {}", c.out_dir.display());
        distill_run(c)
    };
    let results: Vec<_> = if parallel {
        configs.par_iter().map(run_one).collect()
    } else {
        configs.iter().map(run_one).collect()
    };
    let mut summary = format!("{SUMMARY_HEADER}\n");
    let mut code = EXIT_OK;
    for (v, r) in values.iter().zip(results) {
        match r {
            Ok(s) => {
                report_run(&s);
                let _ = match s.reports.last() {
                    Some(r) => writeln!(
                        summary,
                        "{v},{},{},{},{},{},{},{},{},{}",
                        s.reports.len(),
                        r.fea_fg,
                        r.fea_bg,
                        r.attention,
                        r.focal,
                        r.global_,
                        r.task,
                        r.total,
                        r.total_distill
                    ),
                    None => writeln!(summary, "{v},0,,,,,,,,"),
                };
            }
            Err(e) => {
                eprintln!("run {param}={v} failed");
                code = code.max(fail(e));
            }
        }
    }
    let path = base.out_dir.join("summary.csv");
    if let Err(e) = write_atomic(&path, summary.as_bytes()) {
        return fail(e);
    }
    println!("wrote {}", path.display());
    code
}
