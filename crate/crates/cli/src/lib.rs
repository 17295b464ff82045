//! `let-lab`: configuration-driven front end for the late-to-early training laboratory.

pub mod ablate;
pub mod config;
pub mod error;
pub mod run;

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use letlab_core::checks::{self, Scope};
use letlab_core::data::write_token_file;
use letlab_core::metrics::perplexity;
use letlab_core::theory::{curvature_sweep, SweepConfig, MAX_DENSE_PARAMS};
use letlab_core::trainer::{Checkpoint, Mode, FINAL_CHECKPOINT};
use serde::Serialize;

use crate::ablate::Suite;
use crate::config::{Overrides, RunConfigFile, DEFAULT_OUTPUT_DIR, OUT_ENV};
use crate::error::{CliError, EXIT_OK, EXIT_USAGE};
use crate::run::write_json;

#[derive(Debug, Parser)]
#[command(name = "let-lab", version, about = "Late-to-early training laboratory")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Run configuration (JSON).
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the top-level seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write train/test token files and a manifest.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Train the small model and save it as a frozen teacher.
    PretrainTeacher {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        resume: bool,
    },
    /// Train the target model.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_parser = parse_mode)]
        mode: Option<Mode>,
        /// Run directory name under `<output_dir>/runs` (default: the mode).
        #[arg(long)]
        run_name: Option<String>,
        /// Teacher checkpoint (default: `<output_dir>/teacher/final.ckpt`).
        #[arg(long)]
        teacher: Option<PathBuf>,
        #[arg(long)]
        resume: bool,
    },
    /// Test perplexity of a checkpoint.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_parser = parse_mode)]
        mode: Option<Mode>,
        #[arg(long)]
        run_name: Option<String>,
        /// Checkpoint to evaluate (default: the run's final checkpoint).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Run an ablation grid.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_parser = parse_suite)]
        suite: Suite,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[arg(long)]
        resume: bool,
        #[arg(long)]
        teacher: Option<PathBuf>,
    },
    /// Hessian block structure of the projection loss on deep linear networks.
    VerifyTheory {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "L", default_value_t = 4)]
        layers: usize,
        #[arg(long = "d", default_value_t = 2)]
        dim: usize,
        #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
        k_list: Vec<usize>,
        #[arg(long, default_value_t = 10)]
        trials: usize,
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory (default: `<output_dir>/theory`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference gradient checks.
    Gradcheck {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_parser = parse_scope)]
        scope: Scope,
    },
}

fn parse_mode(s: &str) -> Result<Mode, String> {
    s.parse().map_err(|e: letlab_core::Error| e.to_string())
}

fn parse_suite(s: &str) -> Result<Suite, String> {
    s.parse().map_err(|e: CliError| e.message)
}

fn parse_scope(s: &str) -> Result<Scope, String> {
    s.parse().map_err(|e: letlab_core::Error| e.to_string())
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match execute(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {}", e.message);
            e.code
        }
    }
}

fn load(common: &Common, mode: Option<Mode>) -> Result<RunConfigFile, CliError> {
    RunConfigFile::load(
        &common.config,
        &Overrides {
            mode,
            seed: common.seed,
        },
    )
}

fn print_json<T: Serialize>(value: &T) {
    println!("{}", serde_json::to_string(value).expect("serializable"));
}

pub fn run_dir(cfg: &RunConfigFile, run_name: Option<&str>) -> PathBuf {
    let name = run_name.map_or_else(|| mode_name(cfg.train.mode), str::to_string);
    cfg.output_dir.join("runs").join(name)
}

fn mode_name(mode: Mode) -> String {
    serde_json::to_value(mode)
        .ok()
        .and_then(|v| v.as_str().map(str::to_string))
        .expect("modes serialize as strings")
}

/// Output root for commands whose config file is optional.
fn output_root(config: Option<&Path>) -> Result<PathBuf, CliError> {
    if let Some(path) = config {
        return Ok(RunConfigFile::load(path, &Overrides::default())?.output_dir);
    }
    Ok(match std::env::var_os(OUT_ENV) {
        Some(dir) if !dir.is_empty() => PathBuf::from(dir),
        _ => PathBuf::from(DEFAULT_OUTPUT_DIR),
    })
}

#[derive(Serialize)]
struct DataManifest {
    seed: u64,
    data_seed: Option<u64>,
    vocab_size: usize,
    train_tokens: usize,
    test_tokens: usize,
    train_fraction: f64,
    entropy_rate: Option<f64>,
    optimal_ppl: Option<f64>,
}

pub fn gen_data(cfg: &RunConfigFile) -> Result<PathBuf, CliError> {
    let (train, test) = cfg.corpora()?;
    let dir = cfg.data_dir();
    fs::create_dir_all(&dir).map_err(|e| CliError::check(format!("{}: {e}", dir.display())))?;
    write_token_file(&dir.join("train.tok"), &train)?;
    write_token_file(&dir.join("test.tok"), &test)?;
    let spec = cfg.markov_spec();
    let h = spec.as_ref().map(|s| s.entropy_rate());
    let manifest = DataManifest {
        seed: cfg.seed,
        data_seed: spec.as_ref().map(|s| s.seed),
        vocab_size: train.vocab_size(),
        train_tokens: train.len(),
        test_tokens: test.len(),
        train_fraction: cfg.data.train_fraction,
        entropy_rate: h,
        optimal_ppl: h.map(f64::exp),
    };
    write_json(&dir.join("manifest.json"), &manifest)?;
    print_json(&manifest);
    Ok(dir)
}

#[derive(Serialize)]
struct EvalOutput {
    checkpoint: PathBuf,
    step: u64,
    test_ppl: f64,
    optimal_ppl: Option<f64>,
}

fn eval(cfg: &RunConfigFile, checkpoint: &Path) -> Result<(), CliError> {
    if !checkpoint.exists() {
        return Err(CliError::missing(format!("checkpoint {} not found", checkpoint.display())));
    }
    let ckpt = Checkpoint::load(checkpoint).map_err(CliError::prerequisite)?;
    let model = ckpt.model()?;
    let (_, test) = cfg.corpora()?;
    let ppl = perplexity(&model, &test, cfg.train.seq_len.min(model.config().max_seq_len), cfg.train.batch_size)?;
    print_json(&EvalOutput {
        checkpoint: checkpoint.to_path_buf(),
        step: ckpt.header.step,
        test_ppl: ppl,
        optimal_ppl: cfg.markov_spec().map(|s| s.entropy_rate().exp()),
    });
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn verify_theory(
    config: Option<&Path>,
    layers: usize,
    dim: usize,
    ks: Vec<usize>,
    trials: usize,
    seed: Option<u64>,
    out: Option<PathBuf>,
) -> Result<(), CliError> {
    if layers == 0 || dim == 0 || trials == 0 || ks.is_empty() {
        return Err(CliError::usage("--L, --d, --trials and --k-list must be positive/nonempty"));
    }
    if let Some(&k) = ks.iter().find(|&&k| k == 0 || k > layers) {
        return Err(CliError::usage(format!("alignment depth k={k} must lie in 1..={layers}")));
    }
    let n = layers * dim * dim;
    if n > MAX_DENSE_PARAMS {
        return Err(CliError::missing(format!(
            "{n} parameters exceed the dense Hessian limit of {MAX_DENSE_PARAMS}; use a smaller --L or --d"
        )));
    }
    let mut cfg = SweepConfig::new(layers, dim, ks, trials);
    cfg.seed = seed.unwrap_or(0);
    let outcome = curvature_sweep(&cfg)?;
    let dir = match out {
        Some(d) => d,
        None => output_root(config)?.join("theory"),
    };
    outcome.write(&dir)?;
    for s in &outcome.per_k {
        println!(
            "k={} mean_|H|_F={:.6e} max_|H|_F={:.6e} bound={:.6e}",
            s.k, s.mean_total_norm, s.max_total_norm, s.bound
        );
    }
    for c in &outcome.claims {
        println!("{} {}: {}", if c.pass { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    if outcome.all_pass() {
        Ok(())
    } else {
        Err(CliError::check("one or more structural claims failed"))
    }
}

fn gradcheck(scope: Scope) -> Result<(), CliError> {
    let report = checks::run(scope)?;
    println!("{report}");
    let bad: Vec<String> = report.offenders().iter().map(|i| format!("{} ({:.3e})", i.name, i.worst)).collect();
    if bad.is_empty() {
        Ok(())
    } else {
        Err(CliError::check(format!("gradient check failed: {}", bad.join(", "))))
    }
}

pub fn execute(command: Command) -> Result<(), CliError> {
    match command {
        Command::GenData { common } => gen_data(&load(&common, None)?).map(|_| ()),
        Command::PretrainTeacher { common, resume } => {
            let cfg = load(&common, None)?;
            let summary = run::pretrain_teacher(&cfg, resume)?;
            print_json(&summary);
            Ok(())
        }
        Command::Train {
            common,
            mode,
            run_name,
            teacher,
            resume,
        } => {
            let cfg = load(&common, mode)?;
            let dir = run_dir(&cfg, run_name.as_deref());
            let teacher = teacher.unwrap_or_else(|| cfg.teacher_checkpoint());
            let summary = run::train_target(&cfg, &dir, &teacher, resume, None)?;
            print_json(&summary);
            if summary.completed {
                Ok(())
            } else {
                Err(CliError::check("run stopped before total_steps"))
            }
        }
        Command::Eval {
            common,
            mode,
            run_name,
            checkpoint,
        } => {
            let cfg = load(&common, mode)?;
            let path = checkpoint.unwrap_or_else(|| run_dir(&cfg, run_name.as_deref()).join(FINAL_CHECKPOINT));
            eval(&cfg, &path)
        }
        Command::Ablate {
            common,
            suite,
            jobs,
            resume,
            teacher,
        } => {
            if jobs == 0 {
                return Err(CliError::usage("--jobs must be at least 1"));
            }
            let cfg = load(&common, None)?;
            let teacher = teacher.unwrap_or_else(|| cfg.teacher_checkpoint());
            let report = ablate::run_suite(&cfg, suite, &teacher, jobs, resume)?;
            for c in &report.cells {
                match (&c.summary, &c.error) {
                    (Some(s), _) => println!(
                        "{} {}: steps {}..{} test_ppl {}",
                        if c.ok { "ok  " } else { "FAIL" },
                        c.id,
                        s.start_step,
                        s.final_step,
                        s.final_test_ppl.map_or("-".into(), |p| format!("{p:.5}"))
                    ),
                    (None, e) => println!("FAIL {}: {}", c.id, e.as_deref().unwrap_or("unknown error")),
                }
            }
            if report.all_ok() {
                Ok(())
            } else {
                let failed: Vec<&str> = report.cells.iter().filter(|c| !c.ok).map(|c| c.id.as_str()).collect();
                Err(CliError::check(format!("cells failed: {}", failed.join(", "))))
            }
        }
        Command::VerifyTheory {
            config,
            layers,
            dim,
            k_list,
            trials,
            seed,
            out,
        } => verify_theory(config.as_deref(), layers, dim, k_list, trials, seed, out),
        Command::Gradcheck { config: _, scope } => gradcheck(scope),
    }
}
