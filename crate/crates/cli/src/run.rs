//! Training runs on disk: fresh starts, resumption, teacher handling and summaries.

use std::fs;
use std::path::{Path, PathBuf};

use letlab_core::data::Corpus;
use letlab_core::models::{ModelConfig, TransformerModel};
use letlab_core::trainer::{
    latest_checkpoint, Checkpoint, CheckpointKind, Mode, RunIo, TrainConfig, Trainer, FINAL_CHECKPOINT, METRICS_FILE,
};
use serde::{Deserialize, Serialize};

use crate::config::RunConfigFile;
use crate::error::CliError;

pub const CONFIG_ECHO: &str = "config.json";
pub const TEACHER_RECORD: &str = "teacher.json";
pub const SUMMARY_FILE: &str = "summary.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TeacherRecord {
    pub path: PathBuf,
    pub digest_before: String,
    pub digest_after: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub mode: Mode,
    pub completed: bool,
    pub start_step: u64,
    pub final_step: u64,
    pub total_steps: u64,
    pub final_test_ppl: Option<f64>,
    pub teacher: Option<TeacherRecord>,
}

impl RunSummary {
    pub fn steps_run(&self) -> u64 {
        self.final_step - self.start_step
    }
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::check(format!("{}: {e}", path.display()))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable");
    text.push('\n');
    fs::write(path, text).map_err(|e| io_err(path, e))
}

/// Loads a frozen teacher, exiting with "missing prerequisite" on any problem.
pub fn load_teacher(path: &Path, expected: &ModelConfig) -> Result<TransformerModel, CliError> {
    if !path.exists() {
        return Err(CliError::missing(format!(
            "teacher checkpoint {} not found; run `let-lab pretrain-teacher` first",
            path.display()
        )));
    }
    let ckpt = Checkpoint::load(path).map_err(CliError::prerequisite)?;
    if ckpt.header.kind != CheckpointKind::Teacher {
        return Err(CliError::missing(format!("{} is not a teacher checkpoint", path.display())));
    }
    if &ckpt.header.model_config != expected {
        return Err(CliError::missing(format!(
            "teacher checkpoint {} was trained with a different model_t",
            path.display()
        )));
    }
    ckpt.model().map_err(CliError::prerequisite)
}

/// Removes the artifacts of an earlier run so a fresh start cannot be
/// confused with a resumable one.
fn clear_run_dir(dir: &Path) -> Result<(), CliError> {
    for name in [METRICS_FILE, FINAL_CHECKPOINT, SUMMARY_FILE, TEACHER_RECORD] {
        let p = dir.join(name);
        if p.exists() {
            fs::remove_file(&p).map_err(|e| io_err(&p, e))?;
        }
    }
    let ck = dir.join("checkpoints");
    if ck.exists() {
        fs::remove_dir_all(&ck).map_err(|e| io_err(&ck, e))?;
    }
    Ok(())
}

pub struct RunRequest<'a> {
    pub train: &'a TrainConfig,
    pub model: &'a ModelConfig,
    pub kind: CheckpointKind,
    pub train_corpus: &'a Corpus,
    pub test_corpus: &'a Corpus,
    pub dir: &'a Path,
    pub teacher: Option<(&'a TransformerModel, &'a Path)>,
    pub resume: bool,
    pub stop_at: Option<u64>,
    /// Written verbatim as the run's config echo.
    pub echo: &'a RunConfigFile,
}

/// Trains into `dir`, resuming from its latest checkpoint when asked.
pub fn execute(req: RunRequest<'_>) -> Result<RunSummary, CliError> {
    fs::create_dir_all(req.dir).map_err(|e| io_err(req.dir, e))?;
    let teacher = if req.train.mode.needs_teacher() {
        Some(req.teacher.ok_or_else(|| {
            CliError::missing(format!("mode {:?} needs a teacher checkpoint", req.train.mode))
        })?)
    } else {
        None
    };
    let latest = if req.resume { latest_checkpoint(req.dir)? } else { None };
    let trainer = match latest {
        Some(path) => {
            let ckpt = Checkpoint::load(&path)?;
            if ckpt.header.train_config.as_ref() != Some(req.train) || &ckpt.header.model_config != req.model {
                return Err(CliError::usage(format!(
                    "{} was written with a different configuration; rerun without --resume",
                    path.display()
                )));
            }
            Trainer::resume(ckpt, teacher.map(|t| t.0))?
        }
        None => {
            clear_run_dir(req.dir)?;
            Trainer::new(req.train.clone(), req.model.clone(), teacher.map(|t| t.0))?
        }
    };
    write_json(&req.dir.join(CONFIG_ECHO), req.echo)?;
    let start_step = trainer.step();
    let digest_before = teacher.map(|t| t.0.params().digest());
    let io = RunIo {
        train: req.train_corpus,
        test: Some(req.test_corpus),
        dir: Some(req.dir),
        kind: req.kind,
    };
    let out = trainer.run(&io, req.stop_at)?;
    let teacher_record = teacher.zip(digest_before).map(|((t, path), before)| TeacherRecord {
        path: path.to_path_buf(),
        digest_before: before,
        digest_after: t.params().digest(),
    });
    if let Some(rec) = &teacher_record {
        write_json(&req.dir.join(TEACHER_RECORD), rec)?;
    }
    let final_test_ppl = match out.final_ppl {
        Some(p) => Some(p),
        None => last_eval(req.dir)?,
    };
    let summary = RunSummary {
        mode: req.train.mode,
        completed: out.completed,
        start_step,
        final_step: out.trainer_step,
        total_steps: req.train.total_steps,
        final_test_ppl,
        teacher: teacher_record,
    };
    write_json(&req.dir.join(SUMMARY_FILE), &summary)?;
    Ok(summary)
}

fn last_eval(dir: &Path) -> Result<Option<f64>, CliError> {
    let path = dir.join(METRICS_FILE);
    if !path.exists() {
        return Ok(None);
    }
    let log = letlab_core::metrics::read_log(&path)?;
    Ok(log.iter().rev().find_map(|r| r.field("test_ppl").ok().flatten()))
}

/// Pretrains the small model as a baseline run tagged as a teacher.
pub fn pretrain_teacher(cfg: &RunConfigFile, resume: bool) -> Result<RunSummary, CliError> {
    let (train, test) = cfg.corpora()?;
    execute(RunRequest {
        train: &cfg.teacher_train,
        model: &cfg.model_t,
        kind: CheckpointKind::Teacher,
        train_corpus: &train,
        test_corpus: &test,
        dir: &cfg.teacher_dir(),
        teacher: None,
        resume,
        stop_at: None,
        echo: cfg,
    })
}

/// Trains the target model in `cfg.train.mode` into `dir`.
pub fn train_target(
    cfg: &RunConfigFile,
    dir: &Path,
    teacher_path: &Path,
    resume: bool,
    stop_at: Option<u64>,
) -> Result<RunSummary, CliError> {
    let teacher = if cfg.train.mode.needs_teacher() {
        Some(load_teacher(teacher_path, &cfg.model_t)?)
    } else {
        None
    };
    let (train, test) = cfg.corpora()?;
    execute(RunRequest {
        train: &cfg.train,
        model: &cfg.model_m,
        kind: CheckpointKind::Model,
        train_corpus: &train,
        test_corpus: &test,
        dir,
        teacher: teacher.as_ref().map(|t| (t, teacher_path)),
        resume,
        stop_at,
        echo: cfg,
    })
}
