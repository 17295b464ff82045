//! Training loop: baseline, late-to-early alignment, reverse distillation and
//! distill-then-standard, with AdamW, warmup-cosine schedule and checkpoints.

mod checkpoint;
mod losses;
mod optim;

pub use checkpoint::{Checkpoint, CheckpointHeader, CheckpointKind, ManifestEntry, TensorGroup, CHECKPOINT_MAGIC};
pub use losses::{loss_nll, loss_rkd, loss_total};
pub use optim::{adamw_update, clip_global_norm, global_norm, AdamWConfig, OptimizerState};

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::alignment::{cosine_similarity_metric, interpolate_to, AlignmentSpec};
use crate::data::{BatchCursor, Batches, Corpus, TokenBatch};
use crate::error::{Error, Result};
use crate::metrics::{self, EvalRecord, LogRecord, LogWriter, StepRecord};
use crate::models::{ModelConfig, TransformerModel};
use crate::seeding;
use crate::tensor::{Graph, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Baseline,
    Let,
    Rkd,
    KdThenStandard,
}

impl Mode {
    pub fn needs_teacher(self) -> bool {
        self != Mode::Baseline
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| Error::Config(format!("unknown mode `{s}` (baseline, let, rkd, kd_then_standard)")))
    }
}

fn d_warmup() -> f64 {
    0.10
}
fn d_final() -> f64 {
    0.10
}
fn d_beta1() -> f64 {
    0.9
}
fn d_beta2() -> f64 {
    0.999
}
fn d_eps() -> f64 {
    1e-8
}
fn d_wd() -> f64 {
    0.01
}
fn d_clip() -> f64 {
    1.0
}
fn d_batch() -> usize {
    16
}
fn d_seq() -> usize {
    64
}
fn d_lr() -> f64 {
    1e-3
}
fn d_eval() -> u64 {
    100
}
fn d_one() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: Mode,
    pub total_steps: u64,
    #[serde(default)]
    pub alignment: Option<AlignmentSpec>,
    #[serde(default)]
    pub n_kd: u64,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default = "d_seq")]
    pub seq_len: usize,
    #[serde(default = "d_lr")]
    pub peak_lr: f64,
    #[serde(default = "d_warmup")]
    pub warmup_fraction: f64,
    #[serde(default = "d_final")]
    pub final_lr_fraction: f64,
    #[serde(default = "d_beta1")]
    pub adam_beta1: f64,
    #[serde(default = "d_beta2")]
    pub adam_beta2: f64,
    #[serde(default = "d_eps")]
    pub adam_eps: f64,
    #[serde(default = "d_wd")]
    pub weight_decay: f64,
    #[serde(default = "d_clip")]
    pub grad_clip_norm: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "d_eval")]
    pub eval_interval: u64,
    /// Softening temperature of both distributions in the distillation term.
    #[serde(default = "d_one")]
    pub rkd_temperature: f64,
    /// Weight of the distillation term next to the NLL.
    #[serde(default = "d_one")]
    pub rkd_weight: f64,
}

impl TrainConfig {
    pub fn new(mode: Mode, total_steps: u64) -> Self {
        Self {
            mode,
            total_steps,
            alignment: (mode == Mode::Let).then(AlignmentSpec::default),
            n_kd: 0,
            batch_size: d_batch(),
            seq_len: d_seq(),
            peak_lr: d_lr(),
            warmup_fraction: d_warmup(),
            final_lr_fraction: d_final(),
            adam_beta1: d_beta1(),
            adam_beta2: d_beta2(),
            adam_eps: d_eps(),
            weight_decay: d_wd(),
            grad_clip_norm: d_clip(),
            seed: 0,
            eval_interval: d_eval(),
            rkd_temperature: 1.0,
            rkd_weight: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.total_steps == 0 {
            return fail("total_steps must be at least 1".into());
        }
        if !(self.warmup_fraction > 0.0 && self.warmup_fraction < 1.0) {
            return fail(format!("warmup_fraction must lie in (0, 1), got {}", self.warmup_fraction));
        }
        if !(0.0..=1.0).contains(&self.final_lr_fraction) {
            return fail(format!("final_lr_fraction must lie in [0, 1], got {}", self.final_lr_fraction));
        }
        if self.batch_size == 0 || self.seq_len == 0 || self.eval_interval == 0 {
            return fail("batch_size, seq_len and eval_interval must be positive".into());
        }
        if !(self.peak_lr > 0.0 && self.peak_lr.is_finite()) {
            return fail(format!("peak_lr must be positive, got {}", self.peak_lr));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return fail("adam betas must lie in [0, 1)".into());
        }
        if self.adam_eps <= 0.0 || self.weight_decay < 0.0 || self.grad_clip_norm < 0.0 {
            return fail("adam_eps must be positive; weight_decay and grad_clip_norm non-negative".into());
        }
        if !(self.rkd_temperature > 0.0) || self.rkd_weight < 0.0 {
            return fail("rkd_temperature must be positive and rkd_weight non-negative".into());
        }
        match (self.mode, &self.alignment) {
            (Mode::Let, None) => return fail("mode `let` requires an alignment spec".into()),
            (_, Some(a)) => a.validate()?,
            _ => {}
        }
        if self.mode == Mode::KdThenStandard && self.n_kd > self.total_steps {
            return fail(format!("n_kd {} exceeds total_steps {}", self.n_kd, self.total_steps));
        }
        Ok(())
    }

    pub fn warmup_steps(&self) -> f64 {
        self.warmup_fraction * self.total_steps as f64
    }

    fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
            weight_decay: self.weight_decay,
            clip_norm: self.grad_clip_norm,
        }
    }
}

/// Linear warmup from 0 to `peak_lr`, then cosine decay to
/// `final_lr_fraction·peak_lr` at `total_steps`.
pub fn lr_at(step: u64, cfg: &TrainConfig) -> f64 {
    let peak = cfg.peak_lr;
    let warmup = cfg.warmup_steps();
    let s = step.min(cfg.total_steps) as f64;
    if s < warmup {
        return peak * s / warmup;
    }
    let span = cfg.total_steps as f64 - warmup;
    let progress = if span > 0.0 { (s - warmup) / span } else { 1.0 };
    let floor = cfg.final_lr_fraction * peak;
    floor + (peak - floor) * 0.5 * (1.0 + (PI * progress).cos())
}

fn diverged(e: Error, step: u64) -> Error {
    match e {
        Error::NonFinite { op } => Error::Divergence { what: op, step },
        other => other,
    }
}

/// Model, optimizer and data position of one run; the teacher is borrowed and never written.
pub struct Trainer<'t> {
    config: TrainConfig,
    model: TransformerModel,
    teacher: Option<&'t TransformerModel>,
    teacher_digest: Option<String>,
    opt: OptimizerState,
    cursor: BatchCursor,
    /// `(teacher_layer, target_layer)`, 1-based, for `let` runs.
    pair: Option<(usize, usize)>,
}

impl<'t> Trainer<'t> {
    /// Fresh run; the model is initialized from the `init` sub-stream of the seed.
    pub fn new(config: TrainConfig, model_config: ModelConfig, teacher: Option<&'t TransformerModel>) -> Result<Self> {
        let model = TransformerModel::init(model_config, seeding::substream(config.seed, "init"))?;
        Self::assemble(config, model, teacher, None, BatchCursor::default())
    }

    /// Continues from a checkpoint written by [`Trainer::checkpoint`].
    pub fn resume(ckpt: Checkpoint, teacher: Option<&'t TransformerModel>) -> Result<Self> {
        let config = ckpt
            .header
            .train_config
            .clone()
            .ok_or_else(|| Error::Config("checkpoint carries no training config".into()))?;
        let model = ckpt.model()?;
        Self::assemble(config, model, teacher, ckpt.optimizer, ckpt.header.cursor)
    }

    fn assemble(
        config: TrainConfig,
        model: TransformerModel,
        teacher: Option<&'t TransformerModel>,
        opt: Option<OptimizerState>,
        cursor: BatchCursor,
    ) -> Result<Self> {
        config.validate()?;
        let needs = config.mode.needs_teacher();
        if needs && teacher.is_none() {
            return Err(Error::Config(format!("mode {:?} needs a teacher model", config.mode)));
        }
        let teacher = if needs { teacher } else { None };
        if let Some(t) = teacher {
            if t.config().vocab_size != model.config().vocab_size {
                return Err(Error::Config(format!(
                    "teacher vocab {} differs from model vocab {}",
                    t.config().vocab_size,
                    model.config().vocab_size
                )));
            }
        }
        let pair = match (&config.alignment, teacher, config.mode) {
            (Some(spec), Some(t), Mode::Let) => Some(spec.layers(t.num_layers(), model.num_layers())?),
            _ => None,
        };
        if config.seq_len > model.config().max_seq_len {
            return Err(Error::Config(format!(
                "seq_len {} exceeds the model's max_seq_len {}",
                config.seq_len,
                model.config().max_seq_len
            )));
        }
        let opt = opt.unwrap_or_else(|| OptimizerState::new(model.params()));
        Ok(Self {
            teacher_digest: teacher.map(|t| t.params().digest()),
            config,
            model,
            teacher,
            opt,
            cursor,
            pair,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn model(&self) -> &TransformerModel {
        &self.model
    }

    pub fn into_model(self) -> TransformerModel {
        self.model
    }

    pub fn optimizer(&self) -> &OptimizerState {
        &self.opt
    }

    /// Completed updates.
    pub fn step(&self) -> u64 {
        self.opt.step
    }

    pub fn cursor(&self) -> BatchCursor {
        self.cursor
    }

    /// `(teacher_layer, target_layer)` aligned by this run, if any.
    pub fn layer_pair(&self) -> Option<(usize, usize)> {
        self.pair
    }

    pub fn checkpoint(&self, kind: CheckpointKind) -> Checkpoint {
        Checkpoint::new(kind, &self.model, Some(self.config.clone()), Some(self.opt.clone()), self.cursor)
    }

    fn teacher(&self) -> Result<&TransformerModel> {
        self.teacher.ok_or_else(|| Error::Config("teacher model missing".into()))
    }

    fn effective_mode(&self, step: u64) -> Mode {
        match self.config.mode {
            Mode::KdThenStandard if step < self.config.n_kd => Mode::Rkd,
            Mode::KdThenStandard => Mode::Baseline,
            m => m,
        }
    }

    /// One optimizer update on `batch`; returns the step's metrics record.
    pub fn train_step(&mut self, batch: &TokenBatch) -> Result<StepRecord> {
        let s = self.opt.step;
        self.train_step_inner(batch, s).map_err(|e| diverged(e, s))
    }

    fn train_step_inner(&mut self, batch: &TokenBatch, s: u64) -> Result<StepRecord> {
        let lr = lr_at(s + 1, &self.config);
        let mut g = Graph::new();
        let bound = self.model.bind(&mut g, true);
        let pass = self
            .model
            .forward_graph(&mut g, &bound, &batch.inputs, batch.batch_size, None)?;
        let logits = pass.logits.expect("full pass");
        let nll = loss_nll(&mut g, logits, &batch.targets)?;
        let mut rec = StepRecord {
            step: s,
            lr,
            lambda: 0.0,
            loss_nll: g.value(nll).item(),
            loss_proj: None,
            loss_total: 0.0,
            cos_sim: None,
            loss_kd: None,
            teacher_forward: false,
        };
        let total = match self.effective_mode(s) {
            Mode::Baseline => nll,
            Mode::Let => {
                let spec = self.config.alignment.as_ref().expect("validated");
                rec.lambda = spec.lambda_at(s);
                if rec.lambda > 0.0 {
                    let (t_layer, m_layer) = self.pair.expect("let runs resolve a layer pair");
                    let teacher = self.teacher()?;
                    let h_t = teacher_pass(teacher, batch, Some(t_layer))?.1;
                    let h_m = interpolate_to(&mut g, pass.hidden[m_layer], teacher.hidden_size())?;
                    let h_t = g.constant(h_t);
                    let proj = spec.projection_loss(&mut g, h_m, h_t)?;
                    rec.loss_proj = Some(g.value(proj).item());
                    rec.cos_sim = Some(cosine_similarity_metric(g.value(h_m), g.value(h_t))?);
                    rec.teacher_forward = true;
                    loss_total(&mut g, nll, Some(proj), s, spec)?
                } else {
                    nll
                }
            }
            Mode::Rkd | Mode::KdThenStandard => {
                let t_logits = teacher_pass(self.teacher()?, batch, None)?.0.expect("full pass");
                let t_logits = g.constant(t_logits);
                let kd = loss_rkd(&mut g, logits, t_logits, self.config.rkd_temperature)?;
                rec.loss_kd = Some(g.value(kd).item());
                rec.teacher_forward = true;
                let weighted = g.scale(kd, self.config.rkd_weight)?;
                g.add(nll, weighted)?
            }
        };
        rec.loss_total = g.value(total).item();
        if !rec.loss_total.is_finite() {
            return Err(Error::Divergence {
                what: "loss_total",
                step: s,
            });
        }
        let mut grads = g.backward(total)?;
        let mut grads: Vec<Tensor> = bound.iter().map(|&v| grads.take(v)).collect();
        drop(g);
        adamw_update(
            self.model.params_mut(),
            &mut grads,
            &mut self.opt,
            lr,
            &self.config.adamw(),
            s,
        )?;
        Ok(rec)
    }

    /// Trains up to `total_steps` (or `stop_at`, if earlier), evaluating and
    /// checkpointing every `eval_interval` steps and at the end.
    pub fn run(mut self, io: &RunIo<'_>, stop_at: Option<u64>) -> Result<RunOutput> {
        let end = stop_at.map_or(self.config.total_steps, |s| s.min(self.config.total_steps));
        let mut log = match io.dir {
            Some(dir) => Some(prepare_run_dir(dir, self.opt.step)?),
            None => None,
        };
        let mut records = Vec::new();
        let mut emit = |r: LogRecord, log: &mut Option<LogWriter>| -> Result<()> {
            if let Some(w) = log.as_mut() {
                w.write(&r)?;
            }
            records.push(r);
            Ok(())
        };
        let mut batches = if self.opt.step < end {
            Some(
                Batches::new(
                    io.train,
                    self.config.batch_size,
                    self.config.seq_len,
                    seeding::substream(self.config.seed, "shuffle"),
                )?
                .with_cursor(self.cursor),
            )
        } else {
            None
        };
        let mut final_ppl = None;
        while self.opt.step < end {
            let it = batches.as_mut().expect("created when steps remain");
            let batch = it.next_batch();
            let rec = self.train_step(&batch)?;
            self.cursor = it.cursor();
            emit(LogRecord::Step(rec), &mut log)?;
            let done = self.opt.step;
            let boundary = done % self.config.eval_interval == 0 || done == self.config.total_steps;
            if boundary {
                if let Some(test) = io.test {
                    let ppl = metrics::perplexity(&self.model, test, self.config.seq_len, self.config.batch_size)?;
                    final_ppl = Some(ppl);
                    emit(LogRecord::Eval(EvalRecord { step: done, test_ppl: ppl }), &mut log)?;
                }
            }
            if let (Some(dir), Some(w)) = (io.dir, log.as_mut()) {
                if boundary || done == end {
                    w.flush()?;
                    self.checkpoint(io.kind).save(&checkpoint_path(dir, done))?;
                }
            }
        }
        if let (Some(dir), Some(w)) = (io.dir, log.as_mut()) {
            w.flush()?;
            if self.opt.step == self.config.total_steps {
                self.checkpoint(io.kind).save(&dir.join(FINAL_CHECKPOINT))?;
            }
        }
        if let (Some(t), Some(d)) = (self.teacher, &self.teacher_digest) {
            if &t.params().digest() != d {
                return Err(Error::invalid("teacher parameters changed during the run"));
            }
        }
        Ok(RunOutput {
            completed: self.opt.step == self.config.total_steps,
            final_ppl,
            records,
            trainer_step: self.opt.step,
            model: self.model,
        })
    }
}

/// Teacher logits (unless stopped early) and its hidden state at `layer`
/// (the last layer when `stop_after` is `None`), computed without gradients.
fn teacher_pass(
    teacher: &TransformerModel,
    batch: &TokenBatch,
    stop_after: Option<usize>,
) -> Result<(Option<Tensor>, Tensor)> {
    let mut g = Graph::new();
    let bound = teacher.bind(&mut g, false);
    let pass = teacher.forward_graph(&mut g, &bound, &batch.inputs, batch.batch_size, stop_after)?;
    let h = g.value(*pass.hidden.last().expect("embedding state")).clone();
    Ok((pass.logits.map(|l| g.value(l).clone()), h))
}

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";
const CHECKPOINT_DIR: &str = "checkpoints";

pub fn checkpoint_path(dir: &Path, step: u64) -> PathBuf {
    dir.join(CHECKPOINT_DIR).join(format!("step_{step:08}.ckpt"))
}

/// Most recent periodic checkpoint in a run directory.
pub fn latest_checkpoint(dir: &Path) -> Result<Option<PathBuf>> {
    let ckdir = dir.join(CHECKPOINT_DIR);
    if !ckdir.is_dir() {
        return Ok(None);
    }
    let mut best: Option<(u64, PathBuf)> = None;
    for entry in fs::read_dir(&ckdir).map_err(|e| Error::io(&ckdir, e))? {
        let path = entry.map_err(|e| Error::io(&ckdir, e))?.path();
        let step = path
            .file_name()
            .and_then(|n| n.to_str())
            .and_then(|n| n.strip_prefix("step_")?.strip_suffix(".ckpt")?.parse::<u64>().ok());
        if let Some(s) = step {
            if best.as_ref().is_none_or(|(b, _)| s > *b) {
                best = Some((s, path));
            }
        }
    }
    Ok(best.map(|b| b.1))
}

/// Opens the run's metrics log: fresh for step 0, otherwise trimmed to the
/// records written up to `step` and reopened for appending.
fn prepare_run_dir(dir: &Path, step: u64) -> Result<LogWriter> {
    fs::create_dir_all(dir.join(CHECKPOINT_DIR)).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(METRICS_FILE);
    if step == 0 || !path.exists() {
        return LogWriter::create(&path);
    }
    let kept: Vec<LogRecord> = metrics::read_log(&path)?
        .into_iter()
        .filter(|r| match r {
            LogRecord::Step(s) => s.step < step,
            LogRecord::Eval(e) => e.step <= step,
        })
        .collect();
    let mut w = LogWriter::create(&path)?;
    for r in &kept {
        w.write(r)?;
    }
    w.flush()?;
    LogWriter::append(&path)
}

pub struct RunIo<'a> {
    pub train: &'a Corpus,
    pub test: Option<&'a Corpus>,
    /// Run directory for the metrics log and checkpoints; nothing is written when absent.
    pub dir: Option<&'a Path>,
    pub kind: CheckpointKind,
}

pub struct RunOutput {
    pub model: TransformerModel,
    pub records: Vec<LogRecord>,
    pub final_ppl: Option<f64>,
    pub completed: bool,
    pub trainer_step: u64,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(total: u64) -> TrainConfig {
        let mut c = TrainConfig::new(Mode::Baseline, total);
        c.peak_lr = 2.0;
        c
    }

    #[test]
    fn schedule_landmarks() {
        let c = cfg(1000);
        assert_eq!(lr_at(0, &c), 0.0);
        assert_eq!(lr_at(50, &c), 1.0);
        assert_eq!(lr_at(100, &c), 2.0);
        assert!((lr_at(1000, &c) - 0.2).abs() <= 1e-12 * 0.2);
        assert!((lr_at(550, &c) - 1.1).abs() < 1e-12);
    }

    #[test]
    fn config_validation() {
        let mut c = cfg(10);
        assert!(c.validate().is_ok());
        c.warmup_fraction = 1.0;
        assert!(c.validate().is_err());
        let mut c = cfg(10);
        c.mode = Mode::Let;
        assert!(c.validate().is_err());
        c.alignment = Some(AlignmentSpec::default());
        assert!(c.validate().is_ok());
        let mut c = cfg(10);
        c.mode = Mode::KdThenStandard;
        c.n_kd = 11;
        assert!(c.validate().is_err());
        assert!("let".parse::<Mode>().is_ok());
        assert!("lets".parse::<Mode>().is_err());
    }

    #[test]
    fn unknown_keys_rejected() {
        let bad = r#"{"mode":"baseline","total_steps":5,"peak_rl":0.1}"#;
        assert!(serde_json::from_str::<TrainConfig>(bad).is_err());
        let ok = r#"{"mode":"kd_then_standard","total_steps":5,"n_kd":2}"#;
        let c: TrainConfig = serde_json::from_str(ok).unwrap();
        assert_eq!((c.weight_decay, c.grad_clip_norm, c.warmup_fraction), (0.01, 1.0, 0.1));
    }
}
