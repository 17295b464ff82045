//! Run-log records, held-out perplexity, and comparison tables.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{sequential_batches, Corpus};
use crate::error::{Error, Result};
use crate::models::TransformerModel;
use crate::tensor::{Graph, Tensor};

pub const DEFAULT_WINDOW: usize = 50;

/// One optimizer step. `step` is the 0-based index of the update.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepRecord {
    pub step: u64,
    pub lr: f64,
    pub lambda: f64,
    pub loss_nll: f64,
    pub loss_proj: Option<f64>,
    pub loss_total: f64,
    pub cos_sim: Option<f64>,
    pub loss_kd: Option<f64>,
    pub teacher_forward: bool,
}

/// Held-out perplexity after `step` completed updates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalRecord {
    pub step: u64,
    pub test_ppl: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LogRecord {
    Step(StepRecord),
    Eval(EvalRecord),
}

impl LogRecord {
    pub fn step(&self) -> u64 {
        match self {
            LogRecord::Step(r) => r.step,
            LogRecord::Eval(r) => r.step,
        }
    }

    /// Named numeric field, if present on this record.
    pub fn field(&self, name: &str) -> Result<Option<f64>> {
        Ok(match (self, name) {
            (LogRecord::Eval(r), "test_ppl") => Some(r.test_ppl),
            (LogRecord::Eval(_), _) => None,
            (LogRecord::Step(_), "test_ppl") => None,
            (LogRecord::Step(r), "lr") => Some(r.lr),
            (LogRecord::Step(r), "lambda") => Some(r.lambda),
            (LogRecord::Step(r), "loss_nll") => Some(r.loss_nll),
            (LogRecord::Step(r), "loss_proj") => r.loss_proj,
            (LogRecord::Step(r), "loss_total") => Some(r.loss_total),
            (LogRecord::Step(r), "cos_sim") => r.cos_sim,
            (LogRecord::Step(r), "loss_kd") => r.loss_kd,
            _ => return Err(Error::invalid(format!("unknown metrics field `{name}`"))),
        })
    }

    pub fn to_json_line(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }
}

pub fn parse_log(text: &str) -> Result<Vec<LogRecord>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Data(format!("metrics line {}: {e}", i + 1)))
        })
        .collect()
}

pub fn read_log(path: &Path) -> Result<Vec<LogRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_log(&text).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

/// Natural-log NLL summed over every position, with the position count.
fn nll_sum(logits: &Tensor, targets: &[u32]) -> (f64, usize) {
    let v = logits.last_dim();
    let mut total = 0.0;
    for (row, &t) in logits.data().chunks_exact(v).zip(targets) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
        total += lse - row[t as usize];
    }
    (total, targets.len())
}

/// Mean per-token NLL over every full window of `corpus`, in corpus order.
pub fn mean_nll(model: &TransformerModel, corpus: &Corpus, seq_len: usize, batch_size: usize) -> Result<f64> {
    let batches = sequential_batches(corpus, batch_size, seq_len)?;
    let mut total = 0.0;
    let mut count = 0;
    for b in &batches {
        let mut g = Graph::new();
        let bound = model.bind(&mut g, false);
        let pass = model.forward_graph(&mut g, &bound, &b.inputs, b.batch_size, None)?;
        let logits = g.value(pass.logits.expect("full pass"));
        let (s, n) = nll_sum(logits, &b.targets);
        total += s;
        count += n;
    }
    if count == 0 {
        return Err(Error::Data("evaluation set is empty".into()));
    }
    Ok(total / count as f64)
}

/// `exp` of the mean per-token NLL.
pub fn perplexity(model: &TransformerModel, corpus: &Corpus, seq_len: usize, batch_size: usize) -> Result<f64> {
    Ok(mean_nll(model, corpus, seq_len, batch_size)?.exp())
}

/// Trailing-window means of `cos_sim`: each output is `(step, mean of the
/// last `window` values up to and including that step)`.
pub fn similarity_trajectory(log: &[LogRecord], window: usize) -> Result<Vec<(u64, f64)>> {
    let points: Vec<(u64, f64)> = log
        .iter()
        .filter_map(|r| match r {
            LogRecord::Step(s) => s.cos_sim.map(|c| (s.step, c)),
            LogRecord::Eval(_) => None,
        })
        .collect();
    if window == 0 {
        return Err(Error::invalid("window must be positive"));
    }
    if window > points.len() {
        return Err(Error::invalid(format!(
            "window {window} is longer than the {} cos_sim records in the log",
            points.len()
        )));
    }
    Ok(points
        .windows(window)
        .map(|w| {
            let mean = w.iter().map(|p| p.1).sum::<f64>() / window as f64;
            (w[window - 1].0, mean)
        })
        .collect())
}

/// A table keyed by step: `columns[i]` names the i-th value column.
#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    pub key: String,
    pub columns: Vec<String>,
    pub rows: Vec<(u64, Vec<Option<f64>>)>,
}

impl Table {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_path(path)
            .map_err(|e| csv_err(path, e))?;
        let mut header = vec![self.key.clone()];
        header.extend(self.columns.iter().cloned());
        w.write_record(&header).map_err(|e| csv_err(path, e))?;
        for (step, values) in &self.rows {
            let mut row = vec![step.to_string()];
            row.extend(values.iter().map(|v| v.map_or(String::new(), |x| x.to_string())));
            w.write_record(&row).map_err(|e| csv_err(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        reason: e.to_string(),
    }
}

fn series(log: &[LogRecord], field: &str) -> Result<Vec<(u64, f64)>> {
    let mut out = Vec::new();
    for r in log {
        if let Some(v) = r.field(field)? {
            out.push((r.step(), v));
        }
    }
    Ok(out)
}

/// One row per step, one column per run (sorted by run id); every run must
/// report `field` on exactly the same steps.
pub fn compare_runs(logs: &[(String, Vec<LogRecord>)], field: &str) -> Result<Table> {
    if logs.is_empty() {
        return Err(Error::invalid("no runs to compare"));
    }
    let mut sorted: Vec<&(String, Vec<LogRecord>)> = logs.iter().collect();
    sorted.sort_by(|a, b| a.0.cmp(&b.0));
    let all = sorted
        .iter()
        .map(|(_, log)| series(log, field))
        .collect::<Result<Vec<_>>>()?;
    let grid: Vec<u64> = all[0].iter().map(|p| p.0).collect();
    for (run, s) in sorted.iter().zip(&all).skip(1) {
        let steps: Vec<u64> = s.iter().map(|p| p.0).collect();
        if steps != grid {
            let at = grid.iter().zip(&steps).position(|(a, b)| a != b).unwrap_or(grid.len().min(steps.len()));
            return Err(Error::Data(format!(
                "run `{}` departs from the step grid of `{}` for `{field}` at row {at} (step {:?} vs {:?})",
                run.0,
                sorted[0].0,
                steps.get(at),
                grid.get(at)
            )));
        }
    }
    let rows = grid
        .iter()
        .enumerate()
        .map(|(i, &step)| (step, all.iter().map(|s| Some(s[i].1)).collect()))
        .collect();
    Ok(Table {
        key: "step".into(),
        columns: sorted.iter().map(|(n, _)| n.clone()).collect(),
        rows,
    })
}

/// Like [`compare_runs`] but over the union of steps, leaving gaps empty.
pub fn compare_runs_outer(logs: &[(String, Vec<LogRecord>)], field: &str) -> Result<Table> {
    let mut sorted: Vec<&(String, Vec<LogRecord>)> = logs.iter().collect();
    sorted.sort_by(|a, b| a.0.cmp(&b.0));
    let maps = sorted
        .iter()
        .map(|(_, log)| series(log, field).map(|s| s.into_iter().collect::<BTreeMap<u64, f64>>()))
        .collect::<Result<Vec<_>>>()?;
    let steps: BTreeSet<u64> = maps.iter().flat_map(|m| m.keys().copied()).collect();
    Ok(Table {
        key: "step".into(),
        columns: sorted.iter().map(|(n, _)| n.clone()).collect(),
        rows: steps
            .into_iter()
            .map(|s| (s, maps.iter().map(|m| m.get(&s).copied()).collect()))
            .collect(),
    })
}

pub fn write_trajectory_csv(path: &Path, points: &[(u64, f64)]) -> Result<()> {
    Table {
        key: "step".into(),
        columns: vec!["cos_sim".into()],
        rows: points.iter().map(|&(s, v)| (s, vec![Some(v)])).collect(),
    }
    .write_csv(path)
}

/// Appends records to a JSON-lines file, one object per line.
pub struct LogWriter {
    file: std::io::BufWriter<fs::File>,
    path: std::path::PathBuf,
}

impl LogWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        Ok(Self {
            file: std::io::BufWriter::new(f),
            path: path.to_path_buf(),
        })
    }

    pub fn append(path: &Path) -> Result<Self> {
        let f = fs::OpenOptions::new()
            .append(true)
            .create(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(Self {
            file: std::io::BufWriter::new(f),
            path: path.to_path_buf(),
        })
    }

    pub fn write(&mut self, record: &LogRecord) -> Result<()> {
        let line = record.to_json_line()?;
        writeln!(self.file, "{line}").map_err(|e| Error::io(&self.path, e))
    }

    pub fn flush(&mut self) -> Result<()> {
        self.file.flush().map_err(|e| Error::io(&self.path, e))
    }
}
