//! Ablation grids: each cell is an isolated run directory under
//! `<output_dir>/ablate/<suite>/`, followed by merged comparison tables.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use letlab_core::alignment::{LayerPairStrategy, Variant};
use letlab_core::data::Corpus;
use letlab_core::metrics::{compare_runs_outer, read_log, LogRecord};
use letlab_core::models::TransformerModel;
use letlab_core::trainer::{CheckpointKind, Mode, TrainConfig, METRICS_FILE};
use serde::{Deserialize, Serialize};

use crate::config::RunConfigFile;
use crate::error::CliError;
use crate::run::{execute, load_teacher, write_json, RunRequest, RunSummary};

pub const LAMBDA_GRID: [f64; 5] = [0.01, 0.1, 0.3, 1.0, 3.0];
pub const SSTOP_FRACTIONS: [f64; 2] = [0.10, 0.20];
pub const LAYER_SELECT: [&str; 4] = ["L1-F1", "L1-F3", "L1-F5", "L3-F3"];
pub const PPL_TABLE: &str = "ppl_vs_step.csv";
pub const COS_TABLE: &str = "cos_sim_vs_step.csv";
pub const CELLS_FILE: &str = "cells.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Suite {
    Layers,
    Lambda,
    Sstop,
    LayerSelect,
}

impl FromStr for Suite {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self, CliError> {
        match s {
            "layers" => Ok(Suite::Layers),
            "lambda" => Ok(Suite::Lambda),
            "sstop" => Ok(Suite::Sstop),
            "layer-select" => Ok(Suite::LayerSelect),
            other => Err(CliError::usage(format!(
                "unknown suite `{other}` (layers, lambda, sstop, layer-select)"
            ))),
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Suite::Layers => "layers",
            Suite::Lambda => "lambda",
            Suite::Sstop => "sstop",
            Suite::LayerSelect => "layer-select",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Cell {
    pub id: String,
    pub config: RunConfigFile,
}

/// Grid cells in run-id order; every cell is a `let` run of the base config.
pub fn cells(suite: Suite, base: &RunConfigFile) -> Result<Vec<Cell>, CliError> {
    let base = base.with_mode(Mode::Let)?;
    let with = |id: String, edit: &dyn Fn(&mut RunConfigFile)| -> Result<Cell, CliError> {
        let mut c = base.clone();
        edit(&mut c);
        c.train.alignment = Some(c.alignment.clone());
        c.train.validate()?;
        Ok(Cell { id, config: c })
    };
    let mut out = match suite {
        Suite::Layers => [
            Variant::L2E,
            Variant::L2M,
            Variant::L2L,
            Variant::M2E,
            Variant::M2M,
            Variant::M2L,
        ]
        .into_iter()
        .map(|v| with(format!("{v:?}"), &|c| c.alignment.strategy = LayerPairStrategy::Variant(v)))
        .collect::<Result<Vec<_>, _>>()?,
        Suite::Lambda => LAMBDA_GRID
            .into_iter()
            .map(|l| with(format!("lambda_{l}"), &|c| c.alignment.lambda0 = l))
            .collect::<Result<Vec<_>, _>>()?,
        Suite::Sstop => SSTOP_FRACTIONS
            .into_iter()
            .map(|f| {
                let s_stop = ((base.train.total_steps as f64 * f).round() as u64).max(1);
                with(format!("sstop_{:02}pct", (f * 100.0).round() as u64), &|c| {
                    c.alignment.s_stop = s_stop
                })
            })
            .collect::<Result<Vec<_>, _>>()?,
        Suite::LayerSelect => LAYER_SELECT
            .into_iter()
            .map(|s| {
                let strategy: LayerPairStrategy = s.parse()?;
                with(s.to_string(), &|c| c.alignment.strategy = strategy)
            })
            .collect::<Result<Vec<_>, _>>()?,
    };
    out.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellOutcome {
    pub id: String,
    pub ok: bool,
    pub error: Option<String>,
    pub summary: Option<RunSummary>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub suite: Suite,
    pub dir: PathBuf,
    pub cells: Vec<CellOutcome>,
}

impl AblationReport {
    pub fn all_ok(&self) -> bool {
        self.cells.iter().all(|c| c.ok)
    }

    pub fn new_steps(&self) -> u64 {
        self.cells.iter().filter_map(|c| c.summary.as_ref()).map(RunSummary::steps_run).sum()
    }
}

pub fn suite_dir(base: &RunConfigFile, suite: Suite) -> PathBuf {
    base.output_dir.join("ablate").join(suite.to_string())
}

struct Shared<'a> {
    train: &'a Corpus,
    test: &'a Corpus,
    teacher: &'a TransformerModel,
    teacher_path: &'a Path,
    resume: bool,
}

fn run_cell(cell: &Cell, dir: &Path, s: &Shared<'_>) -> CellOutcome {
    let train: &TrainConfig = &cell.config.train;
    let result = execute(RunRequest {
        train,
        model: &cell.config.model_m,
        kind: CheckpointKind::Model,
        train_corpus: s.train,
        test_corpus: s.test,
        dir: &dir.join(&cell.id),
        teacher: Some((s.teacher, s.teacher_path)),
        resume: s.resume,
        stop_at: None,
        echo: &cell.config,
    });
    match result {
        Ok(summary) => CellOutcome {
            id: cell.id.clone(),
            ok: summary.completed,
            error: None,
            summary: Some(summary),
        },
        Err(e) => CellOutcome {
            id: cell.id.clone(),
            ok: false,
            error: Some(format!("exit {}: {}", e.code, e.message)),
            summary: None,
        },
    }
}

/// Runs every cell (up to `jobs` at a time), then writes the merged tables
/// from whichever cells produced a metrics log.
pub fn run_suite(
    base: &RunConfigFile,
    suite: Suite,
    teacher_path: &Path,
    jobs: usize,
    resume: bool,
) -> Result<AblationReport, CliError> {
    let grid = cells(suite, base)?;
    let teacher = load_teacher(teacher_path, &base.model_t)?;
    let (train, test) = base.corpora()?;
    let dir = suite_dir(base, suite);
    std::fs::create_dir_all(&dir).map_err(|e| CliError::check(format!("{}: {e}", dir.display())))?;
    let shared = Shared {
        train: &train,
        test: &test,
        teacher: &teacher,
        teacher_path,
        resume,
    };
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<CellOutcome>>> = Mutex::new(vec![None; grid.len()]);
    std::thread::scope(|scope| {
        for _ in 0..jobs.clamp(1, grid.len().max(1)) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(cell) = grid.get(i) else { break };
                let outcome = run_cell(cell, &dir, &shared);
                results.lock().expect("no worker panics while holding the lock")[i] = Some(outcome);
            });
        }
    });
    let cells: Vec<CellOutcome> = results
        .into_inner()
        .expect("workers finished")
        .into_iter()
        .map(|o| o.expect("every cell ran"))
        .collect();
    let report = AblationReport { suite, dir, cells };
    write_json(&report.dir.join(CELLS_FILE), &report)?;
    write_tables(&report, &grid)?;
    Ok(report)
}

fn write_tables(report: &AblationReport, grid: &[Cell]) -> Result<(), CliError> {
    let mut logs: Vec<(String, Vec<LogRecord>)> = Vec::new();
    for cell in grid {
        let path = report.dir.join(&cell.id).join(METRICS_FILE);
        if path.exists() {
            logs.push((cell.id.clone(), read_log(&path)?));
        }
    }
    if logs.is_empty() {
        return Ok(());
    }
    compare_runs_outer(&logs, "test_ppl")?.write_csv(&report.dir.join(PPL_TABLE))?;
    compare_runs_outer(&logs, "cos_sim")?.write_csv(&report.dir.join(COS_TABLE))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Overrides;

    fn base() -> RunConfigFile {
        RunConfigFile::parse(
            r#"{"data": {"source": {"markov": {"order": 1, "transitions": [[0.9, 0.1], [0.1, 0.9]]}}},
                "train": {"total_steps": 100}}"#,
            &Overrides::default(),
        )
        .unwrap()
    }

    #[test]
    fn grid_sizes() {
        let b = base();
        assert_eq!(cells(Suite::Layers, &b).unwrap().len(), 6);
        assert_eq!(cells(Suite::Lambda, &b).unwrap().len(), 5);
        assert_eq!(cells(Suite::Sstop, &b).unwrap().len(), 2);
        assert_eq!(cells(Suite::LayerSelect, &b).unwrap().len(), 4);
    }

    #[test]
    fn cells_carry_their_setting() {
        let b = base();
        let lambdas: Vec<f64> = cells(Suite::Lambda, &b)
            .unwrap()
            .iter()
            .map(|c| c.config.train.alignment.as_ref().unwrap().lambda0)
            .collect();
        let mut want = LAMBDA_GRID.to_vec();
        want.sort_by(|a, b| a.to_string().cmp(&b.to_string()));
        assert_eq!(lambdas, want);
        let stops: Vec<u64> = cells(Suite::Sstop, &b)
            .unwrap()
            .iter()
            .map(|c| c.config.train.alignment.as_ref().unwrap().s_stop)
            .collect();
        assert_eq!(stops, vec![10, 20]);
        for c in cells(Suite::Layers, &b).unwrap() {
            assert_eq!(c.config.train.mode, Mode::Let);
            assert_eq!(c.config.train.alignment.as_ref().unwrap().strategy.to_string(), c.id);
        }
    }

    #[test]
    fn ids_are_sorted() {
        let ids: Vec<String> = cells(Suite::Layers, &base()).unwrap().into_iter().map(|c| c.id).collect();
        let mut sorted = ids.clone();
        sorted.sort();
        assert_eq!(ids, sorted);
    }
}
