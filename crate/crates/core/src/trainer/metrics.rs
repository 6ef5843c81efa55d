//! Run metrics and their on-disk form (JSON lines plus a JSON summary).

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{RunConfig, TrainError, TrainOutcome};
use crate::market_env::EpisodeTotals;

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const SUMMARY_FILE: &str = "summary.json";
pub const CHECKPOINT_FILE: &str = "agent.ckpt";
pub const CONFIG_FILE: &str = "config.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMetrics {
    pub episode: u64,
    pub worker: usize,
    /// Completion position; equals `episode` for serial runs.
    pub completed: u64,
    pub start_index: usize,
    pub slots: usize,
    /// Normalized design `ω`.
    pub design: f64,
    pub capacity_mwh: f64,
    pub epsilon: f64,
    pub sum_reward: f64,
    pub net_revenue: f64,
    pub ret: f64,
    pub mu: f64,
    pub learner_updates: u64,
    pub mean_loss: Option<f64>,
    /// Learner updates applied between the actor's snapshot and the episode's arrival.
    pub staleness: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MuUpdateRecord {
    pub index: usize,
    pub after_episodes: u64,
    pub mu_before: f64,
    pub mu: f64,
    pub mu_mwh: f64,
    pub gradient: f64,
    pub mean_return: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationRecord {
    pub after_episodes: u64,
    pub design: f64,
    pub capacity_mwh: f64,
    pub ret: f64,
    pub totals: EpisodeTotals,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkerFailure {
    pub worker: usize,
    pub episode: u64,
    pub error: String,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub wall_seconds: f64,
    /// Summed over actors; exceeds wall time when actors overlap.
    pub rollout_seconds: f64,
    pub learner_seconds: f64,
    pub evaluation_seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub episodes: Vec<EpisodeMetrics>,
    pub mu_updates: Vec<MuUpdateRecord>,
    pub evaluations: Vec<EvaluationRecord>,
    pub worker_failures: Vec<WorkerFailure>,
    pub initial_mu: f64,
    pub final_mu: f64,
    pub learner_updates: u64,
    pub timings: Timings,
}

impl RunMetrics {
    pub fn final_evaluation(&self) -> Option<&EvaluationRecord> {
        self.evaluations.last()
    }

    /// Everything except wall-clock timings, for reproducibility checks.
    pub fn same_trajectory(&self, other: &Self) -> bool {
        self.episodes == other.episodes
            && self.mu_updates == other.mu_updates
            && self.evaluations == other.evaluations
            && self.worker_failures == other.worker_failures
            && self.initial_mu.to_bits() == other.initial_mu.to_bits()
            && self.final_mu.to_bits() == other.final_mu.to_bits()
            && self.learner_updates == other.learner_updates
    }

    pub fn episodes_per_second(&self) -> f64 {
        if self.timings.wall_seconds > 0.0 {
            self.episodes.len() as f64 / self.timings.wall_seconds
        } else {
            0.0
        }
    }
}

/// One line of a metrics file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MetricsLine {
    Episode(EpisodeMetrics),
    MuUpdate(MuUpdateRecord),
    Evaluation(EvaluationRecord),
    WorkerFailure(WorkerFailure),
    SweepRun(super::SweepRun),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub episodes: usize,
    pub learner_updates: u64,
    pub initial_mu: f64,
    pub final_mu: f64,
    pub final_capacity_mwh: f64,
    pub final_evaluation: Option<EvaluationRecord>,
    pub worker_failures: usize,
    pub timings: Timings,
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> TrainError {
    TrainError::Io(format!("{}: {e}", path.display()))
}

pub fn write_metrics_lines(path: &Path, lines: &[MetricsLine]) -> Result<(), TrainError> {
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(file);
    for line in lines {
        let json = serde_json::to_string(line).map_err(|e| io_err(path, e))?;
        writeln!(w, "{json}").map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

pub fn run_lines(metrics: &RunMetrics) -> Vec<MetricsLine> {
    let mut lines: Vec<MetricsLine> = metrics.episodes.iter().cloned().map(MetricsLine::Episode).collect();
    lines.extend(metrics.mu_updates.iter().cloned().map(MetricsLine::MuUpdate));
    lines.extend(metrics.evaluations.iter().cloned().map(MetricsLine::Evaluation));
    lines.extend(metrics.worker_failures.iter().cloned().map(MetricsLine::WorkerFailure));
    lines
}

/// Writes metrics, summary, config and the final agent checkpoint into `dir`.
pub fn write_run_outputs(dir: &Path, outcome: &TrainOutcome) -> Result<Vec<PathBuf>, TrainError> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let m = &outcome.metrics;
    let metrics_path = dir.join(METRICS_FILE);
    write_metrics_lines(&metrics_path, &run_lines(m))?;

    let summary = RunSummary {
        episodes: m.episodes.len(),
        learner_updates: m.learner_updates,
        initial_mu: m.initial_mu,
        final_mu: m.final_mu,
        final_capacity_mwh: m.final_mu * outcome.config.design.reference_mwh,
        final_evaluation: m.final_evaluation().cloned(),
        worker_failures: m.worker_failures.len(),
        timings: m.timings,
    };
    let summary_path = dir.join(SUMMARY_FILE);
    let json = serde_json::to_string_pretty(&summary).map_err(|e| io_err(&summary_path, e))?;
    fs::write(&summary_path, json).map_err(|e| io_err(&summary_path, e))?;

    let ckpt_path = dir.join(CHECKPOINT_FILE);
    fs::write(&ckpt_path, outcome.agent.to_checkpoint_string()).map_err(|e| io_err(&ckpt_path, e))?;
    let config_path = dir.join(CONFIG_FILE);
    write_config(&config_path, &outcome.config)?;
    Ok(vec![metrics_path, summary_path, ckpt_path, config_path])
}

pub fn write_config(path: &Path, config: &RunConfig) -> Result<(), TrainError> {
    fs::write(path, config.to_toml_string()).map_err(|e| io_err(path, e))
}

pub fn evaluation_json(record: &EvaluationRecord) -> String {
    serde_json::to_string_pretty(record).expect("evaluation record serializes")
}
