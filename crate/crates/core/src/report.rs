//! Plot-ready tables from a metrics directory.
//!
//! The report is a pure function of `metrics.jsonl`: every number it writes
//! can be recomputed from the raw lines.

use std::fs::{self, File};
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::trainer::{
    EpisodeMetrics, EvaluationRecord, MetricsLine, MuUpdateRecord, Quartiles, SweepRun, METRICS_FILE,
};

/// `|Σr + Σλx Δt − ΣF| ≤ IDENTITY_TOLERANCE · max(1, |ΣF|)`.
pub const IDENTITY_TOLERANCE: f64 = 1e-9;

pub const DECOMPOSITION_FILE: &str = "decomposition.csv";
pub const SWEEP_FILE: &str = "sweep_quartiles.csv";
pub const MU_FILE: &str = "mu_trajectory.csv";
pub const EPISODES_FILE: &str = "episodes.csv";

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("{path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error("{path}:{line}: {message}")]
    Parse { path: PathBuf, line: usize, message: String },
    #[error("{path}:{line}: decomposition identity violated (residual {residual:e})")]
    Identity { path: PathBuf, line: usize, residual: f64 },
    #[error("{0}: no metrics records")]
    Empty(PathBuf),
}

/// Parsed metrics with the source line of each record.
#[derive(Debug, Clone, Default)]
pub struct MetricsLog {
    pub path: PathBuf,
    pub episodes: Vec<(usize, EpisodeMetrics)>,
    pub mu_updates: Vec<(usize, MuUpdateRecord)>,
    pub evaluations: Vec<(usize, EvaluationRecord)>,
    pub sweep_runs: Vec<(usize, SweepRun)>,
    pub worker_failures: usize,
}

impl MetricsLog {
    pub fn read(path: &Path) -> Result<Self, ReportError> {
        let io = |e: std::io::Error| ReportError::Io {
            path: path.to_path_buf(),
            message: e.to_string(),
        };
        let file = File::open(path).map_err(io)?;
        let mut log = MetricsLog {
            path: path.to_path_buf(),
            ..Self::default()
        };
        let mut records = 0;
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(io)?;
            let n = i + 1;
            if line.trim().is_empty() {
                continue;
            }
            let parsed: MetricsLine = serde_json::from_str(&line).map_err(|e| ReportError::Parse {
                path: path.to_path_buf(),
                line: n,
                message: e.to_string(),
            })?;
            records += 1;
            match parsed {
                MetricsLine::Episode(e) => log.episodes.push((n, e)),
                MetricsLine::MuUpdate(m) => log.mu_updates.push((n, m)),
                MetricsLine::Evaluation(e) => log.evaluations.push((n, e)),
                MetricsLine::SweepRun(r) => log.sweep_runs.push((n, r)),
                MetricsLine::WorkerFailure(_) => log.worker_failures += 1,
            }
        }
        if records == 0 {
            return Err(ReportError::Empty(path.to_path_buf()));
        }
        Ok(log)
    }

    /// Checks the revenue identity on every evaluation and sweep run.
    pub fn check_identity(&self) -> Result<usize, ReportError> {
        let totals = self
            .evaluations
            .iter()
            .map(|(n, e)| (*n, &e.totals))
            .chain(self.sweep_runs.iter().map(|(n, r)| (*n, &r.totals)));
        let mut checked = 0;
        for (line, t) in totals {
            let residual = t.identity_residual();
            if !(residual <= IDENTITY_TOLERANCE * t.net_revenue.abs().max(1.0)) {
                return Err(ReportError::Identity {
                    path: self.path.clone(),
                    line,
                    residual,
                });
            }
            checked += 1;
        }
        Ok(checked)
    }
}

/// One row of the G-vs-ω table.
#[derive(Debug, Clone, PartialEq)]
pub struct QuartileRow {
    pub design: f64,
    pub capacity_mwh: f64,
    pub subset: &'static str,
    pub flagged: usize,
    pub stats: Quartiles,
}

/// Quartiles of the logged returns per design, over all runs and over
/// unflagged runs.
pub fn sweep_quartiles(runs: &[SweepRun]) -> Vec<QuartileRow> {
    let mut designs: Vec<f64> = runs.iter().map(|r| r.design).collect();
    designs.sort_by(f64::total_cmp);
    designs.dedup();
    let mut rows = Vec::new();
    for design in designs {
        let cell: Vec<&SweepRun> = runs.iter().filter(|r| r.design == design).collect();
        let flagged = cell.iter().filter(|r| r.flagged()).count();
        let all: Vec<f64> = cell.iter().map(|r| r.ret).collect();
        let kept: Vec<f64> = cell.iter().filter(|r| !r.flagged()).map(|r| r.ret).collect();
        for (subset, values) in [("all", all), ("filtered", kept)] {
            if let Some(stats) = Quartiles::of(&values) {
                rows.push(QuartileRow {
                    design,
                    capacity_mwh: cell[0].capacity_mwh,
                    subset,
                    flagged,
                    stats,
                });
            }
        }
    }
    rows
}

#[derive(Debug, Clone, Default)]
pub struct ReportSummary {
    pub files: Vec<PathBuf>,
    pub identities_checked: usize,
    pub decomposition_rows: usize,
    pub quartile_rows: usize,
    pub mu_rows: usize,
}

fn write_csv(path: &Path, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<(), ReportError> {
    let err = |e: csv::Error| ReportError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    let mut w = csv::Writer::from_path(path).map_err(err)?;
    w.write_record(header).map_err(err)?;
    for row in rows {
        w.write_record(&row).map_err(err)?;
    }
    w.flush().map_err(|e| ReportError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

fn decomposition_row(source: &str, index: String, design: f64, capacity: f64, t: &crate::market_env::EpisodeTotals) -> Vec<String> {
    vec![
        source.to_string(),
        index,
        design.to_string(),
        capacity.to_string(),
        t.baseline_revenue.to_string(),
        t.total_reward.to_string(),
        t.net_revenue.to_string(),
        t.market_revenue.to_string(),
        t.deviation_penalty.to_string(),
        t.degradation.to_string(),
        t.negative_price_slots.to_string(),
        t.identity_residual().to_string(),
    ]
}

/// Reads `<metrics_dir>/metrics.jsonl`, checks the revenue identity and
/// writes the CSV tables into `out_dir`.
pub fn generate_report(metrics_dir: &Path, out_dir: &Path) -> Result<ReportSummary, ReportError> {
    let log = MetricsLog::read(&metrics_dir.join(METRICS_FILE))?;
    let identities_checked = log.check_identity()?;
    fs::create_dir_all(out_dir).map_err(|e| ReportError::Io {
        path: out_dir.to_path_buf(),
        message: e.to_string(),
    })?;
    let mut summary = ReportSummary {
        identities_checked,
        ..ReportSummary::default()
    };

    let mut decomposition: Vec<Vec<String>> = log
        .evaluations
        .iter()
        .map(|(_, e)| decomposition_row("evaluation", e.after_episodes.to_string(), e.design, e.capacity_mwh, &e.totals))
        .collect();
    decomposition.extend(log.sweep_runs.iter().map(|(_, r)| {
        decomposition_row("sweep", r.repeat.to_string(), r.design, r.capacity_mwh, &r.totals)
    }));
    summary.decomposition_rows = decomposition.len();
    let path = out_dir.join(DECOMPOSITION_FILE);
    write_csv(
        &path,
        &[
            "source",
            "index",
            "design",
            "capacity_mwh",
            "baseline_revenue",
            "total_reward",
            "net_revenue",
            "market_revenue",
            "deviation_penalty",
            "degradation",
            "negative_price_slots",
            "identity_residual",
        ],
        decomposition,
    )?;
    summary.files.push(path);

    if !log.sweep_runs.is_empty() {
        let runs: Vec<SweepRun> = log.sweep_runs.iter().map(|(_, r)| r.clone()).collect();
        let rows = sweep_quartiles(&runs);
        summary.quartile_rows = rows.len();
        let path = out_dir.join(SWEEP_FILE);
        write_csv(
            &path,
            &["design", "capacity_mwh", "subset", "flagged", "n", "mean", "min", "q1", "median", "q3", "max"],
            rows.iter().map(|r| {
                let s = r.stats;
                vec![
                    r.design.to_string(),
                    r.capacity_mwh.to_string(),
                    r.subset.to_string(),
                    r.flagged.to_string(),
                    s.n.to_string(),
                    s.mean.to_string(),
                    s.min.to_string(),
                    s.q1.to_string(),
                    s.median.to_string(),
                    s.q3.to_string(),
                    s.max.to_string(),
                ]
            }),
        )?;
        summary.files.push(path);
    }

    if !log.mu_updates.is_empty() {
        summary.mu_rows = log.mu_updates.len();
        let path = out_dir.join(MU_FILE);
        write_csv(
            &path,
            &["update", "after_episodes", "mu_before", "mu", "mu_mwh", "gradient", "mean_return"],
            log.mu_updates.iter().map(|(_, m)| {
                vec![
                    m.index.to_string(),
                    m.after_episodes.to_string(),
                    m.mu_before.to_string(),
                    m.mu.to_string(),
                    m.mu_mwh.to_string(),
                    m.gradient.to_string(),
                    m.mean_return.to_string(),
                ]
            }),
        )?;
        summary.files.push(path);
    }

    if !log.episodes.is_empty() {
        let path = out_dir.join(EPISODES_FILE);
        write_csv(
            &path,
            &["episode", "worker", "design", "capacity_mwh", "sum_reward", "ret", "mu", "epsilon", "mean_loss"],
            log.episodes.iter().map(|(_, e)| {
                vec![
                    e.episode.to_string(),
                    e.worker.to_string(),
                    e.design.to_string(),
                    e.capacity_mwh.to_string(),
                    e.sum_reward.to_string(),
                    e.ret.to_string(),
                    e.mu.to_string(),
                    e.epsilon.to_string(),
                    e.mean_loss.map(|l| l.to_string()).unwrap_or_default(),
                ]
            }),
        )?;
        summary.files.push(path);
    }
    Ok(summary)
}
