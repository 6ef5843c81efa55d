//! Fixed-design sweep: train a separate agent per battery size and compare
//! the resulting returns.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{
    train_on, write_config, write_metrics_lines, MetricsLine, RunConfig, TrainError, CONFIG_FILE, METRICS_FILE,
    SUMMARY_FILE,
};
use crate::design_optimizer::episode_return;
use crate::market_env::EpisodeTotals;

/// Final greedy evaluation of one fixed-design training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRun {
    pub design: f64,
    pub capacity_mwh: f64,
    pub repeat: usize,
    pub seed: u64,
    pub w_anu: f64,
    pub p_bat: f64,
    /// Return at the configured `p_bat`.
    pub ret: f64,
    pub totals: EpisodeTotals,
}

impl SweepRun {
    /// Return recomputed for another battery cost.
    pub fn ret_at(&self, w_anu: f64, p_bat: f64) -> f64 {
        episode_return(self.totals.total_reward, self.capacity_mwh, w_anu, p_bat)
    }

    /// Runs whose agent lost money relative to bidding the generation are flagged.
    pub fn flagged(&self) -> bool {
        self.totals.total_reward < 0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepFailure {
    pub design: f64,
    pub repeat: usize,
    pub error: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quartiles {
    pub n: usize,
    pub mean: f64,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

impl Quartiles {
    /// Quartiles with linear interpolation between order statistics.
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let at = |p: f64| {
            let pos = p * (v.len() - 1) as f64;
            let lo = pos.floor() as usize;
            let hi = pos.ceil() as usize;
            v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
        };
        Some(Self {
            n: v.len(),
            mean: v.iter().sum::<f64>() / v.len() as f64,
            min: v[0],
            q1: at(0.25),
            median: at(0.5),
            q3: at(0.75),
            max: v[v.len() - 1],
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub design: f64,
    pub capacity_mwh: f64,
    pub flagged: usize,
    pub all: Option<Quartiles>,
    /// Excluding flagged runs.
    pub filtered: Option<Quartiles>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub w_anu: f64,
    pub runs: Vec<SweepRun>,
    pub failures: Vec<SweepFailure>,
}

impl SweepResult {
    pub fn designs(&self) -> Vec<f64> {
        let mut d: Vec<f64> = self.runs.iter().map(|r| r.design).collect();
        d.sort_by(f64::total_cmp);
        d.dedup();
        d
    }

    /// Return statistics per design; returns are recomputed for `p_bat`.
    pub fn table(&self, p_bat: f64) -> Vec<SweepRow> {
        self.designs()
            .into_iter()
            .map(|design| {
                let runs: Vec<&SweepRun> = self.runs.iter().filter(|r| r.design == design).collect();
                let all: Vec<f64> = runs.iter().map(|r| r.ret_at(self.w_anu, p_bat)).collect();
                let kept: Vec<f64> = runs
                    .iter()
                    .filter(|r| !r.flagged())
                    .map(|r| r.ret_at(self.w_anu, p_bat))
                    .collect();
                SweepRow {
                    design,
                    capacity_mwh: runs[0].capacity_mwh,
                    flagged: all.len() - kept.len(),
                    all: Quartiles::of(&all),
                    filtered: Quartiles::of(&kept),
                }
            })
            .collect()
    }

    /// Design with the highest mean return, filtered runs only when `filtered`.
    pub fn argmax(&self, p_bat: f64, filtered: bool) -> Option<f64> {
        self.table(p_bat)
            .iter()
            .filter_map(|row| {
                let q = if filtered { row.filtered } else { row.all };
                q.map(|q| (row.design, q.mean))
            })
            .fold(None, |best: Option<(f64, f64)>, (d, m)| match best {
                Some((_, bm)) if bm >= m => best,
                _ => Some((d, m)),
            })
            .map(|(d, _)| d)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub w_anu: f64,
    pub p_bat: f64,
    pub argmax_filtered: Option<f64>,
    pub argmax_all: Option<f64>,
    pub rows: Vec<SweepRow>,
    pub failures: Vec<SweepFailure>,
}

/// Writes one `sweep_run` metrics line per run plus a summary table.
pub fn write_sweep_outputs(dir: &Path, result: &SweepResult, config: &RunConfig) -> Result<Vec<PathBuf>, TrainError> {
    fs::create_dir_all(dir).map_err(|e| TrainError::Io(format!("{}: {e}", dir.display())))?;
    let metrics_path = dir.join(METRICS_FILE);
    let lines: Vec<MetricsLine> = result.runs.iter().cloned().map(MetricsLine::SweepRun).collect();
    write_metrics_lines(&metrics_path, &lines)?;
    let p_bat = config.economics.p_bat;
    let summary = SweepSummary {
        w_anu: result.w_anu,
        p_bat,
        argmax_filtered: result.argmax(p_bat, true),
        argmax_all: result.argmax(p_bat, false),
        rows: result.table(p_bat),
        failures: result.failures.clone(),
    };
    let summary_path = dir.join(SUMMARY_FILE);
    let json = serde_json::to_string_pretty(&summary).expect("summary serializes");
    fs::write(&summary_path, json).map_err(|e| TrainError::Io(format!("{}: {e}", summary_path.display())))?;
    let config_path = dir.join(CONFIG_FILE);
    write_config(&config_path, config)?;
    Ok(vec![metrics_path, summary_path, config_path])
}

/// Seed used for repeat `r`; the same across designs so that designs are
/// compared under common random numbers.
pub fn repeat_seed(base: u64, repeat: usize) -> u64 {
    base.wrapping_add((repeat as u64).wrapping_mul(0x1000_0000_01B3))
}

/// One fixed-design serial training run per design and repeat. A failing run
/// is recorded and skipped.
pub fn sweep(config: &RunConfig, designs: &[f64], repeats: usize) -> Result<SweepResult, TrainError> {
    config.validate()?;
    if designs.is_empty() || repeats == 0 {
        return Err(TrainError::Config("sweep needs at least one design and one repeat".into()));
    }
    let [lo, hi] = config.design.bounds;
    if let Some(d) = designs.iter().find(|d| !(lo..=hi).contains(*d)) {
        return Err(TrainError::Config(format!("sweep design {d} outside bounds [{lo}, {hi}]")));
    }
    let data = config.scenario.load()?;
    let mut result = SweepResult {
        w_anu: config.economics.w_anu,
        ..SweepResult::default()
    };
    for &design in designs {
        for repeat in 0..repeats {
            let mut cfg = config.clone();
            cfg.design.optimize = false;
            cfg.design.mu0 = design;
            cfg.seed = repeat_seed(config.seed, repeat);
            match train_on(&cfg, data.clone()) {
                Ok(out) => {
                    let eval = out
                        .metrics
                        .final_evaluation()
                        .expect("training always ends with an evaluation");
                    log::info!("sweep design {design} repeat {repeat}: Σr = {:.4}", eval.totals.total_reward);
                    result.runs.push(SweepRun {
                        design,
                        capacity_mwh: eval.capacity_mwh,
                        repeat,
                        seed: cfg.seed,
                        w_anu: config.economics.w_anu,
                        p_bat: config.economics.p_bat,
                        ret: eval.ret,
                        totals: eval.totals,
                    });
                }
                Err(e) => {
                    log::warn!("sweep design {design} repeat {repeat} failed: {e}");
                    result.failures.push(SweepFailure {
                        design,
                        repeat,
                        error: e.to_string(),
                    });
                }
            }
        }
    }
    Ok(result)
}
