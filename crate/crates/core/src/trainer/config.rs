//! Declarative run configuration (TOML). Unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::design_optimizer::MuStepRule;
use crate::drqn_agent::{ActionGrid, DrqnConfig, EpsilonSchedule, InputScaling};
use crate::market_env::{BatterySpec, MarketParams};
use crate::timeseries::{load_scenario, synthesize_scenario, ScenarioData, SyntheticProfile};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    pub seed: u64,
    /// Episode count `N`.
    pub episodes: u64,
    pub workers: usize,
    pub scenario: ScenarioConfig,
    pub battery: BatteryConfig,
    pub market: MarketConfig,
    pub actions: ActionsConfig,
    pub agent: DrqnConfig,
    pub training: TrainingConfig,
    pub design: DesignConfig,
    pub economics: EconomicsConfig,
    pub evaluation: EvaluationConfig,
    pub parallel: ParallelConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            seed: 0,
            episodes: 800,
            workers: 1,
            scenario: ScenarioConfig::default(),
            battery: BatteryConfig::default(),
            market: MarketConfig::default(),
            actions: ActionsConfig::default(),
            agent: DrqnConfig::default(),
            training: TrainingConfig::default(),
            design: DesignConfig::default(),
            economics: EconomicsConfig::default(),
            evaluation: EvaluationConfig::default(),
            parallel: ParallelConfig::default(),
        }
    }
}

/// Either a scenario file or the synthetic generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    /// When set, records are read from this file and the synthetic fields are ignored.
    pub path: Option<PathBuf>,
    /// Slot duration for file scenarios (hours).
    pub slot_duration_h: f64,
    pub slots: usize,
    pub seed: u64,
    pub profile: SyntheticProfile,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            path: None,
            slot_duration_h: 1.0,
            slots: 168,
            seed: 0,
            profile: SyntheticProfile::default(),
        }
    }
}

impl ScenarioConfig {
    pub fn load(&self) -> Result<ScenarioData, TrainError> {
        match &self.path {
            Some(p) => Ok(load_scenario(p, self.slot_duration_h)?),
            None => Ok(synthesize_scenario(self.seed, self.slots, &self.profile)?),
        }
    }
}

/// Battery parameters except the capacity, which is the design variable.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BatteryConfig {
    pub soc_min: f64,
    pub soc_max: f64,
    pub eta_c: f64,
    pub eta_d: f64,
    pub p_c_unit_max: f64,
    pub p_d_unit_max: f64,
    pub degradation_cost: f64,
    /// Defaults to the midpoint of the SOC window.
    pub initial_soc: Option<f64>,
}

impl Default for BatteryConfig {
    fn default() -> Self {
        let b = BatterySpec::default();
        Self {
            soc_min: b.soc_min,
            soc_max: b.soc_max,
            eta_c: b.eta_c,
            eta_d: b.eta_d,
            p_c_unit_max: b.p_c_unit_max,
            p_d_unit_max: b.p_d_unit_max,
            degradation_cost: b.degradation_cost,
            initial_soc: None,
        }
    }
}

impl BatteryConfig {
    pub fn spec(&self, e_max_mwh: f64) -> BatterySpec {
        BatterySpec {
            e_max_mwh,
            soc_min: self.soc_min,
            soc_max: self.soc_max,
            eta_c: self.eta_c,
            eta_d: self.eta_d,
            p_c_unit_max: self.p_c_unit_max,
            p_d_unit_max: self.p_d_unit_max,
            degradation_cost: self.degradation_cost,
        }
    }

    pub fn initial_soc(&self) -> f64 {
        self.initial_soc.unwrap_or(0.5 * (self.soc_min + self.soc_max))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MarketConfig {
    pub alpha_pen: f64,
}

impl Default for MarketConfig {
    fn default() -> Self {
        Self { alpha_pen: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ActionsConfig {
    pub bids: Vec<f64>,
    pub scales: Vec<f64>,
}

impl Default for ActionsConfig {
    fn default() -> Self {
        let g = ActionGrid::default();
        Self {
            bids: g.bids().to_vec(),
            scales: g.scales().to_vec(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    /// Learner steps after each completed episode.
    pub updates_per_episode: usize,
    /// Episodes stored before the learner starts.
    pub warmup_episodes: usize,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    /// Fraction of `episodes` over which ε decays linearly.
    pub epsilon_decay_fraction: f64,
    /// Generation divisor for network inputs; defaults to the scenario peak.
    pub generation_scale: Option<f64>,
    /// Price divisor for network inputs; defaults to the mean absolute price.
    pub price_scale: Option<f64>,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            updates_per_episode: 4,
            warmup_episodes: 4,
            epsilon_start: 1.0,
            epsilon_end: 0.05,
            epsilon_decay_fraction: 0.5,
            generation_scale: None,
            price_scale: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DesignConfig {
    /// Capacity (MWh) that corresponds to design value 1.0.
    pub reference_mwh: f64,
    /// Initial mean `μ₀` in normalized units.
    pub mu0: f64,
    pub sigma: f64,
    pub learning_rate: f64,
    /// Episodes per `μ` update (`N_up`).
    pub n_up: usize,
    /// Admissible design interval in normalized units.
    pub bounds: [f64; 2],
    /// `false` freezes the design at `mu0` (plain DRQN training).
    pub optimize: bool,
    pub step_rule: MuStepRule,
}

impl Default for DesignConfig {
    fn default() -> Self {
        Self {
            reference_mwh: 0.6,
            mu0: 1.0,
            sigma: 0.2,
            learning_rate: 1e-5,
            n_up: 15,
            bounds: [0.05, 2.0],
            optimize: true,
            step_rule: MuStepRule::Sgd,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EconomicsConfig {
    /// Annualization factor `W_anu` (52 for one-week scenarios).
    pub w_anu: f64,
    /// Battery cost per MWh of capacity per year.
    pub p_bat: f64,
}

impl Default for EconomicsConfig {
    fn default() -> Self {
        Self {
            w_anu: 52.0,
            p_bat: 200.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationConfig {
    /// Greedy evaluation every this many completed episodes; 0 evaluates only at the end.
    pub every: u64,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        Self { every: 50 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ParallelConfig {
    /// Maximum learner updates an actor snapshot may lag behind.
    pub staleness_bound: u64,
}

impl Default for ParallelConfig {
    fn default() -> Self {
        Self { staleness_bound: 1000 }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, TrainError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| TrainError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads and validates a config file; a relative scenario path is resolved
    /// against the config file's directory.
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self, TrainError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| TrainError::Io(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_toml_str(&text)?;
        if let (Some(p), Some(dir)) = (cfg.scenario.path.as_mut(), path.parent()) {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config is always serializable")
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let fail = |m: String| Err(TrainError::Config(m));
        if self.version != CONFIG_VERSION {
            return fail(format!("unsupported config version {}", self.version));
        }
        if self.workers == 0 {
            return fail("workers must be >= 1".into());
        }
        self.agent.validate()?;
        self.battery.spec(self.design.reference_mwh).validate()?;
        MarketParams {
            alpha_pen: self.market.alpha_pen,
            slot_duration_h: 1.0,
        }
        .validate()?;
        self.grid()?;
        let soc = self.battery.initial_soc();
        if !(self.battery.soc_min..=self.battery.soc_max).contains(&soc) {
            return fail(format!("initial_soc {soc} outside the SOC window"));
        }
        let t = &self.training;
        if !(0.0..=1.0).contains(&t.epsilon_start) || !(0.0..=1.0).contains(&t.epsilon_end) {
            return fail("epsilon values must lie in [0, 1]".into());
        }
        if !(0.0..=1.0).contains(&t.epsilon_decay_fraction) {
            return fail("epsilon_decay_fraction must lie in [0, 1]".into());
        }
        for (name, v) in [("generation_scale", t.generation_scale), ("price_scale", t.price_scale)] {
            if let Some(v) = v {
                if !(v.is_finite() && v > 0.0) {
                    return fail(format!("{name} must be > 0"));
                }
            }
        }
        let d = &self.design;
        if !(d.reference_mwh.is_finite() && d.reference_mwh > 0.0) {
            return fail("design.reference_mwh must be > 0".into());
        }
        if d.n_up == 0 {
            return fail("design.n_up must be >= 1".into());
        }
        if !(d.bounds[0] > 0.0 && d.bounds[0] < d.bounds[1]) {
            return fail("design.bounds must satisfy 0 < lo < hi".into());
        }
        self.design_policy()?;
        let e = &self.economics;
        if !(e.w_anu.is_finite() && e.w_anu > 0.0 && e.p_bat.is_finite()) {
            return fail("economics.w_anu must be > 0 and p_bat finite".into());
        }
        Ok(())
    }

    pub fn grid(&self) -> Result<ActionGrid, TrainError> {
        Ok(ActionGrid::new(self.actions.bids.clone(), self.actions.scales.clone())?)
    }

    pub fn design_policy(&self) -> Result<crate::design_optimizer::DesignPolicy, TrainError> {
        let d = &self.design;
        Ok(crate::design_optimizer::DesignPolicy::new(
            d.mu0,
            d.sigma,
            d.learning_rate,
            (d.bounds[0], d.bounds[1]),
            d.step_rule,
        )?)
    }

    pub fn epsilon_schedule(&self) -> EpsilonSchedule {
        EpsilonSchedule {
            start: self.training.epsilon_start,
            end: self.training.epsilon_end,
            decay_episodes: (self.episodes as f64 * self.training.epsilon_decay_fraction).round() as u64,
        }
    }

    pub fn input_scaling(&self, data: &ScenarioData) -> InputScaling {
        let peak = data.peak_generation_mw();
        let mean_abs_price = data.records().iter().map(|r| r.price.abs()).sum::<f64>() / data.len() as f64;
        InputScaling {
            generation_mw: self
                .training
                .generation_scale
                .unwrap_or(if peak > 0.0 { peak } else { 1.0 }),
            price: self
                .training
                .price_scale
                .unwrap_or(if mean_abs_price > 0.0 { mean_abs_price } else { 1.0 }),
            design_reference_mwh: self.design.reference_mwh,
        }
    }
}
