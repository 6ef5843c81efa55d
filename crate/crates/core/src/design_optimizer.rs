//! Gaussian design distribution over the battery size and its score-function update.
//!
//! Designs are expressed in normalized units (multiples of a reference
//! capacity); the trainer converts to MWh when building the battery.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::AdamState;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DesignError {
    #[error("invalid design policy: {0}")]
    Invalid(String),
    #[error("block not ready: have {have} of {need} episode returns")]
    NotReady { have: usize, need: usize },
    #[error("non-finite design gradient")]
    NonFinite,
}

/// How the ascent direction is turned into a step on `μ`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MuStepRule {
    /// `μ ← μ + lr · ∇̂`
    #[default]
    Sgd,
    /// Adam on `−∇̂`; step size is roughly `lr` regardless of the return scale.
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpisodeReturnRecord {
    pub episode: u64,
    pub design: f64,
    pub ret: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MuUpdate {
    pub mu_before: f64,
    pub mu_after: f64,
    pub gradient: f64,
    pub mean_return: f64,
}

/// `p_μ(ω) = N(μ, σ²)` restricted to `[lo, hi]` by clipping.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignPolicy {
    mu: f64,
    sigma: f64,
    learning_rate: f64,
    lo: f64,
    hi: f64,
    rule: MuStepRule,
    adam: AdamState,
}

impl DesignPolicy {
    pub fn new(mu: f64, sigma: f64, learning_rate: f64, bounds: (f64, f64), rule: MuStepRule) -> Result<Self, DesignError> {
        let (lo, hi) = bounds;
        if !(sigma.is_finite() && sigma > 0.0) {
            return Err(DesignError::Invalid(format!("sigma must be > 0, got {sigma}")));
        }
        if !(learning_rate.is_finite() && learning_rate >= 0.0) {
            return Err(DesignError::Invalid(format!("learning rate must be >= 0, got {learning_rate}")));
        }
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(DesignError::Invalid(format!("bounds [{lo}, {hi}] must be finite with lo < hi")));
        }
        if !(lo..=hi).contains(&mu) {
            return Err(DesignError::Invalid(format!("mu {mu} outside [{lo}, {hi}]")));
        }
        Ok(Self {
            mu,
            sigma,
            learning_rate,
            lo,
            hi,
            rule,
            adam: AdamState::new(&[1], learning_rate),
        })
    }

    pub fn mu(&self) -> f64 {
        self.mu
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn bounds(&self) -> (f64, f64) {
        (self.lo, self.hi)
    }

    pub fn clip(&self, design: f64) -> f64 {
        design.clamp(self.lo, self.hi)
    }

    /// Draws `ω ~ N(μ, σ²)` and clips it into the admissible interval.
    pub fn sample_design<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let normal = Normal::new(self.mu, self.sigma).expect("sigma validated");
        self.clip(normal.sample(rng))
    }

    /// One score-function step on a full block of episode returns.
    pub fn update_mu(&mut self, records: &[EpisodeReturnRecord], block_size: usize) -> Result<MuUpdate, DesignError> {
        if records.len() < block_size || records.is_empty() {
            return Err(DesignError::NotReady {
                have: records.len(),
                need: block_size.max(1),
            });
        }
        let records = &records[..block_size];
        let gradient = score_function_gradient(records, self.mu, self.sigma);
        if !gradient.is_finite() {
            return Err(DesignError::NonFinite);
        }
        let mu_before = self.mu;
        let proposed = match self.rule {
            MuStepRule::Sgd => self.mu + self.learning_rate * gradient,
            MuStepRule::Adam => {
                let mut p = [self.mu];
                self.adam
                    .step(&mut [&mut p], &[&[-gradient]])
                    .map_err(|_| DesignError::NonFinite)?;
                p[0]
            }
        };
        self.mu = self.clip(proposed);
        Ok(MuUpdate {
            mu_before,
            mu_after: self.mu,
            gradient,
            mean_return: mean_return(records),
        })
    }
}

/// `G = W_anu · Σr − E · P_bat` with `E` the installed capacity.
pub fn episode_return(sum_rewards: f64, capacity: f64, w_anu: f64, p_bat: f64) -> f64 {
    w_anu * sum_rewards - capacity * p_bat
}

fn mean_return(records: &[EpisodeReturnRecord]) -> f64 {
    records.iter().map(|r| r.ret).sum::<f64>() / records.len() as f64
}

/// `Σ_i (ω_i − μ)/σ² · (G_i − Ḡ)` with `Ḡ` the block mean.
pub fn score_function_gradient(records: &[EpisodeReturnRecord], mu: f64, sigma: f64) -> f64 {
    if records.is_empty() {
        return 0.0;
    }
    let baseline = mean_return(records);
    let inv_var = 1.0 / (sigma * sigma);
    records
        .iter()
        .map(|r| (r.design - mu) * inv_var * (r.ret - baseline))
        .sum()
}

/// Collects returns and hands back full blocks of `block_size`.
#[derive(Debug, Clone, Default)]
pub struct ReturnBlock {
    block_size: usize,
    pending: Vec<EpisodeReturnRecord>,
}

impl ReturnBlock {
    pub fn new(block_size: usize) -> Self {
        Self {
            block_size: block_size.max(1),
            pending: Vec::with_capacity(block_size),
        }
    }

    pub fn block_size(&self) -> usize {
        self.block_size
    }

    pub fn pending(&self) -> &[EpisodeReturnRecord] {
        &self.pending
    }

    pub fn push(&mut self, record: EpisodeReturnRecord) -> Option<Vec<EpisodeReturnRecord>> {
        self.pending.push(record);
        if self.pending.len() == self.block_size {
            Some(std::mem::take(&mut self.pending))
        } else {
            None
        }
    }
}
