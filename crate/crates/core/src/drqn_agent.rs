//! Recurrent Q-learning bidding agent.
//!
//! The network sees `(x_{t−1}, λ_{t−1}, soc_t, ω)` and outputs one value per
//! joint action `(bid, scale)`. Joint actions are encoded row-major:
//! `index = bid_index · |scales| + scale_index`.
//!
//! Training follows bootstrapped random updates: fixed-length windows are cut
//! at random offsets from stored episodes and replayed from a zeroed LSTM state.

use std::collections::VecDeque;
use std::fmt::Write as _;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::market_env::{Action, EnvState};
use crate::nn::{AdamState, NnError, QNetwork, RecurrentState};

/// Width of the network input: three observation channels plus the design.
pub const INPUT_DIM: usize = 4;

const AGENT_MAGIC: &str = "bessco-agent";
const AGENT_VERSION: u32 = 1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AgentError {
    #[error("invalid action grid: {0}")]
    InvalidGrid(String),
    #[error("joint action index {index} out of range for {len} actions")]
    ActionIndex { index: usize, len: usize },
    #[error("epsilon {0} outside [0, 1]")]
    Epsilon(f64),
    #[error("empty Q-value vector")]
    EmptyQ,
    #[error("invalid agent config: {0}")]
    Config(String),
    #[error("training produced a non-finite loss")]
    NonFiniteLoss,
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("agent checkpoint: {0}")]
    Checkpoint(String),
}

/// Discrete bids and scaling factors; the joint action set is their product.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionGrid {
    bids: Vec<f64>,
    scales: Vec<f64>,
}

impl ActionGrid {
    pub fn new(bids: Vec<f64>, scales: Vec<f64>) -> Result<Self, AgentError> {
        for (name, v) in [("bids", &bids), ("scales", &scales)] {
            if v.is_empty() {
                return Err(AgentError::InvalidGrid(format!("{name} is empty")));
            }
            if v.iter().any(|x| !x.is_finite() || *x < 0.0) {
                return Err(AgentError::InvalidGrid(format!("{name} must be finite and non-negative")));
            }
            if v.windows(2).any(|w| w[1] <= w[0]) {
                return Err(AgentError::InvalidGrid(format!("{name} must be strictly increasing")));
            }
        }
        Ok(Self { bids, scales })
    }

    /// Bids `0.0..=max_bid` in `step` increments together with `scales`.
    pub fn uniform_bids(max_bid: f64, step: f64, scales: Vec<f64>) -> Result<Self, AgentError> {
        if !(step > 0.0) || !(max_bid >= 0.0) {
            return Err(AgentError::InvalidGrid("need step > 0 and max_bid >= 0".into()));
        }
        let n = (max_bid / step + 1e-9).floor() as usize;
        // multiply rather than accumulate so grid points are exact-ish decimals
        let bids = (0..=n).map(|i| ((i as f64 * step) * 1e9).round() / 1e9).collect();
        Self::new(bids, scales)
    }

    pub fn bids(&self) -> &[f64] {
        &self.bids
    }

    pub fn scales(&self) -> &[f64] {
        &self.scales
    }

    pub fn len(&self) -> usize {
        self.bids.len() * self.scales.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn encode(&self, bid_index: usize, scale_index: usize) -> Result<usize, AgentError> {
        if bid_index >= self.bids.len() || scale_index >= self.scales.len() {
            return Err(AgentError::ActionIndex {
                index: bid_index * self.scales.len() + scale_index,
                len: self.len(),
            });
        }
        Ok(bid_index * self.scales.len() + scale_index)
    }

    pub fn decode(&self, index: usize) -> Result<Action, AgentError> {
        if index >= self.len() {
            return Err(AgentError::ActionIndex { index, len: self.len() });
        }
        let n = self.scales.len();
        Ok(Action {
            bid_mw: self.bids[index / n],
            scale: self.scales[index % n],
        })
    }
}

impl Default for ActionGrid {
    fn default() -> Self {
        Self::uniform_bids(0.6, 0.1, vec![0.0, 0.5, 1.0]).expect("static grid")
    }
}

/// Divisors that bring raw observations to order one before they enter the network.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InputScaling {
    pub generation_mw: f64,
    pub price: f64,
    pub design_reference_mwh: f64,
}

impl Default for InputScaling {
    fn default() -> Self {
        Self {
            generation_mw: 0.6,
            price: 10.0,
            design_reference_mwh: 0.6,
        }
    }
}

impl InputScaling {
    pub fn validate(&self) -> Result<(), AgentError> {
        for (name, v) in [
            ("generation_mw", self.generation_mw),
            ("price", self.price),
            ("design_reference_mwh", self.design_reference_mwh),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(AgentError::Config(format!("input scaling `{name}` must be > 0")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub last_generation: f64,
    pub last_price: f64,
    pub soc: f64,
    /// Battery capacity of the episode (MWh).
    pub design_mwh: f64,
}

impl Observation {
    pub fn new(state: &EnvState, design_mwh: f64) -> Self {
        Self {
            last_generation: state.last_generation,
            last_price: state.last_price,
            soc: state.soc,
            design_mwh,
        }
    }

    pub fn to_input(&self, scaling: &InputScaling) -> [f64; INPUT_DIM] {
        [
            self.last_generation / scaling.generation_mw,
            self.last_price / scaling.price,
            self.soc,
            self.design_mwh / scaling.design_reference_mwh,
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub obs: Observation,
    pub action: usize,
    pub reward: f64,
    pub next_obs: Observation,
    pub terminal: bool,
}

/// One rollout as stored in replay. The design is fixed for the whole episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub episode: u64,
    pub worker: usize,
    pub design_mwh: f64,
    /// Index of the first slot in the scenario.
    pub start_index: usize,
    pub transitions: Vec<Transition>,
}

impl EpisodeRecord {
    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    pub fn total_reward(&self) -> f64 {
        self.transitions.iter().map(|t| t.reward).sum()
    }
}

/// Bounded episode store with oldest-first eviction.
#[derive(Debug, Clone)]
pub struct ReplayMemory {
    capacity: usize,
    episodes: VecDeque<EpisodeRecord>,
    inserted: u64,
}

impl ReplayMemory {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity: capacity.max(1),
            episodes: VecDeque::with_capacity(capacity.min(4096)),
            inserted: 0,
        }
    }

    pub fn push(&mut self, episode: EpisodeRecord) {
        if self.episodes.len() == self.capacity {
            self.episodes.pop_front();
        }
        self.episodes.push_back(episode);
        self.inserted += 1;
    }

    pub fn len(&self) -> usize {
        self.episodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.episodes.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn total_inserted(&self) -> u64 {
        self.inserted
    }

    pub fn episodes(&self) -> impl Iterator<Item = &EpisodeRecord> {
        self.episodes.iter()
    }
}

/// A contiguous in-episode slice selected for training.
#[derive(Debug, Clone, Copy)]
pub struct TrainingWindow<'a> {
    pub episode: u64,
    pub start: usize,
    pub transitions: &'a [Transition],
}

/// Draws `batch_size` windows of `sequence_length` steps.
///
/// Episodes are chosen uniformly among those long enough, then the start offset
/// uniformly within the episode. Returns `None` when no stored episode is long
/// enough.
pub fn sample_training_batch<'a, R: Rng + ?Sized>(
    memory: &'a ReplayMemory,
    batch_size: usize,
    sequence_length: usize,
    rng: &mut R,
) -> Option<Vec<TrainingWindow<'a>>> {
    if batch_size == 0 || sequence_length == 0 {
        return None;
    }
    let eligible: Vec<&EpisodeRecord> = memory.episodes().filter(|e| e.len() >= sequence_length).collect();
    if eligible.is_empty() {
        return None;
    }
    let batch = (0..batch_size)
        .map(|_| {
            let ep = eligible[rng.random_range(0..eligible.len())];
            let start = rng.random_range(0..=ep.len() - sequence_length);
            TrainingWindow {
                episode: ep.episode,
                start,
                transitions: &ep.transitions[start..start + sequence_length],
            }
        })
        .collect();
    Some(batch)
}

/// ε-greedy over a Q vector; greedy ties resolve to the lowest index.
pub fn select_action<R: Rng + ?Sized>(q: &[f64], epsilon: f64, rng: &mut R) -> Result<usize, AgentError> {
    if q.is_empty() {
        return Err(AgentError::EmptyQ);
    }
    if !(0.0..=1.0).contains(&epsilon) {
        return Err(AgentError::Epsilon(epsilon));
    }
    if epsilon > 0.0 && rng.random::<f64>() < epsilon {
        return Ok(rng.random_range(0..q.len()));
    }
    Ok(greedy(q))
}

pub fn greedy(q: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in q.iter().enumerate() {
        if *v > q[best] {
            best = i;
        }
    }
    best
}

/// Linear ε decay from `start` to `end` over `decay_episodes`, then flat.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpsilonSchedule {
    pub start: f64,
    pub end: f64,
    pub decay_episodes: u64,
}

impl EpsilonSchedule {
    pub fn value(&self, episode: u64) -> f64 {
        if self.decay_episodes == 0 || episode >= self.decay_episodes {
            return self.end;
        }
        let frac = episode as f64 / self.decay_episodes as f64;
        self.start + (self.end - self.start) * frac
    }
}

/// Q-values for one observation; also advances the recurrent state.
pub fn q_values(
    network: &QNetwork,
    obs: &Observation,
    scaling: &InputScaling,
    state: &RecurrentState,
) -> Result<(Vec<f64>, RecurrentState), AgentError> {
    Ok(network.step(&obs.to_input(scaling), state)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DrqnConfig {
    pub hidden: usize,
    pub gamma: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub sequence_length: usize,
    pub replay_capacity: usize,
    pub target_sync_every: u64,
    pub grad_clip: f64,
    /// Rewards are multiplied by this before entering the TD target.
    pub reward_scale: f64,
    /// Use the online network to pick the bootstrap action (double Q-learning).
    pub double_q: bool,
}

impl Default for DrqnConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            gamma: 0.9,
            learning_rate: 1e-4,
            batch_size: 8,
            sequence_length: 24,
            replay_capacity: 500,
            target_sync_every: 100,
            grad_clip: 10.0,
            reward_scale: 1.0,
            double_q: false,
        }
    }
}

impl DrqnConfig {
    pub fn validate(&self) -> Result<(), AgentError> {
        let fail = |m: &str| Err(AgentError::Config(m.to_string()));
        if self.hidden == 0 {
            return fail("hidden must be >= 1");
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return fail("gamma must lie in [0, 1)");
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return fail("learning_rate must be > 0");
        }
        if self.batch_size == 0 || self.sequence_length == 0 || self.replay_capacity == 0 {
            return fail("batch_size, sequence_length and replay_capacity must be >= 1");
        }
        if self.target_sync_every == 0 {
            return fail("target_sync_every must be >= 1");
        }
        if !(self.grad_clip >= 0.0) || !(self.reward_scale.is_finite() && self.reward_scale > 0.0) {
            return fail("grad_clip must be >= 0 and reward_scale > 0");
        }
        Ok(())
    }
}

/// Online network, target network and optimizer of one learner.
#[derive(Debug, Clone)]
pub struct DrqnAgent {
    pub online: QNetwork,
    pub target: QNetwork,
    pub grid: ActionGrid,
    pub scaling: InputScaling,
    pub config: DrqnConfig,
    adam: AdamState,
    updates: u64,
}

impl DrqnAgent {
    pub fn new<R: Rng + ?Sized>(
        config: DrqnConfig,
        grid: ActionGrid,
        scaling: InputScaling,
        rng: &mut R,
    ) -> Result<Self, AgentError> {
        config.validate()?;
        scaling.validate()?;
        let online = QNetwork::new(INPUT_DIM, config.hidden, grid.len(), rng);
        Ok(Self::from_network(online, config, grid, scaling))
    }

    pub fn from_network(online: QNetwork, config: DrqnConfig, grid: ActionGrid, scaling: InputScaling) -> Self {
        let shapes: Vec<usize> = online.tensors().iter().map(|t| t.len()).collect();
        Self {
            target: online.clone(),
            adam: AdamState::new(&shapes, config.learning_rate),
            online,
            grid,
            scaling,
            config,
            updates: 0,
        }
    }

    /// Number of learner updates applied so far.
    pub fn updates(&self) -> u64 {
        self.updates
    }

    pub fn q_values(&self, obs: &Observation, state: &RecurrentState) -> Result<(Vec<f64>, RecurrentState), AgentError> {
        q_values(&self.online, obs, &self.scaling, state)
    }

    pub fn sync_target(&mut self) {
        self.target.copy_from(&self.online);
    }

    /// One gradient step of the squared TD error over a batch of windows.
    ///
    /// Returns the mean squared TD error before the step.
    pub fn td_update(&mut self, batch: &[TrainingWindow<'_>]) -> Result<f64, AgentError> {
        if batch.is_empty() {
            return Ok(0.0);
        }
        let gamma = self.config.gamma;
        let count: usize = batch.iter().map(|w| w.transitions.len()).sum();
        let mut grads: Option<crate::nn::Gradients> = None;
        let mut loss = 0.0;

        for window in batch {
            let tr = window.transitions;
            let inputs: Vec<Vec<f64>> = tr.iter().map(|t| t.obs.to_input(&self.scaling).to_vec()).collect();
            // target sees o_0 .. o_{L-1}, o_L so position t+1 has the same history as the online pass
            let mut target_inputs = inputs.clone();
            target_inputs.push(tr[tr.len() - 1].next_obs.to_input(&self.scaling).to_vec());

            let trace = self.online.forward_sequence(&inputs, &self.online.zero_state())?;
            let target_trace = self.target.forward_sequence(&target_inputs, &self.target.zero_state())?;
            let online_next = if self.config.double_q {
                Some(self.online.forward_sequence(&target_inputs, &self.online.zero_state())?)
            } else {
                None
            };

            let mut upstream = vec![vec![0.0; self.grid.len()]; tr.len()];
            for (t, transition) in tr.iter().enumerate() {
                let q = &trace.steps[t].output;
                let mut target = transition.reward * self.config.reward_scale;
                if !transition.terminal {
                    let q_next = &target_trace.steps[t + 1].output;
                    let bootstrap = match &online_next {
                        Some(on) => q_next[greedy(&on.steps[t + 1].output)],
                        None => q_next.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                    };
                    target += gamma * bootstrap;
                }
                let td = target - q[transition.action];
                loss += td * td;
                upstream[t][transition.action] = -2.0 * td / count as f64;
            }
            let g = self.online.backward(&trace, &upstream)?;
            match grads.as_mut() {
                Some(acc) => acc.accumulate(&g),
                None => grads = Some(g),
            }
        }

        let loss = loss / count as f64;
        if !loss.is_finite() {
            return Err(AgentError::NonFiniteLoss);
        }
        let mut grads = grads.expect("non-empty batch");
        if self.config.grad_clip > 0.0 {
            grads.clip_global_norm(self.config.grad_clip);
        }
        let grad_refs: Vec<&[f64]> = grads.tensors.iter().map(Vec::as_slice).collect();
        let mut params = self.online.tensors_mut();
        self.adam.step(&mut params, &grad_refs)?;

        self.updates += 1;
        if self.updates.is_multiple_of(self.config.target_sync_every) {
            self.sync_target();
        }
        Ok(loss)
    }

    /// Network checkpoint plus grid and input scaling, as versioned text.
    pub fn to_checkpoint_string(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{AGENT_MAGIC} {AGENT_VERSION}");
        let join = |v: &[f64]| v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(" ");
        let _ = writeln!(out, "bids {}", join(self.grid.bids()));
        let _ = writeln!(out, "scales {}", join(self.grid.scales()));
        let _ = writeln!(
            out,
            "scaling {:?} {:?} {:?}",
            self.scaling.generation_mw, self.scaling.price, self.scaling.design_reference_mwh
        );
        self.online.write_checkpoint(&mut out);
        out
    }

    pub fn from_checkpoint_str(text: &str, config: DrqnConfig) -> Result<Self, AgentError> {
        let err = |m: String| AgentError::Checkpoint(m);
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| err("empty checkpoint".into()))?;
        if header != format!("{AGENT_MAGIC} {AGENT_VERSION}") {
            return Err(err(format!("unsupported header `{header}`")));
        }
        let mut floats = |key: &str| -> Result<Vec<f64>, AgentError> {
            let line = lines.next().ok_or_else(|| err(format!("missing `{key}` line")))?;
            let mut it = line.split_whitespace();
            if it.next() != Some(key) {
                return Err(err(format!("expected `{key}` line")));
            }
            it.map(|t| t.parse::<f64>().map_err(|e| err(format!("`{key}`: {e}"))))
                .collect()
        };
        let bids = floats("bids")?;
        let scales = floats("scales")?;
        let s = floats("scaling")?;
        if s.len() != 3 {
            return Err(err("scaling needs 3 values".into()));
        }
        let grid = ActionGrid::new(bids, scales)?;
        let scaling = InputScaling {
            generation_mw: s[0],
            price: s[1],
            design_reference_mwh: s[2],
        };
        let net = QNetwork::read_checkpoint(&mut lines)?;
        if net.outputs() != grid.len() || net.input_dim() != INPUT_DIM {
            return Err(err("network shape does not match grid".into()));
        }
        let config = DrqnConfig {
            hidden: net.hidden(),
            ..config
        };
        Ok(Self::from_network(net, config, grid, scaling))
    }
}
