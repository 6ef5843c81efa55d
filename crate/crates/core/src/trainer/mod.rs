//! Training orchestration: the joint design/DRQN loop, its actor-learner
//! variant, and the fixed-design sweep used as a baseline.

mod config;
mod metrics;
mod parallel;
mod sweep;

use std::ops::Range;
use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::design_optimizer::{episode_return, DesignError, DesignPolicy, EpisodeReturnRecord, ReturnBlock};
use crate::drqn_agent::{
    q_values, sample_training_batch, select_action, ActionGrid, AgentError, DrqnAgent, EpisodeRecord,
    EpsilonSchedule, InputScaling, Observation, ReplayMemory, Transition,
};
use crate::market_env::{BatterySpec, EnvError, EpisodeTotals, MarketEnv, MarketParams};
use crate::nn::QNetwork;
use crate::timeseries::{MarketRecord, ScenarioData, ScenarioError};

pub use config::*;
pub use metrics::*;
pub use parallel::{train_parallel, train_parallel_on, FaultPlan};
pub use sweep::*;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("config: {0}")]
    Config(String),
    #[error("io: {0}")]
    Io(String),
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error(transparent)]
    Design(#[from] DesignError),
    #[error("worker {worker} failed: {message}")]
    Worker { worker: usize, message: String },
    #[error("all {workers} workers failed; last error: {last}")]
    AllWorkersFailed { workers: usize, last: String },
    #[error("run aborted after {} completed episodes: {source}", partial.episodes.len())]
    Aborted {
        source: Box<TrainError>,
        partial: Box<RunMetrics>,
    },
}

impl TrainError {
    /// Metrics collected before the failure, if the run got that far.
    pub fn partial_metrics(&self) -> Option<&RunMetrics> {
        match self {
            TrainError::Aborted { partial, .. } => Some(partial),
            _ => None,
        }
    }
}

/// Trained agent, final design distribution mean and the run history.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub config: RunConfig,
    pub agent: DrqnAgent,
    pub metrics: RunMetrics,
}

impl TrainOutcome {
    pub fn final_capacity_mwh(&self) -> f64 {
        self.metrics.final_mu * self.config.design.reference_mwh
    }
}

/// Inputs shared by every rollout of a run.
#[derive(Debug, Clone)]
pub struct RolloutContext {
    pub data: Arc<ScenarioData>,
    pub grid: ActionGrid,
    pub scaling: InputScaling,
    pub battery: BatteryConfig,
    pub params: MarketParams,
    pub initial_soc: f64,
    pub reference_mwh: f64,
}

impl RolloutContext {
    pub fn from_config(config: &RunConfig, data: Arc<ScenarioData>) -> Result<Self, TrainError> {
        let params = MarketParams {
            alpha_pen: config.market.alpha_pen,
            slot_duration_h: data.slot_duration_h(),
        };
        params.validate()?;
        Ok(Self {
            grid: config.grid()?,
            scaling: config.input_scaling(&data),
            battery: config.battery,
            params,
            initial_soc: config.battery.initial_soc(),
            reference_mwh: config.design.reference_mwh,
            data,
        })
    }

    pub fn battery_for(&self, design: f64) -> BatterySpec {
        self.battery.spec(design * self.reference_mwh)
    }
}

/// Stored transitions and totals of one rollout.
#[derive(Debug, Clone)]
pub struct Rollout {
    pub record: EpisodeRecord,
    pub totals: EpisodeTotals,
}

/// Rolls the policy `ε`-greedily through `records` with a fresh recurrent state.
#[allow(clippy::too_many_arguments)]
pub fn run_episode<R: Rng + ?Sized>(
    network: &QNetwork,
    grid: &ActionGrid,
    scaling: &InputScaling,
    records: &[MarketRecord],
    start_index: usize,
    battery: BatterySpec,
    params: MarketParams,
    initial_soc: f64,
    epsilon: f64,
    rng: &mut R,
    episode: u64,
    worker: usize,
) -> Result<Rollout, TrainError> {
    let mut env = MarketEnv::new(records, battery, params, initial_soc)?;
    let design_mwh = battery.e_max_mwh;
    let mut hidden = network.zero_state();
    let mut totals = EpisodeTotals::default();
    let mut transitions = Vec::with_capacity(records.len());
    while let Some(record) = env.current_record() {
        let price = record.price;
        let obs = Observation::new(env.state(), design_mwh);
        let (q, next_hidden) = q_values(network, &obs, scaling, &hidden)?;
        hidden = next_hidden;
        let index = select_action(&q, epsilon, rng)?;
        let out = env.step(&grid.decode(index)?)?;
        totals.add(&out, price, params.slot_duration_h);
        transitions.push(Transition {
            obs,
            action: index,
            reward: out.reward,
            next_obs: Observation::new(env.state(), design_mwh),
            terminal: env.is_done(),
        });
    }
    Ok(Rollout {
        record: EpisodeRecord {
            episode,
            worker,
            design_mwh,
            start_index,
            transitions,
        },
        totals,
    })
}

/// Greedy rollout over the whole scenario at a given design.
pub fn evaluate_greedy(network: &QNetwork, ctx: &RolloutContext, design: f64) -> Result<EpisodeTotals, TrainError> {
    let mut unused = ChaCha8Rng::seed_from_u64(0);
    let r = run_episode(
        network,
        &ctx.grid,
        &ctx.scaling,
        ctx.data.records(),
        0,
        ctx.battery_for(design),
        ctx.params,
        ctx.initial_soc,
        0.0,
        &mut unused,
        u64::MAX,
        0,
    )?;
    Ok(r.totals)
}

// Independent RNG streams derived from the run seed.
const STREAM_INIT: u64 = 1;
const STREAM_DESIGN: u64 = 2;
const STREAM_LEARNER: u64 = 3;
const STREAM_ROLLOUT: u64 = 4;

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn rollout_rng(seed: u64, episode: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9E37_79B9_7F4A_7C15);
    rng.set_stream(STREAM_ROLLOUT.wrapping_add(episode.wrapping_mul(2).wrapping_add(16)));
    rng
}

/// Work item handed to an actor.
#[derive(Debug, Clone)]
pub(crate) struct Job {
    pub episode: u64,
    pub worker: usize,
    pub design: f64,
    pub epsilon: f64,
    pub mu: f64,
    pub snapshot: Arc<QNetwork>,
    pub snapshot_version: u64,
    pub slice: Range<usize>,
    pub seed: u64,
}

pub(crate) fn execute_job(ctx: &RolloutContext, job: &Job) -> Result<Rollout, TrainError> {
    let mut rng = rollout_rng(job.seed, job.episode);
    run_episode(
        &job.snapshot,
        &ctx.grid,
        &ctx.scaling,
        &ctx.data.records()[job.slice.clone()],
        job.slice.start,
        ctx.battery_for(job.design),
        ctx.params,
        ctx.initial_soc,
        job.epsilon,
        &mut rng,
        job.episode,
        job.worker,
    )
}

/// Learner, replay owner and design owner. Serial and parallel training
/// differ only in who executes the jobs it hands out.
pub(crate) struct Coordinator {
    config: RunConfig,
    ctx: Arc<RolloutContext>,
    slices: Vec<Range<usize>>,
    agent: DrqnAgent,
    design: DesignPolicy,
    block: ReturnBlock,
    replay: ReplayMemory,
    schedule: EpsilonSchedule,
    design_rng: ChaCha8Rng,
    learner_rng: ChaCha8Rng,
    owed_updates: u64,
    completed: u64,
    snapshot: Arc<QNetwork>,
    snapshot_version: u64,
    metrics: RunMetrics,
    started: Instant,
}

impl Coordinator {
    pub fn new(config: &RunConfig, data: ScenarioData, workers: usize) -> Result<Self, TrainError> {
        config.validate()?;
        let data = Arc::new(data);
        let slices = data.partition(workers)?;
        let seq = config.agent.sequence_length;
        if let Some(short) = slices.iter().find(|s| s.len() < seq) {
            return Err(TrainError::Config(format!(
                "episode slice of {} slots is shorter than sequence_length {seq}",
                short.len()
            )));
        }
        let ctx = Arc::new(RolloutContext::from_config(config, data)?);
        let mut init_rng = stream_rng(config.seed, STREAM_INIT);
        let agent = DrqnAgent::new(config.agent, ctx.grid.clone(), ctx.scaling, &mut init_rng)?;
        let design = config.design_policy()?;
        let snapshot = Arc::new(agent.online.clone());
        Ok(Self {
            config: config.clone(),
            slices,
            block: ReturnBlock::new(config.design.n_up),
            replay: ReplayMemory::new(config.agent.replay_capacity),
            schedule: config.epsilon_schedule(),
            design_rng: stream_rng(config.seed, STREAM_DESIGN),
            learner_rng: stream_rng(config.seed, STREAM_LEARNER),
            owed_updates: 0,
            completed: 0,
            snapshot,
            snapshot_version: 0,
            metrics: RunMetrics {
                initial_mu: design.mu(),
                final_mu: design.mu(),
                ..RunMetrics::default()
            },
            started: Instant::now(),
            agent,
            design,
            ctx,
        })
    }

    pub fn context(&self) -> Arc<RolloutContext> {
        self.ctx.clone()
    }

    pub fn completed(&self) -> u64 {
        self.completed
    }

    /// Builds the next job: samples the design, fixes ε and snapshots the policy.
    pub fn dispatch(&mut self, episode: u64, worker: usize) -> Job {
        if self.snapshot_version != self.agent.updates() {
            self.snapshot = Arc::new(self.agent.online.clone());
            self.snapshot_version = self.agent.updates();
        }
        let design = if self.config.design.optimize {
            self.design.sample_design(&mut self.design_rng)
        } else {
            self.design.mu()
        };
        Job {
            episode,
            worker,
            design,
            epsilon: self.schedule.value(episode),
            mu: self.design.mu(),
            snapshot: self.snapshot.clone(),
            snapshot_version: self.snapshot_version,
            slice: self.slices[worker].clone(),
            seed: self.config.seed,
        }
    }

    /// Consumes a finished rollout. `oldest_inflight` is the oldest snapshot
    /// version still held by an actor; it caps learner progress.
    pub fn complete(
        &mut self,
        job: &Job,
        rollout: Rollout,
        oldest_inflight: Option<u64>,
        rollout_seconds: f64,
    ) -> Result<(), TrainError> {
        self.metrics.timings.rollout_seconds += rollout_seconds;
        let capacity = job.design * self.config.design.reference_mwh;
        let econ = self.config.economics;
        let totals = rollout.totals;
        let ret = episode_return(totals.total_reward, capacity, econ.w_anu, econ.p_bat);
        let start_index = rollout.record.start_index;
        let slots = rollout.record.len();
        self.replay.push(rollout.record);

        if self.replay.len() >= self.config.training.warmup_episodes.max(1) {
            self.owed_updates += self.config.training.updates_per_episode as u64;
        }
        let staleness = self.agent.updates() - job.snapshot_version;
        let mean_loss = self.run_updates(oldest_inflight)?;

        if self.config.design.optimize {
            let record = EpisodeReturnRecord {
                episode: job.episode,
                design: job.design,
                ret,
            };
            if let Some(block) = self.block.push(record) {
                let u = self.design.update_mu(&block, block.len())?;
                self.metrics.mu_updates.push(MuUpdateRecord {
                    index: self.metrics.mu_updates.len(),
                    after_episodes: self.completed + 1,
                    mu_before: u.mu_before,
                    mu: u.mu_after,
                    mu_mwh: u.mu_after * self.config.design.reference_mwh,
                    gradient: u.gradient,
                    mean_return: u.mean_return,
                });
            }
        }

        self.metrics.episodes.push(EpisodeMetrics {
            episode: job.episode,
            worker: job.worker,
            completed: self.completed,
            start_index,
            slots,
            design: job.design,
            capacity_mwh: capacity,
            epsilon: job.epsilon,
            sum_reward: totals.total_reward,
            net_revenue: totals.net_revenue,
            ret,
            mu: job.mu,
            learner_updates: self.agent.updates(),
            mean_loss,
            staleness,
        });
        self.completed += 1;
        let every = self.config.evaluation.every;
        if every > 0 && self.completed.is_multiple_of(every) {
            self.evaluate()?;
        }
        Ok(())
    }

    fn run_updates(&mut self, oldest_inflight: Option<u64>) -> Result<Option<f64>, TrainError> {
        let allowed = match oldest_inflight {
            Some(v) => (v + self.config.parallel.staleness_bound).saturating_sub(self.agent.updates()),
            None => u64::MAX,
        };
        let n = self.owed_updates.min(allowed);
        if n == 0 {
            return Ok(None);
        }
        let t = Instant::now();
        let cfg = self.config.agent;
        let mut loss_sum = 0.0;
        for _ in 0..n {
            let batch = sample_training_batch(&self.replay, cfg.batch_size, cfg.sequence_length, &mut self.learner_rng)
                .expect("slices are at least sequence_length long");
            loss_sum += self.agent.td_update(&batch)?;
        }
        self.owed_updates -= n;
        self.metrics.timings.learner_seconds += t.elapsed().as_secs_f64();
        Ok(Some(loss_sum / n as f64))
    }

    fn evaluate(&mut self) -> Result<(), TrainError> {
        let t = Instant::now();
        let design = self.design.mu();
        let totals = evaluate_greedy(&self.agent.online, &self.ctx, design)?;
        let capacity = design * self.config.design.reference_mwh;
        let econ = self.config.economics;
        self.metrics.evaluations.push(EvaluationRecord {
            after_episodes: self.completed,
            design,
            capacity_mwh: capacity,
            ret: episode_return(totals.total_reward, capacity, econ.w_anu, econ.p_bat),
            totals,
        });
        self.metrics.timings.evaluation_seconds += t.elapsed().as_secs_f64();
        Ok(())
    }

    pub fn record_failure(&mut self, worker: usize, episode: u64, error: &TrainError) {
        log::warn!("worker {worker} failed on episode {episode}: {error}");
        self.metrics.worker_failures.push(WorkerFailure {
            worker,
            episode,
            error: error.to_string(),
        });
    }

    fn snapshot_metrics(&mut self) -> RunMetrics {
        self.metrics.final_mu = self.design.mu();
        self.metrics.learner_updates = self.agent.updates();
        self.metrics.timings.wall_seconds = self.started.elapsed().as_secs_f64();
        self.metrics.clone()
    }

    pub fn abort(&mut self, error: TrainError) -> TrainError {
        TrainError::Aborted {
            source: Box::new(error),
            partial: Box::new(self.snapshot_metrics()),
        }
    }

    /// Applies deferred updates, runs the final evaluation and hands back the results.
    pub fn finish(mut self) -> Result<TrainOutcome, TrainError> {
        if let Err(e) = self.run_updates(None) {
            return Err(self.abort(e));
        }
        let evaluated = self.metrics.evaluations.last().map(|e| e.after_episodes) == Some(self.completed);
        if !evaluated {
            if let Err(e) = self.evaluate() {
                return Err(self.abort(e));
            }
        }
        let metrics = self.snapshot_metrics();
        Ok(TrainOutcome {
            config: self.config,
            agent: self.agent,
            metrics,
        })
    }
}

/// Serial training: one actor, learner updates after every episode.
pub fn train(config: &RunConfig) -> Result<TrainOutcome, TrainError> {
    let data = config.scenario.load()?;
    train_on(config, data)
}

pub fn train_on(config: &RunConfig, data: ScenarioData) -> Result<TrainOutcome, TrainError> {
    let mut coord = Coordinator::new(config, data, 1)?;
    let ctx = coord.context();
    for episode in 0..config.episodes {
        let job = coord.dispatch(episode, 0);
        let t = Instant::now();
        let rollout = execute_job(&ctx, &job).map_err(|e| coord.abort(e))?;
        let secs = t.elapsed().as_secs_f64();
        coord.complete(&job, rollout, None, secs).map_err(|e| coord.abort(e))?;
    }
    coord.finish()
}
