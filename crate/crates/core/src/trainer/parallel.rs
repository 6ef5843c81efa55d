//! Actor-learner training. Actors roll out on their own contiguous slice of
//! the scenario with a policy snapshot; the coordinating thread owns replay,
//! the learner and the design distribution and consumes episodes in
//! completion order.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::thread;
use std::time::Instant;

use crossbeam_channel::{bounded, unbounded, Sender};

use super::{execute_job, Coordinator, Job, Rollout, RunConfig, TrainError, TrainOutcome};
use crate::timeseries::ScenarioData;

/// Injected actor failures, keyed by worker and the worker's job count.
#[derive(Debug, Clone, Default)]
pub struct FaultPlan {
    pub failures: Vec<(usize, u64)>,
}

impl FaultPlan {
    pub fn none() -> Self {
        Self::default()
    }

    fn fails(&self, worker: usize, nth: u64) -> bool {
        self.failures.contains(&(worker, nth))
    }
}

struct Finished {
    job: Job,
    result: Result<Rollout, TrainError>,
    seconds: f64,
}

pub fn train_parallel(config: &RunConfig) -> Result<TrainOutcome, TrainError> {
    let data = config.scenario.load()?;
    train_parallel_on(config, data, &FaultPlan::none())
}

/// Runs `config.workers` actor threads. With one worker the trajectory is
/// identical to [`super::train_on`].
pub fn train_parallel_on(config: &RunConfig, data: ScenarioData, faults: &FaultPlan) -> Result<TrainOutcome, TrainError> {
    let workers = config.workers;
    let mut coord = Coordinator::new(config, data, workers)?;
    let ctx = coord.context();
    let (done_tx, done_rx) = unbounded::<Finished>();

    let result = thread::scope(|scope| {
        let mut job_txs: Vec<Option<Sender<Job>>> = Vec::with_capacity(workers);
        for worker in 0..workers {
            let (tx, rx) = bounded::<Job>(1);
            job_txs.push(Some(tx));
            let done_tx = done_tx.clone();
            let ctx = ctx.clone();
            scope.spawn(move || {
                for (nth, job) in (0u64..).zip(rx) {
                    let t = Instant::now();
                    let result = if faults.fails(worker, nth) {
                        Err(TrainError::Worker {
                            worker,
                            message: "injected failure".into(),
                        })
                    } else {
                        catch_unwind(AssertUnwindSafe(|| execute_job(&ctx, &job))).unwrap_or_else(|_| {
                            Err(TrainError::Worker {
                                worker,
                                message: "actor panicked".into(),
                            })
                        })
                    };
                    let seconds = t.elapsed().as_secs_f64();
                    if done_tx.send(Finished { job, result, seconds }).is_err() {
                        break;
                    }
                }
            });
        }
        drop(done_tx);

        let total = config.episodes;
        let mut next_episode = 0u64;
        let mut inflight: BTreeMap<usize, u64> = BTreeMap::new();
        let mut alive = workers;

        let send = |coord: &mut Coordinator,
                    job_txs: &mut [Option<Sender<Job>>],
                    inflight: &mut BTreeMap<usize, u64>,
                    worker: usize,
                    episode: u64| {
            let job = coord.dispatch(episode, worker);
            inflight.insert(worker, job.snapshot_version);
            if let Some(tx) = &job_txs[worker] {
                tx.send(job).expect("actor thread alive while its sender is held");
            }
        };

        for worker in 0..workers {
            if next_episode < total {
                send(&mut coord, &mut job_txs, &mut inflight, worker, next_episode);
                next_episode += 1;
            }
        }

        while !inflight.is_empty() {
            let Finished { job, result, seconds } = done_rx.recv().expect("actors hold a sender while jobs are in flight");
            inflight.remove(&job.worker);
            match result {
                Ok(rollout) => {
                    let oldest = inflight.values().min().copied();
                    if let Err(e) = coord.complete(&job, rollout, oldest, seconds) {
                        job_txs.clear();
                        return Err(coord.abort(e));
                    }
                }
                Err(e) => {
                    coord.record_failure(job.worker, job.episode, &e);
                    job_txs[job.worker] = None;
                    alive -= 1;
                    if alive == 0 {
                        job_txs.clear();
                        let err = TrainError::AllWorkersFailed {
                            workers,
                            last: e.to_string(),
                        };
                        return Err(coord.abort(err));
                    }
                    // the lost episode is replaced by a fresh one on a live actor
                    let idle = (0..workers).find(|w| job_txs[*w].is_some() && !inflight.contains_key(w));
                    if let Some(w) = idle {
                        if coord.completed() + (inflight.len() as u64) < total {
                            send(&mut coord, &mut job_txs, &mut inflight, w, next_episode);
                            next_episode += 1;
                        }
                    }
                    continue;
                }
            }
            if job_txs[job.worker].is_some() && coord.completed() + (inflight.len() as u64) < total {
                send(&mut coord, &mut job_txs, &mut inflight, job.worker, next_episode);
                next_episode += 1;
            }
        }
        job_txs.clear();
        Ok(())
    });
    result?;
    coord.finish()
}
