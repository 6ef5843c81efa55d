//! `bessco`: train, sweep, evaluate, synthesize data and build reports.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use bessco_core::drqn_agent::DrqnAgent;
use bessco_core::report::{generate_report, ReportError};
use bessco_core::timeseries::{save_scenario, synthesize_scenario, ScenarioError};
use bessco_core::trainer::{
    evaluate_greedy, sweep, train, train_parallel, write_config, write_metrics_lines, write_run_outputs,
    write_sweep_outputs, EvaluationRecord, MetricsLine, RolloutContext, RunConfig, TrainError, TrainOutcome,
    METRICS_FILE, SUMMARY_FILE,
};
use bessco_core::design_optimizer::episode_return;
use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "bessco", version, about = "Battery sizing and market bidding co-optimization")]
struct Cli {
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct RunArgs {
    /// Run configuration (TOML). Defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the episode count.
    #[arg(long)]
    episodes: Option<u64>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Joint design/bidding training with one actor.
    Train(RunArgs),
    /// Actor-learner training with several workers.
    TrainParallel {
        #[command(flatten)]
        run: RunArgs,
        /// Overrides the worker count.
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Fixed-design training for each design on a grid.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        /// Comma-separated normalized designs, e.g. 0.1,0.5,0.9.
        #[arg(long, value_delimiter = ',', required = true)]
        designs: Vec<f64>,
        #[arg(long, default_value_t = 1)]
        repeats: usize,
    },
    /// Greedy rollout of a saved agent over the configured scenario.
    Evaluate {
        #[command(flatten)]
        run: RunArgs,
        /// Agent checkpoint written by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Normalized design to evaluate; defaults to the config's mu0.
        #[arg(long)]
        design: Option<f64>,
    },
    /// Write a synthetic scenario file.
    SynthData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 168)]
        slots: usize,
        /// Takes the generator profile from this config's `[scenario.profile]`.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Build CSV tables from a metrics directory.
    Report {
        /// Directory containing metrics.jsonl.
        #[arg(long)]
        metrics: PathBuf,
        /// Output directory; defaults to the metrics directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Failure class, mapped to the process exit code.
#[derive(Debug)]
enum Failure {
    Config(String),
    Runtime(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Config(_) => 2,
            Failure::Runtime(_) => 3,
        }
    }
}

impl From<TrainError> for Failure {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(_) | TrainError::Scenario(_) => Failure::Config(e.to_string()),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

impl From<ScenarioError> for Failure {
    fn from(e: ScenarioError) -> Self {
        Failure::Config(e.to_string())
    }
}

impl From<ReportError> for Failure {
    fn from(e: ReportError) -> Self {
        Failure::Runtime(e.to_string())
    }
}

fn load_config(args: &RunArgs) -> Result<RunConfig, Failure> {
    let mut cfg = match &args.config {
        // an unreadable config file is a config problem, not a runtime one
        Some(path) => RunConfig::from_file(path).map_err(|e| Failure::Config(e.to_string()))?,
        None => RunConfig::default(),
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(n) = args.episodes {
        cfg.episodes = n;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn print_run(outcome: &TrainOutcome, out: &Path) {
    let m = &outcome.metrics;
    println!("episodes: {}", m.episodes.len());
    println!("learner updates: {}", m.learner_updates);
    println!(
        "mu: {} -> {} ({} MWh)",
        m.initial_mu,
        m.final_mu,
        outcome.final_capacity_mwh()
    );
    if let Some(e) = m.final_evaluation() {
        println!(
            "final evaluation: total reward {:.4}, net revenue {:.4}, baseline {:.4}",
            e.totals.total_reward, e.totals.net_revenue, e.totals.baseline_revenue
        );
    }
    if !m.worker_failures.is_empty() {
        println!("worker failures: {}", m.worker_failures.len());
    }
    println!("outputs: {}", out.display());
}

fn persist_run(result: Result<TrainOutcome, TrainError>, out: &Path) -> Result<(), Failure> {
    match result {
        Ok(outcome) => {
            write_run_outputs(out, &outcome)?;
            print_run(&outcome, out);
            Ok(())
        }
        Err(e) => {
            if let Some(partial) = e.partial_metrics() {
                let _ = std::fs::create_dir_all(out);
                let lines = bessco_core::trainer::run_lines(partial);
                if write_metrics_lines(&out.join(METRICS_FILE), &lines).is_ok() {
                    eprintln!("partial metrics written to {}", out.join(METRICS_FILE).display());
                }
            }
            Err(e.into())
        }
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Train(args) => {
            let cfg = load_config(&args)?;
            persist_run(train(&cfg), &args.out)
        }
        Command::TrainParallel { run, workers } => {
            let mut cfg = load_config(&run)?;
            if let Some(w) = workers {
                cfg.workers = w;
                cfg.validate()?;
            }
            persist_run(train_parallel(&cfg), &run.out)
        }
        Command::Sweep { run, designs, repeats } => {
            let cfg = load_config(&run)?;
            let result = sweep(&cfg, &designs, repeats)?;
            write_sweep_outputs(&run.out, &result, &cfg)?;
            let p = cfg.economics.p_bat;
            for row in result.table(p) {
                let mean = row.filtered.or(row.all).map(|q| q.mean).unwrap_or(f64::NAN);
                println!("design {:>6} mean G {:>12.4} flagged {}", row.design, mean, row.flagged);
            }
            match result.argmax(p, true) {
                Some(d) => println!("argmax design: {d}"),
                None => println!("argmax design: none (all runs flagged or failed)"),
            }
            if !result.failures.is_empty() {
                println!("failed runs: {}", result.failures.len());
            }
            println!("outputs: {}", run.out.display());
            Ok(())
        }
        Command::Evaluate {
            run,
            checkpoint,
            design,
        } => {
            let cfg = load_config(&run)?;
            let text = std::fs::read_to_string(&checkpoint)
                .map_err(|e| Failure::Config(format!("{}: {e}", checkpoint.display())))?;
            let agent = DrqnAgent::from_checkpoint_str(&text, cfg.agent)
                .map_err(|e| Failure::Config(format!("{}: {e}", checkpoint.display())))?;
            let data = Arc::new(cfg.scenario.load()?);
            let mut ctx = RolloutContext::from_config(&cfg, data)?;
            ctx.grid = agent.grid.clone();
            ctx.scaling = agent.scaling;
            let design = design.unwrap_or(cfg.design.mu0);
            let [lo, hi] = cfg.design.bounds;
            if !(lo..=hi).contains(&design) {
                return Err(Failure::Config(format!("design {design} outside bounds [{lo}, {hi}]")));
            }
            let totals = evaluate_greedy(&agent.online, &ctx, design)?;
            let capacity = design * cfg.design.reference_mwh;
            let record = EvaluationRecord {
                after_episodes: 0,
                design,
                capacity_mwh: capacity,
                ret: episode_return(totals.total_reward, capacity, cfg.economics.w_anu, cfg.economics.p_bat),
                totals,
            };
            let io = |p: &Path, e: std::io::Error| Failure::Runtime(format!("{}: {e}", p.display()));
            std::fs::create_dir_all(&run.out).map_err(|e| io(&run.out, e))?;
            write_metrics_lines(&run.out.join(METRICS_FILE), &[MetricsLine::Evaluation(record.clone())])?;
            let summary = run.out.join(SUMMARY_FILE);
            let json = bessco_core::trainer::evaluation_json(&record);
            std::fs::write(&summary, json).map_err(|e| io(&summary, e))?;
            write_config(&run.out.join("config.toml"), &cfg)?;
            println!(
                "design {design} ({capacity} MWh): total reward {:.4}, net revenue {:.4}, baseline {:.4}, G {:.4}",
                totals.total_reward, totals.net_revenue, totals.baseline_revenue, record.ret
            );
            Ok(())
        }
        Command::SynthData {
            out,
            seed,
            slots,
            config,
        } => {
            let profile = match config {
                Some(path) => {
                    RunConfig::from_file(path)
                        .map_err(|e| Failure::Config(e.to_string()))?
                        .scenario
                        .profile
                }
                None => Default::default(),
            };
            let data = synthesize_scenario(seed, slots, &profile)?;
            std::fs::create_dir_all(&out).map_err(|e| Failure::Runtime(format!("{}: {e}", out.display())))?;
            let path = out.join("scenario.csv");
            save_scenario(&data, &path).map_err(|e| Failure::Runtime(e.to_string()))?;
            println!("wrote {} slots to {}", data.len(), path.display());
            Ok(())
        }
        Command::Report { metrics, out } => {
            let out = out.unwrap_or_else(|| metrics.clone());
            let summary = generate_report(&metrics, &out)?;
            println!("identity checks passed: {}", summary.identities_checked);
            for f in &summary.files {
                println!("wrote {}", f.display());
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let msg = match &f {
                Failure::Config(m) => format!("config error: {m}"),
                Failure::Runtime(m) => format!("error: {m}"),
            };
            eprintln!("{msg}");
            ExitCode::from(f.code())
        }
    }
}
