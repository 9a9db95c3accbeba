use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mpail2::config::{Ablation, TrainConfig, TransferMode};
use mpail2::envs::make_env;
use mpail2::planner::PlannerConfig;
use mpail2::trainer::{self, EvalOptions};
use mpail2::{Demos, Error, Models, Real, Result};

#[derive(Parser)]
#[command(
    name = "mpail2",
    version,
    about = "Planning-based inverse RL from observation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Record successful scripted-expert episodes (observations only).
    GenDemos {
        #[arg(long, default_value = "push2d")]
        env: String,
        #[arg(long, default_value_t = 10)]
        episodes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Demonstration file to write.
        #[arg(long)]
        out: PathBuf,
    },
    Train(RunArgs),
    /// Success rate of a checkpoint over seeded episodes.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "push2d")]
        env: String,
        #[arg(long, default_value_t = 100)]
        episodes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Planner settings are read from this file.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Act with the policy mean instead of planning.
        #[arg(long)]
        policy_only: bool,
        /// Also write per-episode results as CSV.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Initialise from a checkpoint and train on new demonstrations.
    Transfer {
        #[arg(long)]
        init: PathBuf,
        #[arg(long, default_value = "full")]
        transfer_mode: TransferMode,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Dump every scored candidate of one planning call as CSV.
    PlanTrace {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "push2d")]
        env: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    env: Option<String>,
    #[arg(long)]
    demos: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    episodes: Option<usize>,
    #[arg(long)]
    checkpoint_every: Option<usize>,
    #[arg(long)]
    ablation: Option<Ablation>,
}

impl RunArgs {
    /// Config file values with command-line flags layered on top.
    fn resolve(&self) -> Result<TrainConfig> {
        let mut cfg = match &self.config {
            Some(p) => TrainConfig::load(p)?,
            None => TrainConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(e) = &self.env {
            cfg.env = e.clone();
        }
        if let Some(d) = &self.demos {
            cfg.demos = Some(d.clone());
        }
        if let Some(n) = self.episodes {
            cfg.episodes = n;
        }
        if let Some(n) = self.checkpoint_every {
            cfg.checkpoint_every = n;
        }
        if let Some(a) = self.ablation {
            cfg.ablation = a;
        }
        if cfg.demos.is_none() {
            return Err(Error::Config(
                "no demonstration file given (--demos or config `demos`)".into(),
            ));
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn planner_from(config: &Option<PathBuf>) -> Result<PlannerConfig> {
    Ok(match config {
        Some(p) => TrainConfig::load(p)?.planner,
        None => PlannerConfig::default(),
    })
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::Io {
        context: format!("writing {}", path.display()),
        source: e,
    })
}

fn report(summary: &trainer::TrainSummary) {
    let last = summary.records.last();
    println!(
        "episodes={} cumulative_successes={} first_success={} final_checkpoint={}",
        summary.records.len(),
        last.map_or(0, |r| r.cumulative_successes),
        summary
            .first_success
            .map_or("none".to_string(), |e| e.to_string()),
        summary.final_checkpoint.display()
    );
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenDemos {
            env,
            episodes,
            seed,
            out,
        } => {
            let mut env = make_env(&env)?;
            let demos: Demos = trainer::gen_demos(env.as_mut(), episodes, seed)?;
            demos.save(&out)?;
            println!(
                "wrote {} episodes to {}",
                demos.episodes().len(),
                out.display()
            );
        }
        Command::Train(args) => {
            let cfg = args.resolve()?;
            report(&trainer::train::<Real>(cfg, &args.out)?);
        }
        Command::Eval {
            checkpoint,
            env,
            episodes,
            seed,
            config,
            policy_only,
            out,
        } => {
            let models = Models::load(&checkpoint)?;
            let mut env = make_env(&env)?;
            let opts = EvalOptions {
                episodes,
                seed,
                planner: planner_from(&config)?,
                threads: None,
                policy_only,
            };
            let rep = trainer::evaluate(&models, env.as_mut(), &opts)?;
            if let Some(path) = out {
                let mut csv = String::from("episode,steps,success\n");
                for (i, e) in rep.episodes.iter().enumerate() {
                    csv.push_str(&format!("{},{},{}\n", i + 1, e.steps, e.success as u8));
                }
                write(&path, &csv)?;
            }
            println!("success_percent={}", rep.success_percent);
        }
        Command::Transfer {
            init,
            transfer_mode,
            run,
        } => {
            let cfg = run.resolve()?;
            report(&trainer::transfer::<Real>(
                &init,
                cfg,
                transfer_mode,
                &run.out,
            )?);
        }
        Command::PlanTrace {
            checkpoint,
            env,
            seed,
            config,
            out,
        } => {
            let models = Models::load(&checkpoint)?;
            let mut env = make_env(&env)?;
            let trace =
                trainer::plan_trace(&models, env.as_mut(), &planner_from(&config)?, seed, None)?;
            write(&out, &trainer::trace_csv(&trace))?;
            println!("wrote {} records to {}", trace.len(), out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.category());
            ExitCode::FAILURE
        }
    }
}
