//! `etclab`: train, evaluate, sweep, verify, retrain and plot.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
//! `ETCLAB_THREADS` caps the worker threads used by parallel subcommands.

mod commands;
mod config;
mod plot;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::config::RunConfig;
use crate::plot::PlotKind;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(String),
}

impl From<etclab::Error> for CliError {
    fn from(e: etclab::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

#[derive(Parser)]
#[command(
    name = "etclab",
    version,
    about = "Learn, verify and refine event-triggered controllers"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RegionFlags {
    /// Lower corner of the region, comma separated.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    lower: Option<Vec<f64>>,
    /// Upper corner of the region, comma separated.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    upper: Option<Vec<f64>>,
    /// Input bound, comma separated.
    #[arg(long, value_delimiter = ',')]
    u_lim: Option<Vec<f64>>,
    /// Branch-and-bound node budget per query.
    #[arg(long)]
    node_budget: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Train an ETC policy with option-critic PPO.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        epochs: Option<usize>,
        /// Communication penalty.
        #[arg(long)]
        lambda: Option<f64>,
        /// Transitions collected per epoch.
        #[arg(long)]
        transitions: Option<usize>,
    },
    /// Roll a saved policy out and report reward, control cost and savings.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        policy: Option<PathBuf>,
        #[arg(long)]
        episodes: Option<usize>,
        /// Sample options and actions instead of acting greedily.
        #[arg(long)]
        stochastic: bool,
    },
    /// Sweep classical trigger rules around an LQR controller.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        rollouts: Option<usize>,
    },
    /// Check whether a ReLU policy keeps a box region invariant.
    Verify {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        policy: Option<PathBuf>,
        #[command(flatten)]
        region: RegionFlags,
    },
    /// Refine a policy until the region is certified invariant.
    Retrain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        policy: Option<PathBuf>,
        #[command(flatten)]
        region: RegionFlags,
        /// Sobol points per refinement epoch.
        #[arg(long)]
        sobol: Option<usize>,
        #[arg(long)]
        max_epochs: Option<usize>,
        /// Communication probability sought at critical points.
        #[arg(long)]
        crit_target: Option<f64>,
        /// Communication probability sought where holding is safe.
        #[arg(long)]
        saving_target: Option<f64>,
    },
    /// Render CSV output as an SVG.
    Plot {
        /// Input CSV files.
        #[arg(long, required = true)]
        input: Vec<PathBuf>,
        /// Output SVG path.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum)]
        kind: Option<PlotKind>,
    },
}

fn load(common: &Common) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::load(&common.config)?;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn apply_region(cfg: &mut RunConfig, r: RegionFlags) {
    if let Some(v) = r.lower {
        cfg.region.lower = v;
    }
    if let Some(v) = r.upper {
        cfg.region.upper = v;
    }
    if let Some(v) = r.u_lim {
        cfg.region.action_limit = Some(v);
    }
    if let Some(n) = r.node_budget {
        cfg.verifier.node_budget = n;
        cfg.retrain.verifier.node_budget = n;
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train {
            common,
            epochs,
            lambda,
            transitions,
        } => {
            let mut cfg = load(&common)?;
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            if let Some(l) = lambda {
                cfg.train.lambda_comm = l;
            }
            if let Some(t) = transitions {
                cfg.train.epoch_transitions = t;
            }
            commands::train(&cfg, &common.out)
        }
        Command::Evaluate {
            common,
            policy,
            episodes,
            stochastic,
        } => {
            let mut cfg = load(&common)?;
            if policy.is_some() {
                cfg.policy = policy;
            }
            if let Some(n) = episodes {
                cfg.eval.episodes = n;
            }
            if stochastic {
                cfg.eval.deterministic = false;
            }
            commands::evaluate(&cfg, &common.out)
        }
        Command::Sweep { common, rollouts } => {
            let mut cfg = load(&common)?;
            if let Some(r) = rollouts {
                cfg.sweep.rollouts = r;
            }
            commands::sweep(&cfg, &common.out)
        }
        Command::Verify { common, policy, region } => {
            let mut cfg = load(&common)?;
            if policy.is_some() {
                cfg.policy = policy;
            }
            apply_region(&mut cfg, region);
            commands::verify(&cfg, &common.out)
        }
        Command::Retrain {
            common,
            policy,
            region,
            sobol,
            max_epochs,
            crit_target,
            saving_target,
        } => {
            let mut cfg = load(&common)?;
            if policy.is_some() {
                cfg.policy = policy;
            }
            apply_region(&mut cfg, region);
            if let Some(n) = sobol {
                cfg.retrain.sobol_points = n;
            }
            if let Some(n) = max_epochs {
                cfg.retrain.max_epochs = n;
            }
            if let Some(p) = crit_target {
                cfg.retrain.crit_target = p;
            }
            if let Some(p) = saving_target {
                cfg.retrain.saving_target = p;
            }
            commands::retrain(&cfg, &common.out)
        }
        Command::Plot { input, out, kind } => plot::plot(&input, &out, kind),
    }
}

fn init_threads() -> Result<(), CliError> {
    let Ok(v) = std::env::var("ETCLAB_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .map_err(|_| CliError::Usage(format!("ETCLAB_THREADS must be a positive integer, got '{v}'")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Runtime(e.to_string()))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match init_threads().and_then(|()| run(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
