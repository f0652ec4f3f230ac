use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use dnc_rl::checkpoint::load_policy;
use dnc_rl::config::ExperimentConfig;
use dnc_rl::envs::{evaluate_policy, make_env};
use dnc_rl::harness::{render_summary, run_experiment, summarize};
use dnc_rl::partition::Partition;
use dnc_rl::rng::Rng;
use dnc_rl::Result;

#[derive(Parser)]
#[command(name = "dnc", version, about = "Divide-and-conquer policy optimization experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train every run of a config and write the summary table.
    Run { config: PathBuf },
    /// Evaluate a policy checkpoint with mean actions.
    Eval {
        policy: PathBuf,
        #[arg(long)]
        env: String,
        #[arg(long, default_value_t = 20)]
        episodes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Rebuild summary.csv from the run directories under a directory.
    Summarize { dir: PathBuf },
    /// Cluster sampled initial states and print the partition as JSON.
    Partition {
        env: String,
        #[arg(long, default_value_t = 4)]
        k: usize,
        #[arg(long, default_value_t = 10_000)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var("DNC_THREADS") {
        let n: usize = v
            .parse()
            .map_err(|_| dnc_rl::DncError::Config(format!("DNC_THREADS must be a positive integer, got {v:?}")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .map_err(|e| dnc_rl::DncError::Config(e.to_string()))?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    configure_threads()?;
    match cli.command {
        Command::Run { config } => {
            let cfg = ExperimentConfig::load(&config)?;
            let (records, summary) = run_experiment(&cfg)?;
            print!("{}", render_summary(&summary));
            let failed: Vec<_> = records.iter().filter(|r| !r.ok()).collect();
            for r in &failed {
                eprintln!(
                    "run {} alpha={} max_kl={} seed={} failed: {}",
                    r.variant,
                    r.alpha,
                    r.max_kl,
                    r.seed,
                    r.error.as_deref().unwrap_or("")
                );
            }
            Ok(failed.is_empty())
        }
        Command::Eval {
            policy,
            env,
            episodes,
            seed,
        } => {
            let env = make_env(&env)?;
            let policy = load_policy(&policy)?;
            let stats = evaluate_policy(env.as_ref(), &policy, episodes, &mut Rng::new(seed))?;
            println!(
                "{}",
                serde_json::json!({
                    "mean_return": stats.mean_return,
                    "success_rate": stats.success_rate,
                    "episodes": stats.episodes,
                })
            );
            Ok(true)
        }
        Command::Summarize { dir } => {
            print!("{}", render_summary(&summarize(&dir)?));
            Ok(true)
        }
        Command::Partition { env, k, samples, seed } => {
            let env = make_env(&env)?;
            let mut rng = Rng::new(seed);
            let states: Vec<Vec<f64>> = (0..samples).map(|_| env.reset(&mut rng)).collect();
            println!("{}", Partition::fit(&states, k, &mut rng)?.to_json());
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
