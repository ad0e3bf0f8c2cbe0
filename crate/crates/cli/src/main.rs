use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use dfu_cli::config::{Overrides, RunConfig};
use dfu_cli::pipeline;
use dfu_cli::Result;
use dfu_core::dpsgd::StatMode;

#[derive(Parser)]
#[command(name = "dfu", version, about = "Decentralized training with certified unlearning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train all clients and write checkpoints.
    Train(RunArgs),
    /// Apply the configured deletion request to trained checkpoints.
    Unlearn(RunArgs),
    /// Retrain from scratch on the retained data.
    Retrain(RunArgs),
    /// Score run directories (or a sweep directory) and write the table.
    Verify {
        #[arg(required = true)]
        run_dirs: Vec<PathBuf>,
    },
    /// Train, unlearn, retrain and verify.
    Experiment(RunArgs),
    /// Check the distance bounds on random single-client instances.
    Sweep {
        #[arg(long, default_value_t = 100)]
        sweep_size: usize,
        #[arg(long, default_value_t = 0)]
        sweep_seed: u64,
        #[arg(long, default_value = "runs/sweep")]
        out: PathBuf,
        #[arg(long)]
        threads: Option<usize>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum StatArg {
    ExactHessian,
    Fisher,
}

#[derive(Args)]
struct RunArgs {
    /// TOML run configuration.
    #[arg(long, short)]
    config: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long, value_enum)]
    stat_mode: Option<StatArg>,
    #[arg(long)]
    finetune_rounds: Option<usize>,
    /// Skip the Gaussian noise. Testing only; the run loses its privacy guarantee.
    #[arg(long)]
    no_noise: bool,
}

impl RunArgs {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::load(&self.config)?;
        cfg.apply(&Overrides {
            output_dir: self.out.clone(),
            threads: self.threads,
            epsilon: self.epsilon,
            delta: self.delta,
            stat_mode: self.stat_mode.map(|s| match s {
                StatArg::ExactHessian => StatMode::ExactHessian,
                StatArg::Fisher => StatMode::Fisher,
            }),
            finetune_rounds: self.finetune_rounds,
            no_noise: self.no_noise,
        })?;
        eprintln!("config {} -> {}", cfg.hash(), cfg.output_dir.display());
        Ok(cfg)
    }
}

fn json<T: serde::Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).unwrap_or_default()
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(a) => {
            let s = pipeline::cmd_train(&a.load()?)?;
            println!("trained {} rounds in {:.1} ms, test acc {:.4}", s.rounds, s.wall_ms, s.final_metrics.test_acc);
        }
        Command::Unlearn(a) => {
            let s = pipeline::cmd_unlearn(&a.load()?)?;
            println!(
                "removed {} samples ({}) in {:.2} ms + {:.2} ms fine-tune, test acc {:.4}",
                s.total_deleted, s.granularity, s.unlearn_ms, s.finetune_ms, s.final_metrics.test_acc
            );
        }
        Command::Retrain(a) => {
            let s = pipeline::cmd_retrain(&a.load()?)?;
            println!("retrained {} rounds in {:.1} ms, test acc {:.4}", s.rounds, s.retrain_ms, s.final_metrics.test_acc);
        }
        Command::Verify { run_dirs } => println!("{}", json(&pipeline::cmd_verify(&run_dirs)?)),
        Command::Experiment(a) => println!("{}", json(&pipeline::cmd_experiment(&a.load()?)?.verify)),
        Command::Sweep { sweep_size, sweep_seed, out, threads } => {
            let s = pipeline::cmd_sweep(sweep_size, sweep_seed, &out, threads)?;
            println!("{}/{} instances satisfied in {:.0} ms", s.instances_satisfied, s.size, s.wall_ms);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
