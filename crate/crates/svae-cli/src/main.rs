use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use svae_cli::commands::{
    self, EvalArgs, GenerateDataArgs, ReportArgs, SweepArgs, TrainArgs, VerifyArgs,
};
use svae_cli::config::ConfigError;

#[derive(Parser)]
#[command(
    name = "svae",
    version,
    about = "Adversarial symmetric-KL generative modeling laboratory"
)]
struct Cli {
    /// JSON run configuration; absent fields take per-variant defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed: training (train), dataset (generate-data), base (sweep),
    /// evaluation stream (eval, verify).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; each command has a sensible default.
    #[arg(long, global = true)]
    output: Option<PathBuf>,
    /// Worker threads for sweep arms.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample the ring-of-Gaussians dataset to CSV plus a spec JSON.
    GenerateData {
        /// Number of points, overriding the config.
        #[arg(long)]
        samples: Option<usize>,
    },
    /// Train one run; writes config echo, metrics CSV, summary and checkpoint.
    Train {
        /// Objective family: svae, svae-r, ali, gan, wgan. A -raw or -logsig
        /// suffix picks the generator transform.
        #[arg(long)]
        variant: Option<String>,
        /// Reconstruction weight (svae-r only).
        #[arg(long)]
        lambda: Option<f64>,
        /// Generator transform: raw-f or log-sigmoid.
        #[arg(long)]
        transform: Option<String>,
        /// Total generator updates, overriding the config.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Cross product of variants, lambdas and seeds; one directory per run.
    Sweep {
        /// Comma-separated lambda grid (default 0,0.01,0.1).
        #[arg(long, value_delimiter = ',')]
        lambda: Option<Vec<f64>>,
        /// Seeds per variant-lambda cell.
        #[arg(long, default_value_t = 3)]
        seeds: usize,
        /// Comma-separated run labels (default svae,svae-r,ali,gan).
        #[arg(long, value_delimiter = ',')]
        variants: Option<Vec<String>>,
    },
    /// Evaluate a checkpoint and emit a metrics JSON record on stdout.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Evaluate against this dataset CSV instead of sampling fresh.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Importance samples per point for the likelihood bound.
        #[arg(long, default_value_t = 16)]
        iw_samples: usize,
    },
    /// Check estimators and identities against closed forms; exit 1 on failure.
    Verify {
        /// Random closed-form models per check.
        #[arg(long, default_value_t = 6)]
        models: usize,
        /// Monte Carlo samples per identity check.
        #[arg(long, default_value_t = 30_000)]
        samples: usize,
        /// Training steps for the discriminator recovery check.
        #[arg(long, default_value_t = 800)]
        disc_steps: usize,
    },
    /// Aggregate run directories into per-variant, per-lambda tables.
    Report {
        /// Sweep root to scan (default ./sweep).
        input: Option<PathBuf>,
    },
}

fn dispatch(cli: Cli) -> anyhow::Result<ExitCode> {
    match cli.command {
        Command::GenerateData { samples } => commands::cmd_generate_data(&GenerateDataArgs {
            config: cli.config,
            samples,
            seed: cli.seed,
            output: cli.output,
        }),
        Command::Train {
            variant,
            lambda,
            transform,
            steps,
        } => commands::cmd_train(&TrainArgs {
            config: cli.config,
            variant,
            lambda,
            transform,
            steps,
            seed: cli.seed,
            output: cli.output,
        }),
        Command::Sweep {
            lambda,
            seeds,
            variants,
        } => commands::cmd_sweep(&SweepArgs {
            config: cli.config,
            lambdas: lambda.unwrap_or_else(|| vec![0.0, 0.01, 0.1]),
            seeds,
            variants: variants
                .unwrap_or_else(|| ["svae", "svae-r", "ali", "gan"].map(String::from).to_vec()),
            jobs: cli.jobs,
            base_seed: cli.seed.unwrap_or(0),
            output: cli.output,
        }),
        Command::Eval {
            checkpoint,
            data,
            iw_samples,
        } => commands::cmd_eval(&EvalArgs {
            checkpoint,
            config: cli.config,
            data,
            iw_samples,
            seed: cli.seed.unwrap_or(0),
            output: cli.output,
        }),
        Command::Verify {
            models,
            samples,
            disc_steps,
        } => commands::cmd_verify(&VerifyArgs {
            models,
            samples,
            disc_steps,
            seed: cli.seed.unwrap_or(0),
        }),
        Command::Report { input } => commands::cmd_report(&ReportArgs {
            input: input.unwrap_or_else(|| PathBuf::from("sweep")),
            output: cli.output,
        }),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            let config_error = err
                .chain()
                .any(|cause| cause.downcast_ref::<ConfigError>().is_some());
            if config_error {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
