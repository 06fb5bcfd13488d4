use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use cogrpo::config::{reference_config, Config};
use cogrpo::grpo::TrainMode;
use cogrpo::harness::{self, EvalOptions};
use cogrpo::Error;

/// Masked diffusion sampling with co-optimized GRPO post-training.
#[derive(Parser, Debug)]
#[command(name = "cogrpo", version)]
struct Cli {
    /// TOML config file; defaults are used when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides `run.seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory.
    #[arg(long, global = true, default_value = "runs/default")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Masked-token pretraining of the denoiser.
    Pretrain,
    /// GRPO post-training from the pretrained checkpoint.
    Train {
        #[arg(long, value_parser = parse_mode)]
        mode: TrainMode,
    },
    /// Evaluate a checkpoint.
    Eval {
        /// Evaluate this mode's training checkpoint instead of the pretrained one.
        #[arg(long, value_parser = parse_mode)]
        mode: Option<TrainMode>,
        /// Checkpoint file to evaluate, overriding --mode
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Denoising steps; defaults to `eval.steps` or the training horizon
        #[arg(long)]
        steps: Option<usize>,
        /// Schedule exploration noise; defaults to `eval.sigma`
        #[arg(long)]
        sigma: Option<f64>,
    },
    /// Cosine-gamma schedule sweep on the frozen pretrained model.
    SweepGamma {
        /// Comma-separated exponents, e.g. 1,1.5,2
        #[arg(long, value_delimiter = ',')]
        gammas: Option<Vec<f64>>,
        /// Comma-separated step counts, e.g. 16,48
        #[arg(long, value_delimiter = ',')]
        steps: Option<Vec<usize>>,
    },
    /// Print the reference config with every default.
    DefaultConfig,
}

fn parse_mode(s: &str) -> Result<TrainMode, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn run(cli: Cli) -> cogrpo::Result<()> {
    if let Command::DefaultConfig = cli.command {
        print!("{}", reference_config());
        return Ok(());
    }
    let mut config = Config::load(cli.config.as_deref(), std::env::vars())?;
    if let Some(seed) = cli.seed {
        config.run.seed = seed;
    }
    let out = &cli.out;
    match cli.command {
        Command::Pretrain => {
            let s = harness::cmd_pretrain(&config, out)?;
            print_json(&s.manifest.summary);
        }
        Command::Train { mode } => {
            let s = harness::cmd_train(&config, out, mode)?;
            print_json(&s.manifest.summary);
        }
        Command::Eval {
            mode,
            checkpoint,
            steps,
            sigma,
        } => {
            let opts = EvalOptions {
                checkpoint,
                mode,
                steps,
                sigma,
            };
            print_json(&harness::cmd_eval(&config, out, &opts)?);
        }
        Command::SweepGamma { gammas, steps } => {
            let rows = harness::cmd_sweep_gamma(&config, out, gammas.as_deref(), steps.as_deref())?;
            println!("{}", harness::SWEEP_HEADER);
            for r in rows {
                println!("{},{},{},{},{}", r.gamma, r.steps, r.reward_mean, r.reward_std, r.n);
            }
        }
        Command::DefaultConfig => unreachable!(),
    }
    Ok(())
}

fn print_json(v: &impl serde::Serialize) {
    println!("{}", serde_json::to_string_pretty(v).expect("serializable"));
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(harness::exit_code(&e) as u8)
        }
    }
}
