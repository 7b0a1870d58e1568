use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tgsa::config::{RunConfig, SEED_ENV};
use tgsa::harness::{self, DenoiseRequest};
use tgsa::tensor::Fault;
use tgsa::Error;

#[derive(Parser, Debug)]
#[command(
    name = "tgsa",
    version,
    about = "Transformer speech denoiser with Gaussian-weighted self-attention"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct ConfigArgs {
    /// `key = value` file; later `--key=value` arguments override it.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Config overrides such as `--train.steps=50` or `--model.scheme=t-gsa`.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "--KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write synthetic train/eval datasets under data.dir.
    Synth(ConfigArgs),
    /// Train one model into output.dir.
    Train(ConfigArgs),
    /// Enhance a WAV file with a trained checkpoint.
    Denoise {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Clean reference; reports SDR and SSNR when given.
        #[arg(long)]
        reference: Option<PathBuf>,
        /// `--model.key=value` flags that must agree with the checkpoint.
        #[arg(
            trailing_var_arg = true,
            allow_hyphen_values = true,
            value_name = "--model.KEY=VALUE"
        )]
        model_flags: Vec<String>,
    },
    /// Train O-T, T-AB and T-GSA under one budget and tabulate the results.
    Compare(ConfigArgs),
    /// Run the gradient and invariant checks.
    Verify {
        /// Deliberately break a backward rule; the suite must then fail.
        #[arg(long, value_name = "FAULT")]
        inject_fault: Option<String>,
    },
}

fn run_config(args: &ConfigArgs) -> tgsa::Result<RunConfig> {
    let mut cfg = match &args.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    cfg.apply_overrides(&args.overrides)?;
    cfg.apply_seed_env(std::env::var(SEED_ENV).ok().as_deref())?;
    cfg.validate()?;
    Ok(cfg)
}

fn split_flags(flags: &[String]) -> tgsa::Result<Vec<(String, String)>> {
    flags
        .iter()
        .map(|f| {
            let kv = f.strip_prefix("--").unwrap_or(f);
            match kv.split_once('=') {
                Some((k, v)) if k.starts_with("model.") => Ok((k.to_string(), v.to_string())),
                _ => Err(Error::Config(format!("expected --model.key=value, got {f:?}"))),
            }
        })
        .collect()
}

/// Returns false when `verify` found failures.
fn run(cli: Cli, log: &mut dyn Write) -> tgsa::Result<bool> {
    match cli.command {
        Command::Synth(a) => harness::cmd_synth(&run_config(&a)?, log).map(|_| true),
        Command::Train(a) => harness::cmd_train(&run_config(&a)?, log).map(|_| true),
        Command::Compare(a) => harness::cmd_compare(&run_config(&a)?, log).map(|_| true),
        Command::Denoise {
            checkpoint,
            input,
            output,
            reference,
            model_flags,
        } => {
            let req = DenoiseRequest {
                checkpoint,
                input,
                output,
                reference,
                model_flags: split_flags(&model_flags)?,
            };
            harness::cmd_denoise(&req, log).map(|_| true)
        }
        Command::Verify { inject_fault } => {
            let fault = inject_fault.map(|f| f.parse::<Fault>()).transpose()?;
            Ok(harness::cmd_verify(fault, log)?.passed())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let stdout = io::stdout();
    let mut log = stdout.lock();
    match run(cli, &mut log) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            let _ = log.flush();
            eprintln!("error: {e}");
            match e {
                Error::Config(_) | Error::Contract(_) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}
