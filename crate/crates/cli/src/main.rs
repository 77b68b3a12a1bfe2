use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};
use hardneg::pooling::AtaDirection;
use hardneg_cli::{classify, cmd_augment, cmd_eval, cmd_inspect, cmd_synth, cmd_train, load_config, EvalMode};

/// Synthetic hard-negative data generation and contrastive training for a
/// small text encoder.
#[derive(Parser)]
#[command(name = "hardneg", version)]
struct Cli {
    /// Run config file (TOML). Defaults apply when omitted.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    /// Config override as dotted.key=value; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a triplet dataset from the configured backend.
    Synth,
    /// Add ordered hard negatives to a file of {query, positive} pairs.
    Augment {
        #[arg(long)]
        pairs: PathBuf,
        /// Fail on the first malformed pair instead of skipping it.
        #[arg(long)]
        strict: bool,
    },
    /// Train the encoder on the configured data mix.
    Train,
    /// Score a checkpoint on the held-out split, or run the pooling ablation.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum)]
        mode: Option<EvalMode>,
    },
    /// Per-token pooling weights of one text.
    Inspect {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        text: String,
        /// Also print the summed last-layer attention map.
        #[arg(long)]
        attention: bool,
        #[arg(long, default_value = "incoming", value_parser = parse_direction)]
        direction: AtaDirection,
    },
}

fn parse_direction(s: &str) -> Result<AtaDirection, String> {
    match s {
        "incoming" => Ok(AtaDirection::Incoming),
        "literal" => Ok(AtaDirection::Literal),
        other => Err(format!("unknown direction {other:?} (expected incoming or literal)")),
    }
}

fn run(cli: Cli) -> Result<()> {
    let cfg = || load_config(cli.config.as_deref(), &cli.overrides);
    match &cli.command {
        Command::Synth => {
            let o = cmd_synth(&cfg()?)?;
            println!("wrote {} records to {}", o.records, o.dataset.display());
            println!(
                "rejected {} ({:?}), transport retries {}",
                o.report.rejected_total(),
                o.report.rejected,
                o.report.transport_retries
            );
        }
        Command::Augment { pairs, strict } => {
            let o = cmd_augment(&cfg()?, pairs, *strict)?;
            println!("wrote {} records to {}", o.records, o.dataset.display());
            println!(
                "skipped {} pair lines ({:?}), rejected {} generations",
                o.read.rejected_total(),
                o.read.rejected,
                o.report.rejected_total()
            );
        }
        Command::Train => {
            let o = cmd_train(&cfg()?)?;
            let last = o.manifest.run.loss_log.last().map(|e| e.loss).unwrap_or(f64::NAN);
            println!("final loss {last:.6}");
            println!("manifest {}", o.manifest_path.display());
            println!(
                "checkpoint {} sha256 {}",
                o.checkpoint.display(),
                o.final_checkpoint().sha256
            );
        }
        Command::Eval { checkpoint, mode } => {
            let o = cmd_eval(&cfg()?, checkpoint.as_deref(), *mode)?;
            print!("{}", o.text);
        }
        Command::Inspect {
            checkpoint,
            text,
            attention,
            direction,
        } => {
            print!("{}", cmd_inspect(checkpoint, text, *direction, *attention)?);
        }
    }
    Ok(())
}

/// The error chain joined by ": ", skipping causes a wrapper already quotes.
fn render(e: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in e.chain() {
        let text = cause.to_string();
        if !out.contains(&text) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&text);
        }
    }
    out
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", render(&e));
            ExitCode::from(classify(&e).code() as u8)
        }
    }
}
