use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use speech_quality_cli::commands;
use speech_quality_cli::error::{EXIT_CONFIG, EXIT_OK};
use speech_quality_cli::{CliError, CliResult, RunConfig};

#[derive(Parser)]
#[command(
    name = "speech-quality",
    version,
    about = "Speech quality estimation with joint reconstruction"
)]
struct Cli {
    /// Run configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides every seed in the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Checkpoint to resume from (train) or to score with (predict, eval).
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    /// Print only this decoder's score (predict) or report (eval).
    #[arg(long, global = true, value_enum)]
    decoder: Option<DecoderArg>,
    /// Output directory (simulate, train) or output file (predict, eval).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum DecoderArg {
    Expect,
    Max,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset with train/valid/test manifests.
    Simulate,
    /// Train a model; resumable with --checkpoint.
    Train,
    /// Score WAV files; one line per file: path, expectation score, max score.
    Predict {
        wavs: Vec<PathBuf>,
        /// Append the predicted class distribution to each line.
        #[arg(long)]
        distribution: bool,
        /// Worker threads; 0 uses every core.
        #[arg(long, default_value_t = 0)]
        threads: usize,
    },
    /// Evaluate on a labelled manifest (defaults to the configured test split).
    Eval { manifest: Option<PathBuf> },
}

fn load_config(cli: &Cli) -> CliResult<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.set_seed(seed);
    }
    Ok(cfg)
}

fn emit(out: Option<&PathBuf>, text: &str) -> CliResult<()> {
    match out {
        Some(path) => std::fs::write(path, text)
            .map_err(|e| CliError::data(format!("cannot write {}: {e}", path.display()))),
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout.write_all(text.as_bytes())?;
            Ok(())
        }
    }
}

fn require_checkpoint(cli: &Cli) -> CliResult<&PathBuf> {
    cli.checkpoint
        .as_ref()
        .ok_or_else(|| CliError::config("--checkpoint is required"))
}

fn run(cli: &Cli) -> CliResult<()> {
    match &cli.command {
        Command::Simulate => {
            let cfg = load_config(cli)?;
            let out = cli.out.clone().unwrap_or_else(|| cfg.data.dir.clone());
            let records = commands::simulate(&cfg, &out)?;
            eprintln!("wrote {} entries to {}", records.len(), out.display());
        }
        Command::Train => {
            let cfg = load_config(cli)?;
            let out = cli.out.clone().unwrap_or_else(|| cfg.output.dir.clone());
            let summary = commands::train(&cfg, cli.checkpoint.as_deref(), &out)?;
            eprintln!(
                "trained to step {}; final loss {:?}; best validation mse {:?}",
                summary.steps, summary.final_loss, summary.best_valid_mse
            );
        }
        Command::Predict {
            wavs,
            distribution,
            threads,
        } => {
            if wavs.is_empty() {
                return Err(CliError::config("predict needs at least one WAV path"));
            }
            let ckpt = require_checkpoint(cli)?;
            let preds = commands::predict(ckpt, wavs, *threads)?;
            let mut text = String::new();
            for p in &preds {
                text.push_str(&p.path.display().to_string());
                match cli.decoder {
                    Some(DecoderArg::Expect) => text.push_str(&format!("\t{:.6}", p.expect)),
                    Some(DecoderArg::Max) => text.push_str(&format!("\t{:.6}", p.max)),
                    None => text.push_str(&format!("\t{:.6}\t{:.6}", p.expect, p.max)),
                }
                if *distribution {
                    let probs: Vec<String> =
                        p.distribution.iter().map(|v| format!("{v:.6}")).collect();
                    text.push('\t');
                    text.push_str(&probs.join(","));
                }
                text.push('\n');
            }
            emit(cli.out.as_ref(), &text)?;
        }
        Command::Eval { manifest } => {
            let ckpt = require_checkpoint(cli)?;
            let manifest = match manifest {
                Some(m) => m.clone(),
                None => load_config(cli)?.manifest("test"),
            };
            let outcome = commands::eval(ckpt, &manifest, 0)?;
            let mut text = String::new();
            if cli.decoder != Some(DecoderArg::Max) {
                text.push_str(&format!("decoder=expect {}\n", outcome.expect));
            }
            if cli.decoder != Some(DecoderArg::Expect) {
                text.push_str(&format!("decoder=max {}\n", outcome.max));
            }
            emit(cli.out.as_ref(), &text)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
