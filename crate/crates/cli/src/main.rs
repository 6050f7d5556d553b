//! `aov`: synth, train, score, eval, maps, dedup and the end-to-end pipeline.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data error,
//! 3 numeric failure.

mod commands;
mod config;

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::commands::{need, Failure, Outcome};
use crate::config::AppConfig;

#[derive(Debug, Parser)]
#[command(name = "aov", version, about = "Anomaly expert workflows over frozen-encoder feature bundles")]
struct Cli {
    /// TOML config file; see `aov config` for every key.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seeds both data generation and training.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Print one JSON document to stdout instead of text.
    #[arg(long, global = true)]
    json: bool,
    /// Output directory or file, depending on the subcommand.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Config override, e.g. `--set train.lr0=1e-3`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate planted-anomaly bundles with train/held-out manifests into --out.
    Synth,
    /// Train the expert on a bundle manifest; writes the checkpoint to --out.
    Train {
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        val: Option<PathBuf>,
        /// Resume from this checkpoint, optimizer state included.
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Score one bundle and report its indication prompt.
    Score {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        bundle: PathBuf,
    },
    /// Per-class AUROC over a bundle manifest (with --checkpoint), or metrics
    /// over a JSONL file of precomputed scores and answers.
    Eval {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Export significance maps as PGM images into --out.
    Maps {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        bundle: Vec<PathBuf>,
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Per-class near-duplicate removal over a JSONL item file; kept items go to --out.
    Dedup {
        #[arg(long)]
        items: PathBuf,
    },
    /// Synth, train, evaluate and export maps into --out, with report.json.
    Pipeline {
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Print the resolved configuration as TOML.
    Config,
}

fn run(cli: &Cli) -> Outcome {
    let mut overrides = cli.overrides.clone();
    if let Command::Train { epochs: Some(e), .. } | Command::Pipeline { epochs: Some(e) } = &cli.command {
        overrides.push(format!("train.epochs={e}"));
    }
    let cfg = AppConfig::resolve(cli.config.as_deref(), &overrides, cli.seed)?;
    log::info!("resolved config:\n{}", cfg.to_toml());
    if let Some(n) = anomaly_expert::expert::thread_cap() {
        log::info!("AOV_THREADS={n}");
        // Fails only when a global pool already exists.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let out = &cli.out;
    match &cli.command {
        Command::Synth => commands::synth(&cfg, need(out, "--out")?),
        Command::Train { train, val, init, .. } => commands::train(&cfg, train, val.as_deref(), init.as_deref(), need(out, "--out")?),
        Command::Score { checkpoint, bundle } => commands::score(&cfg, checkpoint, bundle),
        Command::Eval { manifest, checkpoint } => commands::eval(checkpoint.as_deref(), manifest),
        Command::Maps { checkpoint, bundle, manifest } => commands::maps(checkpoint, bundle, manifest.as_deref(), need(out, "--out")?),
        Command::Dedup { items } => commands::dedup(&cfg, items, need(out, "--out")?),
        Command::Pipeline { .. } => commands::pipeline(&cfg, need(out, "--out")?),
        Command::Config => {
            let text = cfg.to_toml();
            Ok((serde_json::to_value(&cfg).expect("config serializes"), text))
        }
    }
}

/// Score and eval also save their JSON when --out is given.
fn save_side_output(cli: &Cli, value: &serde_json::Value) -> Result<(), Failure> {
    let (Command::Score { .. } | Command::Eval { .. }, Some(path)) = (&cli.command, &cli.out) else {
        return Ok(());
    };
    let body = serde_json::to_vec_pretty(value).expect("value serializes");
    std::fs::write(path, body).map_err(|e| Failure { code: 2, message: format!("{}: {e}", path.display()) })
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();

    let result = run(&cli).and_then(|(value, text)| save_side_output(&cli, &value).map(|_| (value, text)));
    let mut stdout = std::io::stdout().lock();
    match result {
        Ok((value, text)) => {
            let _ = if cli.json { writeln!(stdout, "{value}") } else { write!(stdout, "{text}") };
            ExitCode::SUCCESS
        }
        Err(f) => {
            log::error!("{}", f.message);
            if cli.json {
                let _ = writeln!(stdout, "{}", serde_json::json!({ "error": f.message, "exit_code": f.code }));
            }
            ExitCode::from(f.code)
        }
    }
}
