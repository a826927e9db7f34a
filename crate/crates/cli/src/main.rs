use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};
use hideseek_cli::config::ExperimentConfig;
use hideseek_cli::error::{report, ConfigError};
use hideseek_cli::{replay, run, Command};

/// Watermark-removal experiments: training, embedding, attacks and ablations.
#[derive(Parser)]
#[command(name = "hideseek", version)]
struct Cli {
    #[command(subcommand)]
    action: Action,
}

#[derive(Subcommand)]
enum Action {
    /// Run one experiment command.
    #[command(flatten)]
    Run(RunAction),
    /// Re-run the command recorded in a manifest and compare CSV outputs.
    Replay {
        manifest: PathBuf,
        /// Output directory (default: `replay/` next to the manifest).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum RunAction {
    TrainHsn(Args),
    TrainMasker(Args),
    TrainGenerator(Args),
    Embed(Args),
    Attack(Args),
    Evaluate(Args),
    AblateMasking(Args),
    AblateLosses(Args),
    AblateOrder(Args),
    VerifyTheorem(Args),
}

#[derive(clap::Args)]
struct Args {
    /// TOML experiment config; defaults are used when omitted.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Output directory; overrides the config and the environment.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl RunAction {
    fn split(self) -> (Command, Args) {
        match self {
            RunAction::TrainHsn(a) => (Command::TrainHsn, a),
            RunAction::TrainMasker(a) => (Command::TrainMasker, a),
            RunAction::TrainGenerator(a) => (Command::TrainGenerator, a),
            RunAction::Embed(a) => (Command::Embed, a),
            RunAction::Attack(a) => (Command::Attack, a),
            RunAction::Evaluate(a) => (Command::Evaluate, a),
            RunAction::AblateMasking(a) => (Command::AblateMasking, a),
            RunAction::AblateLosses(a) => (Command::AblateLosses, a),
            RunAction::AblateOrder(a) => (Command::AblateOrder, a),
            RunAction::VerifyTheorem(a) => (Command::VerifyTheorem, a),
        }
    }
}

fn load_config(args: &Args) -> Result<ExperimentConfig, ConfigError> {
    let mut cfg = match &args.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    cfg.apply_env()?;
    if let Some(out) = &args.out {
        cfg.output_dir = out.clone();
    }
    Ok(cfg)
}

fn execute(action: Action) -> Result<()> {
    match action {
        Action::Run(r) => {
            let (command, args) = r.split();
            let cfg = load_config(&args)?;
            let outcome = run(command, cfg)?;
            println!("{}", outcome.summary);
            println!("manifest: {}", outcome.manifest_path.display());
        }
        Action::Replay { manifest, out } => {
            let (outcome, diffs) = replay(&manifest, out)?;
            if !diffs.is_empty() {
                anyhow::bail!("replay differs in {}", diffs.join(", "));
            }
            let n = outcome.manifest.artifacts.keys().filter(|k| k.ends_with(".csv")).count();
            println!("replay identical: {n} csv artifacts");
            println!("manifest: {}", outcome.manifest_path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let err = anyhow::Error::from(ConfigError::new(e.kind().to_string()).with("usage", e.render()));
            let r = report(&err, "parse");
            eprintln!("{}", serde_json::to_string(&r).unwrap_or_default());
            return ExitCode::from(2);
        }
    };
    let command = match &cli.action {
        Action::Replay { .. } => "replay".to_string(),
        Action::Run(r) => match r {
            RunAction::TrainHsn(_) => "train-hsn",
            RunAction::TrainMasker(_) => "train-masker",
            RunAction::TrainGenerator(_) => "train-generator",
            RunAction::Embed(_) => "embed",
            RunAction::Attack(_) => "attack",
            RunAction::Evaluate(_) => "evaluate",
            RunAction::AblateMasking(_) => "ablate-masking",
            RunAction::AblateLosses(_) => "ablate-losses",
            RunAction::AblateOrder(_) => "ablate-order",
            RunAction::VerifyTheorem(_) => "verify-theorem",
        }
        .to_string(),
    };
    match execute(cli.action) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let r = report(&e, &command);
            eprintln!("{}", serde_json::to_string(&r).unwrap_or_default());
            ExitCode::from(r.exit_code() as u8)
        }
    }
}
