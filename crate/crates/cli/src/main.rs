use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use vlmkg::trainer::Regime;
use vlmkg_cli::{commands, exit, CliError, RunConfig};

const EXIT_CODES: &str = "Exit codes:
  0  success
  1  runtime failure
  2  usage error (unknown command, bad flag or override syntax)
  3  configuration error (parse failure, unknown key, inconsistent sections)
  4  invariant violation (failed gradient check, non-finite gradient, bad sequence)
  5  input/output error (missing or malformed file)";

#[derive(Parser)]
#[command(name = "vlmkg", version, about = "Knowledge-graph triplet generation with a tiny vision-language model", after_help = EXIT_CODES)]
struct Cli {
    /// JSON run configuration; defaults apply to missing keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Dotted override such as trainer.lr_peak=1e-4 (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Output directory; replaces run_dir from the configuration.
    #[arg(long, global = true)]
    run_dir: Option<PathBuf>,
    /// Global seed; replaces seed from the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a seeded synthetic corpus, feature file and vocabulary.
    GenCorpus,
    /// Train one regime.
    Train {
        /// llm-kg, vlm-kg or vlm-kg-frozen; defaults to trainer.regime.
        #[arg(long)]
        regime: Option<String>,
    },
    /// Decode the validation split with a checkpoint.
    Generate {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Score predictions (or a checkpoint's decodes) against gold graphs.
    Evaluate {
        /// Predicted graphs as KG JSON lines.
        #[arg(long)]
        predictions: Option<PathBuf>,
        /// Gold graphs as KG JSON lines; defaults to the validation split.
        #[arg(long)]
        gold: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Finite-difference gradient checks for every op and a full composite.
    Gradcheck {
        /// Random instances per op.
        #[arg(long, default_value_t = 5)]
        seeds: u64,
    },
    /// Sweep (prefix_length, clip_length) over {64,128}².
    AblateProjector,
    /// Sweep the generation budget over 200, 256, 300 and 512 tokens.
    AblateLength {
        /// Decode with this checkpoint instead of training one.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Joint tuning against projector-only tuning of a frozen LM.
    AblateFreeze,
}

fn run(cli: Cli) -> Result<String, CliError> {
    let mut overrides = cli.overrides;
    if let Some(d) = &cli.run_dir {
        overrides.push(format!("run_dir={}", serde_json::Value::String(d.display().to_string())));
    }
    if let Some(s) = cli.seed {
        overrides.push(format!("seed={s}"));
    }
    let cfg = RunConfig::load(cli.config.as_deref(), &overrides)?;
    match cli.command {
        Command::GenCorpus => commands::gen_corpus(&cfg),
        Command::Train { regime } => {
            let regime = match regime {
                Some(r) => r.parse::<Regime>().map_err(|e| CliError::Usage(e.to_string()))?,
                None => cfg.trainer.regime,
            };
            commands::train(&cfg, regime)
        }
        Command::Generate { checkpoint } => commands::generate(&cfg, checkpoint.as_deref()),
        Command::Evaluate {
            predictions,
            gold,
            checkpoint,
        } => commands::evaluate(&cfg, predictions.as_deref(), gold.as_deref(), checkpoint.as_deref()),
        Command::Gradcheck { seeds } => commands::gradcheck(&cfg, seeds),
        Command::AblateProjector => commands::ablate_projector(&cfg),
        Command::AblateLength { checkpoint } => commands::ablate_length(&cfg, checkpoint.as_deref()),
        Command::AblateFreeze => commands::ablate_freeze(&cfg),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { exit::USAGE } else { exit::OK };
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    match run(cli) {
        Ok(summary) => {
            print!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {}", e.to_string().lines().next().unwrap_or_default());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
