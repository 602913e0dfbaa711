use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use metaproto::error::{Error, Result};
use metaproto::harness::ablation::AblationKind;
use metaproto::harness::commands;
use metaproto::harness::wilcoxon::Alternative;
use metaproto::harness::ExperimentConfig;

/// Hierarchical prototypical networks for few-shot audio classification.
#[derive(Parser)]
#[command(name = "metaproto", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Experiment config (TOML or JSON).
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override any config field, e.g. `--set train.lr=0.001`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        ExperimentConfig::load(self.config.as_deref(), &self.overrides)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Height,
    Alpha,
    Shots,
    RandomTrees,
    Loss,
}

#[derive(Clone, Copy, ValueEnum)]
enum Alt {
    TwoSided,
    Greater,
    Less,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthesis manifest (`bundled` or a path) to WAV files.
    SynthData { manifest: String, out_dir: PathBuf },
    /// Print the family-balanced train/eval leaf split.
    Split {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a model and save the best-validation checkpoint.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value = "runs/train")]
        out: PathBuf,
        /// Print every step instead of validation steps only.
        #[arg(long)]
        verbose: bool,
    },
    /// Evaluate a checkpoint on the held-out leaves.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value = "runs/eval")]
        out: PathBuf,
    },
    /// Train and evaluate a sweep against the flat baseline.
    Ablate {
        #[arg(long, value_enum)]
        kind: Kind,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value = "runs/ablation")]
        out: PathBuf,
    },
    /// Paired Wilcoxon test on per-episode F1 of two report files.
    Compare {
        report_a: PathBuf,
        report_b: PathBuf,
        #[arg(long, value_enum, default_value = "two-sided")]
        alternative: Alt,
    },
    /// Merge report files into one per-episode CSV.
    ExportCsv {
        #[arg(required = true)]
        reports: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<String> {
    match cli.command {
        Command::SynthData { manifest, out_dir } => commands::synth_data(&manifest, &out_dir),
        Command::Split { cfg, out } => commands::split(&cfg.load()?, out.as_deref()),
        Command::Train { cfg, out, verbose } => commands::train_cmd(cfg.load()?, &out, |r| {
            if verbose || r.val_loss.is_some() {
                let val = r.val_loss.map_or(String::new(), |v| format!(" val {v:.6}"));
                eprintln!("step {:>6} loss {:.6}{val}", r.step + 1, r.loss);
            }
        }),
        Command::Evaluate { checkpoint, cfg, out } => {
            let (exp, params) = commands::restore(&checkpoint, cfg.config.as_deref(), &cfg.overrides)?;
            commands::evaluate_cmd(&exp, &params, &out)
        }
        Command::Ablate { kind, cfg, out } => {
            let kind = match kind {
                Kind::Height => AblationKind::Height,
                Kind::Alpha => AblationKind::Alpha,
                Kind::Shots => AblationKind::Shots,
                Kind::RandomTrees => AblationKind::RandomTrees,
                Kind::Loss => AblationKind::Loss,
            };
            commands::ablate(kind, &cfg.load()?, &out, |msg| eprintln!("{msg}"))
        }
        Command::Compare { report_a, report_b, alternative } => {
            let alt = match alternative {
                Alt::TwoSided => Alternative::TwoSided,
                Alt::Greater => Alternative::Greater,
                Alt::Less => Alternative::Less,
            };
            commands::compare(&report_a, &report_b, alt)
        }
        Command::ExportCsv { reports, out } => commands::export_csv(&reports, out.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(text) => {
            // a closed pipe (e.g. `| head`) is not an error
            let _ = writeln!(std::io::stdout(), "{text}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(Error::exit_code(&e) as u8)
        }
    }
}
