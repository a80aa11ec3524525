use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use vitkd::commands;
use vitkd::config::RunConfig;
use vitkd::error::{Error, Result};

#[derive(Parser)]
#[command(
    name = "vitkd",
    version,
    about = "Desk-scale feature-distillation lab for compact vision transformers"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct CommonArgs {
    /// JSON run configuration; built-in defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,

    /// Override one dotted config key, e.g. --set train.epochs=4
    /// or --set distill.shallow_layers=[0,1]. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,

    /// Output directory override.
    #[arg(long)]
    out: Option<PathBuf>,

    /// Shorthand: sets both train.seed and student.seed.
    #[arg(long)]
    seed: Option<u64>,
}

impl CommonArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut sets = Vec::with_capacity(self.sets.len());
        for raw in &self.sets {
            let (key, value) = raw.split_once('=').ok_or_else(|| {
                Error::Config(format!("--set expects KEY=VALUE, got {raw:?}"))
            })?;
            sets.push((key.to_string(), value.to_string()));
        }
        RunConfig::resolve(self.config.as_deref(), &sets, self.out.as_deref(), self.seed)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain the teacher and save its checkpoint.
    TrainTeacher(CommonArgs),
    /// Train a student against a frozen teacher checkpoint.
    Distill(CommonArgs),
    /// Evaluate a checkpoint on the test split.
    Eval {
        #[command(flatten)]
        common: CommonArgs,
        /// Checkpoint to evaluate.
        #[arg(long)]
        ckpt: PathBuf,
    },
    /// Run a grid of distillation variants over several seeds.
    Ablate {
        #[command(flatten)]
        common: CommonArgs,
        /// Grid: losses | layers | alpha | beta.
        #[arg(long, default_value = "losses")]
        grid: String,
        /// Comma-separated seed list.
        #[arg(long, default_value = "0,1,2", value_delimiter = ',')]
        seeds: Vec<u64>,
    },
    /// Export head- and sample-averaged attention maps per layer.
    AttnDump {
        #[command(flatten)]
        common: CommonArgs,
        /// Checkpoint to inspect.
        #[arg(long)]
        ckpt: PathBuf,
        /// Layers to export: "all" or a comma-separated index list.
        #[arg(long, default_value = "all")]
        layers: String,
        /// Test samples to average over.
        #[arg(long, default_value_t = 64)]
        samples: usize,
    },
    /// Audit analytic gradients against finite differences.
    GradCheck,
}

fn run() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::TrainTeacher(common) => {
            commands::cmd_train_teacher(&common.resolve()?)?;
            Ok(())
        }
        Command::Distill(common) => {
            commands::cmd_distill(&common.resolve()?)?;
            Ok(())
        }
        Command::Eval { common, ckpt } => {
            commands::cmd_eval(&common.resolve()?, &ckpt)?;
            Ok(())
        }
        Command::Ablate { common, grid, seeds } => {
            let cfg = common.resolve()?;
            let grid: commands::GridKind = grid.parse()?;
            commands::cmd_ablate(&cfg, grid, &seeds)?;
            Ok(())
        }
        Command::AttnDump {
            common,
            ckpt,
            layers,
            samples,
        } => {
            let cfg = common.resolve()?;
            let layer_list: Option<Vec<usize>> = if layers == "all" {
                None
            } else {
                Some(
                    layers
                        .split(',')
                        .map(|s| {
                            s.trim().parse::<usize>().map_err(|_| {
                                Error::Config(format!("bad layer index {s:?} in --layers"))
                            })
                        })
                        .collect::<Result<_>>()?,
                )
            };
            commands::cmd_attn_dump(&cfg, &ckpt, layer_list.as_deref(), samples)?;
            Ok(())
        }
        Command::GradCheck => {
            let reports = commands::cmd_grad_check()?;
            let failed: Vec<&str> = reports
                .iter()
                .filter(|r| !r.pass)
                .map(|r| r.target.as_str())
                .collect();
            if failed.is_empty() {
                Ok(())
            } else {
                Err(Error::Numeric(format!(
                    "gradient audit failed for: {}",
                    failed.join(", ")
                )))
            }
        }
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
