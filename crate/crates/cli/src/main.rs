use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use cgrpo_cli::ablate::{cmd_ablate, AblateArgs, Axis};
use cgrpo_cli::commands::{
    cmd_eval, cmd_gen, cmd_schedule, cmd_score, cmd_train, load_config, parse_preset, parse_split, parse_strategy, saved_config,
    EvalArgs, OutputRoot, ScoreArgs, TrainArgs,
};
use cgrpo_cli::config::Overrides;
use cgrpo_cli::error::{CliError, CliResult};
use cgrpo_core::eval::DEFAULT_THRESHOLD;
use clap::{Args, Parser, Subcommand};

/// Curriculum-guided GRPO on a synthetic box-grounding task.
///
/// Outputs are written under $CGRPO_OUT (default ./cgrpo-out); output paths
/// given on the command line are relative to it.
#[derive(Parser)]
#[command(name = "cgrpo", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; preset defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// desk or paper.
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// curriculum, uniform, easy_only, hard_only or full_direct.
    #[arg(long)]
    strategy: Option<String>,
}

impl Common {
    fn overrides(&self) -> CliResult<Overrides> {
        Ok(Overrides {
            preset: self.preset.as_deref().map(parse_preset).transpose()?,
            seed: self.seed,
            strategy: self.strategy.as_deref().map(parse_strategy).transpose()?,
        })
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset.
    Gen {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "dataset.jsonl")]
        out: PathBuf,
    },
    /// Score samples with a base policy and assign difficulty tiers.
    Score {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "difficulty.jsonl")]
        out: PathBuf,
        #[arg(long)]
        group_size: Option<usize>,
        /// Refuse a checkpoint written under a different config hash.
        #[arg(long)]
        strict: bool,
    },
    /// Warm up, score and run the main training phase, then evaluate.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long)]
        base: Option<PathBuf>,
        /// Continue the run in this directory with its saved configuration.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Name of the run directory under runs/.
        #[arg(long)]
        name: Option<String>,
        /// Print the sampling schedule and exit without writing files.
        #[arg(long)]
        dry_run: bool,
    },
    /// Greedy evaluation of a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// train, heldout or all.
        #[arg(long, default_value = "heldout")]
        split: String,
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
        threshold: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sweep one axis over several seeds.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// lr, alpha_iou, beta_kl, phase_length or strategy.
        #[arg(long)]
        axis: String,
        #[arg(long, value_delimiter = ',')]
        values: Option<Vec<String>>,
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write the curriculum sampling schedule as CSV.
    Schedule {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 100)]
        every: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn run(cli: Cli, w: &mut dyn Write) -> CliResult<()> {
    let root = OutputRoot::from_env();
    match cli.command {
        Command::Gen { common, out } => {
            let cfg = load_config(common.config.as_deref(), &common.overrides()?)?;
            cmd_gen(&cfg, &root, &out, w)?;
        }
        Command::Score { common, dataset, checkpoint, out, group_size, strict } => {
            let cfg = load_config(common.config.as_deref(), &common.overrides()?)?;
            let args = ScoreArgs { dataset: &dataset, checkpoint: &checkpoint, out: &out, group_size, strict };
            cmd_score(&cfg, &root, &args, w)?;
        }
        Command::Train { common, dataset, report, base, resume, name, dry_run } => {
            let cfg = match &resume {
                Some(dir) => {
                    if common.config.is_some() || common.preset.is_some() || common.seed.is_some() || common.strategy.is_some() {
                        return Err(CliError::Config("--resume uses the run's saved config; drop the other config flags".into()));
                    }
                    saved_config(dir)?
                }
                None => load_config(common.config.as_deref(), &common.overrides()?)?,
            };
            let args = TrainArgs {
                dataset: dataset.as_deref(),
                report: report.as_deref(),
                base: base.as_deref(),
                resume: resume.as_deref(),
                run_name: name.as_deref(),
                dry_run,
            };
            cmd_train(&cfg, &root, &args, w)?;
        }
        Command::Eval { checkpoint, dataset, split, report, threshold, seed, out } => {
            let args = EvalArgs {
                checkpoint: &checkpoint,
                dataset: &dataset,
                split: parse_split(&split)?,
                report: report.as_deref(),
                threshold,
                seed,
                out: out.as_deref(),
            };
            cmd_eval(&root, &args, w)?;
        }
        Command::Ablate { common, axis, values, seeds, jobs, out } => {
            let cfg = load_config(common.config.as_deref(), &common.overrides()?)?;
            let axis: Axis = axis.parse()?;
            let out = out.unwrap_or_else(|| PathBuf::from(format!("ablation-{}.csv", axis.name())));
            cmd_ablate(&cfg, &root, &AblateArgs { axis, values, seeds, jobs, out: &out }, w)?;
        }
        Command::Schedule { common, every, out } => {
            let cfg = load_config(common.config.as_deref(), &common.overrides()?)?;
            cmd_schedule(&cfg, &root, every, out.as_deref(), w)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let stdout = std::io::stdout();
    match run(cli, &mut stdout.lock()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
