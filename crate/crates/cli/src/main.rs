use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mmdlora::config::ExperimentConfig;
use mmdlora::lora::AdapterPolicy;
use mmdlora::pipeline;
use mmdlora::Error;

#[derive(Parser)]
#[command(name = "mmdlora", version, about = "Prompt-driven LoRA adaptation for adverse-condition depth")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment configuration (TOML); omitted keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
    /// Replaces every seed in the configuration.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Stage 1: train adapters on the alignment and contrastive losses.
    Pretrain(Common),
    /// Stage 2: train the depth head with frozen adapters.
    TrainDepth {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        adapters: Option<PathBuf>,
        /// merge-mean, none or single:<label>
        #[arg(long)]
        adapter_policy: Option<String>,
    },
    /// Zero-shot evaluation on the configured domains.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        head: PathBuf,
        #[arg(long)]
        adapters: Option<PathBuf>,
        /// Defaults to the policy recorded in the head checkpoint.
        #[arg(long)]
        adapter_policy: Option<String>,
    },
    /// Finite-difference check of every differentiable component.
    Gradcheck(Common),
    /// Component ablation over seeds plus the rank/parameter sweep.
    Ablate(Common),
}

fn load(common: &Common) -> mmdlora::Result<ExperimentConfig> {
    let cfg = match &common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    Ok(match common.seed {
        Some(seed) => cfg.with_seed(seed),
        None => cfg,
    })
}

fn policy(text: Option<&str>) -> mmdlora::Result<Option<AdapterPolicy>> {
    text.map(str::parse).transpose()
}

enum Outcome {
    Done,
    GradcheckFailed,
}

fn run(cli: Cli) -> mmdlora::Result<Outcome> {
    match cli.command {
        Command::Pretrain(common) => {
            let cfg = load(&common)?;
            let out = pipeline::run_pretrain(&cfg, &common.out_dir)?;
            println!("adapters {}", out.checkpoint.display());
            println!("log {}", out.log.display());
        }
        Command::TrainDepth {
            common,
            adapters,
            adapter_policy,
        } => {
            let cfg = load(&common)?;
            let policy = policy(adapter_policy.as_deref())?;
            let out = pipeline::run_train_depth(&cfg, &common.out_dir, adapters.as_deref(), policy.as_ref())?;
            println!("head {}", out.checkpoint.display());
            println!("log {}", out.log.display());
        }
        Command::Evaluate {
            common,
            head,
            adapters,
            adapter_policy,
        } => {
            let cfg = load(&common)?;
            let policy = policy(adapter_policy.as_deref())?;
            let report = pipeline::run_evaluate(&cfg, &common.out_dir, &head, adapters.as_deref(), policy.as_ref())?;
            print!("{}", report.table());
            println!("report {}", common.out_dir.join(pipeline::REPORT_JSON).display());
        }
        Command::Gradcheck(common) => {
            let cfg = load(&common)?;
            let rows = pipeline::run_gradcheck_to(&cfg, Some(&common.out_dir))?;
            print!("{}", pipeline::format_gradcheck(&rows, cfg.gradcheck.tolerance));
            if rows.iter().any(|r| !r.passed) {
                return Ok(Outcome::GradcheckFailed);
            }
        }
        Command::Ablate(common) => {
            let cfg = load(&common)?;
            let result = pipeline::run_ablate(&cfg, &common.out_dir)?;
            print!("{}", result.table());
            println!("ablation {}", common.out_dir.join(pipeline::ABLATION_JSON).display());
        }
    }
    Ok(Outcome::Done)
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config { .. } | Error::Tokenize { .. } | Error::Checkpoint { .. } => 2,
        Error::NonFinite { .. } | Error::Domain { .. } | Error::EmptyMask { .. } => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(Outcome::Done) => ExitCode::SUCCESS,
        Ok(Outcome::GradcheckFailed) => {
            eprintln!("error: gradient check exceeded tolerance");
            ExitCode::from(3)
        }
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code(&err))
        }
    }
}
