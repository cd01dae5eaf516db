use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use psap::checkpoint;
use psap::config::{Overrides, RunConfig};
use psap::experiments;
use psap::reconstruction::{DetectVariant, ReconMode, ThresholdPool};

#[derive(Parser)]
#[command(name = "psap", version, about = "Filter pruning with self-adaptive ratios and protective reconstruction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Search and fine-tune; writes checkpoint, CSV log and JSON summary.
    Run {
        #[command(flatten)]
        common: Common,
        /// Continue from a checkpoint instead of starting fresh.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Run the {adaptive on/off} x {reconstruction on/off} grid over several seeds.
    Ablate(Common),
    /// Uniform iterative pruning with per-epoch, per-layer WSR output.
    WsrTrace(Common),
    /// Prune one layer at several ratios and fine-tune briefly.
    Sensitivity {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        layer: Option<String>,
        /// Comma-separated ratio grid.
        #[arg(long, value_delimiter = ',')]
        ratios: Option<Vec<f64>>,
    },
    /// Compare pruning the lower vs. upper importance half of every layer.
    GradientAccuracy {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Print checkpoint metadata as JSON.
    Inspect { checkpoint: PathBuf },
}

#[derive(Clone, Copy, ValueEnum)]
enum Switch {
    On,
    Off,
}

#[derive(Clone, Copy, ValueEnum)]
enum ReconArg {
    Reload,
    Reactivate,
    Reinit,
    None,
}

#[derive(Clone, Copy, ValueEnum)]
enum DetectArg {
    WeightNorm,
    GradNorm,
}

#[derive(Clone, Copy, ValueEnum)]
enum PoolArg {
    All,
    Pruned,
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum)]
    adaptive: Option<Switch>,
    #[arg(long)]
    uniform_ratio: Option<f64>,
    #[arg(long, value_enum)]
    recon: Option<ReconArg>,
    #[arg(long, value_enum)]
    detect: Option<DetectArg>,
    #[arg(long, value_enum)]
    threshold_pool: Option<PoolArg>,
}

impl Common {
    fn resolve(&self) -> psap::Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::toy(),
        };
        cfg.apply(&Overrides {
            seed: self.seed,
            out: self.out.clone(),
            adaptive: self.adaptive.map(|s| matches!(s, Switch::On)),
            uniform_ratio: self.uniform_ratio,
            recon: self.recon.map(|r| match r {
                ReconArg::Reload => ReconMode::Reload,
                ReconArg::Reactivate => ReconMode::Reactivate,
                ReconArg::Reinit => ReconMode::Reinitialize,
                ReconArg::None => ReconMode::None,
            }),
            detect: self.detect.map(|d| match d {
                DetectArg::WeightNorm => DetectVariant::WeightNorm,
                DetectArg::GradNorm => DetectVariant::GradNorm,
            }),
            threshold_pool: self.threshold_pool.map(|p| match p {
                PoolArg::All => ThresholdPool::All,
                PoolArg::Pruned => ThresholdPool::Pruned,
            }),
        })?;
        Ok(cfg)
    }
}

fn print_json<T: serde::Serialize>(v: &T) -> psap::Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn execute(cli: Cli) -> psap::Result<()> {
    match cli.command {
        Command::Run { common, resume } => {
            let summary = match resume {
                Some(path) => experiments::resume(&path, common.out.clone())?,
                None => experiments::run(&common.resolve()?)?,
            };
            if let Some(s) = &summary.search {
                if s.reason == psap::trainer::StopReason::BudgetExhausted {
                    log::warn!("compression target not reached; removed {:.4}", s.param_ratio_removed);
                }
            }
            print_json(&summary)
        }
        Command::Ablate(common) => print_json(&experiments::ablate(&common.resolve()?)?),
        Command::WsrTrace(common) => print_json(&experiments::wsr_trace(&common.resolve()?)?),
        Command::Sensitivity { common, checkpoint, layer, ratios } => {
            let mut cfg = common.resolve()?;
            if layer.is_some() {
                cfg.experiments.sensitivity_layer = layer;
            }
            if let Some(r) = ratios {
                cfg.experiments.sensitivity_ratios = r;
            }
            cfg.validate()?;
            print_json(&experiments::sensitivity(&cfg, checkpoint.as_deref())?)
        }
        Command::GradientAccuracy { common, checkpoint } => {
            print_json(&experiments::gradient_accuracy(&common.resolve()?, checkpoint.as_deref())?)
        }
        Command::Inspect { checkpoint: path } => {
            let h = checkpoint::load_header(&path)?;
            print_json(&serde_json::json!({
                "format_version": checkpoint::FORMAT_VERSION,
                "tool_version": h.tool_version,
                "scalar": h.scalar,
                "phase": h.phase,
                "phase_epoch": h.phase_epoch,
                "rng": h.rng,
                "ratios": h.ratios,
                "search": h.search,
                "model_spec": h.model_spec,
                "masks": h.masks.iter().map(|m| &m.layer_id).collect::<Vec<_>>(),
                "log_rows": h.log.rows.len(),
                "config": h.config,
            }))
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
