//! `spaq` — structured pruning and 8-bit post-training quantization for CNN
//! graphs, end to end or stage by stage.
//!
//! Exit codes: 0 success, 1 usage error, 2 stage failure.

mod commands;
mod config;
mod pipeline;
mod report;

use std::path::PathBuf;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use spaq_core::finetune::TaskKind;
use spaq_core::pruning::Weighting;
use spaq_core::trajectory::AlignMode;

use config::{
    load_patch, CalibPatch, ConfigPatch, FinetunePatch, PipelineConfig, ReportFormat,
};

#[derive(Debug)]
pub enum CliError {
    /// Bad arguments or configuration: exit code 1.
    Usage(String),
    /// A pipeline stage failed: exit code 2.
    Stage(String),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(msg) | CliError::Stage(msg) => f.write_str(msg),
        }
    }
}

impl From<spaq_core::Error> for CliError {
    fn from(e: spaq_core::Error) -> Self {
        CliError::Stage(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Stage(e.to_string())
    }
}

#[derive(Parser)]
#[command(
    name = "spaq",
    version,
    about = "Sensitivity-guided structured pruning and int8 quantization for CNN graphs"
)]
struct Cli {
    /// Base seed for synthetic task data (calibration uses seed + 1).
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads for parallel sensitivity probing (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// JSON config file with pipeline keys; flags take precedence.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the full flow: sensitivity -> prune + fine-tune -> int8 -> report.
    Pipeline(PipelineArgs),
    /// Rank layers by pruning sensitivity.
    AnalyzeSensitivity(AnalyzeArgs),
    /// Structured pruning with inter-stage fine-tuning (no quantization).
    Prune(PruneArgs),
    /// Fine-tune a model on its synthetic task.
    Finetune(FinetuneArgs),
    /// Post-training static int8 quantization with min-max calibration.
    Quantize(QuantizeArgs),
    /// Compare two model files and print the reduction arithmetic.
    Report(ReportArgs),
    /// Absolute trajectory error between two TUM-format files, in meters.
    Ate(AteArgs),
}

#[derive(Args)]
struct PipelineArgs {
    /// Zoo model, `trio`, or a model file path.
    #[arg(long)]
    model: Option<String>,
    /// Global pruning rate P_g in [0, 1).
    #[arg(long)]
    global_rate: Option<f64>,
    /// Comma-separated cumulative schedule ending at the global rate.
    #[arg(long, value_delimiter = ',')]
    schedule: Option<Vec<f64>>,
    /// Probe rate for sensitivity analysis, in (0, 1).
    #[arg(long)]
    probe_rate: Option<f64>,
    /// Budget weighting: direct or inverse.
    #[arg(long)]
    weighting: Option<Weighting>,
    /// Per-layer pruning-rate cap in (0, 1].
    #[arg(long)]
    p_max: Option<f64>,
    /// Synthetic task: blur-flow or downsample-identity.
    #[arg(long)]
    task: Option<TaskKind>,
    /// Fine-tuning steps per stage.
    #[arg(long)]
    finetune_steps: Option<usize>,
    /// Fine-tuning learning rate.
    #[arg(long)]
    learning_rate: Option<f64>,
    /// Calibration sample count.
    #[arg(long)]
    calib_samples: Option<usize>,
    /// Calibration data seed.
    #[arg(long)]
    calib_seed: Option<u64>,
    /// Working resolution HxW for synthetic data.
    #[arg(long, value_parser = config::parse_resolution)]
    resolution: Option<(usize, usize)>,
    /// Output directory for artifacts.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Report format: text or structured.
    #[arg(long)]
    format: Option<ReportFormat>,
}

impl PipelineArgs {
    fn into_patch(self) -> ConfigPatch {
        let finetune = if self.finetune_steps.is_some() || self.learning_rate.is_some() {
            Some(FinetunePatch {
                steps: self.finetune_steps,
                learning_rate: self.learning_rate,
                seed: None,
            })
        } else {
            None
        };
        let calib = if self.calib_samples.is_some() || self.calib_seed.is_some() {
            Some(CalibPatch {
                samples: self.calib_samples,
                seed: self.calib_seed,
            })
        } else {
            None
        };
        ConfigPatch {
            model: self.model,
            global_rate: self.global_rate,
            schedule: self.schedule,
            probe_rate: self.probe_rate,
            weighting: self.weighting,
            p_max: self.p_max,
            task: self.task,
            finetune,
            calib,
            input_resolution: self.resolution,
            out_dir: self.out,
            report_format: self.format,
            seed: None,
        }
    }
}

#[derive(Args)]
struct PruneArgs {
    /// Zoo model, `trio`, or a model file path.
    #[arg(long)]
    model: Option<String>,
    /// Global pruning rate P_g in [0, 1).
    #[arg(long)]
    global_rate: Option<f64>,
    /// Comma-separated cumulative schedule ending at the global rate.
    #[arg(long, value_delimiter = ',')]
    schedule: Option<Vec<f64>>,
    /// Probe rate for sensitivity analysis, in (0, 1).
    #[arg(long)]
    probe_rate: Option<f64>,
    /// Budget weighting: direct or inverse.
    #[arg(long)]
    weighting: Option<Weighting>,
    /// Per-layer pruning-rate cap in (0, 1].
    #[arg(long)]
    p_max: Option<f64>,
    /// Synthetic task: blur-flow or downsample-identity.
    #[arg(long)]
    task: Option<TaskKind>,
    /// Fine-tuning steps per stage.
    #[arg(long)]
    finetune_steps: Option<usize>,
    /// Fine-tuning learning rate.
    #[arg(long)]
    learning_rate: Option<f64>,
    /// Working resolution HxW for synthetic data.
    #[arg(long, value_parser = config::parse_resolution)]
    resolution: Option<(usize, usize)>,
    /// Output directory for artifacts.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl PruneArgs {
    fn into_patch(self) -> ConfigPatch {
        let finetune = if self.finetune_steps.is_some() || self.learning_rate.is_some() {
            Some(FinetunePatch {
                steps: self.finetune_steps,
                learning_rate: self.learning_rate,
                seed: None,
            })
        } else {
            None
        };
        ConfigPatch {
            model: self.model,
            global_rate: self.global_rate,
            schedule: self.schedule,
            probe_rate: self.probe_rate,
            weighting: self.weighting,
            p_max: self.p_max,
            task: self.task,
            finetune,
            input_resolution: self.resolution,
            out_dir: self.out,
            ..ConfigPatch::default()
        }
    }
}

#[derive(Args)]
struct AnalyzeArgs {
    /// Zoo model, `trio`, or a model file path.
    #[arg(long)]
    model: Option<String>,
    /// Probe rate in (0, 1).
    #[arg(long)]
    probe_rate: Option<f64>,
    /// Synthetic task: blur-flow or downsample-identity.
    #[arg(long)]
    task: Option<TaskKind>,
    /// Working resolution HxW for synthetic data.
    #[arg(long, value_parser = config::parse_resolution)]
    resolution: Option<(usize, usize)>,
    /// Also write the profiles as JSON to this file.
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct FinetuneArgs {
    /// Zoo model, `trio`, or a model file path.
    #[arg(long)]
    model: Option<String>,
    /// Number of optimization steps.
    #[arg(long)]
    steps: Option<usize>,
    /// SGD learning rate.
    #[arg(long)]
    learning_rate: Option<f64>,
    /// Synthetic task: blur-flow or downsample-identity.
    #[arg(long)]
    task: Option<TaskKind>,
    /// Working resolution HxW for synthetic data.
    #[arg(long, value_parser = config::parse_resolution)]
    resolution: Option<(usize, usize)>,
    /// Output directory for the tuned model and loss trace.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct QuantizeArgs {
    /// Zoo model, `trio`, or a model file path.
    #[arg(long)]
    model: Option<String>,
    /// Calibration sample count.
    #[arg(long)]
    calib_samples: Option<usize>,
    /// Calibration data seed.
    #[arg(long)]
    calib_seed: Option<u64>,
    /// Synthetic task: blur-flow or downsample-identity.
    #[arg(long)]
    task: Option<TaskKind>,
    /// Working resolution HxW for calibration data.
    #[arg(long, value_parser = config::parse_resolution)]
    resolution: Option<(usize, usize)>,
    /// Output directory for the quantized model.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    /// Baseline model file.
    #[arg(long)]
    baseline: PathBuf,
    /// Optimized model file.
    #[arg(long)]
    optimized: PathBuf,
    /// Report format: text or structured.
    #[arg(long)]
    format: Option<ReportFormat>,
}

#[derive(Args)]
struct AteArgs {
    /// Estimated trajectory (TUM format).
    est: PathBuf,
    /// Ground-truth trajectory (TUM format).
    gt: PathBuf,
    /// Alignment mode: rigid or similarity.
    #[arg(long, default_value = "similarity")]
    mode: AlignMode,
}

fn resolved(
    config_file: Option<&PathBuf>,
    seed: Option<u64>,
    patch: ConfigPatch,
) -> Result<PipelineConfig, CliError> {
    let mut cfg = PipelineConfig::default();
    if let Some(path) = config_file {
        load_patch(path)?.apply(&mut cfg);
    }
    if let Some(seed) = seed {
        cfg.seed = seed;
        cfg.finetune.seed = seed;
        cfg.calib.seed = seed + 1;
    }
    patch.apply(&mut cfg);
    cfg.validate()?;
    Ok(cfg)
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    let Cli {
        seed,
        threads: _,
        config,
        command,
    } = cli;
    let config = config.as_ref();
    match command {
        Command::Pipeline(args) => {
            pipeline::cmd_pipeline(&resolved(config, seed, args.into_patch())?)
        }
        Command::Prune(args) => pipeline::cmd_prune(&resolved(config, seed, args.into_patch())?),
        Command::AnalyzeSensitivity(args) => {
            let patch = ConfigPatch {
                model: args.model,
                probe_rate: args.probe_rate,
                task: args.task,
                input_resolution: args.resolution,
                ..ConfigPatch::default()
            };
            commands::cmd_analyze_sensitivity(
                &resolved(config, seed, patch)?,
                args.out.as_deref(),
            )
        }
        Command::Finetune(args) => {
            let finetune = if args.steps.is_some() || args.learning_rate.is_some() {
                Some(FinetunePatch {
                    steps: args.steps,
                    learning_rate: args.learning_rate,
                    seed: None,
                })
            } else {
                None
            };
            let patch = ConfigPatch {
                model: args.model,
                task: args.task,
                finetune,
                input_resolution: args.resolution,
                out_dir: args.out,
                ..ConfigPatch::default()
            };
            commands::cmd_finetune(&resolved(config, seed, patch)?)
        }
        Command::Quantize(args) => {
            let calib = if args.calib_samples.is_some() || args.calib_seed.is_some() {
                Some(CalibPatch {
                    samples: args.calib_samples,
                    seed: args.calib_seed,
                })
            } else {
                None
            };
            let patch = ConfigPatch {
                model: args.model,
                task: args.task,
                calib,
                input_resolution: args.resolution,
                out_dir: args.out,
                ..ConfigPatch::default()
            };
            commands::cmd_quantize(&resolved(config, seed, patch)?)
        }
        Command::Report(args) => report::cmd_report(
            &args.baseline,
            &args.optimized,
            args.format.unwrap_or(ReportFormat::Text),
        ),
        Command::Ate(args) => commands::cmd_ate(&args.est, &args.gt, args.mode),
    }
}

fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot configure {n} threads: {e}");
            return 1;
        }
    }
    match dispatch(cli) {
        Ok(()) => 0,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            1
        }
        Err(CliError::Stage(msg)) => {
            eprintln!("error: {msg}");
            2
        }
    }
}

fn main() {
    std::process::exit(run());
}
