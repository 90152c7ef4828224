//! The single-stage subcommands: analyze-sensitivity, finetune, quantize,
//! and ate.

use std::path::Path;

use spaq_core::finetune::{finetune, FinetuneConfig, SyntheticTask};
use spaq_core::metrics::SyntheticEvaluator;
use spaq_core::persistence::{self, write_json};
use spaq_core::pruning::analyze_sensitivity;
use spaq_core::quantize::spaq_quantize;
use spaq_core::trajectory::{ate_rmse, AlignMode, Trajectory};

use crate::config::PipelineConfig;
use crate::pipeline::resolve_models;
use crate::CliError;

/// Default probe rate for the standalone sensitivity command; the staged
/// driver derives its own rate from the schedule instead.
pub const DEFAULT_PROBE_RATE: f64 = 0.1;

pub fn cmd_analyze_sensitivity(
    cfg: &PipelineConfig,
    out: Option<&Path>,
) -> Result<(), CliError> {
    cfg.validate()?;
    let task = SyntheticTask {
        kind: cfg.task,
        resolution: cfg.input_resolution,
        samples: 4,
        seed: cfg.seed,
    };
    let probe_rate = cfg.probe_rate.unwrap_or(DEFAULT_PROBE_RATE);
    let mut profiles = Vec::new();
    for graph in resolve_models(&cfg.model)? {
        let evaluator = SyntheticEvaluator::new(task);
        let profile = analyze_sensitivity(&graph, probe_rate, &evaluator)?;
        println!(
            "model: {} (probe rate {}, evaluator {}){}",
            graph.name,
            profile.probe_rate,
            profile.evaluator,
            if profile.degenerate {
                " [degenerate: uniform sensitivities]"
            } else {
                ""
            }
        );
        println!(
            "{:<32} {:>10} {:>10} {:>12} {:>12}",
            "layer", "params", "F(L)", "E(L)", "S(L)"
        );
        let mut s_sum = 0.0;
        for l in &profile.layers {
            s_sum += l.relative;
            println!(
                "{:<32} {:>10} {:>10.6} {:>12.6} {:>12.6}",
                l.layer, l.params, l.param_fraction, l.induced_error, l.relative
            );
        }
        println!("sum(S) = {s_sum:.9}\n");
        profiles.push(profile);
    }
    if let Some(path) = out {
        write_json(&profiles, path)?;
    }
    Ok(())
}

pub fn cmd_finetune(cfg: &PipelineConfig) -> Result<(), CliError> {
    cfg.validate()?;
    std::fs::create_dir_all(&cfg.out_dir)?;
    let task = SyntheticTask {
        kind: cfg.task,
        resolution: cfg.input_resolution,
        samples: 4,
        seed: cfg.seed,
    };
    let ft = FinetuneConfig {
        steps: cfg.finetune.steps,
        learning_rate: cfg.finetune.learning_rate,
        seed: cfg.finetune.seed,
        ..FinetuneConfig::default()
    };
    for graph in resolve_models(&cfg.model)? {
        let (tuned, trace) = finetune(&graph, &task, &ft)?;
        let model_file = cfg.out_dir.join(format!("{}.tuned.spaq", tuned.name));
        persistence::save(&tuned, &model_file)?;
        write_json(
            &trace,
            &cfg.out_dir.join(format!("{}.finetune-trace.json", tuned.name)),
        )?;
        match (trace.first(), trace.last()) {
            (Some(first), Some(last)) => println!(
                "{}: loss {:.6} -> {:.6} over {} steps, saved to {}",
                tuned.name,
                first,
                last,
                trace.len(),
                model_file.display()
            ),
            _ => println!(
                "{}: no steps taken, saved to {}",
                tuned.name,
                model_file.display()
            ),
        }
    }
    Ok(())
}

pub fn cmd_quantize(cfg: &PipelineConfig) -> Result<(), CliError> {
    cfg.validate()?;
    std::fs::create_dir_all(&cfg.out_dir)?;
    let calib = SyntheticTask {
        kind: cfg.task,
        resolution: cfg.input_resolution,
        samples: cfg.calib.samples,
        seed: cfg.calib.seed,
    };
    for graph in resolve_models(&cfg.model)? {
        let batches = calib.sample_batches(&graph, 2)?;
        let inputs: Vec<_> = batches.into_iter().map(|b| b.inputs).collect();
        let (quantized, _stats) = spaq_quantize(&graph, &inputs)?;
        let file = cfg.out_dir.join(format!("{}.int8.spaq", quantized.name));
        persistence::save(&quantized, &file)?;
        let before = persistence::serialized_len(&graph)?;
        let after = persistence::serialized_len(&quantized)?;
        println!(
            "{}: {} -> {} bytes ({:.2}% smaller), saved to {}",
            quantized.name,
            before,
            after,
            100.0 * (1.0 - after as f64 / before as f64),
            file.display()
        );
    }
    Ok(())
}

pub fn cmd_ate(est: &Path, gt: &Path, mode: AlignMode) -> Result<(), CliError> {
    let est = Trajectory::load_tum(est)?;
    let gt = Trajectory::load_tum(gt)?;
    let meters = ate_rmse(&est, &gt, mode)?;
    println!("{meters:.6}");
    Ok(())
}
