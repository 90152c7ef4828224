//! The `pipeline` and `prune` commands: sensitivity → prune + fine-tune →
//! (for `pipeline`) post-training quantization → comparison report.

use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;
use spaq_core::accounting::{cost_report, CostReport};
use spaq_core::finetune::{FinetuneConfig, SyntheticTask};
use spaq_core::graph::ModelGraph;
use spaq_core::metrics::SyntheticEvaluator;
use spaq_core::persistence::{self, write_json};
use spaq_core::pruning::{spaq_prune_set_with, BudgetConfig, PruneConfig, PruneLog, PruneMember};
use spaq_core::quantize::spaq_quantize;
use spaq_core::zoo::{self, ZooSpec};

use crate::config::{config_hash, PipelineConfig, ReportFormat};
use crate::report::{combined_row, comparison_row, reference_for, PipelineReport};
use crate::CliError;

/// The three reconstructed SLAM modules pruned jointly under one budget.
pub const TRIO: [&str; 3] = ["fnet", "cnet", "updatenet"];

/// Wraps a structured artifact with the hash of the configuration that
/// produced it.
#[derive(Serialize)]
struct Artifact<'a, T: Serialize> {
    config_hash: &'a str,
    data: &'a T,
}

#[derive(Serialize)]
struct Manifest<'a> {
    config_hash: &'a str,
    config: &'a PipelineConfig,
    artifacts: &'a [String],
}

/// Resolves a model spec: `trio`, a zoo name, or a model file path.
pub fn resolve_models(spec: &str) -> Result<Vec<ModelGraph>, CliError> {
    let build = |name: &str| -> Result<ModelGraph, CliError> {
        Ok(zoo::build(&ZooSpec::preset(name)?)?)
    };
    if spec == "trio" {
        return TRIO.iter().map(|n| build(n)).collect();
    }
    if ZooSpec::preset(spec).is_ok() {
        return Ok(vec![build(spec)?]);
    }
    let path = Path::new(spec);
    if !path.exists() {
        return Err(CliError::Usage(format!(
            "unknown model `{spec}`: not a zoo name (fnet, cnet, updatenet, toy-residual, \
             toy-gru), not `trio`, and no such file"
        )));
    }
    Ok(vec![persistence::load(path)?])
}

fn native_resolution(g: &ModelGraph) -> Result<(usize, usize), CliError> {
    let input = g
        .inputs
        .first()
        .ok_or_else(|| CliError::Stage(format!("model `{}` has no inputs", g.name)))?;
    Ok((input.height, input.width))
}

fn prune_config(cfg: &PipelineConfig) -> PruneConfig {
    PruneConfig {
        global_rate: cfg.global_rate,
        schedule: cfg.schedule.clone(),
        probe_rate: cfg.probe_rate,
        budget: BudgetConfig {
            p_max: cfg.p_max,
            weighting: cfg.weighting,
        },
        finetune: FinetuneConfig {
            steps: cfg.finetune.steps,
            learning_rate: cfg.finetune.learning_rate,
            seed: cfg.finetune.seed,
            ..FinetuneConfig::default()
        },
    }
}

/// Shared prune flow: snapshots baselines, runs the staged driver, and
/// writes per-stage models, profiles, plans, and the prune log.
struct PruneOutcome {
    baselines: Vec<ModelGraph>,
    pruned: Vec<ModelGraph>,
    log: PruneLog,
    artifacts: Vec<String>,
    hash: String,
}

fn run_prune(cfg: &PipelineConfig) -> Result<PruneOutcome, CliError> {
    cfg.validate()?;
    let hash = config_hash(cfg);
    std::fs::create_dir_all(&cfg.out_dir)?;
    let mut artifacts = Vec::new();

    let baselines = resolve_models(&cfg.model)?;
    for g in &baselines {
        let file = format!("{}.baseline.spaq", g.name);
        persistence::save(g, &cfg.out_dir.join(&file))?;
        artifacts.push(file);
    }

    let task = SyntheticTask {
        kind: cfg.task,
        resolution: cfg.input_resolution,
        samples: 4,
        seed: cfg.seed,
    };
    let evaluators: Vec<SyntheticEvaluator> = baselines
        .iter()
        .map(|_| SyntheticEvaluator::new(task))
        .collect();
    let mut members: Vec<PruneMember> = baselines
        .iter()
        .zip(&evaluators)
        .map(|(g, evaluator)| PruneMember {
            name: g.name.clone(),
            graph: g.clone(),
            evaluator,
            task,
        })
        .collect();

    let out_dir = cfg.out_dir.clone();
    let mut stage_files = Vec::new();
    let log = spaq_prune_set_with(&mut members, &prune_config(cfg), &mut |stage, ms| {
        for m in ms {
            let file = format!("{}.stage{}.spaq", m.name, stage + 1);
            persistence::save(&m.graph, &out_dir.join(&file))?;
            stage_files.push(file);
        }
        Ok(())
    })?;
    artifacts.append(&mut stage_files);

    for st in &log.stages {
        for ml in &st.members {
            let profile = format!("{}.stage{}.profile.json", ml.member, st.stage + 1);
            write_json(
                &Artifact { config_hash: &hash, data: &ml.profile },
                &cfg.out_dir.join(&profile),
            )?;
            artifacts.push(profile);
            let plan = format!("{}.stage{}.plan.json", ml.member, st.stage + 1);
            write_json(
                &Artifact { config_hash: &hash, data: &ml.plan },
                &cfg.out_dir.join(&plan),
            )?;
            artifacts.push(plan);
        }
    }
    write_json(
        &Artifact { config_hash: &hash, data: &log },
        &cfg.out_dir.join("prune-log.json"),
    )?;
    artifacts.push("prune-log.json".to_string());

    let mut pruned = Vec::new();
    for m in members {
        let file = format!("{}.pruned.spaq", m.name);
        persistence::save(&m.graph, &cfg.out_dir.join(&file))?;
        artifacts.push(file);
        pruned.push(m.graph);
    }

    Ok(PruneOutcome {
        baselines,
        pruned,
        log,
        artifacts,
        hash,
    })
}

fn write_manifest(
    cfg: &PipelineConfig,
    hash: &str,
    artifacts: &mut Vec<String>,
) -> Result<(), CliError> {
    artifacts.push("manifest.json".to_string());
    write_json(
        &Manifest {
            config_hash: hash,
            config: cfg,
            artifacts,
        },
        &cfg.out_dir.join("manifest.json"),
    )?;
    Ok(())
}

pub fn cmd_pipeline(cfg: &PipelineConfig) -> Result<(), CliError> {
    let started = std::time::Instant::now();
    let mut outcome = run_prune(cfg)?;

    let calib = SyntheticTask {
        kind: cfg.task,
        resolution: cfg.input_resolution,
        samples: cfg.calib.samples,
        seed: cfg.calib.seed,
    };
    let mut rows = Vec::new();
    for (baseline, pruned) in outcome.baselines.iter().zip(&outcome.pruned) {
        let batches = calib.sample_batches(pruned, 2)?;
        let inputs: Vec<_> = batches.into_iter().map(|b| b.inputs).collect();
        let (quantized, _stats) = spaq_quantize(pruned, &inputs)?;
        let file = format!("{}.int8.spaq", quantized.name);
        persistence::save(&quantized, &cfg.out_dir.join(&file))?;
        outcome.artifacts.push(file);

        let res = native_resolution(baseline)?;
        let base_cost: CostReport = cost_report(baseline, res)?;
        let final_cost = cost_report(&quantized, res)?;
        rows.push(comparison_row(&baseline.name, &base_cost, &final_cost));
    }

    let combined = combined_row(&rows);
    let report = PipelineReport {
        config_hash: outcome.hash.clone(),
        model: cfg.model.clone(),
        global_rate: cfg.global_rate,
        rows,
        combined,
        reference: reference_for(cfg.global_rate),
    };
    let body = report.render(cfg.report_format)?;
    let report_file = match cfg.report_format {
        ReportFormat::Text => "report.txt",
        ReportFormat::Structured => "report.json",
    };
    std::fs::write(cfg.out_dir.join(report_file), &body)?;
    outcome.artifacts.push(report_file.to_string());

    write_manifest(cfg, &outcome.hash, &mut outcome.artifacts)?;
    print!("{body}");
    log::info!(
        "pipeline finished in {:.1} s",
        started.elapsed().as_secs_f64()
    );
    Ok(())
}

pub fn cmd_prune(cfg: &PipelineConfig) -> Result<(), CliError> {
    let mut outcome = run_prune(cfg)?;
    write_manifest(cfg, &outcome.hash, &mut outcome.artifacts)?;

    let mut body = String::new();
    let log = &outcome.log;
    writeln!(body, "baseline parameters: {}", log.baseline_params).expect("string write");
    for st in &log.stages {
        writeln!(
            body,
            "stage {} (cumulative rate {}, applied rate {:.6}):",
            st.stage + 1,
            st.cumulative_rate,
            st.applied_rate
        )
        .expect("string write");
        for ml in &st.members {
            writeln!(
                body,
                "  {}: {} -> {} params, error {:.6} -> {:.6}",
                ml.member, ml.params_before, ml.params_after, ml.error_before, ml.error_after
            )
            .expect("string write");
        }
    }
    if let Some(traces) = &log.finetune_only {
        for (name, trace) in traces {
            writeln!(body, "finetune-only {}: {} steps", name, trace.len()).expect("string write");
        }
    }
    print!("{body}");
    Ok(())
}
