//! The iterative prune-and-finetune driver.
//!
//! Pruning runs over a schedule of cumulative rates (default: two intervals,
//! [P_g/2, P_g]). Each stage re-analyzes sensitivity on the current model,
//! allocates an incremental budget, applies the surgery, and fine-tunes.
//! Because consumer slices and norm channels come off together with the
//! planned filter rows, the parameters actually removed exceed the nominal
//! row budget; a bisection on the allocator's rate calibrates each stage so
//! the realized parameter count lands on the scheduled point.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::finetune::{finetune, FinetuneConfig, SyntheticTask};
use crate::graph::ModelGraph;
use crate::metrics::Evaluator;

use super::budget::{allocate_fractions, resolve_drops, BudgetConfig, LayerBudget, PruningPlan};
use super::provenance::Provenance;
use super::sensitivity::{analyze_sensitivity, LayerSensitivity, SensitivityProfile};
use super::surgery::{apply_plan, simulate_params};

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PruneConfig {
    /// P_g: fraction of total parameters to remove by the end.
    pub global_rate: f64,
    /// Cumulative rates per stage; `None` uses [P_g/2, P_g].
    pub schedule: Option<Vec<f64>>,
    /// Probe rate for sensitivity analysis; `None` uses each stage's
    /// incremental rate.
    pub probe_rate: Option<f64>,
    pub budget: BudgetConfig,
    pub finetune: FinetuneConfig,
}

impl PruneConfig {
    pub fn new(global_rate: f64) -> Self {
        PruneConfig {
            global_rate,
            schedule: None,
            probe_rate: None,
            budget: BudgetConfig::default(),
            finetune: FinetuneConfig::default(),
        }
    }
}

/// Per-member record of one pruning stage.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct StageMemberLog {
    pub member: String,
    pub profile: SensitivityProfile,
    pub plan: PruningPlan,
    pub params_before: usize,
    pub params_after: usize,
    pub error_before: f64,
    pub error_after: f64,
    pub finetune_trace: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct StageLog {
    pub stage: usize,
    pub cumulative_rate: f64,
    /// Nominal incremental rate on the parameters remaining at stage entry.
    pub incremental_rate: f64,
    /// Allocator rate found by the calibration search.
    pub applied_rate: f64,
    pub members: Vec<StageMemberLog>,
}

#[derive(Debug, Clone, PartialEq, Default, serde::Serialize, serde::Deserialize)]
pub struct PruneLog {
    pub baseline_params: usize,
    pub stages: Vec<StageLog>,
    /// Loss traces of the finetune-only path taken when the schedule is
    /// empty (P_g = 0).
    pub finetune_only: Option<Vec<(String, Vec<f64>)>>,
}

pub fn default_schedule(global_rate: f64) -> Vec<f64> {
    if global_rate <= 0.0 {
        Vec::new()
    } else {
        vec![global_rate / 2.0, global_rate]
    }
}

fn validate_schedule(schedule: &[f64], global_rate: f64) -> Result<()> {
    if schedule.is_empty() && global_rate > 0.0 {
        return Err(Error::InvalidConfig(format!(
            "schedule is empty but the global rate is {global_rate}"
        )));
    }
    let mut prev = 0.0;
    for &c in schedule {
        if !(c > 0.0 && c < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "schedule point {c} outside (0, 1)"
            )));
        }
        if c <= prev {
            return Err(Error::InvalidConfig(
                "schedule must be strictly increasing".into(),
            ));
        }
        prev = c;
    }
    if let Some(&last) = schedule.last() {
        if (last - global_rate).abs() > 1e-9 {
            return Err(Error::InvalidConfig(format!(
                "schedule must end at the global rate {global_rate}, ends at {last}"
            )));
        }
    }
    Ok(())
}

/// One model being pruned, with its evaluator and fine-tuning task.
pub struct PruneMember<'a> {
    pub name: String,
    pub graph: ModelGraph,
    pub evaluator: &'a dyn Evaluator,
    pub task: SyntheticTask,
}

fn stage_err(index: usize) -> impl Fn(Error) -> Error {
    move |e| Error::Stage {
        index,
        source: Box::new(e),
    }
}

/// Combines per-member profiles into one namespaced (`member/layer`) profile
/// for the joint budget. Each member keeps the S values from its own E_T
/// normalization:
/// the allocator's product rule is scale-invariant in S, so per-member
/// normalization stops one member's evaluator units (a 128-channel encoder
/// error vs a 2-channel head error) from skewing the cross-member split.
/// F is renormalized over the union of prunable parameters.
fn joint_profile(profiles: &[(String, SensitivityProfile)]) -> SensitivityProfile {
    let mut rows: Vec<LayerSensitivity> = Vec::new();
    for (name, p) in profiles {
        for l in &p.layers {
            rows.push(LayerSensitivity {
                layer: format!("{name}/{}", l.layer),
                ..l.clone()
            });
        }
    }
    let total_params: usize = rows.iter().map(|l| l.params).sum();
    for l in &mut rows {
        l.param_fraction = l.params as f64 / total_params as f64;
    }
    SensitivityProfile {
        probe_rate: profiles.first().map(|(_, p)| p.probe_rate).unwrap_or(0.0),
        evaluator: profiles
            .iter()
            .map(|(n, p)| format!("{n}:{}", p.evaluator))
            .collect::<Vec<_>>()
            .join(","),
        degenerate: profiles.iter().all(|(_, p)| p.degenerate),
        layers: rows,
    }
}

fn split_fractions(joint: &[(String, f64)], member: &str) -> Vec<(String, f64)> {
    let prefix = format!("{member}/");
    joint
        .iter()
        .filter_map(|(l, r)| l.strip_prefix(&prefix).map(|rest| (rest.to_string(), *r)))
        .collect()
}

/// Prunes a set of models against one parameter budget: sensitivity-weighted
/// allocation runs over the union of all members' prunable layers, so cheap
/// insensitive layers anywhere in the set absorb the budget first.
pub fn spaq_prune_set(members: &mut [PruneMember<'_>], cfg: &PruneConfig) -> Result<PruneLog> {
    spaq_prune_set_with(members, cfg, &mut |_, _| Ok(()))
}

/// Like [`spaq_prune_set`], invoking `observer(stage, members)` after each
/// completed stage — e.g. to snapshot intermediate models to disk.
pub fn spaq_prune_set_with(
    members: &mut [PruneMember<'_>],
    cfg: &PruneConfig,
    observer: &mut dyn FnMut(usize, &[PruneMember<'_>]) -> Result<()>,
) -> Result<PruneLog> {
    if members.is_empty() {
        return Err(Error::InvalidConfig("no models to prune".into()));
    }
    if !(0.0..1.0).contains(&cfg.global_rate) {
        return Err(Error::InvalidConfig(format!(
            "global pruning rate must lie in [0, 1), got {}",
            cfg.global_rate
        )));
    }
    let schedule = cfg
        .schedule
        .clone()
        .unwrap_or_else(|| default_schedule(cfg.global_rate));
    validate_schedule(&schedule, cfg.global_rate)?;

    let n0: usize = members.iter().map(|m| m.graph.param_count()).sum();
    let mut log = PruneLog {
        baseline_params: n0,
        ..PruneLog::default()
    };

    if schedule.is_empty() {
        let mut traces = Vec::new();
        for m in members.iter_mut() {
            let (tuned, trace) = finetune(&m.graph, &m.task, &cfg.finetune)?;
            m.graph = tuned;
            traces.push((m.name.clone(), trace));
        }
        log.finetune_only = Some(traces);
        return Ok(log);
    }

    for (k, &cum) in schedule.iter().enumerate() {
        let wrap = stage_err(k);
        let n_cur: usize = members.iter().map(|m| m.graph.param_count()).sum();
        let target = ((1.0 - cum) * n0 as f64).round() as usize;
        let nominal = if n_cur > target {
            (n_cur - target) as f64 / n_cur as f64
        } else {
            0.0
        };
        let probe_rate = cfg.probe_rate.unwrap_or(nominal).clamp(0.005, 0.95);

        // Phase 1: per-member sensitivity on the current graphs.
        let mut profiles = Vec::new();
        for m in members.iter() {
            let p = analyze_sensitivity(&m.graph, probe_rate, m.evaluator).map_err(&wrap)?;
            profiles.push((m.name.clone(), p));
        }
        let joint = joint_profile(&profiles);

        // Phase 2: calibrate the allocator rate so realized parameters hit
        // the scheduled point, then prune and fine-tune each member.
        let provs: Vec<Provenance> = members
            .iter()
            .map(|m| Provenance::build(&m.graph))
            .collect::<Result<_>>()
            .map_err(&wrap)?;
        let simulate = |rate: f64| -> Result<(Vec<(String, f64)>, usize)> {
            let fractions = allocate_fractions(&joint, rate, &cfg.budget)?;
            let mut total = 0usize;
            for (m, prov) in members.iter().zip(&provs) {
                let local = split_fractions(&fractions, &m.name);
                let (_, drops) = resolve_drops(&m.graph, &local, &cfg.budget)?;
                total += simulate_params(&m.graph, prov, &drops)?;
            }
            Ok((fractions, total))
        };

        let applied_rate = if nominal <= 0.0 {
            0.0
        } else {
            let hi = cfg.budget.p_max * (1.0 - 1e-9);
            let (_, at_hi) = simulate(hi).map_err(&wrap)?;
            if at_hi > target {
                return Err(wrap(Error::InfeasibleBudget(format!(
                    "stage target of {target} parameters is below the p_max floor of {at_hi}"
                ))));
            }
            let mut lo = 0.0f64; // realized params at 0 = n_cur ≥ target
            let mut hi = hi;
            let mut best = (usize::MAX, hi);
            for _ in 0..50 {
                let mid = 0.5 * (lo + hi);
                if mid <= 0.0 {
                    break;
                }
                let (_, p) = simulate(mid).map_err(&wrap)?;
                let gap = p.abs_diff(target);
                if (gap, mid) < best || best.0 == usize::MAX {
                    best = (gap, mid);
                }
                if p > target {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            best.1
        };

        let mut stage = StageLog {
            stage: k,
            cumulative_rate: cum,
            incremental_rate: nominal,
            applied_rate,
            members: Vec::new(),
        };
        let fractions = if applied_rate > 0.0 {
            allocate_fractions(&joint, applied_rate, &cfg.budget).map_err(&wrap)?
        } else {
            joint.layers.iter().map(|l| (l.layer.clone(), 0.0)).collect()
        };
        for (m, (_, profile)) in members.iter_mut().zip(profiles) {
            let local = split_fractions(&fractions, &m.name);
            let (groups, drops) = if applied_rate > 0.0 {
                resolve_drops(&m.graph, &local, &cfg.budget).map_err(&wrap)?
            } else {
                (Vec::new(), BTreeMap::new())
            };
            let plan = PruningPlan {
                global_rate: applied_rate,
                p_max: cfg.budget.p_max,
                weighting: cfg.budget.weighting,
                layer_rates: local
                    .iter()
                    .map(|(layer, rate)| LayerBudget {
                        layer: layer.clone(),
                        rate: *rate,
                        params: profile.layer(layer).map(|l| l.params).unwrap_or(0),
                    })
                    .collect(),
                groups,
                drops,
            };
            let params_before = m.graph.param_count();
            let error_before = m.evaluator.evaluate(&m.graph).map_err(&wrap)?;
            let pruned = if plan.drops.is_empty() {
                m.graph.clone()
            } else {
                apply_plan(&m.graph, &plan).map_err(&wrap)?
            };
            let (tuned, trace) = finetune(&pruned, &m.task, &cfg.finetune).map_err(&wrap)?;
            let error_after = m.evaluator.evaluate(&tuned).map_err(&wrap)?;
            stage.members.push(StageMemberLog {
                member: m.name.clone(),
                profile,
                plan,
                params_before,
                params_after: tuned.param_count(),
                error_before,
                error_after,
                finetune_trace: trace,
            });
            m.graph = tuned;
        }
        log.stages.push(stage);
        observer(k, members).map_err(&wrap)?;
    }
    Ok(log)
}

/// Single-model pruning per the published pipeline: analyze → allocate →
/// prune → fine-tune per schedule stage.
pub fn spaq_prune(
    graph: &ModelGraph,
    evaluator: &dyn Evaluator,
    task: &SyntheticTask,
    cfg: &PruneConfig,
) -> Result<(ModelGraph, PruneLog)> {
    let mut members = [PruneMember {
        name: graph.name.clone(),
        graph: graph.clone(),
        evaluator,
        task: *task,
    }];
    let log = spaq_prune_set(&mut members, cfg)?;
    let [m] = members;
    Ok((m.graph, log))
}
