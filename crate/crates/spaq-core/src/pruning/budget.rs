//! Sensitivity-weighted global budget allocation.
//!
//! The pruned-parameter budget B = P_g·Σ params is split across layers in
//! proportion to the normalized product wᵢ = F(Lᵢ)·S(Lᵢ), which reduces to
//! per-layer rates pᵢ = P_g·S(Lᵢ)/Σⱼ F(Lⱼ)S(Lⱼ). Rates are capped at p_max
//! with the excess redistributed proportionally among uncapped layers, and
//! the weighted identity Σ pᵢ·Fᵢ = P_g holds exactly before rounding to
//! whole filters.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::graph::ModelGraph;

use super::provenance::{row_layers, Provenance};
use super::saliency::saliency;
use super::sensitivity::SensitivityProfile;

pub const DEFAULT_P_MAX: f64 = 0.8;

/// How sensitivity steers the budget. `Direct` is the literal product rule
/// (more sensitive → more pruning); `Inverse` uses wᵢ = Fᵢ·(1−Sᵢ) for the
/// opposite reading.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Weighting {
    Direct,
    Inverse,
}

impl std::str::FromStr for Weighting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "direct" => Ok(Weighting::Direct),
            "inverse" => Ok(Weighting::Inverse),
            other => Err(Error::InvalidConfig(format!(
                "unknown weighting `{other}` (expected direct or inverse)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BudgetConfig {
    pub p_max: f64,
    pub weighting: Weighting,
}

impl Default for BudgetConfig {
    fn default() -> Self {
        BudgetConfig {
            p_max: DEFAULT_P_MAX,
            weighting: Weighting::Direct,
        }
    }
}

/// One layer's allocated pruning fraction.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LayerBudget {
    pub layer: String,
    pub rate: f64,
    pub params: usize,
}

/// A coupling group as realized by the plan: producers sharing one channel
/// index space, the number of parallel channels, and how many were dropped
/// at the params-weighted pooled rate.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct GroupPlan {
    pub layers: Vec<String>,
    pub width: usize,
    pub pooled_rate: f64,
    pub dropped: usize,
}

/// A fully resolved pruning plan.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PruningPlan {
    pub global_rate: f64,
    pub p_max: f64,
    pub weighting: Weighting,
    /// Allocator output: per-layer fractions before rounding to filters.
    pub layer_rates: Vec<LayerBudget>,
    /// Coupled layer sets with their shared drop counts.
    pub groups: Vec<GroupPlan>,
    /// Concrete filter index sets per layer, ascending.
    pub drops: BTreeMap<String, Vec<usize>>,
}

impl PruningPlan {
    /// Params-weighted realized rate Σ pᵢ·Fᵢ of the allocated fractions.
    pub fn weighted_rate(&self) -> f64 {
        let total: usize = self.layer_rates.iter().map(|l| l.params).sum();
        self.layer_rates
            .iter()
            .map(|l| l.rate * l.params as f64 / total as f64)
            .sum()
    }
}

/// Solves the per-layer fractions for one profile. Pure arithmetic:
/// no graph access, no rounding to filters.
pub fn allocate_fractions(
    profile: &SensitivityProfile,
    global_rate: f64,
    cfg: &BudgetConfig,
) -> Result<Vec<(String, f64)>> {
    if !(global_rate > 0.0 && global_rate < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "global pruning rate must lie in (0, 1), got {global_rate}"
        )));
    }
    if !(cfg.p_max > 0.0 && cfg.p_max < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "p_max must lie in (0, 1), got {}",
            cfg.p_max
        )));
    }
    let n = profile.layers.len();
    if n == 0 {
        return Err(Error::InvalidConfig("profile covers no prunable layers".into()));
    }
    let f: Vec<f64> = profile.layers.iter().map(|l| l.param_fraction).collect();
    let capacity: f64 = f.iter().map(|fi| cfg.p_max * fi).sum();
    if global_rate > capacity + 1e-12 {
        return Err(Error::InfeasibleBudget(format!(
            "requested rate {global_rate:.4} exceeds the p_max-capped capacity {capacity:.4}"
        )));
    }

    let uniform = |why: &str| {
        log::warn!("budget allocation falling back to uniform rates: {why}");
        profile
            .layers
            .iter()
            .map(|l| (l.layer.clone(), global_rate))
            .collect::<Vec<_>>()
    };
    if profile.degenerate {
        return Ok(uniform("degenerate sensitivity (all probe errors zero)"));
    }
    let w: Vec<f64> = profile
        .layers
        .iter()
        .map(|l| match cfg.weighting {
            Weighting::Direct => l.param_fraction * l.relative,
            Weighting::Inverse => l.param_fraction * (1.0 - l.relative),
        })
        .collect();
    if w.iter().sum::<f64>() <= 0.0 {
        return Ok(uniform("all allocation weights are zero"));
    }

    // Cap-and-redistribute to a fixed point: capped layers sit at p_max,
    // the remaining budget is shared by weight among the rest.
    let mut capped = vec![false; n];
    let mut rates = vec![0.0f64; n];
    loop {
        let reserve: f64 = (0..n).filter(|&i| capped[i]).map(|i| cfg.p_max * f[i]).sum();
        let remaining = global_rate - reserve;
        let active_w: f64 = (0..n).filter(|&i| !capped[i]).map(|i| w[i]).sum();
        if active_w <= 0.0 {
            // Nothing left to absorb the budget; feasibility was checked, so
            // everything is capped and the reserve covers the rate.
            break;
        }
        let mut overflow = false;
        for i in 0..n {
            if capped[i] {
                rates[i] = cfg.p_max;
            } else {
                // pᵢ = remaining·ŵᵢ/Fᵢ, with ŵ normalized over active layers.
                rates[i] = remaining * (w[i] / active_w) / f[i];
                if rates[i] > cfg.p_max + 1e-12 {
                    capped[i] = true;
                    overflow = true;
                }
            }
        }
        if !overflow {
            break;
        }
    }
    Ok(profile
        .layers
        .iter()
        .zip(&rates)
        .map(|(l, &r)| (l.layer.clone(), r.min(cfg.p_max)))
        .collect())
}

/// Rounds allocated per-layer fractions into concrete drop sets, honoring
/// coupling groups: every group prunes a shared index set, sized by the
/// params-weighted pooled rate of its members and chosen by summed saliency.
pub fn resolve_drops(
    graph: &ModelGraph,
    fractions: &[(String, f64)],
    _cfg: &BudgetConfig,
) -> Result<(Vec<GroupPlan>, BTreeMap<String, Vec<usize>>)> {
    let rate_of: BTreeMap<&str, f64> = fractions.iter().map(|(l, r)| (l.as_str(), *r)).collect();
    let layers = row_layers(graph);
    let params_of: BTreeMap<&str, usize> = layers.iter().map(|l| (l.key.as_str(), l.params)).collect();
    let prov = Provenance::build(graph)?;

    let mut tables: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for (layer, _) in fractions {
        tables.insert(layer.clone(), saliency(graph, layer)?.values);
    }

    let mut groups = Vec::new();
    let mut drops: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (sig, classes) in prov.coupling_groups() {
        // Members without a profile entry (not prunable in this pass)
        // contribute rate 0, which keeps their coupled partners honest.
        let mut weight_sum = 0.0f64;
        let mut rate_sum = 0.0f64;
        for layer in &sig {
            let params = *params_of.get(layer.as_str()).unwrap_or(&0) as f64;
            let rate = *rate_of.get(layer.as_str()).unwrap_or(&0.0);
            weight_sum += params;
            rate_sum += rate * params;
        }
        if weight_sum <= 0.0 {
            continue;
        }
        let pooled = rate_sum / weight_sum;
        let width = classes.len();
        let dropped = ((pooled * width as f64).round() as usize).min(width.saturating_sub(1));
        if dropped > 0 {
            // Score each parallel class by the summed saliency of its rows.
            let mut scored: Vec<(f64, usize)> = classes
                .iter()
                .map(|&idx| {
                    let score: f64 = prov.classes()[idx]
                        .rows
                        .iter()
                        .map(|(layer, row)| {
                            tables
                                .get(layer)
                                .map(|t| t[*row])
                                .unwrap_or_else(|| saliency(graph, layer).map(|t| t.values[*row]).unwrap_or(0.0))
                        })
                        .sum();
                    (score, idx)
                })
                .collect();
            scored.sort_by(|a, b| {
                a.0.partial_cmp(&b.0)
                    .unwrap_or(std::cmp::Ordering::Equal)
                    .then_with(|| prov.classes()[a.1].rows.cmp(&prov.classes()[b.1].rows))
            });
            for &(_, idx) in scored.iter().take(dropped) {
                for (layer, row) in &prov.classes()[idx].rows {
                    drops.entry(layer.clone()).or_default().push(*row);
                }
            }
        }
        groups.push(GroupPlan {
            layers: sig,
            width,
            pooled_rate: pooled,
            dropped,
        });
    }
    for rows in drops.values_mut() {
        rows.sort_unstable();
    }
    // Guard against a layer being emptied through overlapping groups.
    for (layer, rows) in &drops {
        let full = layers
            .iter()
            .find(|l| &l.key == layer)
            .map(|l| l.rows)
            .unwrap_or(0);
        if rows.len() >= full {
            return Err(Error::InvalidPlan(format!(
                "allocation would empty layer `{layer}`"
            )));
        }
    }
    Ok((groups, drops))
}

/// Allocates the budget and resolves it into a full plan.
pub fn allocate_budget(
    graph: &ModelGraph,
    profile: &SensitivityProfile,
    global_rate: f64,
    cfg: &BudgetConfig,
) -> Result<PruningPlan> {
    let fractions = allocate_fractions(profile, global_rate, cfg)?;
    let (groups, drops) = resolve_drops(graph, &fractions, cfg)?;
    let layers = row_layers(graph);
    let params_of: BTreeMap<&str, usize> = layers.iter().map(|l| (l.key.as_str(), l.params)).collect();
    let layer_rates = fractions
        .into_iter()
        .map(|(layer, rate)| {
            let params = *params_of.get(layer.as_str()).unwrap_or(&0);
            LayerBudget { layer, rate, params }
        })
        .collect();
    Ok(PruningPlan {
        global_rate,
        p_max: cfg.p_max,
        weighting: cfg.weighting,
        layer_rates,
        groups,
        drops,
    })
}
