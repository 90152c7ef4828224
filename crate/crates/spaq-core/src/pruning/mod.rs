//! Structured filter pruning: saliency, sensitivity, budgets, surgery, and
//! the iterative prune-and-finetune driver.

pub mod budget;
pub mod driver;
pub mod provenance;
pub mod saliency;
pub mod sensitivity;
pub mod surgery;

pub use budget::{
    allocate_budget, allocate_fractions, BudgetConfig, GroupPlan, LayerBudget, PruningPlan,
    Weighting, DEFAULT_P_MAX,
};
pub use driver::{
    default_schedule, spaq_prune, spaq_prune_set, spaq_prune_set_with, PruneConfig, PruneLog,
    PruneMember, StageLog,
    StageMemberLog,
};
pub use provenance::{row_layers, ClassInfo, Provenance, RowLayer};
pub use saliency::{saliency, SaliencyTable};
pub use sensitivity::{
    analyze_sensitivity, analyze_sensitivity_with, probe_layer, prunable_layers, spearman,
    AnalyzeOptions, LayerSensitivity, SensitivityProfile,
};
pub use surgery::{apply_plan, masked_variant, probe_masked};
