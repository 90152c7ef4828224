//! Comparison reports: baseline vs optimized cost accounting, rendered as
//! stable text or structured JSON. Bodies carry no timestamps, so reruns
//! with identical configuration produce byte-identical files.

use serde::Serialize;
use spaq_core::accounting::{reduction_report, CostReport};

use crate::config::ReportFormat;
use crate::CliError;

/// Reference reduction rows for the published global rates.
const REFERENCE_ROWS: [(f64, f64, f64); 2] = [(0.10, 9.44, 76.3), (0.20, 18.90, 79.8)];

#[derive(Debug, Clone, Serialize)]
pub struct ComparisonRow {
    pub model: String,
    pub params_baseline: usize,
    pub params_final: usize,
    pub params_reduction_pct: f64,
    pub flops_baseline: u64,
    pub flops_final: u64,
    pub flops_reduction_pct: f64,
    pub size_baseline_bytes: u64,
    pub size_final_bytes: u64,
    pub size_reduction_pct: f64,
}

fn pct(baseline: f64, fin: f64) -> f64 {
    if baseline == 0.0 {
        0.0
    } else {
        100.0 * (1.0 - fin / baseline)
    }
}

pub fn comparison_row(name: &str, baseline: &CostReport, fin: &CostReport) -> ComparisonRow {
    ComparisonRow {
        model: name.to_string(),
        params_baseline: baseline.params_total,
        params_final: fin.params_total,
        params_reduction_pct: pct(baseline.params_total as f64, fin.params_total as f64),
        flops_baseline: baseline.flops_total,
        flops_final: fin.flops_total,
        flops_reduction_pct: pct(baseline.flops_total as f64, fin.flops_total as f64),
        size_baseline_bytes: baseline.file_bytes,
        size_final_bytes: fin.file_bytes,
        size_reduction_pct: pct(baseline.file_bytes as f64, fin.file_bytes as f64),
    }
}

/// Sums per-model rows into one row; reductions recomputed from the totals.
pub fn combined_row(rows: &[ComparisonRow]) -> ComparisonRow {
    let mut sum = ComparisonRow {
        model: "combined".to_string(),
        params_baseline: 0,
        params_final: 0,
        params_reduction_pct: 0.0,
        flops_baseline: 0,
        flops_final: 0,
        flops_reduction_pct: 0.0,
        size_baseline_bytes: 0,
        size_final_bytes: 0,
        size_reduction_pct: 0.0,
    };
    for r in rows {
        sum.params_baseline += r.params_baseline;
        sum.params_final += r.params_final;
        sum.flops_baseline += r.flops_baseline;
        sum.flops_final += r.flops_final;
        sum.size_baseline_bytes += r.size_baseline_bytes;
        sum.size_final_bytes += r.size_final_bytes;
    }
    sum.params_reduction_pct = pct(sum.params_baseline as f64, sum.params_final as f64);
    sum.flops_reduction_pct = pct(sum.flops_baseline as f64, sum.flops_final as f64);
    sum.size_reduction_pct = pct(sum.size_baseline_bytes as f64, sum.size_final_bytes as f64);
    sum
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct ReferenceRow {
    pub global_rate: f64,
    pub flops_reduction_pct: f64,
    pub size_reduction_pct: f64,
}

/// The published reduction row matching this global rate, if any.
pub fn reference_for(global_rate: f64) -> Option<ReferenceRow> {
    REFERENCE_ROWS
        .iter()
        .find(|(rate, _, _)| (rate - global_rate).abs() < 1e-9)
        .map(|&(rate, flops, size)| ReferenceRow {
            global_rate: rate,
            flops_reduction_pct: flops,
            size_reduction_pct: size,
        })
}

#[derive(Debug, Clone, Serialize)]
pub struct PipelineReport {
    pub config_hash: String,
    pub model: String,
    pub global_rate: f64,
    pub rows: Vec<ComparisonRow>,
    pub combined: ComparisonRow,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reference: Option<ReferenceRow>,
}

impl PipelineReport {
    pub fn render(&self, format: ReportFormat) -> Result<String, CliError> {
        match format {
            ReportFormat::Text => Ok(self.render_text()),
            ReportFormat::Structured => {
                let mut body = serde_json::to_string_pretty(self)
                    .map_err(|e| CliError::Stage(format!("report serialization: {e}")))?;
                body.push('\n');
                Ok(body)
            }
        }
    }

    fn render_text(&self) -> String {
        let mut out = String::new();
        out.push_str("SPAQ pipeline report\n");
        out.push_str(&format!("config_hash: {}\n", self.config_hash));
        out.push_str(&format!("model: {}\n", self.model));
        out.push_str(&format!("global_rate: {}\n\n", self.global_rate));
        out.push_str(&format!(
            "{:<12} {:>24} {:>28} {:>24}\n",
            "model", "params", "flops", "file_bytes"
        ));
        for row in self.rows.iter().chain([&self.combined]) {
            out.push_str(&format!(
                "{:<12} {:>12} -> {:<9} {:>14} -> {:<11} {:>10} -> {:<9}\n",
                row.model,
                row.params_baseline,
                row.params_final,
                row.flops_baseline,
                row.flops_final,
                row.size_baseline_bytes,
                row.size_final_bytes,
            ));
        }
        out.push('\n');
        out.push_str(&format!(
            "params_reduction_pct: {:.2}\n",
            self.combined.params_reduction_pct
        ));
        out.push_str(&format!(
            "flops_reduction_pct: {:.2}\n",
            self.combined.flops_reduction_pct
        ));
        out.push_str(&format!(
            "size_reduction_pct: {:.2}\n",
            self.combined.size_reduction_pct
        ));
        if let Some(r) = &self.reference {
            out.push_str(&format!(
                "reference_flops_reduction_pct: {:.2}\n",
                r.flops_reduction_pct
            ));
            out.push_str(&format!(
                "reference_size_reduction_pct: {:.2}\n",
                r.size_reduction_pct
            ));
        }
        out
    }
}

/// `report` subcommand: recount two model files and print the reduction
/// arithmetic.
pub fn cmd_report(
    baseline: &std::path::Path,
    optimized: &std::path::Path,
    format: ReportFormat,
) -> Result<(), CliError> {
    let base_graph = spaq_core::persistence::load(baseline)?;
    let opt_graph = spaq_core::persistence::load(optimized)?;
    let res = (base_graph.inputs[0].height, base_graph.inputs[0].width);
    let base = spaq_core::accounting::cost_report(&base_graph, res)?;
    let opt = spaq_core::accounting::cost_report(&opt_graph, res)?;
    let reduction = reduction_report(&base, &opt)?;
    match format {
        ReportFormat::Text => {
            print!(
                "baseline: {} params, {} flops, {} bytes\n\
                 optimized: {} params, {} flops, {} bytes\n\
                 params_reduction_pct: {:.2}\n\
                 flops_reduction_pct: {:.2}\n\
                 size_reduction_pct: {:.2}\n",
                base.params_total,
                base.flops_total,
                base.file_bytes,
                opt.params_total,
                opt.flops_total,
                opt.file_bytes,
                reduction.params_reduction_pct,
                reduction.flops_reduction_pct,
                reduction.size_reduction_pct,
            );
        }
        ReportFormat::Structured => {
            let body = serde_json::to_string_pretty(&reduction)
                .map_err(|e| CliError::Stage(format!("report serialization: {e}")))?;
            println!("{body}");
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(params: (usize, usize), flops: (u64, u64), size: (u64, u64)) -> ComparisonRow {
        ComparisonRow {
            model: "m".into(),
            params_baseline: params.0,
            params_final: params.1,
            params_reduction_pct: pct(params.0 as f64, params.1 as f64),
            flops_baseline: flops.0,
            flops_final: flops.1,
            flops_reduction_pct: pct(flops.0 as f64, flops.1 as f64),
            size_baseline_bytes: size.0,
            size_final_bytes: size.1,
            size_reduction_pct: pct(size.0 as f64, size.1 as f64),
        }
    }

    #[test]
    fn combined_row_recomputes_from_totals() {
        let rows = [
            row((100, 50), (1000, 900), (400, 100)),
            row((300, 150), (3000, 2700), (1200, 300)),
        ];
        let combined = combined_row(&rows);
        assert_eq!(combined.params_baseline, 400);
        assert!((combined.params_reduction_pct - 50.0).abs() < 1e-12);
        assert!((combined.flops_reduction_pct - 10.0).abs() < 1e-12);
        assert!((combined.size_reduction_pct - 75.0).abs() < 1e-12);
    }

    #[test]
    fn reference_rows_exist_only_for_published_rates() {
        let r = reference_for(0.10).unwrap();
        assert_eq!((r.flops_reduction_pct, r.size_reduction_pct), (9.44, 76.3));
        let r = reference_for(0.20).unwrap();
        assert_eq!((r.flops_reduction_pct, r.size_reduction_pct), (18.90, 79.8));
        assert!(reference_for(0.15).is_none());
        assert!(reference_for(0.0).is_none());
    }

    #[test]
    fn text_rendering_is_stable_and_carries_reference_keys() {
        let rows = vec![row((100, 50), (1000, 900), (400, 100))];
        let combined = combined_row(&rows);
        let report = PipelineReport {
            config_hash: "deadbeefdeadbeef".into(),
            model: "fnet".into(),
            global_rate: 0.2,
            rows,
            combined,
            reference: reference_for(0.2),
        };
        let a = report.render(ReportFormat::Text).unwrap();
        let b = report.render(ReportFormat::Text).unwrap();
        assert_eq!(a, b);
        assert!(a.contains("flops_reduction_pct: 10.00"));
        assert!(a.contains("reference_flops_reduction_pct: 18.90"));
        assert!(a.contains("reference_size_reduction_pct: 79.80"));
        let json = report.render(ReportFormat::Structured).unwrap();
        assert!(json.contains("\"size_reduction_pct\": 75.0"));
    }
}
