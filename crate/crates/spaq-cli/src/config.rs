//! Pipeline configuration: defaults, config-file overlay, flag overlay.
//!
//! Precedence is flags over config file over defaults. The config file is
//! JSON carrying any subset of the [`PipelineConfig`] keys; unknown keys are
//! rejected so typos surface as usage errors.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use spaq_core::finetune::TaskKind;
use spaq_core::pruning::{Weighting, DEFAULT_P_MAX};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReportFormat {
    Text,
    Structured,
}

impl FromStr for ReportFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "text" => Ok(ReportFormat::Text),
            "structured" => Ok(ReportFormat::Structured),
            other => Err(format!(
                "unknown report format `{other}` (expected `text` or `structured`)"
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FinetuneSection {
    pub steps: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibSection {
    pub samples: usize,
    pub seed: u64,
}

/// Fully resolved configuration driving `pipeline` and `prune`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    /// Zoo model name, `trio` for the fnet/cnet/updatenet set, or a model
    /// file path.
    pub model: String,
    pub global_rate: f64,
    /// Cumulative per-stage rates; `None` means two equal intervals.
    pub schedule: Option<Vec<f64>>,
    /// Sensitivity probe rate; `None` means each stage's incremental rate.
    pub probe_rate: Option<f64>,
    pub weighting: Weighting,
    pub p_max: f64,
    pub task: TaskKind,
    pub finetune: FinetuneSection,
    pub calib: CalibSection,
    /// Spatial size (H, W) synthetic task samples and calibration data are
    /// drawn at. Cost accounting always uses each model's native resolution.
    pub input_resolution: (usize, usize),
    pub out_dir: PathBuf,
    pub report_format: ReportFormat,
    /// Base seed for synthetic task data.
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            model: "trio".to_string(),
            global_rate: 0.2,
            schedule: None,
            probe_rate: None,
            weighting: Weighting::Direct,
            p_max: DEFAULT_P_MAX,
            task: TaskKind::BlurFlow,
            finetune: FinetuneSection {
                steps: 200,
                learning_rate: 1e-3,
                seed: 0,
            },
            calib: CalibSection { samples: 4, seed: 1 },
            input_resolution: (16, 16),
            out_dir: PathBuf::from("spaq-out"),
            report_format: ReportFormat::Text,
            seed: 0,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), CliError> {
        let usage = |msg: String| Err(CliError::Usage(msg));
        if !(0.0..1.0).contains(&self.global_rate) {
            return usage(format!(
                "global rate must lie in [0, 1), got {}",
                self.global_rate
            ));
        }
        if let Some(x) = self.probe_rate {
            if !(x > 0.0 && x < 1.0) {
                return usage(format!("probe rate must lie in (0, 1), got {x}"));
            }
        }
        if !(self.p_max > 0.0 && self.p_max <= 1.0) {
            return usage(format!("p_max must lie in (0, 1], got {}", self.p_max));
        }
        if let Some(schedule) = &self.schedule {
            if schedule.is_empty() && self.global_rate > 0.0 {
                return usage("schedule is empty but the global rate is positive".into());
            }
            let mut prev = 0.0;
            for &c in schedule {
                if !(c > 0.0 && c < 1.0) || c <= prev {
                    return usage(format!(
                        "schedule must be strictly increasing within (0, 1), got {schedule:?}"
                    ));
                }
                prev = c;
            }
            if let Some(&last) = schedule.last() {
                if (last - self.global_rate).abs() > 1e-9 {
                    return usage(format!(
                        "schedule must end at the global rate {}, ends at {last}",
                        self.global_rate
                    ));
                }
            }
        }
        if !(self.finetune.learning_rate > 0.0 && self.finetune.learning_rate.is_finite()) {
            return usage(format!(
                "learning rate must be positive and finite, got {}",
                self.finetune.learning_rate
            ));
        }
        if self.calib.samples == 0 {
            return usage("calibration needs at least one sample".into());
        }
        if self.input_resolution.0 == 0 || self.input_resolution.1 == 0 {
            return usage("input resolution must be non-zero".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetunePatch {
    pub steps: Option<usize>,
    pub learning_rate: Option<f64>,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibPatch {
    pub samples: Option<usize>,
    pub seed: Option<u64>,
}

/// A partial configuration: file contents and command-line flags both reduce
/// to this shape before being folded over the defaults.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigPatch {
    pub model: Option<String>,
    pub global_rate: Option<f64>,
    pub schedule: Option<Vec<f64>>,
    pub probe_rate: Option<f64>,
    pub weighting: Option<Weighting>,
    pub p_max: Option<f64>,
    pub task: Option<TaskKind>,
    pub finetune: Option<FinetunePatch>,
    pub calib: Option<CalibPatch>,
    pub input_resolution: Option<(usize, usize)>,
    pub out_dir: Option<PathBuf>,
    pub report_format: Option<ReportFormat>,
    pub seed: Option<u64>,
}

impl ConfigPatch {
    pub fn apply(&self, cfg: &mut PipelineConfig) {
        let patch = self.clone();
        if let Some(v) = patch.model {
            cfg.model = v;
        }
        if let Some(v) = patch.global_rate {
            cfg.global_rate = v;
        }
        if let Some(v) = patch.schedule {
            cfg.schedule = Some(v);
        }
        if let Some(v) = patch.probe_rate {
            cfg.probe_rate = Some(v);
        }
        if let Some(v) = patch.weighting {
            cfg.weighting = v;
        }
        if let Some(v) = patch.p_max {
            cfg.p_max = v;
        }
        if let Some(v) = patch.task {
            cfg.task = v;
        }
        if let Some(f) = patch.finetune {
            if let Some(v) = f.steps {
                cfg.finetune.steps = v;
            }
            if let Some(v) = f.learning_rate {
                cfg.finetune.learning_rate = v;
            }
            if let Some(v) = f.seed {
                cfg.finetune.seed = v;
            }
        }
        if let Some(c) = patch.calib {
            if let Some(v) = c.samples {
                cfg.calib.samples = v;
            }
            if let Some(v) = c.seed {
                cfg.calib.seed = v;
            }
        }
        if let Some(v) = patch.input_resolution {
            cfg.input_resolution = v;
        }
        if let Some(v) = patch.out_dir {
            cfg.out_dir = v;
        }
        if let Some(v) = patch.report_format {
            cfg.report_format = v;
        }
        if let Some(v) = patch.seed {
            cfg.seed = v;
        }
    }
}

pub fn load_patch(path: &Path) -> Result<ConfigPatch, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| CliError::Usage(format!("bad config {}: {e}", path.display())))
}

/// FNV-1a over the resolved config's JSON form; artifacts carry this hash so
/// every file can be traced to the exact configuration that produced it.
/// Presentation keys (output directory, report format) do not affect
/// artifact content and are excluded, so runs into different directories
/// produce identical artifacts with identical hashes.
pub fn config_hash(cfg: &PipelineConfig) -> String {
    let mut content = cfg.clone();
    content.out_dir = PathBuf::new();
    content.report_format = ReportFormat::Text;
    let text = serde_json::to_string(&content).expect("config serializes");
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in text.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    format!("{h:016x}")
}

pub fn parse_resolution(s: &str) -> Result<(usize, usize), String> {
    let (h, w) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected HxW, got `{s}`"))?;
    let parse = |v: &str| {
        v.trim()
            .parse::<usize>()
            .map_err(|_| format!("`{v}` is not a positive integer"))
    };
    Ok((parse(h)?, parse(w)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_file_override_defaults() {
        let mut cfg = PipelineConfig::default();
        let file: ConfigPatch = serde_json::from_str(
            r#"{"global_rate": 0.1, "p_max": 0.5, "finetune": {"steps": 7}}"#,
        )
        .unwrap();
        file.apply(&mut cfg);
        let flags = ConfigPatch {
            p_max: Some(0.6),
            ..ConfigPatch::default()
        };
        flags.apply(&mut cfg);
        assert_eq!(cfg.global_rate, 0.1);
        assert_eq!(cfg.p_max, 0.6);
        assert_eq!(cfg.finetune.steps, 7);
        assert_eq!(cfg.finetune.learning_rate, 1e-3);
        assert_eq!(cfg.model, "trio");
    }

    #[test]
    fn unknown_config_keys_are_rejected() {
        let err = serde_json::from_str::<ConfigPatch>(r#"{"globle_rate": 0.1}"#);
        assert!(err.is_err());
    }

    #[test]
    fn hash_tracks_content_but_not_presentation() {
        let a = PipelineConfig::default();
        let mut b = a.clone();
        assert_eq!(config_hash(&a), config_hash(&b));
        b.out_dir = PathBuf::from("elsewhere");
        b.report_format = ReportFormat::Structured;
        assert_eq!(config_hash(&a), config_hash(&b));
        b.global_rate = 0.1;
        assert_ne!(config_hash(&a), config_hash(&b));
    }

    #[test]
    fn validation_rejects_bad_rates_and_schedules() {
        let mut cfg = PipelineConfig::default();
        cfg.global_rate = 1.0;
        assert!(cfg.validate().is_err());
        cfg.global_rate = 0.2;
        cfg.schedule = Some(vec![0.2, 0.1]);
        assert!(cfg.validate().is_err());
        cfg.schedule = Some(vec![0.1, 0.3]);
        assert!(cfg.validate().is_err());
        cfg.schedule = Some(vec![0.1, 0.2]);
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn resolution_parser_accepts_hxw() {
        assert_eq!(parse_resolution("16x16").unwrap(), (16, 16));
        assert_eq!(parse_resolution("48X64").unwrap(), (48, 64));
        assert!(parse_resolution("16").is_err());
        assert!(parse_resolution("ax16").is_err());
    }
}
