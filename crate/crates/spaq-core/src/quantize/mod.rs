//! 8-bit post-training static quantization.
//!
//! Scheme (fixed):
//! - conv weights: symmetric per-output-channel int8 in [-127, 127],
//!   zero_point = 0, scale_c = max|W[c]| / 127;
//! - activations: asymmetric per-tensor uint8 in [0, 255] from min-max
//!   calibration, scale = (max - min) / 255, zero_point = clamp(round(-min /
//!   scale), 0, 255) — stored as u8 values inside i8 tensors' u8 view;
//! - biases: int32 at scale input_scale * weight_scale_c, zero_point 0.
//!
//! Rounding is round-half-away-from-zero everywhere (`f32::round`).
//! Quantized convolutions accumulate in i32 and requantize through a 32-bit
//! fixed-point multiplier; InstanceNorm, activations and the GRU
//! nonlinearities run in dequantized fp32. A crate-internal guard lets tests
//! assert that no float operation executes inside the integer conv path.

mod calibrate;
mod exec;
mod fixed_point;
pub(crate) mod fp_guard;

pub use calibrate::{calibrate, spaq_quantize, quantize_graph, QuantConfig};
pub use exec::quantized_forward;
pub use fixed_point::{requantize_multiplier, FixedPointScale};
pub use fp_guard::take_violations;

use std::collections::BTreeMap;

/// Trailing part of an activation-site name for GRU-internal sites.
pub const SITE_GRU_ZR: &str = "#zr_in";
pub const SITE_GRU_H: &str = "#h_in";

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuantScheme {
    /// Symmetric per-output-channel int8 (weights).
    SymmetricPerChannel,
    /// Asymmetric per-tensor uint8 (activations).
    AsymmetricPerTensor,
}

impl QuantScheme {
    pub fn code(self) -> u8 {
        match self {
            QuantScheme::SymmetricPerChannel => 0,
            QuantScheme::AsymmetricPerTensor => 1,
        }
    }

    pub fn from_code(code: u8) -> crate::error::Result<Self> {
        Ok(match code {
            0 => QuantScheme::SymmetricPerChannel,
            1 => QuantScheme::AsymmetricPerTensor,
            other => {
                return Err(crate::error::Error::Corrupt(format!(
                    "unknown quant scheme code {other}"
                )))
            }
        })
    }
}

/// Per-output-channel scales for one weight tensor (zero points are all 0).
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct WeightQuant {
    pub scales: Vec<f32>,
}

/// Asymmetric uint8 record for one activation site.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ActQuant {
    pub scale: f32,
    pub zero_point: i32,
}

impl ActQuant {
    pub fn quantize(&self, x: f32) -> u8 {
        let q = (x / self.scale).round() + self.zero_point as f32;
        q.clamp(0.0, 255.0) as u8
    }

    pub fn dequantize(&self, q: u8) -> f32 {
        (i32::from(q) - self.zero_point) as f32 * self.scale
    }
}

/// Calibration + quantization state carried by an int8 graph and persisted
/// in the model file's quant table.
#[derive(Debug, Clone, PartialEq, Default, serde::Serialize, serde::Deserialize)]
pub struct QuantState {
    /// Keyed by conv node id, or `"<node>#<gate>"` for GRU gate weights.
    pub weights: BTreeMap<String, WeightQuant>,
    /// Keyed by activation site: graph input names, node ids, and the
    /// GRU-internal `<node>#zr_in` / `<node>#h_in` concat sites.
    pub activations: BTreeMap<String, ActQuant>,
}

/// Min-max ranges observed during calibration, one per activation site.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CalibrationStats {
    pub ranges: BTreeMap<String, (f32, f32)>,
    pub batches: usize,
}
