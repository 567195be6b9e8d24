//! Calibrated quantization configs and the quantization ablation ladder.

use serde::{Deserialize, Serialize};

use super::calib::{calibrate_layers, capture_static_base, CalibrationSpec};
use super::run::{run_denoise, ActivationTrace, QuantConfig, RunOptions};
use super::ToyModel;
use crate::balance::BalanceKind;
use crate::error::{DtqError, Result};
use crate::matrix::mse;
use crate::quant::{Bits, GroupingScheme, QuantMode};

/// FP traces and static-base traces of one calibration run.
#[derive(Debug, Clone)]
pub struct CalibrationData {
    pub traces: Vec<ActivationTrace>,
    pub static_base: Vec<ActivationTrace>,
}

impl CalibrationData {
    pub fn capture(model: &ToyModel, opts: &RunOptions) -> Result<Self> {
        let traced = RunOptions {
            record_traces: true,
            ..opts.clone()
        };
        Ok(Self {
            traces: run_denoise(model, &traced, None)?.traces,
            static_base: capture_static_base(model, opts)?,
        })
    }
}

/// Uniform-precision config with every layer calibrated per `spec`.
pub fn calibrated_config(model: &ToyModel, data: &CalibrationData, spec: &CalibrationSpec) -> Result<QuantConfig> {
    let mut q = QuantConfig::uniform(spec.weight_bits, spec.act_bits);
    q.act_scheme = spec.act_scheme;
    q.act_mode = spec.act_mode;
    q.layers = calibrate_layers(model, &data.traces, &data.static_base, spec)?;
    Ok(q)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationStep {
    StaticPerTensor,
    DynamicPerToken,
    Scaling,
    StaticDynamic,
}

impl AblationStep {
    pub const ALL: [AblationStep; 4] = [
        AblationStep::StaticPerTensor,
        AblationStep::DynamicPerToken,
        AblationStep::Scaling,
        AblationStep::StaticDynamic,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AblationStep::StaticPerTensor => "static per-tensor",
            AblationStep::DynamicPerToken => "dynamic per-token",
            AblationStep::Scaling => "+ channel scaling",
            AblationStep::StaticDynamic => "+ static-dynamic balance",
        }
    }

    pub fn spec(self, weight_bits: Bits, act_bits: Bits) -> CalibrationSpec {
        let (act_scheme, act_mode, balance) = match self {
            AblationStep::StaticPerTensor => (GroupingScheme::PerTensor, QuantMode::Static, BalanceKind::None),
            AblationStep::DynamicPerToken => (GroupingScheme::PerToken, QuantMode::Dynamic, BalanceKind::None),
            AblationStep::Scaling => (GroupingScheme::PerToken, QuantMode::Dynamic, BalanceKind::Scaling),
            AblationStep::StaticDynamic => (GroupingScheme::PerToken, QuantMode::Dynamic, BalanceKind::StaticDynamic),
        };
        CalibrationSpec {
            weight_bits,
            act_bits,
            act_scheme,
            act_mode,
            balance,
            ..CalibrationSpec::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub step: AblationStep,
    pub label: String,
    /// Final-output MSE averaged over the evaluation clips.
    pub mse: f64,
    pub per_clip: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub weight_bits: Bits,
    pub act_bits: Bits,
    pub clips: Vec<u64>,
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn strictly_decreasing(&self) -> bool {
        self.rows.windows(2).all(|w| w[1].mse < w[0].mse)
    }
}

/// Calibrates each ablation step on clip `opts.seed` and scores it by
/// final-output MSE against FP, averaged over `clips`.
pub fn run_ablation(
    model: &ToyModel,
    opts: &RunOptions,
    weight_bits: Bits,
    act_bits: Bits,
    clips: &[u64],
) -> Result<AblationReport> {
    if clips.is_empty() {
        return Err(DtqError::Empty("evaluation clips"));
    }
    let data = CalibrationData::capture(model, opts)?;
    let plain = |seed| RunOptions {
        seed,
        record_traces: false,
        ..opts.clone()
    };
    let references = clips
        .iter()
        .map(|&s| run_denoise(model, &plain(s), None))
        .collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::new();
    for step in AblationStep::ALL {
        let q = calibrated_config(model, &data, &step.spec(weight_bits, act_bits))?;
        let per_clip = clips
            .iter()
            .zip(&references)
            .map(|(&s, fp)| mse(run_denoise(model, &plain(s), Some(&q))?.final_output(), fp.final_output()))
            .collect::<Result<Vec<_>>>()?;
        rows.push(AblationRow {
            step,
            label: step.as_str().to_string(),
            mse: per_clip.iter().sum::<f64>() / per_clip.len() as f64,
            per_clip,
        });
    }
    Ok(AblationReport {
        weight_bits,
        act_bits,
        clips: clips.to_vec(),
        rows,
    })
}
