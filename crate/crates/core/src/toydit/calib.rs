use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::run::{run_denoise, ActivationTrace, LayerQuantState, RunOptions};
use super::{LayerId, ToyModel};
use crate::balance::{hadamard_matrix, search_alpha, BalanceKind, BalanceObjective, BalanceTransform, ALPHA_GRID};
use crate::error::{DtqError, Result};
use crate::hash::fnv1a64;
use crate::matrix::Matrix;
use crate::quant::{calibrate_params, Bits, GroupingScheme, QuantMode};

/// What to calibrate for each linear layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CalibrationSpec {
    pub weight_bits: Bits,
    pub act_bits: Bits,
    pub act_scheme: GroupingScheme,
    pub act_mode: QuantMode,
    pub balance: BalanceKind,
    /// Fixed α; `None` searches the default grid.
    pub alpha: Option<f64>,
    pub rotation_seed: u64,
}

impl Default for CalibrationSpec {
    fn default() -> Self {
        Self {
            weight_bits: Bits::B8,
            act_bits: Bits::B8,
            act_scheme: GroupingScheme::PerToken,
            act_mode: QuantMode::Dynamic,
            balance: BalanceKind::StaticDynamic,
            alpha: None,
            rotation_seed: 0,
        }
    }
}

/// The "static" part of the activation distribution: along the FP
/// trajectory, inputs of modulated layers are recomputed with the
/// timestep-MLP term zeroed. Other layers keep their actual inputs.
pub fn capture_static_base(model: &ToyModel, opts: &RunOptions) -> Result<Vec<ActivationTrace>> {
    let opts = RunOptions {
        record_traces: true,
        record_static_inputs: true,
        ..opts.clone()
    };
    Ok(run_denoise(model, &opts, None)?.traces)
}

fn stack_layer(traces: &[ActivationTrace], id: LayerId) -> Option<Matrix> {
    let parts: Vec<&Matrix> = traces.iter().filter(|t| t.layer == id).map(|t| &t.x).collect();
    if parts.is_empty() {
        None
    } else {
        Matrix::vstack(&parts).ok()
    }
}

fn layer_seed(seed: u64, id: LayerId) -> u64 {
    seed ^ fnv1a64(id.name().as_bytes())
}

/// Fits balance transforms and, in static mode, frozen activation
/// parameters for every layer of `model`. `traces` are FP activations over
/// the whole run; `static_traces` come from [`capture_static_base`].
pub fn calibrate_layers(
    model: &ToyModel,
    traces: &[ActivationTrace],
    static_traces: &[ActivationTrace],
    spec: &CalibrationSpec,
) -> Result<BTreeMap<LayerId, LayerQuantState>> {
    let objective = BalanceObjective {
        weight_bits: spec.weight_bits,
        act_bits: spec.act_bits,
    };
    let fixed;
    let grid: &[f64] = match spec.alpha {
        Some(a) => {
            fixed = [a];
            &fixed
        }
        None => &ALPHA_GRID,
    };
    let mut out = BTreeMap::new();
    for id in model.config.layer_ids() {
        let w = model.weight(id);
        let calib = stack_layer(traces, id)
            .ok_or_else(|| DtqError::invalid(format!("no calibration traces for {id}")))?;
        let balance = match spec.balance {
            BalanceKind::None => BalanceTransform::identity(),
            BalanceKind::Scaling => search_alpha(&calib, &calib, w, None, objective, grid)?.0,
            BalanceKind::Rotation => BalanceTransform {
                mask: None,
                rotation: Some(hadamard_matrix(w.cols(), true, layer_seed(spec.rotation_seed, id))?),
            },
            BalanceKind::StaticDynamic => {
                let base = stack_layer(static_traces, id)
                    .ok_or_else(|| DtqError::invalid(format!("no static-base traces for {id}")))?;
                let rot = hadamard_matrix(w.cols(), true, layer_seed(spec.rotation_seed, id))?;
                search_alpha(&calib, &base, w, Some(&rot), objective, grid)?.0
            }
        };
        let static_params = if spec.act_mode == QuantMode::Static {
            let balanced: Vec<Matrix> = traces
                .iter()
                .filter(|t| t.layer == id)
                .map(|t| balance.apply_activation(&t.x))
                .collect::<Result<_>>()?;
            let refs: Vec<&Matrix> = balanced.iter().collect();
            Some(calibrate_params(&refs, spec.act_scheme, spec.act_bits)?)
        } else {
            None
        };
        out.insert(id, LayerQuantState { balance, static_params });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toydit::build_toy_model;

    #[test]
    fn static_base_covers_run() {
        let m = build_toy_model(16, 4, 2, 3).unwrap();
        let o = RunOptions {
            steps: 4,
            ..RunOptions::default()
        };
        let base = capture_static_base(&m, &o).unwrap();
        assert_eq!(base.len(), 16 * 4 * 2);
        let full = run_denoise(&m, &RunOptions { record_traces: true, ..o }, None).unwrap().traces;
        for (a, b) in base.iter().zip(&full) {
            assert_eq!((a.layer, a.timestep, a.condition), (b.layer, b.timestep, b.condition));
            // Only modulated layers see a different input.
            assert_eq!(a.x == b.x, a.layer.kind.mod_slot().is_none());
        }
    }

    #[test]
    fn calibrates_every_layer() {
        let m = build_toy_model(16, 4, 2, 3).unwrap();
        let o = RunOptions {
            steps: 4,
            record_traces: true,
            ..RunOptions::default()
        };
        let traces = run_denoise(&m, &o, None).unwrap().traces;
        let base = capture_static_base(&m, &o).unwrap();
        let spec = CalibrationSpec {
            act_mode: QuantMode::Static,
            ..CalibrationSpec::default()
        };
        let states = calibrate_layers(&m, &traces, &base, &spec).unwrap();
        assert_eq!(states.len(), 16);
        for s in states.values() {
            assert_eq!(s.balance.kind(), BalanceKind::StaticDynamic);
            assert!(s.static_params.is_some());
        }
    }
}
