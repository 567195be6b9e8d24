use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::run::{ActivationTrace, Condition};
use super::LayerId;
use crate::error::{DtqError, Result};

/// Coefficients of variation of group absmax along each variation axis,
/// averaged over layers. Axes that need at least two observations are
/// `None` when the trace set cannot supply them.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VariationReport {
    pub token: f64,
    pub timestep: Option<f64>,
    pub condition: Option<f64>,
    pub channel: f64,
}

impl VariationReport {
    pub fn largest_axis(&self) -> &'static str {
        let mut best = ("token", self.token);
        for (name, v) in [
            ("timestep", self.timestep),
            ("condition", self.condition),
            ("channel", Some(self.channel)),
        ] {
            if let Some(v) = v {
                if v > best.1 {
                    best = (name, v);
                }
            }
        }
        best.0
    }
}

/// Population coefficient of variation; 0 for a zero-mean or single sample.
pub fn coefficient_of_variation(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if mean.abs() < f64::MIN_POSITIVE {
        return 0.0;
    }
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    var.sqrt() / mean.abs()
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

pub fn variation_stats(traces: &[ActivationTrace]) -> Result<VariationReport> {
    if traces.is_empty() {
        return Err(DtqError::Empty("trace set"));
    }
    let mut token = Vec::with_capacity(traces.len());
    let mut channel = Vec::with_capacity(traces.len());
    let mut by_layer_cond: BTreeMap<(LayerId, Condition), Vec<(usize, f64)>> = BTreeMap::new();
    let mut by_layer_step: BTreeMap<(LayerId, usize), Vec<f64>> = BTreeMap::new();
    for t in traces {
        token.push(coefficient_of_variation(&t.x.row_absmax()));
        channel.push(coefficient_of_variation(&t.x.col_absmax()));
        let absmax = t.x.max_abs();
        by_layer_cond
            .entry((t.layer, t.condition))
            .or_default()
            .push((t.timestep, absmax));
        by_layer_step.entry((t.layer, t.timestep)).or_default().push(absmax);
    }
    let timestep: Vec<f64> = by_layer_cond
        .values()
        .filter(|v| {
            let first = v[0].0;
            v.iter().any(|&(s, _)| s != first)
        })
        .map(|v| coefficient_of_variation(&v.iter().map(|&(_, a)| a).collect::<Vec<_>>()))
        .collect();
    let condition: Vec<f64> = by_layer_step
        .values()
        .filter(|v| v.len() >= 2)
        .map(|v| coefficient_of_variation(v))
        .collect();
    Ok(VariationReport {
        token: mean(&token).unwrap_or(0.0),
        timestep: mean(&timestep),
        condition: mean(&condition),
        channel: mean(&channel).unwrap_or(0.0),
    })
}

/// Mean over channels of the CV, across traces, of each channel's absmax.
/// Traces must share a shape (typically one layer and condition, many steps).
pub fn channel_absmax_timestep_cv(traces: &[&ActivationTrace]) -> Result<f64> {
    let first = traces.first().ok_or(DtqError::Empty("trace set"))?;
    let cols = first.x.cols();
    let per_trace: Vec<Vec<f64>> = traces
        .iter()
        .map(|t| {
            if t.x.cols() != cols {
                return Err(DtqError::shape(format!(
                    "trace width {} differs from {cols}",
                    t.x.cols()
                )));
            }
            Ok(t.x.col_absmax())
        })
        .collect::<Result<_>>()?;
    let cvs: Vec<f64> = (0..cols)
        .map(|c| coefficient_of_variation(&per_trace.iter().map(|v| v[c]).collect::<Vec<_>>()))
        .collect();
    Ok(mean(&cvs).unwrap_or(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matrix::Matrix;
    use crate::toydit::LayerKind;

    fn trace(step: usize, cond: Condition, x: Matrix) -> ActivationTrace {
        ActivationTrace {
            layer: LayerId::new(0, LayerKind::Ffn1),
            timestep: step,
            condition: cond,
            x,
        }
    }

    #[test]
    fn constant_traces_have_zero_cv() {
        let x = Matrix::from_fn(4, 8, |_, _| 2.5);
        let traces: Vec<_> = (0..3)
            .flat_map(|s| [trace(s, Condition::Cond, x.clone()), trace(s, Condition::Uncond, x.clone())])
            .collect();
        let r = variation_stats(&traces).unwrap();
        assert_eq!(r.token, 0.0);
        assert_eq!(r.channel, 0.0);
        assert_eq!(r.timestep, Some(0.0));
        assert_eq!(r.condition, Some(0.0));
    }

    #[test]
    fn single_trace_has_no_timestep_cv() {
        let x = Matrix::from_fn(4, 8, |r, c| (r * 8 + c) as f64);
        let r = variation_stats(&[trace(0, Condition::Cond, x)]).unwrap();
        assert!(r.timestep.is_none());
        assert!(r.token > 0.0 && r.channel > 0.0);
    }

    #[test]
    fn empty_rejected() {
        assert!(variation_stats(&[]).is_err());
    }

    #[test]
    fn cv_values() {
        assert_eq!(coefficient_of_variation(&[1.0, 3.0]), 0.5);
        assert_eq!(coefficient_of_variation(&[0.0, 0.0]), 0.0);
    }
}
