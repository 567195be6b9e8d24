//! A desk-scale diffusion transformer.
//!
//! Each block runs spatial self-attention, cross-attention against a text
//! stand-in, temporal attention across frames and an FFN. Inputs to the
//! self-attention, temporal-attention and FFN branches pass through
//! adaLN-style feature modulation `x·(1 + scale(t)) + shift(t)`, where
//! `(scale, shift)(t)` is a heavy-tailed static table plus a timestep-MLP
//! term. That modulation is what makes activation channel imbalance large
//! and time-varying.
//!
//! Only the eight linear layers per block are quantizable; attention
//! itself, normalization and the input/output maps stay in floating point.

mod ablation;
mod calib;
mod model;
mod run;
mod variation;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, Normal, StandardNormal, StudentT};
use serde::{Deserialize, Serialize};

use crate::error::{DtqError, Result};
use crate::matrix::Matrix;

pub use ablation::{calibrated_config, run_ablation, AblationReport, AblationRow, AblationStep, CalibrationData};
pub use calib::{calibrate_layers, capture_static_base, CalibrationSpec};
pub use model::{layer_norm, modulate, ModSlot};
pub use run::{
    run_denoise, ActivationTrace, Condition, DenoiseRun, LayerQuantState, PrecisionMap, QuantConfig,
    RunOptions,
};
pub use variation::{channel_absmax_timestep_cv, coefficient_of_variation, variation_stats, VariationReport};

/// Quantizable linear layers inside one block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    SelfAttnQkv,
    SelfAttnProj,
    CrossAttnQkv,
    CrossAttnProj,
    TemporalAttnQkv,
    TemporalAttnProj,
    Ffn1,
    Ffn2,
}

impl LayerKind {
    pub const ALL: [LayerKind; 8] = [
        LayerKind::SelfAttnQkv,
        LayerKind::SelfAttnProj,
        LayerKind::CrossAttnQkv,
        LayerKind::CrossAttnProj,
        LayerKind::TemporalAttnQkv,
        LayerKind::TemporalAttnProj,
        LayerKind::Ffn1,
        LayerKind::Ffn2,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            LayerKind::SelfAttnQkv => "self_attn.qkv",
            LayerKind::SelfAttnProj => "self_attn.proj",
            LayerKind::CrossAttnQkv => "cross_attn.qkv",
            LayerKind::CrossAttnProj => "cross_attn.proj",
            LayerKind::TemporalAttnQkv => "temporal_attn.qkv",
            LayerKind::TemporalAttnProj => "temporal_attn.proj",
            LayerKind::Ffn1 => "ffn.fc1",
            LayerKind::Ffn2 => "ffn.fc2",
        }
    }

    /// `(C_out, C_in)` for a block of the given width.
    /// The modulated branch feeding this layer, if any.
    pub fn mod_slot(self) -> Option<ModSlot> {
        match self {
            LayerKind::SelfAttnQkv => Some(ModSlot::SelfAttn),
            LayerKind::TemporalAttnQkv => Some(ModSlot::Temporal),
            LayerKind::Ffn1 => Some(ModSlot::Ffn),
            _ => None,
        }
    }

    pub fn shape(self, width: usize, ffn_mult: usize) -> (usize, usize) {
        match self {
            LayerKind::SelfAttnQkv | LayerKind::CrossAttnQkv | LayerKind::TemporalAttnQkv => (3 * width, width),
            LayerKind::SelfAttnProj | LayerKind::CrossAttnProj | LayerKind::TemporalAttnProj => (width, width),
            LayerKind::Ffn1 => (ffn_mult * width, width),
            LayerKind::Ffn2 => (width, ffn_mult * width),
        }
    }
}

impl fmt::Display for LayerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Fully qualified layer identity, rendered as `blocks.<i>.<kind>`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct LayerId {
    pub block: usize,
    pub kind: LayerKind,
}

impl LayerId {
    pub fn new(block: usize, kind: LayerKind) -> Self {
        Self { block, kind }
    }

    pub fn name(&self) -> String {
        self.to_string()
    }
}

impl fmt::Display for LayerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "blocks.{}.{}", self.block, self.kind)
    }
}

impl FromStr for LayerId {
    type Err = DtqError;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || DtqError::invalid(format!("unknown layer name {s:?}"));
        let rest = s.strip_prefix("blocks.").ok_or_else(bad)?;
        let (idx, kind) = rest.split_once('.').ok_or_else(bad)?;
        let block = idx.parse().map_err(|_| bad())?;
        let kind = LayerKind::ALL
            .into_iter()
            .find(|k| k.as_str() == kind)
            .ok_or_else(bad)?;
        Ok(LayerId { block, kind })
    }
}

impl Serialize for LayerId {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for LayerId {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyConfig {
    pub width: usize,
    /// Tokens per frame; must be a perfect square (tokens form a grid).
    pub tokens: usize,
    pub frames: usize,
    pub depth: usize,
    pub context_tokens: usize,
    pub ffn_mult: usize,
    pub seed: u64,
    /// Log-normal σ of the static modulation-scale magnitudes.
    pub table_sigma: f64,
    /// Gain of the timestep-dependent modulation term.
    pub time_gain: f64,
    pub guidance: f64,
    /// Exponent with which modulated-branch weights damp the channels the
    /// static table amplifies.
    pub weight_compensation: f64,
    /// Scale applied to the network output before the sampler update.
    pub output_gain: f64,
    /// Fraction of channels carrying transient timestep-driven outliers.
    pub dynamic_fraction: f64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            width: 64,
            tokens: 16,
            frames: 4,
            depth: 2,
            context_tokens: 8,
            ffn_mult: 4,
            seed: 0,
            table_sigma: 1.2,
            time_gain: 2.0,
            guidance: 3.0,
            weight_compensation: 0.8,
            output_gain: 0.3,
            dynamic_fraction: 0.1,
        }
    }
}

impl ToyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width < 16 || !self.width.is_power_of_two() {
            return Err(DtqError::invalid(format!(
                "width must be a power of two ≥ 16, got {}",
                self.width
            )));
        }
        if self.tokens < 4 {
            return Err(DtqError::invalid(format!("need at least 4 tokens, got {}", self.tokens)));
        }
        let side = self.grid_side();
        if side * side != self.tokens {
            return Err(DtqError::invalid(format!(
                "tokens per frame must be a perfect square, got {}",
                self.tokens
            )));
        }
        if self.frames < 2 {
            return Err(DtqError::invalid(format!("need at least 2 frames, got {}", self.frames)));
        }
        if self.depth == 0 || self.context_tokens == 0 {
            return Err(DtqError::invalid("depth and context_tokens must be positive"));
        }
        if self.ffn_mult == 0 || !(self.ffn_mult * self.width).is_power_of_two() {
            return Err(DtqError::invalid("ffn width must be a power of two"));
        }
        if !(self.table_sigma >= 0.0 && self.time_gain >= 0.0 && self.guidance.is_finite()) {
            return Err(DtqError::invalid("modulation gains must be non-negative"));
        }
        if !(0.0..=1.0).contains(&self.dynamic_fraction) {
            return Err(DtqError::invalid("dynamic_fraction must lie in [0, 1]"));
        }
        if !(self.weight_compensation >= 0.0 && self.output_gain > 0.0 && self.output_gain.is_finite()) {
            return Err(DtqError::invalid("weight_compensation must be ≥ 0 and output_gain positive"));
        }
        Ok(())
    }

    pub fn grid_side(&self) -> usize {
        (self.tokens as f64).sqrt().round() as usize
    }

    /// Rows of a latent: frames × tokens, frame-major.
    pub fn rows(&self) -> usize {
        self.frames * self.tokens
    }

    pub fn layer_ids(&self) -> Vec<LayerId> {
        (0..self.depth)
            .flat_map(|b| LayerKind::ALL.into_iter().map(move |k| LayerId::new(b, k)))
            .collect()
    }

    pub fn layer_shape(&self, kind: LayerKind) -> (usize, usize) {
        kind.shape(self.width, self.ffn_mult)
    }
}

/// Timestep MLP: sinusoidal embedding → SiLU hidden → per-slot `(shift, scale)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeMlp {
    pub w1: Matrix,
    pub b1: Vec<f64>,
    pub w2: Matrix,
}

pub const TIME_EMBED_DIM: usize = 32;
const TIME_HIDDEN: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyBlock {
    pub layers: BTreeMap<LayerKind, Matrix>,
    /// Rows `[shift, scale]` for each [`ModSlot`], i.e. `2 · 3` rows of width `D`.
    pub scale_shift_table: Matrix,
    pub t_embed_mlp: TimeMlp,
}

impl ToyBlock {
    pub fn weight(&self, kind: LayerKind) -> &Matrix {
        &self.layers[&kind]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyModel {
    pub config: ToyConfig,
    pub blocks: Vec<ToyBlock>,
    pub pos_embed: Matrix,
    pub context_cond: Matrix,
    pub context_uncond: Matrix,
    pub out_proj: Matrix,
}

impl ToyModel {
    pub fn weight(&self, id: LayerId) -> &Matrix {
        self.blocks[id.block].weight(id.kind)
    }

    /// Stable 64-bit fingerprint of every parameter, for golden checks.
    pub fn fingerprint(&self) -> u64 {
        let mut h = crate::hash::Fnv64::new();
        let feed = |h: &mut crate::hash::Fnv64, m: &Matrix| {
            h.write_u64(m.rows() as u64);
            h.write_u64(m.cols() as u64);
            for v in m.data() {
                h.write_u64(v.to_bits());
            }
        };
        for b in &self.blocks {
            for w in b.layers.values() {
                feed(&mut h, w);
            }
            feed(&mut h, &b.scale_shift_table);
            feed(&mut h, &b.t_embed_mlp.w1);
            for v in &b.t_embed_mlp.b1 {
                h.write_u64(v.to_bits());
            }
            feed(&mut h, &b.t_embed_mlp.w2);
        }
        feed(&mut h, &self.pos_embed);
        feed(&mut h, &self.context_cond);
        feed(&mut h, &self.context_uncond);
        feed(&mut h, &self.out_proj);
        h.finish()
    }

    /// Zeroes the static table and the timestep MLP so modulation is the identity.
    pub fn without_modulation(&self) -> ToyModel {
        let mut m = self.clone();
        for b in &mut m.blocks {
            b.scale_shift_table = b.scale_shift_table.scale(0.0);
            b.t_embed_mlp.w2 = b.t_embed_mlp.w2.scale(0.0);
        }
        m
    }
}

fn gaussian(rows: usize, cols: usize, std: f64, rng: &mut ChaCha8Rng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| std * { let z: f64 = StandardNormal.sample(rng); z })
}

/// Builds a seeded toy model with the classic `(width, tokens, frames)`
/// knobs and defaults for everything else.
pub fn build_toy_model(width: usize, tokens: usize, frames: usize, seed: u64) -> Result<ToyModel> {
    build_from_config(&ToyConfig {
        width,
        tokens,
        frames,
        seed,
        ..ToyConfig::default()
    })
}

pub fn build_from_config(cfg: &ToyConfig) -> Result<ToyModel> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let d = cfg.width;
    let table_dist = LogNormal::new(0.0, cfg.table_sigma).map_err(|e| DtqError::invalid(e.to_string()))?;
    let weight_gain = LogNormal::new(0.0, 0.2).expect("valid");

    let spike_gain = LogNormal::new(2.0, 0.5).expect("valid");
    let time_gain_dist = LogNormal::new(-1.0, 1.0).expect("valid");
    // Heavy-tailed entries (unit variance), as in trained weights.
    let entry = StudentT::new(4.0).expect("valid");
    let entry_norm = 0.5f64.sqrt();
    let mut blocks = Vec::with_capacity(cfg.depth);
    for _ in 0..cfg.depth {
        // Rows: [shift, scale] per slot. `1 + scale` is log-normal, so a few
        // channels are amplified by an order of magnitude.
        let mut table = Matrix::zeros(2 * ModSlot::ALL.len(), d);
        for slot in 0..ModSlot::ALL.len() {
            for c in 0..d {
                let shift: f64 = Normal::new(0.0, 0.3).expect("valid").sample(&mut rng);
                let scale = table_dist.sample(&mut rng) - 1.0;
                table.set(2 * slot, c, shift);
                table.set(2 * slot + 1, c, scale);
            }
        }

        let mut layers = BTreeMap::new();
        for kind in LayerKind::ALL {
            let (c_out, c_in) = cfg.layer_shape(kind);
            let gain = match kind {
                LayerKind::SelfAttnProj | LayerKind::CrossAttnProj | LayerKind::TemporalAttnProj | LayerKind::Ffn2 => 0.6,
                _ => 1.0,
            };
            // Layers fed by a modulated branch learn to damp the channels the
            // static table amplifies, as trained weights do; the time-varying
            // part of the modulation stays uncompensated.
            let slot = kind.mod_slot();
            let col_gain: Vec<f64> = (0..c_in)
                .map(|c| {
                    let g = weight_gain.sample(&mut rng);
                    match slot {
                        Some(s) => {
                            let amp = (1.0 + table.get(2 * s.index() + 1, c)).abs().max(1e-3);
                            g * amp.powf(-cfg.weight_compensation)
                        }
                        None => g,
                    }
                })
                .collect();
            let std = gain / (c_in as f64).sqrt();
            let w = Matrix::from_fn(c_out, c_in, |_, c| std * col_gain[c] * entry_norm * entry.sample(&mut rng));
            layers.insert(kind, w);
        }

        // Hidden units fire only on a small fraction of timesteps (large
        // input gain, negative bias).
        let w1 = gaussian(TIME_HIDDEN, TIME_EMBED_DIM, 3.0 / (TIME_EMBED_DIM as f64).sqrt(), &mut rng);
        let b1 = vec![-3.0; TIME_HIDDEN];
        let mut w2 = gaussian(2 * ModSlot::ALL.len() * d, TIME_HIDDEN, 1.0 / (TIME_HIDDEN as f64).sqrt(), &mut rng);
        for r in 0..w2.rows() {
            let is_scale = (r / d) % 2 == 1;
            let row = w2.row_mut(r);
            if !is_scale {
                let g = 0.3 * cfg.time_gain * rng.random::<f64>();
                row.iter_mut().for_each(|v| *v *= g);
            } else if rng.random::<f64>() < cfg.dynamic_fraction {
                // A few channels are wired to a single hidden unit with a
                // large gain: transient outliers unrelated to the static ones.
                let g = cfg.time_gain * spike_gain.sample(&mut rng);
                row.iter_mut().for_each(|v| *v = 0.0);
                let j = rng.random_range(0..TIME_HIDDEN);
                row[j] = if rng.random::<bool>() { g } else { -g };
            } else {
                let g = 0.1 * cfg.time_gain * time_gain_dist.sample(&mut rng);
                row.iter_mut().for_each(|v| *v *= g);
            }
        }
        blocks.push(ToyBlock {
            layers,
            scale_shift_table: table,
            t_embed_mlp: TimeMlp { w1, b1, w2 },
        });
    }

    let pos_embed = gaussian(cfg.tokens, d, 0.5, &mut rng);
    let context_cond = gaussian(cfg.context_tokens, d, 1.0, &mut rng);
    let context_uncond = gaussian(cfg.context_tokens, d, 0.1, &mut rng);
    let out_proj = gaussian(d, d, 1.0 / (d as f64).sqrt(), &mut rng);
    Ok(ToyModel {
        config: cfg.clone(),
        blocks,
        pos_embed,
        context_cond,
        context_uncond,
        out_proj,
    })
}
