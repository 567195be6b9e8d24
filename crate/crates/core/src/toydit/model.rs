use serde::{Deserialize, Serialize};

use super::{LayerId, LayerKind, ToyBlock, ToyModel, TIME_EMBED_DIM};
use crate::error::{DtqError, Result};
use crate::matrix::{dot, Matrix};

/// Which modulated branch a `(shift, scale)` pair feeds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModSlot {
    SelfAttn,
    Temporal,
    Ffn,
}

impl ModSlot {
    pub const ALL: [ModSlot; 3] = [ModSlot::SelfAttn, ModSlot::Temporal, ModSlot::Ffn];

    pub(crate) fn index(self) -> usize {
        match self {
            ModSlot::SelfAttn => 0,
            ModSlot::Temporal => 1,
            ModSlot::Ffn => 2,
        }
    }
}

pub(crate) fn time_embedding(t: f64) -> Vec<f64> {
    let half = TIME_EMBED_DIM / 2;
    let mut e = vec![0.0; TIME_EMBED_DIM];
    for i in 0..half {
        let freq = (-(10_000f64).ln() * i as f64 / half as f64).exp();
        e[i] = (t * freq).cos();
        e[half + i] = (t * freq).sin();
    }
    e
}

fn silu(v: f64) -> f64 {
    v / (1.0 + (-v).exp())
}

fn gelu(v: f64) -> f64 {
    0.5 * v * (1.0 + (0.797_884_560_802_865_4 * (v + 0.044_715 * v * v * v)).tanh())
}

/// Per-channel `(shift, scale)` for `slot` at diffusion time `t`. With
/// `include_time = false` only the static table contributes.
pub(crate) fn modulation(block: &ToyBlock, t: f64, slot: ModSlot, include_time: bool) -> (Vec<f64>, Vec<f64>) {
    let d = block.scale_shift_table.cols();
    let s = slot.index();
    let mut shift = block.scale_shift_table.row(2 * s).to_vec();
    let mut scale = block.scale_shift_table.row(2 * s + 1).to_vec();
    if include_time {
        let emb = time_embedding(t);
        let mlp = &block.t_embed_mlp;
        let hidden: Vec<f64> = (0..mlp.w1.rows()).map(|r| silu(dot(mlp.w1.row(r), &emb) + mlp.b1[r])).collect();
        for c in 0..d {
            shift[c] += dot(mlp.w2.row(2 * s * d + c), &hidden);
            scale[c] += dot(mlp.w2.row((2 * s + 1) * d + c), &hidden);
        }
    }
    (shift, scale)
}

fn apply_modulation(x: &Matrix, shift: &[f64], scale: &[f64]) -> Matrix {
    Matrix::from_fn(x.rows(), x.cols(), |r, c| x.get(r, c) * (1.0 + scale[c]) + shift[c])
}

/// `x·(1 + scale(t)) + shift(t)` per channel for the given branch, where
/// `(scale, shift)(t)` is the static table plus the timestep-MLP output.
pub fn modulate(x: &Matrix, block: &ToyBlock, t: f64, slot: ModSlot) -> Result<Matrix> {
    if x.cols() != block.scale_shift_table.cols() {
        return Err(DtqError::shape(format!(
            "modulating {} channels with a table of width {}",
            x.cols(),
            block.scale_shift_table.cols()
        )));
    }
    let (shift, scale) = modulation(block, t, slot, true);
    Ok(apply_modulation(x, &shift, &scale))
}

/// Row-wise layer norm without affine parameters.
pub fn layer_norm(x: &Matrix) -> Matrix {
    let mut out = x.clone();
    let n = x.cols() as f64;
    for r in 0..x.rows() {
        let row = out.row_mut(r);
        let mean = row.iter().sum::<f64>() / n;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let inv = 1.0 / (var + 1e-6).sqrt();
        for v in row.iter_mut() {
            *v = (*v - mean) * inv;
        }
    }
    out
}

fn rms_normalized(x: &[f64]) -> Vec<f64> {
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let inv = 1.0 / (ms + 1e-6).sqrt();
    x.iter().map(|v| v * inv).collect()
}

/// Single-head softmax attention over row sets, with queries and keys
/// RMS-normalized first so logits stay within ±√d.
fn attend(q: &[&[f64]], k: &[&[f64]], v: &[&[f64]]) -> Vec<Vec<f64>> {
    let d = q.first().map_or(1, |r| r.len());
    let inv = 1.0 / (d as f64).sqrt();
    let k: Vec<Vec<f64>> = k.iter().map(|r| rms_normalized(r)).collect();
    q.iter()
        .map(|qi| {
            let qi = rms_normalized(qi);
            let logits: Vec<f64> = k.iter().map(|kj| dot(&qi, kj) * inv).collect();
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let w: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
            let z: f64 = w.iter().sum();
            let mut out = vec![0.0; v[0].len()];
            for (wj, vj) in w.iter().zip(v) {
                for (o, x) in out.iter_mut().zip(vj.iter()) {
                    *o += wj / z * x;
                }
            }
            out
        })
        .collect()
}

/// Callbacks the forward pass routes every linear layer through.
pub(crate) trait ForwardHook {
    /// Computes `x·Wᵀ` for layer `id`, possibly quantized.
    fn linear(&mut self, id: LayerId, x: &Matrix, w: &Matrix) -> Result<Matrix>;
    /// Receives the cross-attention branch output of `block`.
    fn cross_output(&mut self, _block: usize, _out: &Matrix) {}
    /// Whether [`ForwardHook::static_input`] should be fed.
    fn wants_static_inputs(&self) -> bool {
        false
    }
    /// Input of a modulated layer recomputed with only the static table.
    fn static_input(&mut self, _id: LayerId, _x: &Matrix) {}
}

/// Plain floating-point forward.
pub(crate) struct FpHook;

impl ForwardHook for FpHook {
    fn linear(&mut self, _id: LayerId, x: &Matrix, w: &Matrix) -> Result<Matrix> {
        x.matmul_t(w)
    }
}

fn split_qkv(qkv: &Matrix, d: usize) -> (Matrix, Matrix, Matrix) {
    (qkv.slice_cols(0, d), qkv.slice_cols(d, 2 * d), qkv.slice_cols(2 * d, 3 * d))
}

fn rows_of(m: &Matrix, idx: impl Iterator<Item = usize>) -> Vec<&[f64]> {
    idx.map(|r| m.row(r)).collect()
}

impl ToyModel {
    #[allow(clippy::too_many_arguments)]
    fn modulated(
        &self,
        block: &ToyBlock,
        h: &Matrix,
        t: f64,
        slot: ModSlot,
        include_time: bool,
        id: LayerId,
        hook: &mut dyn ForwardHook,
    ) -> Matrix {
        let ln = layer_norm(h);
        if hook.wants_static_inputs() {
            let (shift, scale) = modulation(block, t, slot, false);
            hook.static_input(id, &apply_modulation(&ln, &shift, &scale));
        }
        let (shift, scale) = modulation(block, t, slot, include_time);
        apply_modulation(&ln, &shift, &scale)
    }

    /// Network output for latent `x` (`frames·tokens × width`) at diffusion
    /// time `t`. `include_time = false` removes the timestep-MLP term from
    /// every modulation, leaving only the static table.
    pub(crate) fn forward(
        &self,
        x: &Matrix,
        t: f64,
        context: &Matrix,
        include_time: bool,
        hook: &mut dyn ForwardHook,
    ) -> Result<Matrix> {
        let cfg = &self.config;
        let (n_frames, n_tok, d) = (cfg.frames, cfg.tokens, cfg.width);
        if x.shape() != (cfg.rows(), d) {
            return Err(DtqError::shape(format!(
                "latent is {}x{}, model expects {}x{d}",
                x.rows(),
                x.cols(),
                cfg.rows()
            )));
        }
        let mut h = Matrix::from_fn(x.rows(), d, |r, c| x.get(r, c) + self.pos_embed.get(r % n_tok, c));

        for (b, block) in self.blocks.iter().enumerate() {
            let id = |kind| LayerId::new(b, kind);

            // Spatial self-attention within each frame.
            let a = self.modulated(block, &h, t, ModSlot::SelfAttn, include_time, id(LayerKind::SelfAttnQkv), hook);
            let qkv = hook.linear(id(LayerKind::SelfAttnQkv), &a, block.weight(LayerKind::SelfAttnQkv))?;
            let (q, k, v) = split_qkv(&qkv, d);
            let mut attn = Matrix::zeros(h.rows(), d);
            for f in 0..n_frames {
                let span = || f * n_tok..(f + 1) * n_tok;
                let out = attend(&rows_of(&q, span()), &rows_of(&k, span()), &rows_of(&v, span()));
                for (i, row) in out.into_iter().enumerate() {
                    attn.row_mut(f * n_tok + i).copy_from_slice(&row);
                }
            }
            let o = hook.linear(id(LayerKind::SelfAttnProj), &attn, block.weight(LayerKind::SelfAttnProj))?;
            h = h.add(&o)?;

            // Cross-attention: queries from the latent, keys/values from the context.
            let stacked = Matrix::vstack(&[&layer_norm(&h), context])?;
            let qkv = hook.linear(id(LayerKind::CrossAttnQkv), &stacked, block.weight(LayerKind::CrossAttnQkv))?;
            let n = h.rows();
            let q = qkv.slice_rows(0, n).slice_cols(0, d);
            let kv = qkv.slice_rows(n, qkv.rows());
            let (k, v) = (kv.slice_cols(d, 2 * d), kv.slice_cols(2 * d, 3 * d));
            let out = attend(&rows_of(&q, 0..n), &rows_of(&k, 0..k.rows()), &rows_of(&v, 0..v.rows()));
            let attn = Matrix::from_rows(&out)?;
            let o = hook.linear(id(LayerKind::CrossAttnProj), &attn, block.weight(LayerKind::CrossAttnProj))?;
            hook.cross_output(b, &o);
            h = h.add(&o)?;

            // Temporal attention across frames at each token position.
            let a = self.modulated(block, &h, t, ModSlot::Temporal, include_time, id(LayerKind::TemporalAttnQkv), hook);
            let qkv = hook.linear(id(LayerKind::TemporalAttnQkv), &a, block.weight(LayerKind::TemporalAttnQkv))?;
            let (q, k, v) = split_qkv(&qkv, d);
            let mut attn = Matrix::zeros(h.rows(), d);
            for tok in 0..n_tok {
                let span = || (0..n_frames).map(move |f| f * n_tok + tok);
                let out = attend(&rows_of(&q, span()), &rows_of(&k, span()), &rows_of(&v, span()));
                for (f, row) in out.into_iter().enumerate() {
                    attn.row_mut(f * n_tok + tok).copy_from_slice(&row);
                }
            }
            let o = hook.linear(id(LayerKind::TemporalAttnProj), &attn, block.weight(LayerKind::TemporalAttnProj))?;
            h = h.add(&o)?;

            // Feed-forward.
            let a = self.modulated(block, &h, t, ModSlot::Ffn, include_time, id(LayerKind::Ffn1), hook);
            let hidden = hook.linear(id(LayerKind::Ffn1), &a, block.weight(LayerKind::Ffn1))?.map(gelu);
            let o = hook.linear(id(LayerKind::Ffn2), &hidden, block.weight(LayerKind::Ffn2))?;
            h = h.add(&o)?;
        }
        layer_norm(&h).matmul_t(&self.out_proj)
    }
}
