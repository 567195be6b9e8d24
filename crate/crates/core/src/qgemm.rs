//! Reference integer GEMM for quantized linear layers.
//!
//! Activations are quantized per token (one `(s_x, z_x)` per row) and
//! weights per output channel with a symmetric zero point, so every product
//! summed along `C_in` shares one parameter pair on each side:
//!
//! ```text
//! acc[t, o] = Σ_c (X_int[t, c] - z_x[t]) · (W_int[o, c] - z_w)
//!           = Σ_c X_int[t, c] · W_sym[o, c]  -  z_x[t] · Σ_c W_sym[o, c]
//! Y[t, o]   = s_x[t] · s_w[o] · acc[t, o] + bias[o]
//! ```
//!
//! The right-hand correction term is precomputed per output channel.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{DtqError, Result};
use crate::matrix::Matrix;
use crate::quant::{self, Bits, GroupingScheme, QuantMode, QuantizedTensor};

#[derive(Debug, Clone, PartialEq)]
pub struct QuantLinear {
    weight: QuantizedTensor,
    bias: Option<Vec<f64>>,
    act_bits: Bits,
    /// `W_int - z_w`, upcast to 8 bits regardless of the storage width.
    w_sym: Vec<i8>,
    /// `Σ_c W_sym[o, c]` per output channel.
    w_row_sums: Vec<i32>,
}

impl QuantLinear {
    pub fn new(weight: QuantizedTensor, bias: Option<Vec<f64>>, act_bits: Bits) -> Result<Self> {
        if weight.scheme() != GroupingScheme::PerOutputChannel || !weight.symmetric() {
            return Err(DtqError::invalid(
                "integer GEMM needs symmetric per-output-channel weights",
            ));
        }
        let (c_out, c_in) = weight.shape();
        if let Some(b) = &bias {
            if b.len() != c_out {
                return Err(DtqError::shape(format!("bias of {} for {c_out} outputs", b.len())));
            }
        }
        let z = weight.bits().mid_code();
        let w_sym: Vec<i8> = weight.ints().iter().map(|&v| (v as i32 - z) as i8).collect();
        let w_row_sums = w_sym
            .chunks_exact(c_in)
            .map(|row| row.iter().map(|&v| v as i32).sum())
            .collect();
        Ok(Self {
            weight,
            bias,
            act_bits,
            w_sym,
            w_row_sums,
        })
    }

    /// Quantizes a float weight `[C_out, C_in]` and wraps it.
    pub fn from_float(w: &Matrix, bias: Option<Vec<f64>>, weight_bits: Bits, act_bits: Bits) -> Result<Self> {
        let q = quant::quantize_symmetric(w, GroupingScheme::PerOutputChannel, weight_bits)?;
        Self::new(q, bias, act_bits)
    }

    pub fn weight(&self) -> &QuantizedTensor {
        &self.weight
    }

    pub fn bias(&self) -> Option<&[f64]> {
        self.bias.as_deref()
    }

    pub fn act_bits(&self) -> Bits {
        self.act_bits
    }

    pub fn in_features(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_features(&self) -> usize {
        self.weight.rows()
    }

    fn check_input(&self, x: &Matrix) -> Result<()> {
        if x.cols() != self.in_features() {
            return Err(DtqError::shape(format!(
                "input has {} channels, layer expects {}",
                x.cols(),
                self.in_features()
            )));
        }
        Ok(())
    }

    fn row_accumulators(&self, xq: &QuantizedTensor, t: usize) -> Result<Vec<i32>> {
        let c_in = self.in_features();
        let codes = &xq.ints()[t * c_in..(t + 1) * c_in];
        let zx = xq.params()[t].zero_point;
        let mut out = Vec::with_capacity(self.out_features());
        for (o, w_row) in self.w_sym.chunks_exact(c_in).enumerate() {
            let overflow = || DtqError::AccumulatorOverflow { row: t, col: o };
            let mut acc: i32 = 0;
            for (&x, &w) in codes.iter().zip(w_row) {
                // |x·w| ≤ 255·128, so the product itself cannot overflow.
                acc = acc.checked_add(x as i32 * w as i32).ok_or_else(overflow)?;
            }
            let correction = zx.checked_mul(self.w_row_sums[o]).ok_or_else(overflow)?;
            out.push(acc.checked_sub(correction).ok_or_else(overflow)?);
        }
        Ok(out)
    }

    /// Integer accumulators `acc[t, o]` for input `x`, plus the dynamic
    /// activation quantization that produced them.
    pub fn accumulate(&self, x: &Matrix) -> Result<(QuantizedTensor, Vec<i32>)> {
        self.check_input(x)?;
        let xq = quant::quantize(x, GroupingScheme::PerToken, self.act_bits, QuantMode::Dynamic, None)?;
        let mut acc = Vec::with_capacity(x.rows() * self.out_features());
        for t in 0..x.rows() {
            acc.extend(self.row_accumulators(&xq, t)?);
        }
        Ok((xq, acc))
    }

    fn rescale_row(&self, xq: &QuantizedTensor, t: usize, acc: &[i32], out: &mut [f64]) {
        let sx = xq.params()[t].scale;
        for (o, (dst, &a)) in out.iter_mut().zip(acc).enumerate() {
            let sw = self.weight.params()[o].scale;
            *dst = sx * sw * a as f64 + self.bias.as_ref().map_or(0.0, |b| b[o]);
        }
    }
}

/// Quantized forward pass: `Y = s_x·s_w·acc + bias`.
pub fn qlinear_forward(x: &Matrix, layer: &QuantLinear) -> Result<Matrix> {
    let (xq, acc) = layer.accumulate(x)?;
    let c_out = layer.out_features();
    let mut y = Matrix::zeros(x.rows(), c_out);
    for t in 0..x.rows() {
        layer.rescale_row(&xq, t, &acc[t * c_out..(t + 1) * c_out], y.row_mut(t));
    }
    Ok(y)
}

/// Row-parallel variant of [`qlinear_forward`]; produces identical output.
pub fn qlinear_forward_par(x: &Matrix, layer: &QuantLinear) -> Result<Matrix> {
    layer.check_input(x)?;
    let xq = quant::quantize(x, GroupingScheme::PerToken, layer.act_bits, QuantMode::Dynamic, None)?;
    let c_out = layer.out_features();
    let mut y = Matrix::zeros(x.rows(), c_out);
    y.data_mut()
        .par_chunks_mut(c_out)
        .enumerate()
        .try_for_each(|(t, out)| {
            let acc = layer.row_accumulators(&xq, t)?;
            layer.rescale_row(&xq, t, &acc, out);
            Ok::<(), DtqError>(())
        })?;
    Ok(y)
}

/// Float path the integer kernel must agree with:
/// `fake_quantize(X)·dequantize(W_q)ᵀ + bias`.
pub fn float_reference(x: &Matrix, layer: &QuantLinear) -> Result<Matrix> {
    let xq = quant::fake_quantize(x, GroupingScheme::PerToken, layer.act_bits, QuantMode::Dynamic, None)?;
    let mut y = xq.matmul_t(&quant::dequantize(&layer.weight))?;
    if let Some(b) = &layer.bias {
        for t in 0..y.rows() {
            for (v, bo) in y.row_mut(t).iter_mut().zip(b) {
                *v += bo;
            }
        }
    }
    Ok(y)
}

/// Bytes needed to store `count` codes of `bits` bits, packed LSB-first.
pub fn packed_len(count: usize, bits: Bits) -> usize {
    (count * bits.get() as usize).div_ceil(8)
}

/// Storage-relevant description of one quantized layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerFootprint {
    pub c_out: usize,
    pub c_in: usize,
    pub bits: Bits,
    pub groups: usize,
    pub symmetric: bool,
    pub has_mask: bool,
    pub has_rotation: bool,
}

impl LayerFootprint {
    pub fn weights(c_out: usize, c_in: usize, bits: Bits) -> Self {
        Self {
            c_out,
            c_in,
            bits,
            groups: c_out,
            symmetric: true,
            has_mask: false,
            has_rotation: false,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PayloadBytes {
    /// Packed integer codes.
    pub weights: usize,
    /// Per-group scales (f32) and, for asymmetric tensors, zero points (u8).
    pub params: usize,
    /// Scaling masks (f32 per channel) and rotation sign bits.
    pub balance: usize,
}

impl PayloadBytes {
    pub fn total(&self) -> usize {
        self.weights + self.params + self.balance
    }
}

/// Payload size of a layer set as laid out in a quantized checkpoint
/// (excluding per-record headers and names).
pub fn checkpoint_bytes(layers: &[LayerFootprint]) -> PayloadBytes {
    layers.iter().fold(PayloadBytes::default(), |mut acc, l| {
        acc.weights += packed_len(l.c_out * l.c_in, l.bits);
        acc.params += l.groups * if l.symmetric { 4 } else { 5 };
        if l.has_mask {
            acc.balance += 4 * l.c_in;
        }
        if l.has_rotation {
            acc.balance += l.c_in.div_ceil(8);
        }
        acc
    })
}

/// Bytes for the same weights at 16 bits each.
pub fn fp16_weight_bytes(layers: &[LayerFootprint]) -> usize {
    layers.iter().map(|l| 2 * l.c_out * l.c_in).sum()
}
