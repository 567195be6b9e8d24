//! Grouped min-max quantization.
//!
//! A value `x` in a group with parameters `(s, z, b)` maps to the code
//! `clamp(round(x / s) + z, 0, 2^b - 1)` and back to `s · (code - z)`.
//! Rounding is round-half-to-even everywhere, including the zero point.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{DtqError, Result};
use crate::matrix::Matrix;

/// Bit-width of a quantized payload. Only 2, 4, 6 and 8 are supported.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u32", into = "u32")]
pub struct Bits(u8);

impl Bits {
    pub const B2: Bits = Bits(2);
    pub const B4: Bits = Bits(4);
    pub const B6: Bits = Bits(6);
    pub const B8: Bits = Bits(8);

    pub fn new(bits: u32) -> Result<Self> {
        match bits {
            2 | 4 | 6 | 8 => Ok(Bits(bits as u8)),
            other => Err(DtqError::UnsupportedBits(other)),
        }
    }

    #[inline]
    pub fn get(self) -> u32 {
        self.0 as u32
    }

    /// Largest code, `2^b - 1`.
    #[inline]
    pub fn qmax(self) -> i32 {
        (1i32 << self.0) - 1
    }

    /// Zero point used by symmetric quantization.
    #[inline]
    pub fn mid_code(self) -> i32 {
        1i32 << (self.0 - 1)
    }
}

impl TryFrom<u32> for Bits {
    type Error = DtqError;
    fn try_from(v: u32) -> Result<Self> {
        Bits::new(v)
    }
}

impl From<Bits> for u32 {
    fn from(b: Bits) -> u32 {
        b.get()
    }
}

impl fmt::Display for Bits {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[inline]
pub fn round_half_even(v: f64) -> f64 {
    v.round_ties_even()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantParams {
    pub scale: f64,
    pub zero_point: i32,
    pub bits: Bits,
}

impl QuantParams {
    pub fn new(scale: f64, zero_point: i32, bits: Bits) -> Result<Self> {
        if !(scale.is_finite() && scale > 0.0) {
            return Err(DtqError::invalid(format!("scale must be positive, got {scale}")));
        }
        if zero_point < 0 || zero_point > bits.qmax() {
            return Err(DtqError::invalid(format!(
                "zero point {zero_point} outside [0, {}]",
                bits.qmax()
            )));
        }
        Ok(Self {
            scale,
            zero_point,
            bits,
        })
    }

    /// Code before clamping, `round(x / s) + z`.
    #[inline]
    pub fn raw_code(&self, x: f64) -> f64 {
        round_half_even(x / self.scale) + self.zero_point as f64
    }

    #[inline]
    pub fn quantize_value(&self, x: f64) -> u8 {
        self.raw_code(x).clamp(0.0, self.bits.qmax() as f64) as u8
    }

    #[inline]
    pub fn dequantize_value(&self, code: u8) -> f64 {
        self.scale * (code as i32 - self.zero_point) as f64
    }

    #[inline]
    pub fn fake_quantize_value(&self, x: f64) -> f64 {
        self.dequantize_value(self.quantize_value(x))
    }
}

fn check_group(group: &[f64]) -> Result<(f64, f64)> {
    if group.is_empty() {
        return Err(DtqError::Empty("quantization group"));
    }
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for (index, &value) in group.iter().enumerate() {
        if !value.is_finite() {
            return Err(DtqError::NonFinite { index, value });
        }
        lo = lo.min(value);
        hi = hi.max(value);
    }
    Ok((lo, hi))
}

/// Min-max parameters for one group: `s = (max - min) / (2^b - 1)`,
/// `z = round(-min / s)`. The range is widened to include zero first, so a
/// one-sided group such as `[10, 20]` is treated as `[0, 20]`.
///
/// A constant group holding an integer in `[-(2^b - 1), 2^b - 1]` gets
/// `s = 1` and `z = clamp(round(-min))`, which reproduces it exactly. Any
/// other constant falls back to the zero-widened range `[min(c, 0), max(c, 0)]`.
pub fn compute_minmax_params(group: &[f64], bits: Bits) -> Result<QuantParams> {
    let (lo, hi) = check_group(group)?;
    Ok(minmax_from_range(lo, hi, bits))
}

pub(crate) fn minmax_from_range(lo: f64, hi: f64, bits: Bits) -> QuantParams {
    let qmax = bits.qmax();
    let representable = lo.fract() == 0.0 && lo.abs() <= qmax as f64;
    let (scale, zp) = if hi == lo && (representable || lo == 0.0) {
        (1.0, round_half_even(-lo))
    } else {
        // The range always covers zero so the zero point stays a valid code.
        let (lo, hi) = (lo.min(0.0), hi.max(0.0));
        let s = (hi - lo) / qmax as f64;
        (s, round_half_even(-lo / s))
    };
    QuantParams {
        scale,
        zero_point: zp.clamp(0.0, qmax as f64) as i32,
        bits,
    }
}

/// Symmetric parameters: zero point pinned at the mid code `2^(b-1)` and
/// `s = max|x| / (2^(b-1) - 1)`, so zero dequantizes exactly and no value
/// is clipped.
pub fn compute_symmetric_params(group: &[f64], bits: Bits) -> Result<QuantParams> {
    let (lo, hi) = check_group(group)?;
    Ok(symmetric_from_absmax(lo.abs().max(hi.abs()), bits))
}

pub(crate) fn symmetric_from_absmax(absmax: f64, bits: Bits) -> QuantParams {
    let levels = (bits.mid_code() - 1) as f64;
    let scale = if absmax > 0.0 { absmax / levels } else { 1.0 };
    QuantParams {
        scale,
        zero_point: bits.mid_code(),
        bits,
    }
}

/// Which elements share one `(s, z)` pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupingScheme {
    PerTensor,
    /// One group per row of an activation matrix.
    PerToken,
    /// One group per column.
    PerChannel,
    /// One group per row of a weight matrix `[C_out, C_in]`.
    PerOutputChannel,
    /// Contiguous blocks of `group_size` columns within each row.
    PerGroup(usize),
}

impl GroupingScheme {
    pub fn validate(&self, rows: usize, cols: usize) -> Result<()> {
        if let GroupingScheme::PerGroup(g) = *self {
            if g == 0 || cols % g != 0 {
                return Err(DtqError::invalid(format!(
                    "group size {g} does not divide {cols} columns"
                )));
            }
        }
        let _ = rows;
        Ok(())
    }

    pub fn group_count(&self, rows: usize, cols: usize) -> usize {
        match *self {
            GroupingScheme::PerTensor => 1,
            GroupingScheme::PerToken | GroupingScheme::PerOutputChannel => rows,
            GroupingScheme::PerChannel => cols,
            GroupingScheme::PerGroup(g) => rows * (cols / g),
        }
    }

    #[inline]
    pub fn group_of(&self, r: usize, c: usize, cols: usize) -> usize {
        match *self {
            GroupingScheme::PerTensor => 0,
            GroupingScheme::PerToken | GroupingScheme::PerOutputChannel => r,
            GroupingScheme::PerChannel => c,
            GroupingScheme::PerGroup(g) => r * (cols / g) + c / g,
        }
    }

    /// Whether the group layout depends on the row count, i.e. whether
    /// frozen parameters only fit matrices with the calibration row count.
    pub fn is_row_bound(&self) -> bool {
        !matches!(self, GroupingScheme::PerTensor | GroupingScheme::PerChannel)
    }
}

impl fmt::Display for GroupingScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GroupingScheme::PerTensor => write!(f, "per-tensor"),
            GroupingScheme::PerToken => write!(f, "per-token"),
            GroupingScheme::PerChannel => write!(f, "per-channel"),
            GroupingScheme::PerOutputChannel => write!(f, "per-output-channel"),
            GroupingScheme::PerGroup(g) => write!(f, "per-group({g})"),
        }
    }
}

/// Where activation parameters come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuantMode {
    /// Parameters frozen from calibration data.
    Static,
    /// Parameters computed from the tensor being quantized.
    Dynamic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantizedTensor {
    rows: usize,
    cols: usize,
    ints: Vec<u8>,
    scheme: GroupingScheme,
    params: Vec<QuantParams>,
    symmetric: bool,
}

impl QuantizedTensor {
    /// Reassembles a tensor from its parts, checking every invariant.
    pub fn from_parts(
        rows: usize,
        cols: usize,
        ints: Vec<u8>,
        scheme: GroupingScheme,
        params: Vec<QuantParams>,
        symmetric: bool,
    ) -> Result<Self> {
        if rows == 0 || cols == 0 || ints.len() != rows * cols {
            return Err(DtqError::shape(format!(
                "{} codes for a {rows}x{cols} tensor",
                ints.len()
            )));
        }
        scheme.validate(rows, cols)?;
        let expected = scheme.group_count(rows, cols);
        if params.len() != expected {
            return Err(DtqError::GroupCount {
                expected,
                actual: params.len(),
            });
        }
        let bits = params[0].bits;
        for p in &params {
            QuantParams::new(p.scale, p.zero_point, p.bits)?;
            if p.bits != bits {
                return Err(DtqError::invalid("mixed bit-widths within one tensor"));
            }
            if symmetric && p.zero_point != bits.mid_code() {
                return Err(DtqError::invalid("symmetric tensor with off-center zero point"));
            }
        }
        if let Some(&bad) = ints.iter().find(|&&v| v as i32 > bits.qmax()) {
            return Err(DtqError::invalid(format!(
                "code {bad} exceeds {}-bit range",
                bits
            )));
        }
        Ok(Self {
            rows,
            cols,
            ints,
            scheme,
            params,
            symmetric,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }
    pub fn cols(&self) -> usize {
        self.cols
    }
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }
    pub fn ints(&self) -> &[u8] {
        &self.ints
    }
    pub fn scheme(&self) -> GroupingScheme {
        self.scheme
    }
    pub fn params(&self) -> &[QuantParams] {
        &self.params
    }
    pub fn symmetric(&self) -> bool {
        self.symmetric
    }
    pub fn bits(&self) -> Bits {
        self.params[0].bits
    }

    #[inline]
    pub fn code(&self, r: usize, c: usize) -> u8 {
        self.ints[r * self.cols + c]
    }

    #[inline]
    pub fn params_at(&self, r: usize, c: usize) -> &QuantParams {
        &self.params[self.scheme.group_of(r, c, self.cols)]
    }
}

/// Per-group min and max of `x` under `scheme`.
fn group_ranges(x: &Matrix, scheme: GroupingScheme) -> Vec<(f64, f64)> {
    let (rows, cols) = x.shape();
    let mut ranges = vec![(f64::INFINITY, f64::NEG_INFINITY); scheme.group_count(rows, cols)];
    for r in 0..rows {
        for (c, &v) in x.row(r).iter().enumerate() {
            let g = &mut ranges[scheme.group_of(r, c, cols)];
            g.0 = g.0.min(v);
            g.1 = g.1.max(v);
        }
    }
    ranges
}

/// Dynamic min-max parameters for every group of `x`.
pub fn minmax_params(x: &Matrix, scheme: GroupingScheme, bits: Bits) -> Result<Vec<QuantParams>> {
    scheme.validate(x.rows(), x.cols())?;
    Ok(group_ranges(x, scheme)
        .into_iter()
        .map(|(lo, hi)| minmax_from_range(lo, hi, bits))
        .collect())
}

/// Static min-max parameters over a calibration set: each group's range is
/// the union of its ranges across all samples.
pub fn calibrate_params(
    samples: &[&Matrix],
    scheme: GroupingScheme,
    bits: Bits,
) -> Result<Vec<QuantParams>> {
    let first = samples.first().ok_or(DtqError::Empty("calibration set"))?;
    let cols = first.cols();
    let groups = scheme.group_count(first.rows(), cols);
    let mut acc = vec![(f64::INFINITY, f64::NEG_INFINITY); groups];
    for s in samples {
        scheme.validate(s.rows(), s.cols())?;
        if s.cols() != cols || scheme.group_count(s.rows(), s.cols()) != groups {
            return Err(DtqError::shape(format!(
                "calibration sample {}x{} does not fit {scheme} layout of {groups} groups",
                s.rows(),
                s.cols()
            )));
        }
        for (a, (lo, hi)) in acc.iter_mut().zip(group_ranges(s, scheme)) {
            a.0 = a.0.min(lo);
            a.1 = a.1.max(hi);
        }
    }
    Ok(acc
        .into_iter()
        .map(|(lo, hi)| minmax_from_range(lo, hi, bits))
        .collect())
}

/// Applies the quantizer with explicit per-group parameters.
pub fn quantize_with_params(
    x: &Matrix,
    scheme: GroupingScheme,
    params: &[QuantParams],
    symmetric: bool,
) -> Result<QuantizedTensor> {
    let (rows, cols) = x.shape();
    scheme.validate(rows, cols)?;
    let expected = scheme.group_count(rows, cols);
    if params.len() != expected {
        return Err(DtqError::GroupCount {
            expected,
            actual: params.len(),
        });
    }
    let mut ints = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for (c, &v) in x.row(r).iter().enumerate() {
            ints.push(params[scheme.group_of(r, c, cols)].quantize_value(v));
        }
    }
    QuantizedTensor::from_parts(rows, cols, ints, scheme, params.to_vec(), symmetric)
}

/// Asymmetric quantization. `Dynamic` derives min-max parameters from `x`;
/// `Static` requires `frozen` parameters from calibration.
pub fn quantize(
    x: &Matrix,
    scheme: GroupingScheme,
    bits: Bits,
    mode: QuantMode,
    frozen: Option<&[QuantParams]>,
) -> Result<QuantizedTensor> {
    match mode {
        QuantMode::Dynamic => {
            let params = minmax_params(x, scheme, bits)?;
            quantize_with_params(x, scheme, &params, false)
        }
        QuantMode::Static => {
            let params = frozen
                .ok_or_else(|| DtqError::invalid("static quantization needs frozen parameters"))?;
            if let Some(p) = params.iter().find(|p| p.bits != bits) {
                return Err(DtqError::invalid(format!(
                    "frozen parameters are {}-bit, requested {bits}-bit",
                    p.bits
                )));
            }
            quantize_with_params(x, scheme, params, false)
        }
    }
}

/// Symmetric quantization with parameters derived from `x` (used for weights).
pub fn quantize_symmetric(x: &Matrix, scheme: GroupingScheme, bits: Bits) -> Result<QuantizedTensor> {
    scheme.validate(x.rows(), x.cols())?;
    let params: Vec<QuantParams> = group_ranges(x, scheme)
        .into_iter()
        .map(|(lo, hi)| symmetric_from_absmax(lo.abs().max(hi.abs()), bits))
        .collect();
    quantize_with_params(x, scheme, &params, true)
}

pub fn dequantize(q: &QuantizedTensor) -> Matrix {
    let (rows, cols) = q.shape();
    Matrix::from_fn(rows, cols, |r, c| q.params_at(r, c).dequantize_value(q.code(r, c)))
}

/// `dequantize(quantize(x, ..))`.
pub fn fake_quantize(
    x: &Matrix,
    scheme: GroupingScheme,
    bits: Bits,
    mode: QuantMode,
    frozen: Option<&[QuantParams]>,
) -> Result<Matrix> {
    Ok(dequantize(&quantize(x, scheme, bits, mode, frozen)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantErrorReport {
    pub rounding_mse: f64,
    pub clamping_mse: f64,
    pub total_mse: f64,
    pub max_abs_err: f64,
}

/// Splits the reconstruction error of `q` against `x` into a rounding and a
/// clamping part. An entry counts as clamped when its unrounded code
/// `x / s + z` lies more than half a step outside `[0, 2^b - 1]`; the error
/// of every other entry is bounded by `s / 2` and counts as rounding.
pub fn error_report(x: &Matrix, q: &QuantizedTensor) -> Result<QuantErrorReport> {
    if x.shape() != q.shape() {
        return Err(DtqError::shape(format!(
            "source {}x{} vs quantized {}x{}",
            x.rows(),
            x.cols(),
            q.rows(),
            q.cols()
        )));
    }
    let (rows, cols) = x.shape();
    let n = (rows * cols) as f64;
    let mut rounding = 0.0;
    let mut clamping = 0.0;
    let mut max_abs = 0.0f64;
    for r in 0..rows {
        for (c, &v) in x.row(r).iter().enumerate() {
            let p = q.params_at(r, c);
            let err = v - p.dequantize_value(q.code(r, c));
            let sq = err * err;
            max_abs = max_abs.max(err.abs());
            let qmax = p.bits.qmax() as f64;
            let slack = 0.5 + 1e-9 * (qmax + 1.0);
            let unrounded = v / p.scale + p.zero_point as f64;
            if unrounded < -slack || unrounded > qmax + slack {
                clamping += sq;
            } else {
                rounding += sq;
            }
        }
    }
    let rounding_mse = rounding / n;
    let clamping_mse = clamping / n;
    Ok(QuantErrorReport {
        rounding_mse,
        clamping_mse,
        total_mse: rounding_mse + clamping_mse,
        max_abs_err: max_abs,
    })
}

/// Smallest `μ` with `max|x| ≤ μ · ‖x‖ / √g`, i.e. `max|x| · √g / ‖x‖`.
/// Ranges over `[1, √g]`; large values mean the group is outlier-dominated.
pub fn incoherence(group: &[f64]) -> Result<f64> {
    check_group(group)?;
    let norm = group.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Err(DtqError::invalid("incoherence is undefined for an all-zero group"));
    }
    let max = group.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    Ok(max * (group.len() as f64).sqrt() / norm)
}

/// Largest per-row incoherence of a matrix, skipping all-zero rows.
pub fn worst_row_incoherence(x: &Matrix) -> f64 {
    (0..x.rows())
        .filter_map(|r| incoherence(x.row(r)).ok())
        .fold(0.0, f64::max)
}
