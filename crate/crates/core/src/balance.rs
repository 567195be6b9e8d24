//! Output-preserving channel balancing for a linear layer `Y = X·Wᵀ`.
//!
//! Two primitives are provided: a per-channel scaling mask `s` that moves
//! magnitude from activations to weights (`X·diag(s)⁻¹`, `W·diag(s)`), and
//! an orthonormal Hadamard rotation `H` applied to both sides (`X·H`, `W·H`).
//! The static-dynamic transform fits the mask to the time-invariant part of
//! the activation and then rotates, so the rotation only has to absorb the
//! residual time-varying imbalance.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DtqError, Result};
use crate::matrix::{mse, Matrix};
use crate::quant::{self, Bits, GroupingScheme, QuantMode};

pub const MASK_MIN: f64 = 1e-5;
pub const MASK_MAX: f64 = 1e5;

/// Candidate α values searched when fitting a mask.
pub const ALPHA_GRID: [f64; 9] = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingMask {
    s: Vec<f64>,
    alpha: f64,
}

impl ScalingMask {
    pub fn new(s: Vec<f64>, alpha: f64) -> Result<Self> {
        if s.is_empty() {
            return Err(DtqError::Empty("scaling mask"));
        }
        if !(0.0..=1.0).contains(&alpha) {
            return Err(DtqError::invalid(format!("alpha {alpha} outside [0, 1]")));
        }
        if let Some(bad) = s.iter().find(|v| !(v.is_finite() && **v > 0.0)) {
            return Err(DtqError::invalid(format!("mask entry {bad} is not positive")));
        }
        Ok(Self { s, alpha })
    }

    pub fn values(&self) -> &[f64] {
        &self.s
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn len(&self) -> usize {
        self.s.len()
    }

    pub fn is_empty(&self) -> bool {
        self.s.is_empty()
    }
}

/// `s_i = max|X_i|^α / max|W_i|^(1-α)`, clamped to `[1e-5, 1e5]`.
///
/// A channel whose activation or weight statistic is zero gets `s_i = 1`.
pub fn compute_scaling_mask(act_absmax: &[f64], weight_absmax: &[f64], alpha: f64) -> Result<ScalingMask> {
    if act_absmax.len() != weight_absmax.len() {
        return Err(DtqError::shape(format!(
            "{} activation channels vs {} weight channels",
            act_absmax.len(),
            weight_absmax.len()
        )));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(DtqError::invalid(format!("alpha {alpha} outside [0, 1]")));
    }
    let mut s = Vec::with_capacity(act_absmax.len());
    for (i, (&a, &w)) in act_absmax.iter().zip(weight_absmax).enumerate() {
        if !(a.is_finite() && w.is_finite()) || a < 0.0 || w < 0.0 {
            return Err(DtqError::invalid(format!(
                "channel {i}: statistics must be finite and non-negative (act {a}, weight {w})"
            )));
        }
        if a == 0.0 || w == 0.0 {
            log::warn!("channel {i} has a zero statistic; scaling factor set to 1");
            s.push(1.0);
            continue;
        }
        let v = a.powf(alpha) / w.powf(1.0 - alpha);
        s.push(v.clamp(MASK_MIN, MASK_MAX));
    }
    ScalingMask::new(s, alpha)
}

/// `X' = X·diag(s)⁻¹`, `W'[o, c] = W[o, c]·s[c]`.
pub fn apply_scaling(x: &Matrix, w: &Matrix, mask: &ScalingMask) -> Result<(Matrix, Matrix)> {
    check_in_dim(x, w, mask.len())?;
    Ok((scale_activation(x, mask), scale_weight(w, mask)))
}

fn scale_activation(x: &Matrix, mask: &ScalingMask) -> Matrix {
    Matrix::from_fn(x.rows(), x.cols(), |r, c| x.get(r, c) / mask.s[c])
}

fn scale_weight(w: &Matrix, mask: &ScalingMask) -> Matrix {
    Matrix::from_fn(w.rows(), w.cols(), |r, c| w.get(r, c) * mask.s[c])
}

fn check_in_dim(x: &Matrix, w: &Matrix, n: usize) -> Result<()> {
    if x.cols() != n || w.cols() != n {
        return Err(DtqError::shape(format!(
            "activation has {} channels, weight {} input channels, transform expects {n}",
            x.cols(),
            w.cols()
        )));
    }
    Ok(())
}

/// Orthonormal Hadamard rotation `D·H/√n`, where `H` is the Sylvester
/// Hadamard matrix and `D` an optional random ±1 diagonal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RotationMatrix {
    n: usize,
    sign_diag: Option<Vec<i8>>,
}

impl RotationMatrix {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn signs(&self) -> Option<&[i8]> {
        self.sign_diag.as_deref()
    }

    /// Rebuilds a rotation from stored signs.
    pub fn from_signs(n: usize, sign_diag: Option<Vec<i8>>) -> Result<Self> {
        check_pow2(n)?;
        if let Some(d) = &sign_diag {
            if d.len() != n || d.iter().any(|&v| v != 1 && v != -1) {
                return Err(DtqError::invalid("sign diagonal must hold n entries of ±1"));
            }
        }
        Ok(Self { n, sign_diag })
    }

    /// Rotates one row in place: `x ← x·D·H/√n`.
    pub fn rotate_row(&self, row: &mut [f64]) {
        debug_assert_eq!(row.len(), self.n);
        if let Some(d) = &self.sign_diag {
            for (v, &s) in row.iter_mut().zip(d) {
                *v *= s as f64;
            }
        }
        fwht(row);
        let k = 1.0 / (self.n as f64).sqrt();
        for v in row.iter_mut() {
            *v *= k;
        }
    }

    /// `X·R` for every row of `x`.
    pub fn rotate(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.n {
            return Err(DtqError::shape(format!(
                "rotation of size {} applied to {} channels",
                self.n,
                x.cols()
            )));
        }
        let mut out = x.clone();
        for r in 0..out.rows() {
            self.rotate_row(out.row_mut(r));
        }
        Ok(out)
    }

    /// The rotation as an explicit `n × n` matrix.
    pub fn to_dense(&self) -> Matrix {
        let k = 1.0 / (self.n as f64).sqrt();
        Matrix::from_fn(self.n, self.n, |r, c| {
            let sign = if (r & c).count_ones() % 2 == 0 { 1.0 } else { -1.0 };
            let d = self.sign_diag.as_ref().map_or(1.0, |d| d[r] as f64);
            d * sign * k
        })
    }
}

fn check_pow2(n: usize) -> Result<()> {
    if n < 2 || !n.is_power_of_two() {
        return Err(DtqError::invalid(format!(
            "Hadamard size must be a power of two ≥ 2, got {n}"
        )));
    }
    Ok(())
}

/// Unnormalized in-place fast Walsh-Hadamard transform (Sylvester order).
pub fn fwht(data: &mut [f64]) {
    let n = data.len();
    debug_assert!(n.is_power_of_two());
    let mut h = 1;
    while h < n {
        for block in data.chunks_exact_mut(2 * h) {
            let (lo, hi) = block.split_at_mut(h);
            for (a, b) in lo.iter_mut().zip(hi.iter_mut()) {
                let (x, y) = (*a, *b);
                *a = x + y;
                *b = x - y;
            }
        }
        h *= 2;
    }
}

/// Normalized Sylvester Hadamard of size `n`; with `randomize`, its rows are
/// multiplied by a ±1 diagonal drawn from `seed`.
pub fn hadamard_matrix(n: usize, randomize: bool, seed: u64) -> Result<RotationMatrix> {
    check_pow2(n)?;
    let sign_diag = randomize.then(|| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| if rng.random::<bool>() { 1 } else { -1 }).collect()
    });
    Ok(RotationMatrix { n, sign_diag })
}

/// `X' = X·H`, `W' = W·H`, so `X'·W'ᵀ = X·H·Hᵀ·Wᵀ = X·Wᵀ`.
pub fn apply_rotation(x: &Matrix, w: &Matrix, h: &RotationMatrix) -> Result<(Matrix, Matrix)> {
    check_in_dim(x, w, h.n)?;
    Ok((h.rotate(x)?, h.rotate(w)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BalanceKind {
    None,
    Scaling,
    Rotation,
    StaticDynamic,
}

/// Scaling followed by rotation; either part may be absent.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BalanceTransform {
    pub mask: Option<ScalingMask>,
    pub rotation: Option<RotationMatrix>,
}

impl BalanceTransform {
    pub fn identity() -> Self {
        Self::default()
    }

    pub fn is_identity(&self) -> bool {
        self.mask.is_none() && self.rotation.is_none()
    }

    pub fn kind(&self) -> BalanceKind {
        match (&self.mask, &self.rotation) {
            (None, None) => BalanceKind::None,
            (Some(_), None) => BalanceKind::Scaling,
            (None, Some(_)) => BalanceKind::Rotation,
            (Some(_), Some(_)) => BalanceKind::StaticDynamic,
        }
    }

    fn check_dim(&self, n: usize) -> Result<()> {
        if let Some(m) = &self.mask {
            if m.len() != n {
                return Err(DtqError::shape(format!("mask of {} channels on {n}", m.len())));
            }
        }
        if let Some(r) = &self.rotation {
            if r.n != n {
                return Err(DtqError::shape(format!("rotation of size {} on {n}", r.n)));
            }
        }
        Ok(())
    }

    pub fn apply_activation(&self, x: &Matrix) -> Result<Matrix> {
        self.check_dim(x.cols())?;
        let mut out = match &self.mask {
            Some(m) => scale_activation(x, m),
            None => x.clone(),
        };
        if let Some(r) = &self.rotation {
            for i in 0..out.rows() {
                r.rotate_row(out.row_mut(i));
            }
        }
        Ok(out)
    }

    pub fn apply_weight(&self, w: &Matrix) -> Result<Matrix> {
        self.check_dim(w.cols())?;
        let mut out = match &self.mask {
            Some(m) => scale_weight(w, m),
            None => w.clone(),
        };
        if let Some(r) = &self.rotation {
            for i in 0..out.rows() {
                r.rotate_row(out.row_mut(i));
            }
        }
        Ok(out)
    }

    pub fn apply(&self, x: &Matrix, w: &Matrix) -> Result<(Matrix, Matrix)> {
        Ok((self.apply_activation(x)?, self.apply_weight(w)?))
    }
}

/// Static-dynamic balance: a mask fitted on `static_base` (activations with
/// the time-varying modulation removed) composed with a seeded random
/// Hadamard rotation.
pub fn static_dynamic_balance(static_base: &Matrix, w: &Matrix, alpha: f64, seed: u64) -> Result<BalanceTransform> {
    if static_base.cols() != w.cols() {
        return Err(DtqError::shape(format!(
            "static base has {} channels, weight {}",
            static_base.cols(),
            w.cols()
        )));
    }
    let mask = compute_scaling_mask(&static_base.col_absmax(), &w.col_absmax(), alpha)?;
    let rotation = hadamard_matrix(w.cols(), true, seed)?;
    Ok(BalanceTransform {
        mask: Some(mask),
        rotation: Some(rotation),
    })
}

/// Quantization setting used to score balance candidates: symmetric
/// per-output-channel weights, per-token dynamic activations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BalanceObjective {
    pub weight_bits: Bits,
    pub act_bits: Bits,
}

impl BalanceObjective {
    /// Output MSE of the fake-quantized, balanced layer against `X·Wᵀ`.
    pub fn output_mse(&self, x: &Matrix, w: &Matrix, t: &BalanceTransform) -> Result<f64> {
        let reference = x.matmul_t(w)?;
        let (xb, wb) = t.apply(x, w)?;
        let xq = quant::fake_quantize(&xb, GroupingScheme::PerToken, self.act_bits, QuantMode::Dynamic, None)?;
        let wq = quant::dequantize(&quant::quantize_symmetric(
            &wb,
            GroupingScheme::PerOutputChannel,
            self.weight_bits,
        )?);
        mse(&xq.matmul_t(&wq)?, &reference)
    }
}

/// Grid-searches α: for each candidate the mask is computed from
/// `mask_source` (per-channel absmax) and `w`, optionally composed with
/// `rotation`, and scored by [`BalanceObjective::output_mse`] on `calib`.
/// Returns the winning transform and its score; ties keep the smaller α.
pub fn search_alpha(
    calib: &Matrix,
    mask_source: &Matrix,
    w: &Matrix,
    rotation: Option<&RotationMatrix>,
    objective: BalanceObjective,
    grid: &[f64],
) -> Result<(BalanceTransform, f64)> {
    if grid.is_empty() {
        return Err(DtqError::Empty("alpha grid"));
    }
    let act = mask_source.col_absmax();
    let wmax = w.col_absmax();
    let mut best: Option<(BalanceTransform, f64)> = None;
    for &alpha in grid {
        let t = BalanceTransform {
            mask: Some(compute_scaling_mask(&act, &wmax, alpha)?),
            rotation: rotation.cloned(),
        };
        let score = objective.output_mse(calib, w, &t)?;
        if best.as_ref().is_none_or(|(_, b)| score < *b) {
            best = Some((t, score));
        }
    }
    Ok(best.expect("non-empty grid"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, StandardNormal};

    fn randn(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_fn(rows, cols, |_, _| StandardNormal.sample(&mut rng))
    }

    fn rel_dev(a: &Matrix, b: &Matrix) -> f64 {
        a.sub(b).unwrap().max_abs() / b.max_abs()
    }

    #[test]
    fn mask_examples() {
        let m = compute_scaling_mask(&[4.0], &[1.0], 0.5).unwrap();
        assert_eq!(m.values(), &[2.0]);
        let m = compute_scaling_mask(&[123.0], &[1.0], 0.0).unwrap();
        assert_eq!(m.values(), &[1.0]);
        let m = compute_scaling_mask(&[10.0, 0.1], &[1.0, 1.0], 0.8).unwrap();
        assert!((m.values()[0] - 10f64.powf(0.8)).abs() < 1e-12);
        assert!((m.values()[1] - 0.1f64.powf(0.8)).abs() < 1e-12);
    }

    #[test]
    fn mask_zero_channel_and_clamp() {
        let m = compute_scaling_mask(&[0.0, 1e12], &[1.0, 1e-12], 0.5).unwrap();
        assert_eq!(m.values(), &[1.0, MASK_MAX]);
        assert!(compute_scaling_mask(&[1.0], &[1.0, 2.0], 0.5).is_err());
        assert!(compute_scaling_mask(&[1.0], &[1.0], 1.5).is_err());
        assert!(compute_scaling_mask(&[-1.0], &[1.0], 0.5).is_err());
    }

    #[test]
    fn scaling_identity_and_halving() {
        let x = randn(4, 4, 1);
        let w = randn(4, 4, 2);
        let ones = ScalingMask::new(vec![1.0; 4], 0.5).unwrap();
        let (x1, w1) = apply_scaling(&x, &w, &ones).unwrap();
        assert_eq!((x1, w1), (x.clone(), w.clone()));
        let twos = ScalingMask::new(vec![2.0; 4], 0.5).unwrap();
        let (x2, w2) = apply_scaling(&x, &w, &twos).unwrap();
        assert_eq!(x2, x.scale(0.5));
        assert_eq!(w2, w.scale(2.0));
        let before = x.matmul_t(&w).unwrap();
        let after = x2.matmul_t(&w2).unwrap();
        assert!(rel_dev(&after, &before) < 1e-12);
    }

    #[test]
    fn scaling_dimension_mismatch() {
        let mask = ScalingMask::new(vec![1.0; 3], 0.5).unwrap();
        assert!(apply_scaling(&randn(2, 4, 0), &randn(2, 4, 1), &mask).is_err());
    }

    #[test]
    fn hadamard_base_block() {
        let h = hadamard_matrix(2, false, 0).unwrap().to_dense();
        let k = 1.0 / 2f64.sqrt();
        assert_eq!(h.data(), &[k, k, k, -k]);
        assert!(hadamard_matrix(12, false, 0).is_err());
        assert!(hadamard_matrix(1, false, 0).is_err());
    }

    #[test]
    fn fwht_matches_dense() {
        for randomize in [false, true] {
            let r = hadamard_matrix(16, randomize, 7).unwrap();
            let x = randn(3, 16, 3);
            let fast = r.rotate(&x).unwrap();
            let dense = x.matmul(&r.to_dense()).unwrap();
            assert!(fast.sub(&dense).unwrap().max_abs() < 1e-12);
        }
    }

    #[test]
    fn spike_spreads_evenly() {
        let r = hadamard_matrix(16, false, 0).unwrap();
        let mut e = Matrix::zeros(1, 16);
        e.set(0, 0, 1.0);
        let out = r.rotate(&e).unwrap();
        assert!(out.data().iter().all(|v| (v.abs() - 0.25).abs() < 1e-15));
    }

    #[test]
    fn sylvester_rotation_is_involutive() {
        let r = hadamard_matrix(2, false, 0).unwrap();
        let x = randn(5, 2, 4);
        let back = r.rotate(&r.rotate(&x).unwrap()).unwrap();
        assert!(back.sub(&x).unwrap().max_abs() < 1e-6);
    }

    #[test]
    fn rotation_preserves_product() {
        let x = randn(8, 16, 5);
        let w = randn(4, 16, 6);
        let r = hadamard_matrix(16, true, 9).unwrap();
        let (xr, wr) = apply_rotation(&x, &w, &r).unwrap();
        assert!(rel_dev(&xr.matmul_t(&wr).unwrap(), &x.matmul_t(&w).unwrap()) <= 1e-5);
        assert!(apply_rotation(&randn(2, 8, 0), &w, &r).is_err());
    }

    #[test]
    fn rotation_lowers_outlier_incoherence() {
        let mut x = randn(1, 64, 11);
        x.set(0, 5, 100.0);
        let r = hadamard_matrix(64, true, 3).unwrap();
        let before = quant::incoherence(x.row(0)).unwrap();
        let after = quant::incoherence(r.rotate(&x).unwrap().row(0)).unwrap();
        assert!(after < before, "{after} !< {before}");
    }

    #[test]
    fn static_dynamic_flat_base_gives_flat_mask() {
        let base = Matrix::from_fn(8, 16, |r, c| if (r + c) % 2 == 0 { 1.0 } else { -1.0 });
        let w = Matrix::from_fn(4, 16, |r, c| if (r * c) % 3 == 0 { 0.5 } else { -0.5 });
        let t = static_dynamic_balance(&base, &w, 0.5, 1).unwrap();
        let s = t.mask.as_ref().unwrap().values();
        assert!(s.iter().all(|v| (v - s[0]).abs() < 1e-12));
        assert_eq!(t.kind(), BalanceKind::StaticDynamic);
    }

    #[test]
    fn static_dynamic_alpha_zero_uses_weight_only() {
        let base = randn(8, 16, 21);
        let w = randn(4, 16, 22);
        let t = static_dynamic_balance(&base, &w, 0.0, 5).unwrap();
        let wmax = w.col_absmax();
        for (s, m) in t.mask.as_ref().unwrap().values().iter().zip(&wmax) {
            assert!((s - 1.0 / m).abs() < 1e-12);
        }
        let x = randn(6, 16, 23);
        let (xb, wb) = t.apply(&x, &w).unwrap();
        assert!(rel_dev(&xb.matmul_t(&wb).unwrap(), &x.matmul_t(&w).unwrap()) <= 1e-5);
    }

    #[test]
    fn alpha_search_picks_from_grid() {
        let mut x = randn(32, 16, 30);
        for r in 0..32 {
            let v = x.get(r, 3) * 40.0;
            x.set(r, 3, v);
        }
        let w = randn(8, 16, 31);
        let obj = BalanceObjective {
            weight_bits: Bits::B4,
            act_bits: Bits::B8,
        };
        let (t, score) = search_alpha(&x, &x, &w, None, obj, &ALPHA_GRID).unwrap();
        let alpha = t.mask.as_ref().unwrap().alpha();
        assert!(ALPHA_GRID.contains(&alpha));
        let plain = obj.output_mse(&x, &w, &BalanceTransform::identity()).unwrap();
        for &a in &ALPHA_GRID {
            let cand = BalanceTransform {
                mask: Some(compute_scaling_mask(&x.col_absmax(), &w.col_absmax(), a).unwrap()),
                rotation: None,
            };
            assert!(score <= obj.output_mse(&x, &w, &cand).unwrap());
        }
        assert!(score.is_finite() && plain.is_finite());
    }
}
