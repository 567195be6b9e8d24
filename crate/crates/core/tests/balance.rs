use dtq_core::balance::*;
use dtq_core::quant::worst_row_incoherence;
use dtq_core::Matrix;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn randn(rows: usize, cols: usize, seed: u64) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Matrix::from_fn(rows, cols, |_, _| StandardNormal.sample(&mut rng))
}

fn rel_dev(a: &Matrix, b: &Matrix) -> f64 {
    a.sub(b).unwrap().max_abs() / b.max_abs()
}

fn outlier_input(rows: usize, cols: usize, seed: u64) -> Matrix {
    let mut x = randn(rows, cols, seed);
    let ch = (seed as usize).wrapping_mul(7) % cols;
    for r in 0..rows {
        x.row_mut(r)[ch] *= 100.0;
    }
    x
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn every_transform_preserves_product(seed in any::<u64>(), log_n in 4u32..8, alpha in 0.0f64..=1.0) {
        let n = 1usize << log_n;
        let x = outlier_input(12, n, seed);
        let w = randn(8, n, seed ^ 1);
        let reference = x.matmul_t(&w).unwrap();
        let mask = compute_scaling_mask(&x.col_absmax(), &w.col_absmax(), alpha).unwrap();
        let (xs, ws) = apply_scaling(&x, &w, &mask).unwrap();
        prop_assert!(rel_dev(&xs.matmul_t(&ws).unwrap(), &reference) < 1e-5);
        let h = hadamard_matrix(n, true, seed).unwrap();
        let (xr, wr) = apply_rotation(&x, &w, &h).unwrap();
        prop_assert!(rel_dev(&xr.matmul_t(&wr).unwrap(), &reference) < 1e-5);
        let t = static_dynamic_balance(&x, &w, alpha, seed).unwrap();
        let (xb, wb) = t.apply(&x, &w).unwrap();
        prop_assert!(rel_dev(&xb.matmul_t(&wb).unwrap(), &reference) < 1e-5);
    }

    #[test]
    fn fwht_twice_scales_by_n(v in prop::collection::vec(-5.0f64..5.0, 32)) {
        let mut u = v.clone();
        fwht(&mut u);
        fwht(&mut u);
        for (a, b) in u.iter().zip(&v) {
            prop_assert!((a / 32.0 - b).abs() < 1e-9);
        }
    }

    #[test]
    fn mask_entries_stay_clamped(act in prop::collection::vec(0.0f64..1e7, 8), alpha in 0.0f64..=1.0) {
        let m = compute_scaling_mask(&act, &[1e-7; 8], alpha).unwrap();
        prop_assert!(m.values().iter().all(|&s| (1e-5..=1e5).contains(&s)));
    }
}

#[test]
fn hadamard_orthonormal_up_to_1024() {
    for log_n in 1..=10 {
        let n = 1usize << log_n;
        let h = hadamard_matrix(n, true, log_n as u64).unwrap().to_dense();
        let g = h.matmul_t(&h).unwrap();
        for i in 0..n {
            for j in 0..n {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((g.get(i, j) - want).abs() < 1e-6, "n={n} ({i},{j})");
            }
        }
    }
}

#[test]
fn rotation_spreads_one_hot_exactly() {
    for n in [16usize, 64, 256] {
        let h = hadamard_matrix(n, true, 3).unwrap();
        for i in [0, n / 3, n - 1] {
            let mut e = Matrix::zeros(1, n);
            e.row_mut(0)[i] = 1.0;
            let r = h.rotate(&e).unwrap();
            for &v in r.row(0) {
                assert!((v.abs() - 1.0 / (n as f64).sqrt()).abs() < 1e-6);
            }
        }
    }
}

#[test]
fn rotation_usually_lowers_incoherence() {
    let mut better = 0;
    for seed in 0..200u64 {
        let x = outlier_input(8, 64, seed);
        let h = hadamard_matrix(64, true, seed).unwrap();
        if worst_row_incoherence(&h.rotate(&x).unwrap()) < worst_row_incoherence(&x) {
            better += 1;
        }
    }
    assert!(better >= 198, "{better}/200");
}

#[test]
fn rejects_non_power_of_two() {
    assert!(hadamard_matrix(24, false, 0).is_err());
    assert!(RotationMatrix::from_signs(8, Some(vec![1; 7])).is_err());
    assert!(RotationMatrix::from_signs(4, Some(vec![1, -1, 2, 1])).is_err());
}
