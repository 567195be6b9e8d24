use dtq_core::quant::*;
use dtq_core::Matrix;
use proptest::prelude::*;

fn bits() -> impl Strategy<Value = Bits> {
    prop_oneof![Just(Bits::B2), Just(Bits::B4), Just(Bits::B6), Just(Bits::B8)]
}

fn matrix(max_rows: usize, max_cols: usize) -> impl Strategy<Value = Matrix> {
    (1..=max_rows, 1..=max_cols).prop_flat_map(|(r, c)| {
        prop::collection::vec(-100.0f64..100.0, r * c).prop_map(move |d| Matrix::new(r, c, d).unwrap())
    })
}

proptest! {
    #[test]
    fn minmax_error_within_half_step(x in matrix(6, 12), b in bits()) {
        for scheme in [GroupingScheme::PerTensor, GroupingScheme::PerToken, GroupingScheme::PerChannel] {
            let q = quantize(&x, scheme, b, QuantMode::Dynamic, None).unwrap();
            let rep = error_report(&x, &q).unwrap();
            prop_assert_eq!(rep.clamping_mse, 0.0);
            for r in 0..x.rows() {
                for c in 0..x.cols() {
                    let p = q.params_at(r, c);
                    let err = (x.get(r, c) - p.dequantize_value(q.code(r, c))).abs();
                    prop_assert!(err <= p.scale / 2.0 * (1.0 + 1e-9) + 1e-12, "{err} > {}", p.scale / 2.0);
                }
            }
        }
    }

    #[test]
    fn fake_quant_is_idempotent(x in matrix(4, 8), b in bits()) {
        let params = minmax_params(&x, GroupingScheme::PerToken, b).unwrap();
        let once = fake_quantize(&x, GroupingScheme::PerToken, b, QuantMode::Static, Some(&params)).unwrap();
        let twice = fake_quantize(&once, GroupingScheme::PerToken, b, QuantMode::Static, Some(&params)).unwrap();
        prop_assert_eq!(once, twice);
    }

    #[test]
    fn codes_monotone_in_input(v in prop::collection::vec(-50.0f64..50.0, 2..40), b in bits()) {
        let p = compute_minmax_params(&v, b).unwrap();
        let mut sorted = v.clone();
        sorted.sort_by(f64::total_cmp);
        let codes: Vec<u8> = sorted.iter().map(|&x| p.quantize_value(x)).collect();
        prop_assert!(codes.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn per_token_ranges_refine_static_tensor(x in matrix(6, 16), b in bits()) {
        let stat = calibrate_params(&[&x], GroupingScheme::PerTensor, b).unwrap();
        let dynp = minmax_params(&x, GroupingScheme::PerToken, b).unwrap();
        let qd = quantize(&x, GroupingScheme::PerToken, b, QuantMode::Dynamic, None).unwrap();
        let ed = error_report(&x, &qd).unwrap();
        for p in &dynp {
            prop_assert!(p.scale <= stat[0].scale * (1.0 + 1e-12) || p.scale == 1.0);
        }
        prop_assert!(ed.max_abs_err <= stat[0].scale / 2.0 * (1.0 + 1e-9) + 1e-12);
    }

    #[test]
    fn symmetric_weights_round_trip_parts(x in matrix(5, 9), b in bits()) {
        let q = quantize_symmetric(&x, GroupingScheme::PerOutputChannel, b).unwrap();
        let back = QuantizedTensor::from_parts(
            q.rows(), q.cols(), q.ints().to_vec(), q.scheme(), q.params().to_vec(), q.symmetric(),
        ).unwrap();
        prop_assert_eq!(&back, &q);
        prop_assert!(q.ints().iter().all(|&c| (c as i32) <= b.qmax()));
    }

    #[test]
    fn incoherence_bounds(v in prop::collection::vec(-10.0f64..10.0, 1..64)) {
        prop_assume!(v.iter().any(|x| *x != 0.0));
        let mu = incoherence(&v).unwrap();
        prop_assert!(mu >= 1.0 - 1e-12 && mu <= (v.len() as f64).sqrt() + 1e-12);
    }
}

#[test]
fn grid_points_are_fixed_points() {
    let b = Bits::B4;
    let p = QuantParams::new(0.25, 3, b).unwrap();
    for code in 0..=b.qmax() as u8 {
        let v = p.dequantize_value(code);
        assert_eq!(p.quantize_value(v), code);
        assert_eq!(p.fake_quantize_value(v), v);
    }
}

#[test]
fn static_params_clip_out_of_range_values() {
    let calib = Matrix::from_rows(&[vec![-1.0, 1.0]]).unwrap();
    let p = calibrate_params(&[&calib], GroupingScheme::PerTensor, Bits::B8).unwrap();
    let x = Matrix::from_rows(&[vec![-4.0, 4.0]]).unwrap();
    let q = quantize(&x, GroupingScheme::PerTensor, Bits::B8, QuantMode::Static, Some(&p)).unwrap();
    let rep = error_report(&x, &q).unwrap();
    assert!(rep.clamping_mse > 8.0);
    assert!(rep.rounding_mse < 1e-3);
}

#[test]
fn per_group_counts() {
    let s = GroupingScheme::PerGroup(4);
    assert_eq!(s.group_count(3, 8), 6);
    assert_eq!(s.group_of(1, 5, 8), 3);
    assert!(s.validate(3, 6).is_err());
}
