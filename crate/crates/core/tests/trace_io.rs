mod common;

use dtq_core::error::DtqError;
use dtq_core::qgemm::{checkpoint_bytes, LayerFootprint};
use dtq_core::quant::Bits;
use dtq_core::toydit::*;
use dtq_core::trace_io::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn randomized_round_trips_are_byte_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut odd_packings = 0;
    for _ in 0..500 {
        let a = common::random_archive(&mut rng);
        let bytes = a.encode().unwrap();
        let back = TraceArchive::decode(&bytes).unwrap();
        assert_eq!(back, a);
        assert_eq!(back.encode().unwrap(), bytes);

        let c = common::random_checkpoint(&mut rng);
        odd_packings += common::odd_packings(&c);
        let bytes = c.encode().unwrap();
        let back = QuantCheckpoint::decode(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.encode().unwrap(), bytes);
    }
    assert!(odd_packings > 50, "{odd_packings}");
}

#[test]
fn default_run_archive_round_trips_through_a_file() {
    let m = build_from_config(&ToyConfig::default()).unwrap();
    let o = RunOptions {
        record_traces: true,
        ..RunOptions::default()
    };
    let traces = run_denoise(&m, &o, None).unwrap().traces;
    let a = TraceArchive::from_traces(model_id(&m), o.steps, &traces).unwrap();
    assert_eq!(a.manifest().entries.len(), 640);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("traces.dtq");
    a.write(&path).unwrap();
    let back = TraceArchive::read(&path).unwrap();
    assert_eq!(back, a);
    let restored = back.to_traces().unwrap();
    for (t, r) in traces.iter().zip(&restored) {
        assert_eq!((t.layer, t.timestep, t.condition), (r.layer, r.timestep, r.condition));
        let err = t.x.sub(&r.x).unwrap().max_abs();
        assert!(err <= t.x.max_abs() * 1e-7, "{err}");
    }
}

#[test]
fn checkpoint_serves_the_same_model() {
    let m = build_toy_model(16, 4, 2, 5).unwrap();
    let o = RunOptions {
        steps: 8,
        ..RunOptions::default()
    };
    let data = CalibrationData::capture(&m, &o).unwrap();
    let mut q = calibrated_config(&m, &data, &AblationStep::StaticDynamic.spec(Bits::B8, Bits::B8)).unwrap();
    let low = LayerId::new(0, LayerKind::Ffn2);
    for r in 0..2 {
        q.precision.set(low, r, Some(Bits::B4));
    }
    let ckpt = QuantCheckpoint::build(&m, &q).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    ckpt.write(&path).unwrap();
    let back = QuantCheckpoint::read(&path).unwrap();
    assert_eq!(back, ckpt);
    assert_eq!(back.payload(), checkpoint_bytes(&back.footprints()));
    let layer = back.layers.iter().find(|l| l.layer == low).unwrap();
    assert_eq!(layer.stored_bits(), Bits::B8);
    assert_eq!(layer.weights_at(Bits::B4).unwrap().bits(), Bits::B4);
    assert!(layer.weights_at(Bits::B8).is_ok());

    let loaded = back.to_quant_config(&m).unwrap();
    let fp = run_denoise(&m, &o, None).unwrap();
    let direct = run_denoise(&m, &o, Some(&q)).unwrap();
    let served = run_denoise(&m, &o, Some(&loaded)).unwrap();
    let e_direct = dtq_core::matrix::mse(direct.final_output(), fp.final_output()).unwrap();
    let e_served = dtq_core::matrix::mse(served.final_output(), fp.final_output()).unwrap();
    // Narrow ranges are requantized from the stored 8-bit codes, so only
    // the quality bound carries over.
    assert!(e_served < 2.0 * e_direct, "{e_served} vs {e_direct}");

    // Without requantization only f32 rounding separates the two paths.
    for r in 0..2 {
        q.precision.set(low, r, Some(Bits::B8));
    }
    let loaded = QuantCheckpoint::build(&m, &q).unwrap().to_quant_config(&m).unwrap();
    let direct = run_denoise(&m, &o, Some(&q)).unwrap();
    let served = run_denoise(&m, &o, Some(&loaded)).unwrap();
    let gap = dtq_core::matrix::mse(served.final_output(), direct.final_output()).unwrap();
    let e8 = dtq_core::matrix::mse(direct.final_output(), fp.final_output()).unwrap();
    assert!(gap < 0.1 * e8, "{gap} vs {e8}");

    let other = build_toy_model(16, 4, 2, 6).unwrap();
    assert!(back.to_quant_config(&other).is_err());
}

#[test]
fn uniform_weight_ratios() {
    let layers = |b| vec![LayerFootprint::weights(64, 64, b); 16];
    let fp16 = 16 * 64 * 64 * 2;
    assert_eq!(checkpoint_bytes(&layers(Bits::B8)).weights as f64 / fp16 as f64, 0.5);
    assert_eq!(checkpoint_bytes(&layers(Bits::B4)).weights as f64 / fp16 as f64, 0.25);
}

#[test]
fn foreign_files_are_rejected() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let c = common::random_checkpoint(&mut rng);
    let bytes = c.encode().unwrap();
    let mut bad = bytes.clone();
    bad[0] ^= 0xff;
    assert!(matches!(QuantCheckpoint::decode(&bad), Err(DtqError::BadMagic { .. })));
    let mut bad = bytes.clone();
    bad[8] = 0x7f;
    assert!(matches!(QuantCheckpoint::decode(&bad), Err(DtqError::Version { .. })));
    assert!(matches!(
        QuantCheckpoint::decode(&bytes[..bytes.len() - 3]),
        Err(DtqError::Truncated { .. })
    ));
    assert!(TraceArchive::decode(&bytes).is_err());

    let a = common::random_archive(&mut rng).encode().unwrap();
    assert!(QuantCheckpoint::decode(&a).is_err());
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(
        TraceArchive::read(&dir.path().join("missing")),
        Err(DtqError::Io { .. })
    ));
}
