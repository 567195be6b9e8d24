//! Random trace archives and checkpoints for the serialization tests.

use dtq_core::balance::{BalanceTransform, RotationMatrix, ScalingMask};
use dtq_core::quant::{Bits, GroupingScheme, QuantMode, QuantParams, QuantizedTensor};
use dtq_core::toydit::{Condition, LayerId, LayerKind};
use dtq_core::trace_io::*;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

const BITS: [Bits; 4] = [Bits::B2, Bits::B4, Bits::B6, Bits::B8];

fn f32ish(v: f64) -> f64 {
    v as f32 as f64
}

pub fn random_archive(rng: &mut ChaCha8Rng) -> TraceArchive {
    let n = rng.random_range(0..6);
    let records = (0..n)
        .map(|i| {
            let (rows, cols) = (rng.random_range(1..9u32), rng.random_range(1..9u32));
            TraceRecord {
                layer: format!("blocks.{i}.ffn.fc{}", rng.random_range(1..3)),
                timestep: rng.random_range(0..20),
                condition: if rng.random() { Condition::Cond } else { Condition::Uncond },
                rows,
                cols,
                data: (0..rows * cols).map(|_| rng.random_range(-1e3f32..1e3)).collect(),
            }
        })
        .collect();
    TraceArchive {
        model_id: format!("{:016x}", rng.random::<u64>()),
        steps: 20,
        cfg: rng.random(),
        records,
    }
}

fn random_params(rng: &mut ChaCha8Rng, bits: Bits, symmetric: bool) -> QuantParams {
    let zp = if symmetric { bits.mid_code() } else { rng.random_range(0..=bits.qmax()) };
    QuantParams::new(f32ish(rng.random_range(1e-4..2.0)), zp, bits).unwrap()
}

fn random_layer(rng: &mut ChaCha8Rng, layer: LayerId, act_bits: Bits) -> CheckpointLayer {
    let rows = rng.random_range(1..10);
    let rotate = rng.random_bool(0.5);
    // Rotations need power-of-two widths; otherwise odd widths exercise the
    // partial trailing byte of 2- and 4-bit packing.
    let cols = if rotate { 1 << rng.random_range(1..5) } else { rng.random_range(1..12) };
    let mut range_bits = [(); 4].map(|_| *BITS.choose(rng).unwrap());
    range_bits.sort();
    range_bits.shuffle(rng);
    let bits = *range_bits.iter().max().unwrap();
    let symmetric = rng.random();
    let scheme = match rng.random_range(0..3) {
        0 => GroupingScheme::PerOutputChannel,
        1 => GroupingScheme::PerTensor,
        _ => GroupingScheme::PerGroup(1),
    };
    let params = (0..scheme.group_count(rows, cols))
        .map(|_| random_params(rng, bits, symmetric))
        .collect();
    let ints = (0..rows * cols).map(|_| rng.random_range(0..=bits.qmax()) as u8).collect();
    let tensor = QuantizedTensor::from_parts(rows, cols, ints, scheme, params, symmetric).unwrap();
    let mask = rng.random_bool(0.5).then(|| {
        let s = (0..cols).map(|_| f32ish(rng.random_range(0.01..50.0))).collect();
        ScalingMask::new(s, f32ish(rng.random_range(0.0..1.0))).unwrap()
    });
    let rotation = rotate.then(|| {
        let signs = rng
            .random_bool(0.7)
            .then(|| (0..cols).map(|_| if rng.random() { 1 } else { -1 }).collect());
        RotationMatrix::from_signs(cols, signs).unwrap()
    });
    let static_params = rng
        .random_bool(0.3)
        .then(|| (0..rng.random_range(1..4)).map(|_| random_params(rng, act_bits, false)).collect());
    CheckpointLayer {
        layer,
        rows,
        cols,
        range_bits,
        balance: BalanceTransform { mask, rotation },
        tensor,
        static_params,
    }
}

pub fn random_checkpoint(rng: &mut ChaCha8Rng) -> QuantCheckpoint {
    let act_bits = *BITS.choose(rng).unwrap();
    let mut ids: Vec<LayerId> = (0..2)
        .flat_map(|b| LayerKind::ALL.map(|k| LayerId::new(b, k)))
        .collect();
    ids.shuffle(rng);
    ids.truncate(rng.random_range(1..5));
    QuantCheckpoint {
        model_id: format!("{:016x}", rng.random::<u64>()),
        act_bits,
        act_scheme: *[GroupingScheme::PerTensor, GroupingScheme::PerToken].choose(rng).unwrap(),
        act_mode: if rng.random() { QuantMode::Static } else { QuantMode::Dynamic },
        integer_kernel: rng.random(),
        layers: ids.into_iter().map(|id| random_layer(rng, id, act_bits)).collect(),
    }
}

/// Layers whose packed codes end in a partial byte.
pub fn odd_packings(c: &QuantCheckpoint) -> usize {
    c.layers
        .iter()
        .filter(|l| matches!(l.tensor.bits(), Bits::B2 | Bits::B4 | Bits::B6) && (l.rows * l.cols) % 2 == 1)
        .count()
}
