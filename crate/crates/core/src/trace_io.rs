//! On-disk formats: activation trace archives, quantized checkpoints, and
//! JSON helpers for plans and reports.
//!
//! Every multi-byte integer and float is little-endian.
//!
//! Trace archive:
//!
//! ```text
//! u64            manifest length N
//! [u8; N]        manifest JSON (TraceManifest)
//! chunk*         one per manifest entry, same order
//!   [u8; 8]      "DTQTRACE"
//!   u16          chunk version
//!   u32 rows, u32 cols, u32 timestep
//!   u8           condition, 0 = cond, 1 = uncond
//!   u64          FNV-1a hash of the layer name
//!   u8           reserved, zero
//!   f32[rows*cols] row-major payload
//! ```
//!
//! Quantized checkpoint:
//!
//! ```text
//! [u8; 8]        "DTQCKPT\0"
//! u16            version
//! u64 N, [u8; N] header JSON (CheckpointHeader)
//! layer record*  header.layers of them
//!   u16 len, [u8; len] layer name
//!   u32 rows, u32 cols
//!   u8[4]        weight bits for each timestep range
//!   u8           flags: 1 mask, 2 rotation, 4 random rotation signs, 8 static act params
//!   mask:        f32 alpha, f32[cols]
//!   rotation:    u8[ceil(cols/8)] sign bits, LSB-first, set bit = -1
//!   weights:     u8 bits, u8 scheme, u32 group size, u8 symmetric, u32 groups G,
//!                f32[G] scales, u8[G] zero points (asymmetric only),
//!                u8[ceil(rows*cols*bits/8)] codes packed LSB-first
//!                (bits is the widest of the four range bit-widths)
//!   static act:  u8 bits, u32 G, f32[G] scales, u8[G] zero points
//! ```

use std::collections::BTreeSet;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::balance::{BalanceTransform, RotationMatrix, ScalingMask};
use crate::error::{DtqError, Result};
use crate::hash::Fnv64;
use crate::matrix::Matrix;
use crate::qgemm::{fp16_weight_bytes, packed_len, LayerFootprint, PayloadBytes};
use crate::quant::{self, Bits, GroupingScheme, QuantMode, QuantParams, QuantizedTensor};
use crate::toydit::{ActivationTrace, Condition, LayerId, QuantConfig, ToyModel};

pub const TRACE_MAGIC: &[u8; 8] = b"DTQTRACE";
pub const TRACE_VERSION: u16 = 1;
pub const TRACE_MANIFEST_VERSION: u32 = 1;
pub const CHUNK_HEADER_LEN: usize = 32;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"DTQCKPT\0";
pub const CHECKPOINT_VERSION: u16 = 1;

const FLAG_MASK: u8 = 1;
const FLAG_ROTATION: u8 = 2;
const FLAG_RANDOM_SIGNS: u8 = 4;
const FLAG_STATIC: u8 = 8;

/// Hex model identifier used by archives and checkpoints.
pub fn model_id(model: &ToyModel) -> String {
    format!("{:016x}", model.fingerprint())
}

pub fn layer_hash(name: &str) -> u64 {
    let mut h = Fnv64::new();
    h.write(name.as_bytes());
    h.finish()
}

// ---------------------------------------------------------------------------
// bit packing

/// Packs codes of `bits` bits each, LSB-first, into `ceil(n·bits/8)` bytes.
pub fn pack_codes(codes: &[u8], bits: u32) -> Result<Vec<u8>> {
    check_pack_bits(bits)?;
    let limit = 1u16 << bits;
    let mut out = vec![0u8; (codes.len() * bits as usize).div_ceil(8)];
    for (i, &c) in codes.iter().enumerate() {
        if c as u16 >= limit {
            return Err(DtqError::invalid(format!("code {c} at {i} does not fit in {bits} bits")));
        }
        let bit = i * bits as usize;
        let (byte, shift) = (bit / 8, bit % 8);
        let v = (c as u16) << shift;
        out[byte] |= v as u8;
        if shift + bits as usize > 8 {
            out[byte + 1] |= (v >> 8) as u8;
        }
    }
    Ok(out)
}

/// Inverse of [`pack_codes`]. The buffer must be exactly the packed length
/// and its padding bits must be zero.
pub fn unpack_codes(packed: &[u8], bits: u32, count: usize) -> Result<Vec<u8>> {
    check_pack_bits(bits)?;
    let total_bits = count * bits as usize;
    let expected = total_bits.div_ceil(8);
    if packed.len() != expected {
        return Err(DtqError::Packing {
            count,
            bits,
            expected,
            found: packed.len(),
        });
    }
    let mask = ((1u16 << bits) - 1) as u16;
    let codes = (0..count)
        .map(|i| {
            let bit = i * bits as usize;
            let (byte, shift) = (bit / 8, bit % 8);
            let mut v = packed[byte] as u16;
            if shift + bits as usize > 8 {
                v |= (packed[byte + 1] as u16) << 8;
            }
            ((v >> shift) & mask) as u8
        })
        .collect();
    let used = total_bits % 8;
    if used != 0 && packed[expected - 1] >> used != 0 {
        return Err(DtqError::Format("nonzero padding bits after packed codes".into()));
    }
    Ok(codes)
}

fn check_pack_bits(bits: u32) -> Result<()> {
    if (1..=8).contains(&bits) {
        Ok(())
    } else {
        Err(DtqError::invalid(format!("cannot pack {bits}-bit codes")))
    }
}

// ---------------------------------------------------------------------------
// byte cursor

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if n > self.remaining() {
            return Err(DtqError::Truncated {
                what: what.to_string(),
                needed: n,
                available: self.remaining(),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        let bytes = self.take(checked_mul(n, 4, what)?, what)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn len_prefixed_json<T: DeserializeOwned>(&mut self, what: &str) -> Result<T> {
        let n = self.u64(what)?;
        let n = usize::try_from(n).map_err(|_| DtqError::Format(format!("{what} length {n} too large")))?;
        Ok(serde_json::from_slice(self.take(n, what)?)?)
    }

    fn finish(&self, what: &str) -> Result<()> {
        if self.remaining() != 0 {
            return Err(DtqError::Format(format!(
                "{} trailing bytes after the last {what}",
                self.remaining()
            )));
        }
        Ok(())
    }
}

fn checked_mul(a: usize, b: usize, what: &str) -> Result<usize> {
    a.checked_mul(b)
        .ok_or_else(|| DtqError::Format(format!("{what} size overflows")))
}

fn put_f32s(out: &mut Vec<u8>, vals: impl IntoIterator<Item = f32>) {
    for v in vals {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn put_json<T: Serialize>(out: &mut Vec<u8>, v: &T) -> Result<()> {
    let json = serde_json::to_vec(v)?;
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    Ok(())
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| DtqError::io(path, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| DtqError::io(path, e))
}

fn to_f32(v: f64, what: &str) -> Result<f32> {
    let f = v as f32;
    if f.is_finite() {
        Ok(f)
    } else {
        Err(DtqError::Format(format!("{what} value {v} does not fit in f32")))
    }
}

// ---------------------------------------------------------------------------
// trace archive

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceManifest {
    pub format_version: u32,
    pub endianness: String,
    pub model_id: String,
    pub steps: u32,
    /// Whether traces include the unconditional branch.
    pub cfg: bool,
    pub entries: Vec<ManifestEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub layer: String,
    pub rows: u32,
    pub cols: u32,
    pub timestep: u32,
    pub condition: Condition,
}

/// One activation matrix as stored in an archive.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRecord {
    pub layer: String,
    pub timestep: u32,
    pub condition: Condition,
    pub rows: u32,
    pub cols: u32,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceArchive {
    pub model_id: String,
    pub steps: u32,
    pub cfg: bool,
    pub records: Vec<TraceRecord>,
}

fn condition_code(c: Condition) -> u8 {
    match c {
        Condition::Cond => 0,
        Condition::Uncond => 1,
    }
}

impl TraceArchive {
    pub fn from_traces(model_id: String, steps: usize, traces: &[ActivationTrace]) -> Result<Self> {
        let records = traces
            .iter()
            .map(|t| {
                let data = t
                    .x
                    .data()
                    .iter()
                    .map(|&v| to_f32(v, "activation"))
                    .collect::<Result<Vec<_>>>()?;
                Ok(TraceRecord {
                    layer: t.layer.name(),
                    timestep: t.timestep as u32,
                    condition: t.condition,
                    rows: t.x.rows() as u32,
                    cols: t.x.cols() as u32,
                    data,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            model_id,
            steps: steps as u32,
            cfg: traces.iter().any(|t| t.condition == Condition::Uncond),
            records,
        })
    }

    /// Converts back to in-memory traces. Layer names must be toy-model names.
    pub fn to_traces(&self) -> Result<Vec<ActivationTrace>> {
        self.records
            .iter()
            .map(|r| {
                let data = r.data.iter().map(|&v| v as f64).collect();
                Ok(ActivationTrace {
                    layer: r.layer.parse::<LayerId>()?,
                    timestep: r.timestep as usize,
                    condition: r.condition,
                    x: Matrix::new(r.rows as usize, r.cols as usize, data)?,
                })
            })
            .collect()
    }

    pub fn manifest(&self) -> TraceManifest {
        TraceManifest {
            format_version: TRACE_MANIFEST_VERSION,
            endianness: "little".into(),
            model_id: self.model_id.clone(),
            steps: self.steps,
            cfg: self.cfg,
            entries: self
                .records
                .iter()
                .map(|r| ManifestEntry {
                    layer: r.layer.clone(),
                    rows: r.rows,
                    cols: r.cols,
                    timestep: r.timestep,
                    condition: r.condition,
                })
                .collect(),
        }
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        put_json(&mut out, &self.manifest())?;
        for r in &self.records {
            if r.data.len() != r.rows as usize * r.cols as usize {
                return Err(DtqError::shape(format!(
                    "trace {} holds {} values for {}x{}",
                    r.layer,
                    r.data.len(),
                    r.rows,
                    r.cols
                )));
            }
            out.extend_from_slice(TRACE_MAGIC);
            out.extend_from_slice(&TRACE_VERSION.to_le_bytes());
            out.extend_from_slice(&r.rows.to_le_bytes());
            out.extend_from_slice(&r.cols.to_le_bytes());
            out.extend_from_slice(&r.timestep.to_le_bytes());
            out.push(condition_code(r.condition));
            out.extend_from_slice(&layer_hash(&r.layer).to_le_bytes());
            out.push(0);
            put_f32s(&mut out, r.data.iter().copied());
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut rd = Reader::new(bytes);
        let manifest: TraceManifest = rd.len_prefixed_json("trace manifest")?;
        if manifest.format_version != TRACE_MANIFEST_VERSION {
            return Err(DtqError::Version {
                what: "trace manifest",
                found: manifest.format_version,
                supported: TRACE_MANIFEST_VERSION,
            });
        }
        if manifest.endianness != "little" {
            return Err(DtqError::Format(format!(
                "unsupported endianness {:?}",
                manifest.endianness
            )));
        }
        let mut records = Vec::with_capacity(manifest.entries.len());
        for (i, e) in manifest.entries.iter().enumerate() {
            let what = format!("trace chunk {i} ({})", e.layer);
            let magic = rd.take(8, &what)?;
            if magic != TRACE_MAGIC {
                return Err(DtqError::BadMagic {
                    what: "trace chunk",
                    expected: String::from_utf8_lossy(TRACE_MAGIC).into_owned(),
                    found: String::from_utf8_lossy(magic).into_owned(),
                });
            }
            let version = rd.u16(&what)?;
            if version != TRACE_VERSION {
                return Err(DtqError::Version {
                    what: "trace chunk",
                    found: version as u32,
                    supported: TRACE_VERSION as u32,
                });
            }
            let (rows, cols, timestep) = (rd.u32(&what)?, rd.u32(&what)?, rd.u32(&what)?);
            let cond = rd.u8(&what)?;
            let hash = rd.u64(&what)?;
            let pad = rd.u8(&what)?;
            if (rows, cols) != (e.rows, e.cols) {
                return Err(DtqError::shape(format!(
                    "{what}: header says {rows}x{cols}, manifest says {}x{}",
                    e.rows, e.cols
                )));
            }
            if timestep != e.timestep || cond != condition_code(e.condition) || hash != layer_hash(&e.layer) {
                return Err(DtqError::Format(format!("{what}: chunk header disagrees with manifest")));
            }
            if pad != 0 {
                return Err(DtqError::Format(format!("{what}: reserved byte is {pad}")));
            }
            let n = checked_mul(rows as usize, cols as usize, &what)?;
            let data = rd.f32s(n, &what)?;
            records.push(TraceRecord {
                layer: e.layer.clone(),
                timestep,
                condition: e.condition,
                rows,
                cols,
                data,
            });
        }
        rd.finish("trace chunk")?;
        Ok(Self {
            model_id: manifest.model_id,
            steps: manifest.steps,
            cfg: manifest.cfg,
            records,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_file(path, &self.encode()?)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::decode(&read_file(path)?)
    }
}

// ---------------------------------------------------------------------------
// quantized checkpoint

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub model_id: String,
    pub act_bits: Bits,
    pub act_scheme: GroupingScheme,
    pub act_mode: QuantMode,
    pub integer_kernel: bool,
    pub layers: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointLayer {
    pub layer: LayerId,
    pub rows: usize,
    pub cols: usize,
    pub range_bits: [Bits; 4],
    pub balance: BalanceTransform,
    /// Weights at the widest bit-width in `range_bits`. Narrower ranges
    /// requantize these codes at load time.
    pub tensor: QuantizedTensor,
    pub static_params: Option<Vec<QuantParams>>,
}

impl CheckpointLayer {
    pub fn stored_bits(&self) -> Bits {
        self.range_bits.iter().copied().max().unwrap()
    }

    /// Weights for one bit-width. The stored width comes back as is; a
    /// narrower one is requantized from the dequantized stored weights.
    pub fn weights_at(&self, bits: Bits) -> Result<QuantizedTensor> {
        if bits == self.tensor.bits() {
            return Ok(self.tensor.clone());
        }
        if bits > self.tensor.bits() {
            return Err(DtqError::invalid(format!(
                "{}: {bits}-bit weights requested from a {}-bit checkpoint",
                self.layer,
                self.tensor.bits()
            )));
        }
        quant::quantize_symmetric(&quant::dequantize(&self.tensor), GroupingScheme::PerOutputChannel, bits)
    }

    pub fn footprint(&self) -> LayerFootprint {
        LayerFootprint {
            c_out: self.rows,
            c_in: self.cols,
            bits: self.tensor.bits(),
            groups: self.tensor.params().len(),
            symmetric: self.tensor.symmetric(),
            has_mask: self.balance.mask.is_some(),
            has_rotation: self.balance.rotation.is_some(),
        }
    }

    fn validate(&self) -> Result<()> {
        let name = self.layer;
        if self.tensor.bits() != self.stored_bits() {
            return Err(DtqError::Format(format!(
                "{name}: stored {}-bit weights for range bits {:?}",
                self.tensor.bits(),
                self.range_bits
            )));
        }
        if self.tensor.shape() != (self.rows, self.cols) {
            return Err(DtqError::shape(format!(
                "{name}: tensor is {:?}, layer is {}x{}",
                self.tensor.shape(),
                self.rows,
                self.cols
            )));
        }
        if let Some(m) = &self.balance.mask {
            if m.len() != self.cols {
                return Err(DtqError::shape(format!("{name}: mask of {} on {} channels", m.len(), self.cols)));
            }
        }
        if let Some(r) = &self.balance.rotation {
            if r.n() != self.cols {
                return Err(DtqError::shape(format!("{name}: rotation of {} on {} channels", r.n(), self.cols)));
            }
        }
        Ok(())
    }
}

/// A quantized model: every linear layer's packed weights, balancing
/// transform and optional frozen activation parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantCheckpoint {
    pub model_id: String,
    pub act_bits: Bits,
    pub act_scheme: GroupingScheme,
    pub act_mode: QuantMode,
    pub integer_kernel: bool,
    pub layers: Vec<CheckpointLayer>,
}

/// Size of a checkpoint next to the FP16 baseline of the same weights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MemoryReport {
    pub payload: PayloadBytes,
    pub serialized_bytes: usize,
    pub fp16_bytes: usize,
    /// Packed weight codes only.
    pub weight_ratio: f64,
    /// Whole serialized file, headers and JSON included.
    pub file_ratio: f64,
}

fn round_params(p: &[QuantParams]) -> Result<Vec<QuantParams>> {
    p.iter()
        .map(|p| QuantParams::new(to_f32(p.scale, "scale")? as f64, p.zero_point, p.bits))
        .collect()
}

impl QuantCheckpoint {
    /// Quantizes every layer the config touches. Each (layer, range) cell
    /// must be quantized. A layer's weights are balanced, then quantized
    /// once, symmetric per output channel at its widest bit-width, with
    /// scales rounded to f32.
    pub fn build(model: &ToyModel, cfg: &QuantConfig) -> Result<Self> {
        cfg.validate(model)?;
        let mut layers = Vec::new();
        for id in model.config.layer_ids() {
            let bits: Vec<Option<Bits>> = (0..4).map(|r| cfg.precision.weight_bits(id, r)).collect();
            if bits.iter().all(Option::is_none) {
                continue;
            }
            let range_bits: [Bits; 4] = bits
                .iter()
                .map(|b| b.ok_or_else(|| DtqError::invalid(format!("{id} is left in floating point for some ranges"))))
                .collect::<Result<Vec<_>>>()?
                .try_into()
                .unwrap();
            let state = cfg.layers.get(&id);
            let balance = match state.map(|s| &s.balance) {
                Some(b) => BalanceTransform {
                    mask: b
                        .mask
                        .as_ref()
                        .map(|m| {
                            let s = m.values().iter().map(|&v| Ok(to_f32(v, "mask")? as f64)).collect::<Result<_>>()?;
                            ScalingMask::new(s, m.alpha() as f32 as f64)
                        })
                        .transpose()?,
                    rotation: b.rotation.clone(),
                },
                None => BalanceTransform::identity(),
            };
            let w = model.weight(id);
            let wb = if balance.is_identity() { w.clone() } else { balance.apply_weight(w)? };
            let widest = range_bits.iter().copied().max().unwrap();
            let q = quant::quantize_symmetric(&wb, GroupingScheme::PerOutputChannel, widest)?;
            let params = round_params(q.params())?;
            let tensor = quant::quantize_with_params(&wb, GroupingScheme::PerOutputChannel, &params, true)?;
            let static_params = match state.and_then(|s| s.static_params.as_deref()) {
                Some(p) if cfg.act_mode == QuantMode::Static => Some(round_params(p)?),
                _ => None,
            };
            layers.push(CheckpointLayer {
                layer: id,
                rows: w.rows(),
                cols: w.cols(),
                range_bits,
                balance,
                tensor,
                static_params,
            });
        }
        if layers.is_empty() {
            return Err(DtqError::invalid("quant config leaves every layer in floating point"));
        }
        Ok(Self {
            model_id: model_id(model),
            act_bits: cfg.act_bits,
            act_scheme: cfg.act_scheme,
            act_mode: cfg.act_mode,
            integer_kernel: cfg.integer_kernel,
            layers,
        })
    }

    /// Config that runs the model from the stored tensors.
    pub fn to_quant_config(&self, model: &ToyModel) -> Result<QuantConfig> {
        let id = model_id(model);
        if id != self.model_id {
            return Err(DtqError::Format(format!(
                "checkpoint was built for model {}, not {id}",
                self.model_id
            )));
        }
        let mut cfg = QuantConfig::passthrough();
        cfg.act_bits = self.act_bits;
        cfg.act_scheme = self.act_scheme;
        cfg.act_mode = self.act_mode;
        cfg.integer_kernel = self.integer_kernel;
        for l in &self.layers {
            let w = model.weight(l.layer);
            if w.shape() != (l.rows, l.cols) {
                return Err(DtqError::shape(format!(
                    "{}: checkpoint holds {}x{}, model has {:?}",
                    l.layer,
                    l.rows,
                    l.cols,
                    w.shape()
                )));
            }
            for (r, &b) in l.range_bits.iter().enumerate() {
                cfg.precision.set(l.layer, r, Some(b));
            }
            cfg.layers.insert(
                l.layer,
                crate::toydit::LayerQuantState {
                    balance: l.balance.clone(),
                    static_params: l.static_params.clone(),
                },
            );
            for &b in l.range_bits.iter().collect::<BTreeSet<_>>() {
                cfg.prequantized.insert((l.layer, b), l.weights_at(b)?);
            }
        }
        cfg.validate(model)?;
        Ok(cfg)
    }

    pub fn footprints(&self) -> Vec<LayerFootprint> {
        self.layers.iter().map(CheckpointLayer::footprint).collect()
    }

    /// Payload bytes of the stored weights and balance data, excluding
    /// record headers, names and static activation parameters.
    pub fn payload(&self) -> PayloadBytes {
        crate::qgemm::checkpoint_bytes(&self.footprints())
    }

    /// FP16 bytes for one copy of every stored layer's weights.
    pub fn fp16_bytes(&self) -> usize {
        let fp: Vec<LayerFootprint> = self
            .layers
            .iter()
            .map(|l| LayerFootprint::weights(l.rows, l.cols, Bits::B8))
            .collect();
        fp16_weight_bytes(&fp)
    }

    pub fn memory_report(&self) -> Result<MemoryReport> {
        let payload = self.payload();
        let serialized_bytes = self.encode()?.len();
        let fp16_bytes = self.fp16_bytes();
        Ok(MemoryReport {
            payload,
            serialized_bytes,
            fp16_bytes,
            weight_ratio: payload.weights as f64 / fp16_bytes as f64,
            file_ratio: serialized_bytes as f64 / fp16_bytes as f64,
        })
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        put_json(
            &mut out,
            &CheckpointHeader {
                model_id: self.model_id.clone(),
                act_bits: self.act_bits,
                act_scheme: self.act_scheme,
                act_mode: self.act_mode,
                integer_kernel: self.integer_kernel,
                layers: self.layers.len() as u32,
            },
        )?;
        for l in &self.layers {
            l.validate()?;
            encode_layer(&mut out, l)?;
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut rd = Reader::new(bytes);
        let magic = rd.take(8, "checkpoint magic")?;
        if magic != CHECKPOINT_MAGIC {
            return Err(DtqError::BadMagic {
                what: "checkpoint",
                expected: String::from_utf8_lossy(CHECKPOINT_MAGIC).into_owned(),
                found: String::from_utf8_lossy(magic).into_owned(),
            });
        }
        let version = rd.u16("checkpoint version")?;
        if version != CHECKPOINT_VERSION {
            return Err(DtqError::Version {
                what: "checkpoint",
                found: version as u32,
                supported: CHECKPOINT_VERSION as u32,
            });
        }
        let header: CheckpointHeader = rd.len_prefixed_json("checkpoint header")?;
        let mut layers: Vec<CheckpointLayer> = Vec::new();
        let mut seen = BTreeSet::new();
        for i in 0..header.layers {
            let l = decode_layer(&mut rd, i)?;
            if !seen.insert(l.layer) {
                return Err(DtqError::Format(format!("layer {} stored twice", l.layer)));
            }
            layers.push(l);
        }
        rd.finish("layer record")?;
        Ok(Self {
            model_id: header.model_id,
            act_bits: header.act_bits,
            act_scheme: header.act_scheme,
            act_mode: header.act_mode,
            integer_kernel: header.integer_kernel,
            layers,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_file(path, &self.encode()?)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::decode(&read_file(path)?)
    }
}

fn scheme_tag(s: GroupingScheme) -> (u8, u32) {
    match s {
        GroupingScheme::PerTensor => (0, 0),
        GroupingScheme::PerToken => (1, 0),
        GroupingScheme::PerChannel => (2, 0),
        GroupingScheme::PerOutputChannel => (3, 0),
        GroupingScheme::PerGroup(g) => (4, g as u32),
    }
}

fn scheme_from_tag(tag: u8, group: u32) -> Result<GroupingScheme> {
    Ok(match tag {
        0 => GroupingScheme::PerTensor,
        1 => GroupingScheme::PerToken,
        2 => GroupingScheme::PerChannel,
        3 => GroupingScheme::PerOutputChannel,
        4 => GroupingScheme::PerGroup(group as usize),
        t => return Err(DtqError::Format(format!("unknown grouping scheme tag {t}"))),
    })
}

fn encode_layer(out: &mut Vec<u8>, l: &CheckpointLayer) -> Result<()> {
    let name = l.layer.name();
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.extend_from_slice(&(l.rows as u32).to_le_bytes());
    out.extend_from_slice(&(l.cols as u32).to_le_bytes());
    out.extend(l.range_bits.iter().map(|b| b.get() as u8));
    let random_signs = l.balance.rotation.as_ref().is_some_and(|r| r.signs().is_some());
    let flags = (l.balance.mask.is_some() as u8 * FLAG_MASK)
        | (l.balance.rotation.is_some() as u8 * FLAG_ROTATION)
        | (random_signs as u8 * FLAG_RANDOM_SIGNS)
        | (l.static_params.is_some() as u8 * FLAG_STATIC);
    out.push(flags);
    if let Some(m) = &l.balance.mask {
        put_f32s(out, std::iter::once(m.alpha() as f32));
        put_f32s(out, m.values().iter().map(|&v| v as f32));
    }
    if let Some(r) = &l.balance.rotation {
        let bits: Vec<u8> = match r.signs() {
            Some(s) => s.iter().map(|&v| (v < 0) as u8).collect(),
            None => vec![0; r.n()],
        };
        out.extend(pack_codes(&bits, 1)?);
    }
    {
        let t = &l.tensor;
        let (tag, group) = scheme_tag(t.scheme());
        out.push(t.bits().get() as u8);
        out.push(tag);
        out.extend_from_slice(&group.to_le_bytes());
        out.push(t.symmetric() as u8);
        out.extend_from_slice(&(t.params().len() as u32).to_le_bytes());
        put_f32s(out, t.params().iter().map(|p| p.scale as f32));
        if !t.symmetric() {
            out.extend(t.params().iter().map(|p| p.zero_point as u8));
        }
        out.extend(pack_codes(t.ints(), t.bits().get())?);
    }
    if let Some(p) = &l.static_params {
        let bits = p.first().map_or(8, |p| p.bits.get());
        out.push(bits as u8);
        out.extend_from_slice(&(p.len() as u32).to_le_bytes());
        put_f32s(out, p.iter().map(|p| p.scale as f32));
        out.extend(p.iter().map(|p| p.zero_point as u8));
    }
    Ok(())
}

fn decode_params(rd: &mut Reader, bits: Bits, groups: usize, zeros: bool, what: &str) -> Result<Vec<QuantParams>> {
    let scales = rd.f32s(groups, what)?;
    let zps: Vec<i32> = if zeros {
        rd.take(groups, what)?.iter().map(|&z| z as i32).collect()
    } else {
        vec![bits.mid_code(); groups]
    };
    scales
        .iter()
        .zip(zps)
        .map(|(&s, z)| QuantParams::new(s as f64, z, bits))
        .collect::<Result<Vec<_>>>()
        .map_err(|e| DtqError::Format(format!("{what}: {e}")))
}

fn decode_layer(rd: &mut Reader, index: u32) -> Result<CheckpointLayer> {
    let what = format!("layer record {index}");
    let name_len = rd.u16(&what)? as usize;
    let name = std::str::from_utf8(rd.take(name_len, &what)?)
        .map_err(|_| DtqError::Format(format!("{what}: layer name is not UTF-8")))?;
    let layer: LayerId = name.parse()?;
    let what = format!("layer {name}");
    let rows = rd.u32(&what)? as usize;
    let cols = rd.u32(&what)? as usize;
    let mut range_bits = [Bits::B8; 4];
    for b in range_bits.iter_mut() {
        *b = Bits::new(rd.u8(&what)? as u32)?;
    }
    let flags = rd.u8(&what)?;
    if flags & !(FLAG_MASK | FLAG_ROTATION | FLAG_RANDOM_SIGNS | FLAG_STATIC) != 0 {
        return Err(DtqError::Format(format!("{what}: unknown flags {flags:#04x}")));
    }
    let mask = if flags & FLAG_MASK != 0 {
        let alpha = rd.f32s(1, &what)?[0] as f64;
        let s = rd.f32s(cols, &what)?.into_iter().map(|v| v as f64).collect();
        Some(ScalingMask::new(s, alpha)?)
    } else {
        None
    };
    let rotation = if flags & FLAG_ROTATION != 0 {
        let bits = unpack_codes(rd.take(cols.div_ceil(8), &what)?, 1, cols)?;
        let signs = (flags & FLAG_RANDOM_SIGNS != 0).then(|| bits.iter().map(|&b| if b == 1 { -1 } else { 1 }).collect());
        if signs.is_none() && bits.iter().any(|&b| b != 0) {
            return Err(DtqError::Format(format!("{what}: sign bits set on a plain rotation")));
        }
        Some(RotationMatrix::from_signs(cols, signs)?)
    } else if flags & FLAG_RANDOM_SIGNS != 0 {
        return Err(DtqError::Format(format!("{what}: sign flag without rotation")));
    } else {
        None
    };
    let count = checked_mul(rows, cols, &what)?;
    let bits = Bits::new(rd.u8(&what)? as u32)?;
    let tag = rd.u8(&what)?;
    let scheme = scheme_from_tag(tag, rd.u32(&what)?)?;
    let symmetric = match rd.u8(&what)? {
        0 => false,
        1 => true,
        v => return Err(DtqError::Format(format!("{what}: symmetric flag {v}"))),
    };
    let groups = rd.u32(&what)? as usize;
    let params = decode_params(rd, bits, groups, !symmetric, &what)?;
    let ints = unpack_codes(rd.take(packed_len(count, bits), &what)?, bits.get(), count)?;
    let tensor = QuantizedTensor::from_parts(rows, cols, ints, scheme, params, symmetric)?;
    let static_params = if flags & FLAG_STATIC != 0 {
        let bits = Bits::new(rd.u8(&what)? as u32)?;
        let groups = rd.u32(&what)? as usize;
        Some(decode_params(rd, bits, groups, true, &what)?)
    } else {
        None
    };
    let l = CheckpointLayer {
        layer,
        rows,
        cols,
        range_bits,
        balance: BalanceTransform { mask, rotation },
        tensor,
        static_params,
    };
    l.validate()?;
    Ok(l)
}

// ---------------------------------------------------------------------------
// JSON documents

/// Writes pretty JSON with a trailing newline. Field order follows the
/// struct definitions, so equal values give identical files.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    write_file(path, s.as_bytes())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    Ok(serde_json::from_slice(&read_file(path)?)?)
}
