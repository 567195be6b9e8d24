use std::collections::{BTreeMap, HashMap};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::model::{ForwardHook, FpHook};
use super::{LayerId, ToyModel};
use crate::balance::BalanceTransform;
use crate::error::{DtqError, Result};
use crate::matrix::Matrix;
use crate::qgemm::{qlinear_forward, QuantLinear};
use crate::quant::{self, Bits, GroupingScheme, QuantMode, QuantParams, QuantizedTensor};

const TRAIN_STEPS: usize = 1000;
const START_TIMESTEP: f64 = 600.0;
const MIXTURE_COMPONENTS: usize = 4;
/// Correlation of the initial noise across frames.
const NOISE_FRAME_CORR: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Condition {
    Cond,
    Uncond,
}

/// Input of one linear layer at one denoising step and condition.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationTrace {
    pub layer: LayerId,
    /// Denoising step index, `0..steps`.
    pub timestep: usize,
    pub condition: Condition,
    pub x: Matrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunOptions {
    pub steps: usize,
    pub cfg: bool,
    /// Seed for the mixture frames and the initial noise.
    pub seed: u64,
    #[serde(skip)]
    pub record_traces: bool,
    /// Drop the timestep-MLP term from the modulation (static-only run).
    #[serde(skip)]
    pub static_modulation: bool,
    /// Record modulated-layer inputs recomputed with only the static table
    /// instead of the actual inputs. The trajectory itself is unchanged.
    #[serde(skip)]
    pub record_static_inputs: bool,
    /// Stop after this many steps (for calibration captures).
    #[serde(skip)]
    pub max_steps: Option<usize>,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            steps: 20,
            cfg: true,
            seed: 0,
            record_traces: false,
            static_modulation: false,
            record_static_inputs: false,
            max_steps: None,
        }
    }
}

impl RunOptions {
    pub fn validate(&self) -> Result<()> {
        if self.steps < 4 || self.steps % 4 != 0 {
            return Err(DtqError::invalid(format!(
                "step count must be a positive multiple of 4, got {}",
                self.steps
            )));
        }
        Ok(())
    }

    /// Timestep range (0..4) that step `k` belongs to.
    pub fn range_of(&self, k: usize) -> usize {
        k / (self.steps / 4)
    }

    pub fn conditions(&self) -> &'static [Condition] {
        if self.cfg {
            &[Condition::Cond, Condition::Uncond]
        } else {
            &[Condition::Cond]
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiseRun {
    pub steps: usize,
    pub cfg: bool,
    pub seed: u64,
    /// Latent after each step; the last entry is the generated clip.
    pub outputs: Vec<Matrix>,
    /// Cross-attention branch outputs, ordered by (step, condition, block).
    pub cross_outputs: Vec<Matrix>,
    pub traces: Vec<ActivationTrace>,
    pub frames: usize,
    pub tokens: usize,
}

impl DenoiseRun {
    pub fn final_output(&self) -> &Matrix {
        self.outputs.last().expect("a run has at least one step")
    }

    /// Rows of frame `f` of the final output.
    pub fn final_frame(&self, f: usize) -> Matrix {
        self.final_output().slice_rows(f * self.tokens, (f + 1) * self.tokens)
    }
}

/// Weight bit-width per (layer, timestep range); `None` keeps a cell in
/// floating point.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PrecisionMap {
    pub default: Option<Bits>,
    #[serde(with = "cell_map")]
    pub cells: BTreeMap<(LayerId, usize), Option<Bits>>,
}

impl PrecisionMap {
    pub fn passthrough() -> Self {
        Self::default()
    }

    pub fn uniform(bits: Bits) -> Self {
        Self {
            default: Some(bits),
            cells: BTreeMap::new(),
        }
    }

    pub fn set(&mut self, layer: LayerId, range: usize, bits: Option<Bits>) {
        self.cells.insert((layer, range), bits);
    }

    pub fn weight_bits(&self, layer: LayerId, range: usize) -> Option<Bits> {
        self.cells.get(&(layer, range)).copied().unwrap_or(self.default)
    }

    pub fn is_passthrough(&self) -> bool {
        self.default.is_none() && self.cells.values().all(Option::is_none)
    }

    /// Distinct weight bit-widths used by `layer` across all ranges.
    pub fn bits_for_layer(&self, layer: LayerId) -> Vec<Bits> {
        let mut v: Vec<Bits> = (0..4).filter_map(|r| self.weight_bits(layer, r)).collect();
        v.sort();
        v.dedup();
        v
    }
}

mod cell_map {
    use super::*;
    use serde::{Deserializer, Serializer};

    #[derive(Serialize, Deserialize)]
    struct Cell {
        layer: LayerId,
        range: usize,
        bits: Option<Bits>,
    }

    pub fn serialize<S: Serializer>(
        m: &BTreeMap<(LayerId, usize), Option<Bits>>,
        s: S,
    ) -> std::result::Result<S::Ok, S::Error> {
        let cells: Vec<Cell> = m
            .iter()
            .map(|(&(layer, range), &bits)| Cell { layer, range, bits })
            .collect();
        cells.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(
        d: D,
    ) -> std::result::Result<BTreeMap<(LayerId, usize), Option<Bits>>, D::Error> {
        let cells = Vec::<Cell>::deserialize(d)?;
        Ok(cells.into_iter().map(|c| ((c.layer, c.range), c.bits)).collect())
    }
}

/// Per-layer calibration products.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LayerQuantState {
    pub balance: BalanceTransform,
    /// Frozen activation parameters for static mode, computed on balanced
    /// calibration activations.
    pub static_params: Option<Vec<QuantParams>>,
}

/// How a run quantizes its linear layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantConfig {
    pub act_bits: Bits,
    pub act_scheme: GroupingScheme,
    pub act_mode: QuantMode,
    pub precision: PrecisionMap,
    #[serde(default)]
    pub layers: BTreeMap<LayerId, LayerQuantState>,
    /// Use the integer GEMM where the activation grouping allows it.
    #[serde(default = "default_true")]
    pub integer_kernel: bool,
    /// Already-quantized (balanced) weights, used instead of quantizing the
    /// model's float weights. Filled when loading a checkpoint.
    #[serde(skip)]
    pub prequantized: BTreeMap<(LayerId, Bits), QuantizedTensor>,
}

fn default_true() -> bool {
    true
}

impl QuantConfig {
    /// Every linear layer at `weight_bits`, per-token dynamic activations,
    /// no balancing.
    pub fn uniform(weight_bits: Bits, act_bits: Bits) -> Self {
        Self {
            act_bits,
            act_scheme: GroupingScheme::PerToken,
            act_mode: QuantMode::Dynamic,
            precision: PrecisionMap::uniform(weight_bits),
            layers: BTreeMap::new(),
            integer_kernel: true,
            prequantized: BTreeMap::new(),
        }
    }

    pub fn passthrough() -> Self {
        Self {
            precision: PrecisionMap::passthrough(),
            ..Self::uniform(Bits::B8, Bits::B8)
        }
    }

    pub fn with_precision(&self, precision: PrecisionMap) -> Self {
        Self {
            precision,
            ..self.clone()
        }
    }

    pub fn validate(&self, model: &ToyModel) -> Result<()> {
        let known = model.config.layer_ids();
        let check = |id: &LayerId| {
            if known.contains(id) {
                Ok(())
            } else {
                Err(DtqError::invalid(format!("quant config names unknown layer {id}")))
            }
        };
        for (id, _) in self.precision.cells.keys() {
            check(id)?;
        }
        for ((_, range), _) in &self.precision.cells {
            if *range >= 4 {
                return Err(DtqError::invalid(format!("timestep range {range} out of 0..4")));
            }
        }
        for id in self.layers.keys() {
            check(id)?;
        }
        for (&(id, bits), q) in &self.prequantized {
            check(&id)?;
            if q.bits() != bits || q.shape() != model.weight(id).shape() {
                return Err(DtqError::shape(format!(
                    "prequantized {id} is {:?} at {} bits, expected {:?} at {bits} bits",
                    q.shape(),
                    q.bits(),
                    model.weight(id).shape()
                )));
            }
        }
        if self.act_mode == QuantMode::Static && !self.precision.is_passthrough() {
            for id in &known {
                let quantized = (0..4).any(|r| self.precision.weight_bits(*id, r).is_some());
                if quantized && self.layers.get(id).and_then(|s| s.static_params.as_ref()).is_none() {
                    return Err(DtqError::invalid(format!(
                        "static activation quantization needs calibrated parameters for {id}"
                    )));
                }
            }
        }
        Ok(())
    }
}

enum PreparedWeight {
    Integer(QuantLinear),
    Float(Matrix),
}

struct QuantHook<'a> {
    config: Option<&'a QuantConfig>,
    range: usize,
    step: usize,
    condition: Condition,
    record: bool,
    record_static: bool,
    traces: Vec<ActivationTrace>,
    cross: Vec<Matrix>,
    prepared: HashMap<(LayerId, Bits), PreparedWeight>,
}

impl QuantHook<'_> {
    fn use_integer(cfg: &QuantConfig) -> bool {
        cfg.integer_kernel && cfg.act_scheme == GroupingScheme::PerToken && cfg.act_mode == QuantMode::Dynamic
    }
}

impl ForwardHook for QuantHook<'_> {
    fn linear(&mut self, id: LayerId, x: &Matrix, w: &Matrix) -> Result<Matrix> {
        if self.record && !(self.record_static && id.kind.mod_slot().is_some()) {
            self.traces.push(ActivationTrace {
                layer: id,
                timestep: self.step,
                condition: self.condition,
                x: x.clone(),
            });
        }
        let Some(cfg) = self.config else {
            return FpHook.linear(id, x, w);
        };
        let Some(bits) = cfg.precision.weight_bits(id, self.range) else {
            return FpHook.linear(id, x, w);
        };
        let state = cfg.layers.get(&id);
        let balance = state.map(|s| &s.balance);
        let xb = match balance {
            Some(b) if !b.is_identity() => b.apply_activation(x)?,
            _ => x.clone(),
        };
        let integer = Self::use_integer(cfg);
        let prepared = match self.prepared.entry((id, bits)) {
            std::collections::hash_map::Entry::Occupied(e) => e.into_mut(),
            std::collections::hash_map::Entry::Vacant(e) => {
                let wb = match balance {
                    Some(b) if !b.is_identity() => b.apply_weight(w)?,
                    _ => w.clone(),
                };
                let p = if let Some(q) = cfg.prequantized.get(&(id, bits)) {
                    if integer {
                        PreparedWeight::Integer(QuantLinear::new(q.clone(), None, cfg.act_bits)?)
                    } else {
                        PreparedWeight::Float(quant::dequantize(q))
                    }
                } else if integer {
                    PreparedWeight::Integer(QuantLinear::from_float(&wb, None, bits, cfg.act_bits)?)
                } else {
                    let q = quant::quantize_symmetric(&wb, GroupingScheme::PerOutputChannel, bits)?;
                    PreparedWeight::Float(quant::dequantize(&q))
                };
                e.insert(p)
            }
        };
        match prepared {
            PreparedWeight::Integer(layer) => qlinear_forward(&xb, layer),
            PreparedWeight::Float(wq) => {
                let frozen = state.and_then(|s| s.static_params.as_deref());
                let xq = quant::fake_quantize(&xb, cfg.act_scheme, cfg.act_bits, cfg.act_mode, frozen)?;
                xq.matmul_t(wq)
            }
        }
    }

    fn cross_output(&mut self, _block: usize, out: &Matrix) {
        self.cross.push(out.clone());
    }

    fn wants_static_inputs(&self) -> bool {
        self.record && self.record_static
    }

    fn static_input(&mut self, id: LayerId, x: &Matrix) {
        self.traces.push(ActivationTrace {
            layer: id,
            timestep: self.step,
            condition: self.condition,
            x: x.clone(),
        });
    }
}

/// ᾱ for every training timestep under a linear β schedule.
fn alpha_bars() -> Vec<f64> {
    let (b0, b1) = (1e-4, 0.02);
    let mut acc = 1.0;
    (0..TRAIN_STEPS)
        .map(|i| {
            let beta = b0 + (b1 - b0) * i as f64 / (TRAIN_STEPS - 1) as f64;
            acc *= 1.0 - beta;
            acc
        })
        .collect()
}

fn alpha_bar_at(table: &[f64], t: f64) -> f64 {
    let lo = t.floor() as usize;
    let hi = (lo + 1).min(TRAIN_STEPS - 1);
    let w = t - lo as f64;
    table[lo] * (1.0 - w) + table[hi] * w
}

/// Diffusion timesteps visited by a run, descending.
pub(crate) fn timesteps(steps: usize) -> Vec<f64> {
    (0..steps)
        .map(|k| START_TIMESTEP * (steps - k) as f64 / steps as f64)
        .collect()
}

/// Seeded Gaussian-mixture clip, noised to the start timestep. Noise is
/// strongly correlated across frames, so frames start similar.
fn initial_latent(model: &ToyModel, seed: u64, alpha_bar: f64) -> Matrix {
    let cfg = &model.config;
    let (d, n_tok) = (cfg.width, cfg.tokens);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_f4a3_e5);
    let mut normal = || -> f64 { StandardNormal.sample(&mut rng) };
    let means: Vec<Vec<f64>> = (0..MIXTURE_COMPONENTS).map(|_| (0..d).map(|_| normal()).collect()).collect();
    let assign: Vec<usize> = (0..n_tok)
        .map(|_| (normal().abs() * 1e6) as usize % MIXTURE_COMPONENTS)
        .collect();
    let jitter: Vec<Vec<f64>> = (0..n_tok).map(|_| (0..d).map(|_| 0.3 * normal()).collect()).collect();
    let drift: Vec<Vec<f64>> = (0..n_tok).map(|_| (0..d).map(|_| 0.15 * normal()).collect()).collect();
    let shared: Vec<Vec<f64>> = (0..n_tok).map(|_| (0..d).map(|_| normal()).collect()).collect();
    let indep_gain = (1.0 - NOISE_FRAME_CORR * NOISE_FRAME_CORR).sqrt();
    let (sig, noi) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    let mut x = Matrix::zeros(cfg.rows(), d);
    for f in 0..cfg.frames {
        for tok in 0..n_tok {
            let row = x.row_mut(f * n_tok + tok);
            for c in 0..d {
                let clean = means[assign[tok]][c] + jitter[tok][c] + f as f64 * drift[tok][c];
                let eps = NOISE_FRAME_CORR * shared[tok][c] + indep_gain * normal();
                row[c] = sig * clean + noi * eps;
            }
        }
    }
    x
}

/// Runs the deterministic reverse-diffusion loop. The network predicts a
/// correction to the clean clip, combined DDIM-style:
///
/// ```text
/// x0  = √ᾱ_t · x + √(1-ᾱ_t) · net(x, t)
/// eps = (x - √ᾱ_t · x0) / √(1-ᾱ_t)
/// x'  = √ᾱ_prev · x0 + √(1-ᾱ_prev) · eps
/// ```
///
/// With classifier-free guidance, `net = net_u + g·(net_c - net_u)`.
/// `quant = None` is the floating-point reference.
pub fn run_denoise(model: &ToyModel, opts: &RunOptions, quant: Option<&QuantConfig>) -> Result<DenoiseRun> {
    opts.validate()?;
    if let Some(q) = quant {
        q.validate(model)?;
    }
    let table = alpha_bars();
    let ts = timesteps(opts.steps);
    let mut x = initial_latent(model, opts.seed, alpha_bar_at(&table, ts[0]));
    let mut hook = QuantHook {
        config: quant.filter(|q| !q.precision.is_passthrough()),
        range: 0,
        step: 0,
        condition: Condition::Cond,
        record: opts.record_traces,
        record_static: opts.record_static_inputs,
        traces: Vec::new(),
        cross: Vec::new(),
        prepared: HashMap::new(),
    };
    let include_time = !opts.static_modulation;
    let n_steps = opts.max_steps.map_or(opts.steps, |m| m.min(opts.steps));
    let mut outputs = Vec::with_capacity(n_steps);
    for (k, &t) in ts.iter().enumerate().take(n_steps) {
        hook.step = k;
        hook.range = opts.range_of(k);
        hook.condition = Condition::Cond;
        let net_c = model.forward(&x, t, &model.context_cond, include_time, &mut hook)?;
        let net = if opts.cfg {
            hook.condition = Condition::Uncond;
            let net_u = model.forward(&x, t, &model.context_uncond, include_time, &mut hook)?;
            let g = model.config.guidance;
            net_u.zip_map(&net_c, |u, c| u + g * (c - u))?
        } else {
            net_c
        };
        let net = net.scale(model.config.output_gain);
        let ab = alpha_bar_at(&table, t);
        let ab_prev = ts.get(k + 1).map_or(1.0, |&tp| alpha_bar_at(&table, tp));
        let (sa, sn) = (ab.sqrt(), (1.0 - ab).sqrt());
        let x0 = x.zip_map(&net, |xv, nv| sa * xv + sn * nv)?;
        let eps = x.zip_map(&x0, |xv, x0v| (xv - sa * x0v) / sn)?;
        let (pa, pn) = (ab_prev.sqrt(), (1.0 - ab_prev).sqrt());
        x = x0.zip_map(&eps, |x0v, ev| pa * x0v + pn * ev)?;
        outputs.push(x.clone());
    }
    Ok(DenoiseRun {
        steps: opts.steps,
        cfg: opts.cfg,
        seed: opts.seed,
        outputs,
        cross_outputs: hook.cross,
        traces: hook.traces,
        frames: model.config.frames,
        tokens: model.config.tokens,
    })
}
