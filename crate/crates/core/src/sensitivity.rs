//! Metric-decoupled mixed precision.
//!
//! Layers are split into three groups by what they mostly affect (visual
//! quality, text alignment, temporal consistency) and the denoising run
//! into four equal timestep ranges. Each group gets a share of the bit
//! budget from the output MSE it causes when quantized alone; inside a
//! group, (layer, range) cells are promoted to the high bit-width in order
//! of how much they degrade that group's own proxy metric.

use std::collections::BTreeMap;
use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{DtqError, Result};
use crate::matrix::{mse, Matrix};
use crate::quant::Bits;
use crate::toydit::{run_denoise, DenoiseRun, LayerId, LayerKind, PrecisionMap, QuantConfig, RunOptions, ToyModel};

/// Slack used when flooring budget arithmetic, so that e.g. a 16/3-bit
/// budget over 12 cells still admits 16 extra bits.
const BUDGET_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerGroup {
    Quality,
    Alignment,
    Temporal,
}

impl LayerGroup {
    pub const ALL: [LayerGroup; 3] = [LayerGroup::Quality, LayerGroup::Alignment, LayerGroup::Temporal];

    pub fn of(kind: LayerKind) -> LayerGroup {
        match kind {
            LayerKind::CrossAttnQkv | LayerKind::CrossAttnProj => LayerGroup::Alignment,
            LayerKind::TemporalAttnQkv | LayerKind::TemporalAttnProj => LayerGroup::Temporal,
            LayerKind::SelfAttnQkv | LayerKind::SelfAttnProj | LayerKind::Ffn1 | LayerKind::Ffn2 => {
                LayerGroup::Quality
            }
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    /// The proxy metric this group is judged by.
    pub fn metric(self) -> Metric {
        match self {
            LayerGroup::Quality => Metric::Quality,
            LayerGroup::Alignment => Metric::Alignment,
            LayerGroup::Temporal => Metric::Temporal,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            LayerGroup::Quality => "quality",
            LayerGroup::Alignment => "alignment",
            LayerGroup::Temporal => "temporal",
        }
    }
}

impl fmt::Display for LayerGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Quality,
    Alignment,
    Temporal,
}

impl Metric {
    pub const ALL: [Metric; 3] = [Metric::Quality, Metric::Alignment, Metric::Temporal];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Metric::Quality => "quality",
            Metric::Alignment => "alignment",
            Metric::Temporal => "temporal",
        }
    }
}

/// Half-open interval of denoising steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimestepRange {
    pub index: usize,
    pub start: usize,
    pub end: usize,
}

impl TimestepRange {
    pub fn contains(&self, step: usize) -> bool {
        (self.start..self.end).contains(&step)
    }
}

pub fn partition_timesteps(steps: usize) -> Result<[TimestepRange; 4]> {
    if steps == 0 || steps % 4 != 0 {
        return Err(DtqError::invalid(format!(
            "step count {steps} cannot be split into four equal ranges"
        )));
    }
    let len = steps / 4;
    Ok(std::array::from_fn(|i| TimestepRange {
        index: i,
        start: i * len,
        end: (i + 1) * len,
    }))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProxyMetrics {
    pub quality: f64,
    pub alignment: f64,
    pub temporal: f64,
}

impl ProxyMetrics {
    pub fn get(&self, m: Metric) -> f64 {
        match m {
            Metric::Quality => self.quality,
            Metric::Alignment => self.alignment,
            Metric::Temporal => self.temporal,
        }
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.quality, self.alignment, self.temporal]
    }
}

/// Mean squared difference between spatially adjacent tokens (right and
/// lower neighbours on the token grid), averaged over frames.
fn high_freq_energy(frames: &[Matrix], side: usize) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    for f in frames {
        for r in 0..side {
            for c in 0..side {
                let p = f.row(r * side + c);
                let mut acc = |q: &[f64]| {
                    total += p.iter().zip(q).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
                    count += 1;
                };
                if c + 1 < side {
                    acc(f.row(r * side + c + 1));
                }
                if r + 1 < side {
                    acc(f.row((r + 1) * side + c));
                }
            }
        }
    }
    total / count.max(1) as f64
}

/// Mean norm of the per-token change between consecutive frames.
fn inter_frame_motion(frames: &[Matrix]) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    for pair in frames.windows(2) {
        for t in 0..pair[0].rows() {
            let d: f64 = pair[0]
                .row(t)
                .iter()
                .zip(pair[1].row(t))
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            total += d.sqrt();
            count += 1;
        }
    }
    total / count.max(1) as f64
}

fn relative_deviation(q: f64, fp: f64) -> Option<f64> {
    (fp.abs() > f64::MIN_POSITIVE).then(|| ((q - fp) / fp).abs())
}

fn cosine_distance(a: &[f64], b: &[f64]) -> f64 {
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 && nb == 0.0 {
        return 0.0;
    }
    if na == 0.0 || nb == 0.0 {
        return 1.0;
    }
    // 1 − cos as half the squared distance of the unit vectors: exact zero
    // for identical rows, no cancellation near it.
    let d: f64 = a.iter().zip(b).map(|(x, y)| (x / na - y / nb).powi(2)).sum();
    d / 2.0
}

fn final_frames(run: &DenoiseRun) -> Vec<Matrix> {
    (0..run.frames).map(|f| run.final_frame(f)).collect()
}

fn check_comparable(q: &DenoiseRun, fp: &DenoiseRun) -> Result<()> {
    let same = q.steps == fp.steps
        && q.cfg == fp.cfg
        && q.seed == fp.seed
        && q.frames == fp.frames
        && q.tokens == fp.tokens
        && q.outputs.len() == fp.outputs.len()
        && q.cross_outputs.len() == fp.cross_outputs.len()
        && q.final_output().shape() == fp.final_output().shape();
    if same {
        Ok(())
    } else {
        Err(DtqError::invalid(
            "runs differ in configuration (steps, guidance, seed or shape)",
        ))
    }
}

/// Per-metric deviations of `q` from `fp`; a cell is `None` when the FP
/// reference value is zero and a relative deviation is undefined.
pub fn relative_deltas(q: &DenoiseRun, fp: &DenoiseRun) -> Result<[Option<f64>; 3]> {
    check_comparable(q, fp)?;
    let side = (fp.tokens as f64).sqrt().round() as usize;
    let (fq, ff) = (final_frames(q), final_frames(fp));
    let quality = relative_deviation(high_freq_energy(&fq, side), high_freq_energy(&ff, side));
    let temporal = relative_deviation(inter_frame_motion(&fq), inter_frame_motion(&ff));
    let mut dist = 0.0;
    let mut rows = 0usize;
    for (a, b) in q.cross_outputs.iter().zip(&fp.cross_outputs) {
        a.check_same_shape(b)?;
        for r in 0..a.rows() {
            dist += cosine_distance(a.row(r), b.row(r));
            rows += 1;
        }
    }
    let alignment = Some(if rows == 0 { 0.0 } else { dist / rows as f64 });
    Ok([quality, alignment, temporal])
}

/// Desk-scale stand-ins for the three perceptual metrics:
/// - quality: relative change of the final frames' high-frequency energy;
/// - alignment: mean cosine distance of cross-attention outputs;
/// - temporal: relative change of the mean inter-frame difference.
pub fn proxy_metrics(q: &DenoiseRun, fp: &DenoiseRun) -> Result<ProxyMetrics> {
    let d = relative_deltas(q, fp)?;
    let need = |v: Option<f64>, what: &str| {
        v.ok_or_else(|| DtqError::invalid(format!("FP reference has zero {what}; relative deviation undefined")))
    };
    Ok(ProxyMetrics {
        quality: need(d[0], "high-frequency energy")?,
        alignment: need(d[1], "alignment")?,
        temporal: need(d[2], "inter-frame motion")?,
    })
}

/// Group × metric attributions; each row is a probability vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricHeatmap {
    pub groups: Vec<LayerGroup>,
    pub metrics: Vec<Metric>,
    pub values: Vec<[f64; 3]>,
}

impl MetricHeatmap {
    pub fn row(&self, g: LayerGroup) -> Option<&[f64; 3]> {
        self.groups.iter().position(|&x| x == g).map(|i| &self.values[i])
    }

    /// Metric with the largest share in `g`'s row.
    pub fn dominant_metric(&self, g: LayerGroup) -> Option<Metric> {
        let row = self.row(g)?;
        let mut best = 0;
        for i in 1..3 {
            if row[i] > row[best] {
                best = i;
            }
        }
        Some(Metric::ALL[best])
    }
}

/// Standardizes each metric's deltas across the groups (z-score over the
/// included cells of that column), then softmaxes each row. Excluded
/// (`None`) cells get zero weight; a column with zero spread scores 0.
pub fn build_heatmap(rows: &[(LayerGroup, [Option<f64>; 3])]) -> Result<MetricHeatmap> {
    if rows.is_empty() {
        return Err(DtqError::Empty("heatmap rows"));
    }
    for (g, row) in rows {
        for (m, v) in Metric::ALL.iter().zip(row) {
            match v {
                Some(x) if !x.is_finite() => {
                    return Err(DtqError::invalid(format!("non-finite delta {x} for {g}/{}", m.as_str())))
                }
                None => log::warn!("excluding {g}/{} from heatmap: zero FP metric", m.as_str()),
                _ => {}
            }
        }
    }
    let mut z = vec![[None::<f64>; 3]; rows.len()];
    for m in 0..3 {
        let col: Vec<f64> = rows.iter().filter_map(|(_, r)| r[m]).collect();
        if col.is_empty() {
            continue;
        }
        let n = col.len() as f64;
        let mean = col.iter().sum::<f64>() / n;
        let std = (col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
        for (i, (_, r)) in rows.iter().enumerate() {
            z[i][m] = r[m].map(|v| if std > 0.0 { (v - mean) / std } else { 0.0 });
        }
    }
    let mut values = Vec::with_capacity(rows.len());
    for ((g, _), zs) in rows.iter().zip(&z) {
        let m = zs.iter().flatten().cloned().fold(f64::NEG_INFINITY, f64::max);
        if m == f64::NEG_INFINITY {
            return Err(DtqError::invalid(format!("every cell of row {g} is excluded")));
        }
        let e: Vec<f64> = zs.iter().map(|v| v.map_or(0.0, |x| (x - m).exp())).collect();
        let s: f64 = e.iter().sum();
        values.push([e[0] / s, e[1] / s, e[2] / s]);
    }
    Ok(MetricHeatmap {
        groups: rows.iter().map(|(g, _)| *g).collect(),
        metrics: Metric::ALL.to_vec(),
        values,
    })
}

/// Low/high weight bit-widths a cell can take.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BitMenu {
    pub low: Bits,
    pub high: Bits,
}

impl Default for BitMenu {
    fn default() -> Self {
        Self {
            low: Bits::B4,
            high: Bits::B8,
        }
    }
}

impl BitMenu {
    pub fn new(low: Bits, high: Bits) -> Result<Self> {
        if low >= high {
            return Err(DtqError::invalid(format!("bit menu needs low < high, got {low}/{high}")));
        }
        Ok(Self { low, high })
    }

    fn step(&self) -> u64 {
        (self.high.get() - self.low.get()) as u64
    }

    fn check_budget(&self, budget: f64) -> Result<()> {
        let (lo, hi) = (self.low.get() as f64, self.high.get() as f64);
        if !budget.is_finite() || budget < lo - BUDGET_EPS || budget > hi + BUDGET_EPS {
            return Err(DtqError::InfeasibleBudget(format!(
                "average of {budget} bits is outside [{lo}, {hi}]"
            )));
        }
        Ok(())
    }
}

/// Whether the average-bit budget is weighted by parameter count or counts
/// every layer equally.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BudgetCounting {
    #[default]
    Params,
    Layers,
}

impl BudgetCounting {
    pub fn layer_weight(self, model: &ToyModel, id: LayerId) -> u64 {
        match self {
            BudgetCounting::Params => {
                let (o, i) = model.config.layer_shape(id.kind);
                (o * i) as u64
            }
            BudgetCounting::Layers => 1,
        }
    }
}

/// Splits a model-wide average-bit budget across the three groups.
///
/// `sizes[g]` is the total cell weight of group `g` (parameters × ranges, or
/// cells). The extra bit-units above the floor, `floor((budget − low)·Σsize)`,
/// go to groups in proportion to their MSE, capped at each group's ceiling
/// (excess is re-spread over uncapped groups); integer units are rounded by
/// largest remainder with ties to the lower group index. Zero-MSE groups stay
/// at the floor; if every MSE is zero the split is proportional to size.
/// Returns each group's average-bit allowance.
pub fn group_budgets(mses: [f64; 3], sizes: [u64; 3], budget: f64, menu: BitMenu) -> Result<[f64; 3]> {
    menu.check_budget(budget)?;
    if mses.iter().any(|m| !m.is_finite() || *m < 0.0) {
        return Err(DtqError::invalid(format!("group MSEs must be finite and ≥ 0, got {mses:?}")));
    }
    let total_size: u64 = sizes.iter().sum();
    if total_size == 0 {
        return Err(DtqError::invalid("all groups are empty"));
    }
    let low = menu.low.get() as f64;
    let extra = ((budget - low).max(0.0) * total_size as f64 + BUDGET_EPS).floor() as u64;
    let caps: [u64; 3] = std::array::from_fn(|g| sizes[g] * menu.step());
    let all_zero = mses.iter().all(|&m| m == 0.0);
    let weight: [f64; 3] = std::array::from_fn(|g| {
        if sizes[g] == 0 {
            0.0
        } else if all_zero {
            sizes[g] as f64
        } else {
            mses[g]
        }
    });

    // Water-fill real-valued shares under the caps.
    let mut share = [0.0f64; 3];
    let mut capped = [false; 3];
    let mut remaining = extra as f64;
    loop {
        let w: f64 = (0..3).filter(|&g| !capped[g]).map(|g| weight[g]).sum();
        if w <= 0.0 || remaining <= 0.0 {
            break;
        }
        let mut newly = false;
        for g in 0..3 {
            if !capped[g] && weight[g] > 0.0 {
                let want = share[g] + remaining * weight[g] / w;
                if want >= caps[g] as f64 {
                    newly = true;
                }
            }
        }
        if !newly {
            for g in 0..3 {
                if !capped[g] {
                    share[g] += remaining * weight[g] / w;
                }
            }
            break;
        }
        // Cap the groups that overflow and redistribute.
        for g in 0..3 {
            if !capped[g] && weight[g] > 0.0 && share[g] + remaining * weight[g] / w >= caps[g] as f64 {
                capped[g] = true;
                share[g] = caps[g] as f64;
            }
        }
        remaining = extra as f64 - share.iter().sum::<f64>();
    }

    let mut units: [u64; 3] = std::array::from_fn(|g| (share[g] + BUDGET_EPS).floor().min(caps[g] as f64) as u64);
    let target = (share.iter().sum::<f64>() + BUDGET_EPS).floor() as u64;
    let mut left = target.saturating_sub(units.iter().sum());
    let mut order: Vec<usize> = (0..3).filter(|&g| weight[g] > 0.0).collect();
    order.sort_by(|&a, &b| {
        let ra = share[a] - units[a] as f64;
        let rb = share[b] - units[b] as f64;
        rb.partial_cmp(&ra).expect("finite").then(a.cmp(&b))
    });
    while left > 0 {
        let mut progressed = false;
        for &g in &order {
            if left > 0 && units[g] < caps[g] {
                units[g] += 1;
                left -= 1;
                progressed = true;
            }
        }
        if !progressed {
            break;
        }
    }
    Ok(std::array::from_fn(|g| {
        if sizes[g] == 0 {
            low
        } else {
            low + units[g] as f64 / sizes[g] as f64
        }
    }))
}

/// Sensitivity of one (layer, timestep range) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityRecord {
    pub layer: LayerId,
    pub range: usize,
    pub group: LayerGroup,
    /// Degradation of the group's own proxy metric with only this cell at
    /// the low bit-width.
    pub metric_delta: f64,
    /// Final-output MSE against FP for the same single-cell run.
    pub output_mse: f64,
    /// All three proxies of the single-cell run.
    pub proxies: ProxyMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanCell {
    pub layer: LayerId,
    pub range: usize,
    pub bits: Bits,
    /// Weight of the cell in the average (parameters or 1).
    pub weight: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixedPrecisionPlan {
    pub menu: BitMenu,
    pub budget: f64,
    pub counting: BudgetCounting,
    pub cells: Vec<PlanCell>,
}

impl MixedPrecisionPlan {
    pub fn average_bits(&self) -> f64 {
        let w: u64 = self.cells.iter().map(|c| c.weight).sum();
        let b: f64 = self.cells.iter().map(|c| c.weight as f64 * c.bits.get() as f64).sum();
        b / w as f64
    }

    pub fn high_fraction(&self) -> f64 {
        let n = self.cells.iter().filter(|c| c.bits == self.menu.high).count();
        n as f64 / self.cells.len() as f64
    }

    pub fn bits(&self, layer: LayerId, range: usize) -> Option<Bits> {
        self.cells
            .iter()
            .find(|c| c.layer == layer && c.range == range)
            .map(|c| c.bits)
    }

    pub fn to_precision_map(&self) -> PrecisionMap {
        let mut p = PrecisionMap::default();
        for c in &self.cells {
            p.set(c.layer, c.range, Some(c.bits));
        }
        p
    }

    /// Checks cell coverage, menu membership and the budget invariant.
    pub fn validate(&self, layers: &[LayerId]) -> Result<()> {
        let mut seen = BTreeMap::new();
        for c in &self.cells {
            if c.range >= 4 {
                return Err(DtqError::invalid(format!("cell {} has range {}", c.layer, c.range)));
            }
            if c.bits != self.menu.low && c.bits != self.menu.high {
                return Err(DtqError::invalid(format!("cell {}/{} uses {} bits", c.layer, c.range, c.bits)));
            }
            if seen.insert((c.layer, c.range), ()).is_some() {
                return Err(DtqError::invalid(format!("cell {}/{} assigned twice", c.layer, c.range)));
            }
        }
        for &l in layers {
            for r in 0..4 {
                if !seen.contains_key(&(l, r)) {
                    return Err(DtqError::invalid(format!("cell {l}/{r} unassigned")));
                }
            }
        }
        let avg = self.average_bits();
        if avg > self.budget + 0.1 {
            return Err(DtqError::InfeasibleBudget(format!(
                "plan averages {avg:.4} bits, budget {}",
                self.budget
            )));
        }
        Ok(())
    }
}

struct Candidate {
    layer: LayerId,
    range: usize,
    delta: f64,
    weight: u64,
}

/// Promotes candidates greedily by descending delta (ties: range index, then
/// layer name), skipping any whose cost no longer fits. Returns the promoted
/// indices.
fn greedy_promote(cands: &[Candidate], allowance: u64, step: u64) -> Vec<bool> {
    let mut order: Vec<usize> = (0..cands.len()).collect();
    order.sort_by(|&a, &b| {
        let (x, y) = (&cands[a], &cands[b]);
        y.delta
            .partial_cmp(&x.delta)
            .expect("finite deltas")
            .then(x.range.cmp(&y.range))
            .then_with(|| x.layer.name().cmp(&y.layer.name()))
    });
    let mut left = allowance;
    let mut promoted = vec![false; cands.len()];
    for i in order {
        let cost = cands[i].weight * step;
        if cost <= left {
            promoted[i] = true;
            left -= cost;
        }
    }
    promoted
}

fn check_records(records: &[SensitivityRecord]) -> Result<()> {
    if records.is_empty() {
        return Err(DtqError::Empty("sensitivity records"));
    }
    let mut seen = BTreeMap::new();
    for r in records {
        if !r.metric_delta.is_finite() || !r.output_mse.is_finite() {
            return Err(DtqError::invalid(format!("non-finite sensitivity for {}/{}", r.layer, r.range)));
        }
        if r.range >= 4 {
            return Err(DtqError::invalid(format!("record {} has range {}", r.layer, r.range)));
        }
        if seen.insert((r.layer, r.range), ()).is_some() {
            return Err(DtqError::invalid(format!("duplicate record for {}/{}", r.layer, r.range)));
        }
    }
    Ok(())
}

/// Metric-decoupled allocation: within each group, cells start at the low
/// bit-width and are promoted in descending `metric_delta` order while the
/// group's allowance `group_budget[g]` (average bits over the group) lasts.
/// `weights` gives each layer's cell weight; `budget` is the model-wide
/// target recorded in the plan.
pub fn allocate_plan(
    records: &[SensitivityRecord],
    group_budget: [f64; 3],
    weights: &BTreeMap<LayerId, u64>,
    menu: BitMenu,
    budget: f64,
    counting: BudgetCounting,
) -> Result<MixedPrecisionPlan> {
    check_records(records)?;
    menu.check_budget(budget)?;
    for b in group_budget {
        menu.check_budget(b)?;
    }
    let weight_of = |id: LayerId| {
        weights
            .get(&id)
            .copied()
            .ok_or_else(|| DtqError::invalid(format!("no weight for layer {id}")))
    };
    let mut cells = Vec::with_capacity(records.len());
    for g in LayerGroup::ALL {
        let cands: Vec<Candidate> = records
            .iter()
            .filter(|r| r.group == g)
            .map(|r| {
                Ok(Candidate {
                    layer: r.layer,
                    range: r.range,
                    delta: r.metric_delta,
                    weight: weight_of(r.layer)?,
                })
            })
            .collect::<Result<_>>()?;
        let size: u64 = cands.iter().map(|c| c.weight).sum();
        let allowance =
            ((group_budget[g.index()] - menu.low.get() as f64).max(0.0) * size as f64 + BUDGET_EPS).floor() as u64;
        let promoted = greedy_promote(&cands, allowance, menu.step());
        for (c, p) in cands.iter().zip(promoted) {
            cells.push(PlanCell {
                layer: c.layer,
                range: c.range,
                bits: if p { menu.high } else { menu.low },
                weight: c.weight,
            });
        }
    }
    sort_cells(&mut cells);
    Ok(MixedPrecisionPlan {
        menu,
        budget,
        counting,
        cells,
    })
}

/// Baseline: one global pool ranked by single-cell output MSE.
pub fn allocate_mse_plan(
    records: &[SensitivityRecord],
    weights: &BTreeMap<LayerId, u64>,
    menu: BitMenu,
    budget: f64,
    counting: BudgetCounting,
) -> Result<MixedPrecisionPlan> {
    let pooled: Vec<SensitivityRecord> = records
        .iter()
        .map(|r| SensitivityRecord {
            group: LayerGroup::Quality,
            metric_delta: r.output_mse,
            ..r.clone()
        })
        .collect();
    let floor = menu.low.get() as f64;
    allocate_plan(&pooled, [budget, floor, floor], weights, menu, budget, counting)
}

fn sort_cells(cells: &mut [PlanCell]) {
    cells.sort_by(|a, b| a.layer.cmp(&b.layer).then(a.range.cmp(&b.range)));
}

/// Runs shared by a sensitivity analysis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivitySettings {
    pub menu: BitMenu,
    pub counting: BudgetCounting,
    pub run: RunOptions,
}

/// Everything measured by [`analyze`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityAnalysis {
    pub records: Vec<SensitivityRecord>,
    /// Final-output MSE with one whole group at the low bit-width.
    pub group_mse: [f64; 3],
    pub group_proxies: [ProxyMetrics; 3],
    pub heatmap: MetricHeatmap,
    /// Total cell weight per group.
    pub group_sizes: [u64; 3],
    pub layer_weights: BTreeMap<LayerId, u64>,
}

impl SensitivityAnalysis {
    pub fn decoupled_plan(&self, menu: BitMenu, budget: f64, counting: BudgetCounting) -> Result<MixedPrecisionPlan> {
        let budgets = group_budgets(self.group_mse, self.group_sizes, budget, menu)?;
        allocate_plan(&self.records, budgets, &self.layer_weights, menu, budget, counting)
    }

    pub fn mse_plan(&self, menu: BitMenu, budget: f64, counting: BudgetCounting) -> Result<MixedPrecisionPlan> {
        allocate_mse_plan(&self.records, &self.layer_weights, menu, budget, counting)
    }
}

fn run_with(model: &ToyModel, opts: &RunOptions, base: &QuantConfig, precision: PrecisionMap) -> Result<DenoiseRun> {
    run_denoise(model, opts, Some(&base.with_precision(precision)))
}

/// Final-output MSE against FP with only (`layer`, `range`) quantized to
/// `bits`. `bits = None` leaves the run in floating point.
pub fn mse_sensitivity(
    model: &ToyModel,
    opts: &RunOptions,
    base: &QuantConfig,
    fp: &DenoiseRun,
    layer: LayerId,
    range: usize,
    bits: Option<Bits>,
) -> Result<f64> {
    let mut p = PrecisionMap::default();
    p.set(layer, range, bits);
    let run = run_with(model, opts, base, p)?;
    mse(run.final_output(), fp.final_output())
}

/// Single-group and single-cell runs at the low bit-width, against the FP
/// reference. `base` supplies activation settings and balance transforms.
/// Cell runs execute in parallel; results are aggregated in a fixed order.
pub fn analyze(model: &ToyModel, base: &QuantConfig, settings: &SensitivitySettings) -> Result<SensitivityAnalysis> {
    let opts = RunOptions {
        record_traces: false,
        ..settings.run.clone()
    };
    let low = Some(settings.menu.low);
    let layers = model.config.layer_ids();
    let fp = run_denoise(model, &opts, None)?;

    let group_runs: Vec<(LayerGroup, DenoiseRun)> = LayerGroup::ALL
        .par_iter()
        .map(|&g| {
            let mut p = PrecisionMap::default();
            for &l in layers.iter().filter(|l| LayerGroup::of(l.kind) == g) {
                for r in 0..4 {
                    p.set(l, r, low);
                }
            }
            Ok((g, run_with(model, &opts, base, p)?))
        })
        .collect::<Result<_>>()?;
    let mut group_mse = [0.0; 3];
    let mut group_proxies = [ProxyMetrics {
        quality: 0.0,
        alignment: 0.0,
        temporal: 0.0,
    }; 3];
    let mut rows = Vec::new();
    for (g, run) in &group_runs {
        group_mse[g.index()] = mse(run.final_output(), fp.final_output())?;
        group_proxies[g.index()] = proxy_metrics(run, &fp)?;
        rows.push((*g, relative_deltas(run, &fp)?));
    }
    let heatmap = build_heatmap(&rows)?;

    let cells: Vec<(LayerId, usize)> = layers.iter().flat_map(|&l| (0..4).map(move |r| (l, r))).collect();
    let records: Vec<SensitivityRecord> = cells
        .par_iter()
        .map(|&(layer, range)| {
            let mut p = PrecisionMap::default();
            p.set(layer, range, low);
            let run = run_with(model, &opts, base, p)?;
            let proxies = proxy_metrics(&run, &fp)?;
            let group = LayerGroup::of(layer.kind);
            Ok(SensitivityRecord {
                layer,
                range,
                group,
                metric_delta: proxies.get(group.metric()),
                output_mse: mse(run.final_output(), fp.final_output())?,
                proxies,
            })
        })
        .collect::<Result<_>>()?;

    let layer_weights: BTreeMap<LayerId, u64> = layers
        .iter()
        .map(|&l| (l, settings.counting.layer_weight(model, l)))
        .collect();
    let mut group_sizes = [0u64; 3];
    for (&l, &w) in &layer_weights {
        group_sizes[LayerGroup::of(l.kind).index()] += 4 * w;
    }
    Ok(SensitivityAnalysis {
        records,
        group_mse,
        group_proxies,
        heatmap,
        group_sizes,
        layer_weights,
    })
}

/// Proxy metrics and final-output MSE against FP, averaged over clips.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub proxies: ProxyMetrics,
    pub output_mse: f64,
}

impl Evaluation {
    /// Metrics on which `self` is strictly lower (better) than `other`.
    pub fn wins_over(&self, other: &Evaluation) -> Vec<Metric> {
        Metric::ALL
            .into_iter()
            .filter(|&m| self.proxies.get(m) < other.proxies.get(m))
            .collect()
    }
}

/// Runs `quant` (or FP for `None`) on each clip seed and averages its
/// proxies and output MSE against the FP run of the same clip.
pub fn evaluate(model: &ToyModel, opts: &RunOptions, quant: Option<&QuantConfig>, clips: &[u64]) -> Result<Evaluation> {
    if clips.is_empty() {
        return Err(DtqError::Empty("evaluation clips"));
    }
    let per_clip: Vec<(ProxyMetrics, f64)> = clips
        .par_iter()
        .map(|&seed| {
            let o = RunOptions {
                seed,
                record_traces: false,
                ..opts.clone()
            };
            let fp = run_denoise(model, &o, None)?;
            let q = match quant {
                Some(cfg) => run_denoise(model, &o, Some(cfg))?,
                None => fp.clone(),
            };
            Ok((proxy_metrics(&q, &fp)?, mse(q.final_output(), fp.final_output())?))
        })
        .collect::<Result<_>>()?;
    let n = per_clip.len() as f64;
    let sum = |f: &dyn Fn(&(ProxyMetrics, f64)) -> f64| per_clip.iter().map(f).sum::<f64>() / n;
    Ok(Evaluation {
        proxies: ProxyMetrics {
            quality: sum(&|c| c.0.quality),
            alignment: sum(&|c| c.0.alignment),
            temporal: sum(&|c| c.0.temporal),
        },
        output_mse: sum(&|c| c.1),
    })
}
