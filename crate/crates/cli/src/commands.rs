use std::path::{Path, PathBuf};

use dtq_core::matrix::mse;
use dtq_core::quant::{dequantize, error_report, quantize, quantize_symmetric, worst_row_incoherence, Bits, GroupingScheme};
use dtq_core::sensitivity::{
    analyze, evaluate, BitMenu, BudgetCounting, MixedPrecisionPlan, ProxyMetrics, SensitivityAnalysis,
    SensitivitySettings,
};
use dtq_core::toydit::{
    calibrated_config, capture_static_base, run_denoise, CalibrationData, CalibrationSpec, LayerId, QuantConfig,
    RunOptions, ToyModel,
};
use dtq_core::trace_io::{model_id, read_json, write_json, MemoryReport, QuantCheckpoint, TraceArchive};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{input_error, CliError, CliResult};

pub const TRACES: &str = "traces.dtq";
pub const CALIBRATION: &str = "calibration.json";
pub const CHECKPOINT: &str = "model.ckpt";
pub const MEMORY: &str = "memory.json";
pub const SENSITIVITY: &str = "sensitivity.json";
pub const HEATMAP: &str = "heatmap.json";
pub const PLAN: &str = "plan.json";
pub const MSE_PLAN: &str = "plan_mse.json";
pub const EVAL: &str = "eval.json";

/// Output of `calibrate`: the calibrated quantization config plus what it
/// was calibrated on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationFile {
    pub model_id: String,
    pub steps: usize,
    pub seed: u64,
    pub spec: CalibrationSpec,
    pub config: QuantConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SensitivityFile {
    pub model_id: String,
    pub menu: BitMenu,
    pub counting: BudgetCounting,
    pub run: RunOptions,
    pub analysis: SensitivityAnalysis,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MemoryFile {
    pub model_id: String,
    pub plan: Option<String>,
    /// Parameter-weighted average weight bits over all cells.
    pub average_bits: f64,
    pub report: MemoryReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BitsError {
    pub bits: Bits,
    pub mse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerStats {
    pub layer: LayerId,
    pub range_bits: [Option<Bits>; 4],
    /// Balanced float weights against their quantized form, per bit-width used.
    pub weight_mse: Vec<BitsError>,
    /// Activation quantization MSE on the FP traces, after balancing.
    pub act_mse: f64,
    /// Mean worst-row μ of the layer inputs before and after balancing.
    pub incoherence_raw: f64,
    pub incoherence_balanced: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalReport {
    pub model_id: String,
    pub source: String,
    pub clips: Vec<u64>,
    pub output_mse: f64,
    pub proxies: ProxyMetrics,
    pub layers: Vec<LayerStats>,
}

fn ensure_out(cfg: &RunConfig) -> CliResult<()> {
    std::fs::create_dir_all(&cfg.out)
        .map_err(|e| CliError::new(crate::error::Category::Other, format!("{}: {e}", cfg.out.display())))
}

/// Reads a command input, reporting a missing file as such.
pub fn read_input<T>(path: &Path, producer: &str, read: impl FnOnce(&Path) -> dtq_core::Result<T>) -> CliResult<T> {
    if !path.exists() {
        return Err(CliError::new(
            crate::error::Category::MissingInput,
            format!("{} not found (produced by `dtq {producer}`)", path.display()),
        ));
    }
    read(path).map_err(|e| input_error(path, e))
}

fn read_json_input<T: DeserializeOwned>(path: &Path, producer: &str) -> CliResult<T> {
    read_input(path, producer, read_json)
}

/// Parses an optional input if it exists.
pub fn read_optional<T: DeserializeOwned>(path: &Path) -> CliResult<Option<T>> {
    if path.exists() {
        read_json(path).map(Some).map_err(|e| input_error(path, e))
    } else {
        Ok(None)
    }
}

fn check_model(found: &str, model: &ToyModel, what: &Path) -> CliResult<()> {
    let id = model_id(model);
    if found != id {
        return Err(CliError::bad_input(format!(
            "{} was produced for model {found}, the config builds model {id}",
            what.display()
        )));
    }
    Ok(())
}

pub fn trace(cfg: &RunConfig) -> CliResult<()> {
    let model = cfg.build_model()?;
    let opts = RunOptions {
        record_traces: true,
        ..cfg.run.clone()
    };
    let run = run_denoise(&model, &opts, None)?;
    let archive = TraceArchive::from_traces(model_id(&model), opts.steps, &run.traces)?;
    ensure_out(cfg)?;
    let path = cfg.out_path(TRACES);
    archive.write(&path)?;
    println!("wrote {} traces to {}", archive.records.len(), path.display());
    Ok(())
}

pub fn calibrate(cfg: &RunConfig, traces: Option<PathBuf>) -> CliResult<()> {
    let model = cfg.build_model()?;
    let path = traces.unwrap_or_else(|| cfg.out_path(TRACES));
    let archive = read_input(&path, "trace", TraceArchive::read)?;
    check_model(&archive.model_id, &model, &path)?;
    if archive.steps as usize != cfg.run.steps || archive.cfg != cfg.run.cfg {
        return Err(CliError::bad_input(format!(
            "{} holds a {}-step run (guidance {}), the config asks for {} steps (guidance {})",
            path.display(),
            archive.steps,
            archive.cfg,
            cfg.run.steps,
            cfg.run.cfg
        )));
    }
    let data = CalibrationData {
        traces: archive.to_traces()?,
        static_base: capture_static_base(&model, &cfg.run)?,
    };
    let spec = cfg.quant.spec();
    let config = calibrated_config(&model, &data, &spec)?;
    let file = CalibrationFile {
        model_id: model_id(&model),
        steps: cfg.run.steps,
        seed: cfg.run.seed,
        spec,
        config,
    };
    ensure_out(cfg)?;
    let out = cfg.out_path(CALIBRATION);
    write_json(&out, &file)?;
    println!("calibrated {} layers, wrote {}", file.config.layers.len(), out.display());
    Ok(())
}

fn load_calibration(cfg: &RunConfig, model: &ToyModel, path: Option<PathBuf>) -> CliResult<CalibrationFile> {
    let path = path.unwrap_or_else(|| cfg.out_path(CALIBRATION));
    let file: CalibrationFile = read_json_input(&path, "calibrate")?;
    check_model(&file.model_id, model, &path)?;
    file.config.validate(model).map_err(|e| input_error(&path, e))?;
    Ok(file)
}

fn load_plan(model: &ToyModel, path: &Path) -> CliResult<MixedPrecisionPlan> {
    let plan: MixedPrecisionPlan = read_json_input(path, "allocate")?;
    plan.validate(&model.config.layer_ids())
        .map_err(|e| CliError::bad_input(format!("{}: {e}", path.display())))?;
    Ok(plan)
}

pub fn quantize_cmd(cfg: &RunConfig, calibration: Option<PathBuf>, plan: Option<PathBuf>) -> CliResult<()> {
    let model = cfg.build_model()?;
    let cal = load_calibration(cfg, &model, calibration)?;
    let plan_path = plan.or_else(|| cfg.plan.path.as_deref().map(|p| cfg.resolve(p)));
    let (q, average_bits) = match &plan_path {
        Some(p) => {
            let plan = load_plan(&model, p)?;
            (cal.config.with_precision(plan.to_precision_map()), plan.average_bits())
        }
        None => (cal.config.clone(), cal.spec.weight_bits.get() as f64),
    };
    let ckpt = QuantCheckpoint::build(&model, &q)?;
    ensure_out(cfg)?;
    let path = cfg.out_path(CHECKPOINT);
    ckpt.write(&path)?;
    let report = ckpt.memory_report()?;
    let file = MemoryFile {
        model_id: ckpt.model_id.clone(),
        plan: plan_path.map(|p| p.display().to_string()),
        average_bits,
        report,
    };
    write_json(&cfg.out_path(MEMORY), &file)?;
    println!(
        "wrote {}: {} bytes, {:.4}x of the {}-byte FP16 baseline (packed weights alone {:.4}x)",
        path.display(),
        report.serialized_bytes,
        report.file_ratio,
        report.fp16_bytes,
        report.weight_ratio
    );
    Ok(())
}

pub fn sensitivity(cfg: &RunConfig, calibration: Option<PathBuf>) -> CliResult<()> {
    let model = cfg.build_model()?;
    let cal = load_calibration(cfg, &model, calibration)?;
    let settings = SensitivitySettings {
        menu: cfg.menu(),
        counting: cfg.plan.counting,
        run: cfg.run.clone(),
    };
    let analysis = analyze(&model, &cal.config, &settings)?;
    ensure_out(cfg)?;
    write_json(&cfg.out_path(HEATMAP), &analysis.heatmap)?;
    let file = SensitivityFile {
        model_id: model_id(&model),
        menu: settings.menu,
        counting: settings.counting,
        run: settings.run,
        analysis,
    };
    let path = cfg.out_path(SENSITIVITY);
    write_json(&path, &file)?;
    println!(
        "{} cell records, group MSEs {:.4e} / {:.4e} / {:.4e}; wrote {}",
        file.analysis.records.len(),
        file.analysis.group_mse[0],
        file.analysis.group_mse[1],
        file.analysis.group_mse[2],
        path.display()
    );
    print!("{}", crate::report::heatmap_table(&file.analysis.heatmap));
    Ok(())
}

pub fn allocate(cfg: &RunConfig, records: Option<PathBuf>, mse_baseline: bool) -> CliResult<()> {
    let model = cfg.build_model()?;
    let path = records.unwrap_or_else(|| cfg.out_path(SENSITIVITY));
    let file: SensitivityFile = read_json_input(&path, "sensitivity")?;
    check_model(&file.model_id, &model, &path)?;
    let budget = cfg.plan.budget;
    let plan = if mse_baseline {
        file.analysis.mse_plan(file.menu, budget, file.counting)?
    } else {
        file.analysis.decoupled_plan(file.menu, budget, file.counting)?
    };
    plan.validate(&model.config.layer_ids())?;
    ensure_out(cfg)?;
    let out = cfg.out_path(if mse_baseline { MSE_PLAN } else { PLAN });
    write_json(&out, &plan)?;
    println!(
        "{} plan at budget {budget}: average {:.4} bits, {:.1}% of cells at {} bits; wrote {}",
        if mse_baseline { "MSE-based" } else { "metric-decoupled" },
        plan.average_bits(),
        100.0 * plan.high_fraction(),
        plan.menu.high,
        out.display()
    );
    Ok(())
}

pub struct EvalSource {
    pub checkpoint: Option<PathBuf>,
    pub plan: Option<PathBuf>,
    pub calibration: Option<PathBuf>,
    pub passthrough: bool,
}

pub fn eval(cfg: &RunConfig, src: EvalSource) -> CliResult<()> {
    let model = cfg.build_model()?;
    let (source, quant) = if src.passthrough {
        ("passthrough".to_string(), None)
    } else if let Some(p) = &src.plan {
        let cal = load_calibration(cfg, &model, src.calibration.clone())?;
        let plan = load_plan(&model, p)?;
        (format!("plan {}", p.display()), Some(cal.config.with_precision(plan.to_precision_map())))
    } else {
        let p = src.checkpoint.clone().unwrap_or_else(|| cfg.out_path(CHECKPOINT));
        let ckpt = read_input(&p, "quantize", QuantCheckpoint::read)?;
        check_model(&ckpt.model_id, &model, &p)?;
        let q = ckpt.to_quant_config(&model).map_err(|e| input_error(&p, e))?;
        (format!("checkpoint {}", p.display()), Some(q))
    };
    let e = evaluate(&model, &cfg.run, quant.as_ref(), &cfg.eval.clips)?;
    let layers = match &quant {
        Some(q) => layer_stats(&model, &cfg.run, q)?,
        None => Vec::new(),
    };
    let report = EvalReport {
        model_id: model_id(&model),
        source,
        clips: cfg.eval.clips.clone(),
        output_mse: e.output_mse,
        proxies: e.proxies,
        layers,
    };
    ensure_out(cfg)?;
    let path = cfg.out_path(EVAL);
    write_json(&path, &report)?;
    println!(
        "{}: output MSE {:.6e}, proxies quality {:.6e} alignment {:.6e} temporal {:.6e}; wrote {}",
        report.source,
        report.output_mse,
        report.proxies.quality,
        report.proxies.alignment,
        report.proxies.temporal,
        path.display()
    );
    Ok(())
}

fn layer_stats(model: &ToyModel, run: &RunOptions, q: &QuantConfig) -> CliResult<Vec<LayerStats>> {
    let traced = RunOptions {
        record_traces: true,
        ..run.clone()
    };
    let fp = run_denoise(model, &traced, None)?;
    let mut out = Vec::new();
    for id in model.config.layer_ids() {
        let state = q.layers.get(&id).cloned().unwrap_or_default();
        let w = state.balance.apply_weight(model.weight(id))?;
        let mut weight_mse = Vec::new();
        for bits in q.precision.bits_for_layer(id) {
            let qt = match q.prequantized.get(&(id, bits)) {
                Some(t) => t.clone(),
                None => quantize_symmetric(&w, GroupingScheme::PerOutputChannel, bits)?,
            };
            weight_mse.push(BitsError {
                bits,
                mse: mse(&dequantize(&qt), &w)?,
            });
        }
        let (mut act, mut raw, mut bal, mut n) = (0.0, 0.0, 0.0, 0usize);
        for t in fp.traces.iter().filter(|t| t.layer == id) {
            let xb = state.balance.apply_activation(&t.x)?;
            let qa = quantize(&xb, q.act_scheme, q.act_bits, q.act_mode, state.static_params.as_deref())?;
            act += error_report(&xb, &qa)?.total_mse;
            raw += worst_row_incoherence(&t.x);
            bal += worst_row_incoherence(&xb);
            n += 1;
        }
        let n = n.max(1) as f64;
        out.push(LayerStats {
            layer: id,
            range_bits: std::array::from_fn(|r| q.precision.weight_bits(id, r)),
            weight_mse,
            act_mse: act / n,
            incoherence_raw: raw / n,
            incoherence_balanced: bal / n,
        });
    }
    Ok(out)
}
