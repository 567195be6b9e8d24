use std::fmt::Write;
use std::path::{Path, PathBuf};

use dtq_core::quant::Bits;
use dtq_core::sensitivity::{evaluate, LayerGroup, Metric, MetricHeatmap, MixedPrecisionPlan, ProxyMetrics};
use dtq_core::toydit::{
    run_ablation, run_denoise, variation_stats, AblationReport, PrecisionMap, QuantConfig, RunOptions,
    VariationReport,
};
use dtq_core::trace_io::{model_id, write_json};
use serde::{Deserialize, Serialize};

use crate::commands::{
    read_optional, CalibrationFile, EvalReport, MemoryFile, CALIBRATION, EVAL, HEATMAP, MEMORY, PLAN,
};
use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::plot;

pub const REPORT_JSON: &str = "report.json";
pub const REPORT_TXT: &str = "report.txt";
pub const ERROR_SVG: &str = "error_vs_bits.svg";
pub const VARIATION_SVG: &str = "variation_cv.svg";
pub const HEATMAP_SVG: &str = "heatmap.svg";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub bits: Bits,
    /// Uniform weights, per-token dynamic activations, no balancing.
    pub uniform_mse: f64,
    /// The calibrated config at this weight width; absent without a calibration.
    pub calibrated_mse: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanSummary {
    pub budget: f64,
    pub average_bits: f64,
    pub high_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub source: String,
    pub output_mse: f64,
    pub proxies: ProxyMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub model_id: String,
    pub steps: usize,
    pub seed: u64,
    pub act_bits: Bits,
    pub variation: VariationReport,
    pub largest_variation_axis: String,
    pub error_vs_bits: Vec<CurvePoint>,
    pub ablation: AblationReport,
    pub heatmap: Option<MetricHeatmap>,
    pub plan: Option<PlanSummary>,
    pub eval: Option<EvalSummary>,
    pub memory: Option<MemoryFile>,
}

const CURVE_BITS: [Bits; 4] = [Bits::B2, Bits::B4, Bits::B6, Bits::B8];

pub fn build(cfg: &RunConfig, dir: &Path) -> CliResult<Report> {
    let model = cfg.build_model()?;
    let id = model_id(&model);
    let traced = RunOptions {
        record_traces: true,
        ..cfg.run.clone()
    };
    let variation = variation_stats(&run_denoise(&model, &traced, None)?.traces)?;

    let calibration: Option<CalibrationFile> = read_optional(&dir.join(CALIBRATION))?;
    if let Some(c) = &calibration {
        if c.model_id != id {
            return Err(CliError::bad_input(format!(
                "{} belongs to model {}, the config builds model {id}",
                dir.join(CALIBRATION).display(),
                c.model_id
            )));
        }
    }
    let act_bits = cfg.quant.act_bits;
    let mut error_vs_bits = Vec::new();
    for bits in CURVE_BITS {
        let uniform = QuantConfig::uniform(bits, act_bits);
        let uniform_mse = evaluate(&model, &cfg.run, Some(&uniform), &cfg.eval.clips)?.output_mse;
        let calibrated_mse = match &calibration {
            Some(c) => {
                let q = c.config.with_precision(PrecisionMap::uniform(bits));
                Some(evaluate(&model, &cfg.run, Some(&q), &cfg.eval.clips)?.output_mse)
            }
            None => None,
        };
        error_vs_bits.push(CurvePoint {
            bits,
            uniform_mse,
            calibrated_mse,
        });
    }
    let ablation = run_ablation(&model, &cfg.run, cfg.quant.weight_bits, act_bits, &cfg.eval.clips)?;

    let plan = read_optional::<MixedPrecisionPlan>(&dir.join(PLAN))?.map(|p| PlanSummary {
        budget: p.budget,
        average_bits: p.average_bits(),
        high_fraction: p.high_fraction(),
    });
    let eval = read_optional::<EvalReport>(&dir.join(EVAL))?.map(|e| EvalSummary {
        source: e.source,
        output_mse: e.output_mse,
        proxies: e.proxies,
    });
    Ok(Report {
        model_id: id,
        steps: cfg.run.steps,
        seed: cfg.run.seed,
        act_bits,
        largest_variation_axis: variation.largest_axis().to_string(),
        variation,
        error_vs_bits,
        ablation,
        heatmap: read_optional(&dir.join(HEATMAP))?,
        plan,
        eval,
        memory: read_optional(&dir.join(MEMORY))?,
    })
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |v| format!("{v:.4}"))
}

pub fn heatmap_table(h: &MetricHeatmap) -> String {
    let mut s = String::new();
    let _ = write!(s, "{:<12}", "group");
    for m in &h.metrics {
        let _ = write!(s, "{:>11}", m.as_str());
    }
    s.push('\n');
    for (g, row) in h.groups.iter().zip(&h.values) {
        let _ = write!(s, "{:<12}", g.as_str());
        for v in row {
            let _ = write!(s, "{v:>11.3}");
        }
        s.push('\n');
    }
    s
}

pub fn render_text(r: &Report) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "model {}  steps {}  seed {}", r.model_id, r.steps, r.seed);
    let _ = writeln!(s);
    let _ = writeln!(s, "activation variation (CV of group absmax)");
    let v = &r.variation;
    let _ = writeln!(s, "  token      {:.4}", v.token);
    let _ = writeln!(s, "  timestep   {}", opt(v.timestep));
    let _ = writeln!(s, "  condition  {}", opt(v.condition));
    let _ = writeln!(s, "  channel    {:.4}", v.channel);
    let _ = writeln!(s, "  largest axis: {}", r.largest_variation_axis);
    let _ = writeln!(s);
    let _ = writeln!(s, "final-output MSE vs weight bits (A{})", r.act_bits);
    let _ = writeln!(s, "  {:>4} {:>14} {:>14}", "bits", "uniform", "calibrated");
    for p in &r.error_vs_bits {
        let cal = p.calibrated_mse.map_or_else(|| "n/a".to_string(), |v| format!("{v:.6e}"));
        let _ = writeln!(s, "  {:>4} {:>14.6e} {:>14}", p.bits, p.uniform_mse, cal);
    }
    let _ = writeln!(s);
    let a = &r.ablation;
    let _ = writeln!(s, "ablation W{}A{} over clips {:?}", a.weight_bits, a.act_bits, a.clips);
    for row in &a.rows {
        let _ = writeln!(s, "  {:<26} {:.6e}", row.label, row.mse);
    }
    let _ = writeln!(s, "  strictly decreasing: {}", a.strictly_decreasing());
    if let Some(h) = &r.heatmap {
        let _ = writeln!(s);
        let _ = writeln!(s, "metric attribution heatmap");
        for line in heatmap_table(h).lines() {
            let _ = writeln!(s, "  {line}");
        }
    }
    if let Some(p) = &r.plan {
        let _ = writeln!(s);
        let _ = writeln!(
            s,
            "plan: budget {} bits, average {:.4} bits, {:.1}% of cells high",
            p.budget,
            p.average_bits,
            100.0 * p.high_fraction
        );
    }
    if let Some(e) = &r.eval {
        let _ = writeln!(s);
        let _ = writeln!(s, "eval ({}): output MSE {:.6e}", e.source, e.output_mse);
        let _ = writeln!(
            s,
            "  proxies quality {:.6e}  alignment {:.6e}  temporal {:.6e}",
            e.proxies.quality, e.proxies.alignment, e.proxies.temporal
        );
    }
    if let Some(m) = &r.memory {
        let _ = writeln!(s);
        let _ = writeln!(
            s,
            "checkpoint: {} bytes vs {} FP16 ({:.4}x), packed weights {:.4}x, average {:.3} weight bits",
            m.report.serialized_bytes, m.report.fp16_bytes, m.report.file_ratio, m.report.weight_ratio, m.average_bits
        );
    }
    s
}

fn write_file(path: &Path, text: &str) -> CliResult<()> {
    std::fs::write(path, text)
        .map_err(|e| CliError::new(crate::error::Category::Other, format!("{}: {e}", path.display())))
}

pub fn write_all(r: &Report, out: &Path) -> CliResult<Vec<PathBuf>> {
    std::fs::create_dir_all(out)
        .map_err(|e| CliError::new(crate::error::Category::Other, format!("{}: {e}", out.display())))?;
    let mut written = Vec::new();
    let json = out.join(REPORT_JSON);
    write_json(&json, r)?;
    written.push(json);

    let mut put = |name: &str, text: String| -> CliResult<()> {
        let p = out.join(name);
        write_file(&p, &text)?;
        written.push(p);
        Ok(())
    };
    put(REPORT_TXT, render_text(r))?;

    let mut series = vec![plot::Series {
        name: "uniform".into(),
        points: r.error_vs_bits.iter().map(|p| (p.bits.get() as f64, p.uniform_mse)).collect(),
    }];
    if r.error_vs_bits.iter().all(|p| p.calibrated_mse.is_some()) {
        series.push(plot::Series {
            name: "calibrated".into(),
            points: r
                .error_vs_bits
                .iter()
                .filter_map(|p| p.calibrated_mse.map(|m| (p.bits.get() as f64, m)))
                .collect(),
        });
    }
    put(
        ERROR_SVG,
        plot::log_line_chart(
            &format!("final-output MSE vs weight bits (A{})", r.act_bits),
            "weight bits",
            "MSE",
            &series,
        ),
    )?;

    let v = &r.variation;
    let mut bars = vec![("token".to_string(), v.token)];
    bars.extend(v.timestep.map(|t| ("timestep".to_string(), t)));
    bars.extend(v.condition.map(|c| ("condition".to_string(), c)));
    bars.push(("channel".to_string(), v.channel));
    put(VARIATION_SVG, plot::bar_chart("activation variation by axis", "CV", &bars))?;

    if let Some(h) = &r.heatmap {
        let rows: Vec<String> = h.groups.iter().map(|g: &LayerGroup| g.as_str().to_string()).collect();
        let cols: Vec<String> = h.metrics.iter().map(|m: &Metric| m.as_str().to_string()).collect();
        let values: Vec<Vec<f64>> = h.values.iter().map(|r| r.to_vec()).collect();
        put(HEATMAP_SVG, plot::heatmap("metric attribution", &rows, &cols, &values))?;
    }
    Ok(written)
}
