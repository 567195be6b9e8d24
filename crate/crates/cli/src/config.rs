use std::path::{Path, PathBuf};

use dtq_core::balance::BalanceKind;
use dtq_core::quant::{Bits, GroupingScheme, QuantMode};
use dtq_core::sensitivity::{partition_timesteps, BitMenu, BudgetCounting};
use dtq_core::toydit::{build_from_config, CalibrationSpec, RunOptions, ToyConfig, ToyModel};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

/// Everything a command needs, read from TOML. Every section is optional
/// and falls back to the seeded default setup.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ToyConfig,
    pub run: RunOptions,
    pub quant: QuantSection,
    pub plan: PlanConfig,
    pub eval: EvalConfig,
    /// Directory every command reads its inputs from and writes to.
    pub out: PathBuf,
}

/// Calibration settings; defaults to W4A8 with per-token dynamic
/// activations and static-dynamic balance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QuantSection {
    pub weight_bits: Bits,
    pub act_bits: Bits,
    pub act_scheme: GroupingScheme,
    pub act_mode: QuantMode,
    pub balance: BalanceKind,
    /// Fixed α; absent searches the default grid.
    pub alpha: Option<f64>,
    pub rotation_seed: u64,
}

impl Default for QuantSection {
    fn default() -> Self {
        let s = CalibrationSpec::default();
        Self {
            weight_bits: Bits::B4,
            act_bits: s.act_bits,
            act_scheme: s.act_scheme,
            act_mode: s.act_mode,
            balance: s.balance,
            alpha: s.alpha,
            rotation_seed: s.rotation_seed,
        }
    }
}

impl QuantSection {
    pub fn spec(&self) -> CalibrationSpec {
        CalibrationSpec {
            weight_bits: self.weight_bits,
            act_bits: self.act_bits,
            act_scheme: self.act_scheme,
            act_mode: self.act_mode,
            balance: self.balance,
            alpha: self.alpha,
            rotation_seed: self.rotation_seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlanConfig {
    pub low: Bits,
    pub high: Bits,
    pub budget: f64,
    pub counting: BudgetCounting,
    /// Plan applied by `quantize` and `eval`; relative paths resolve against
    /// the output directory.
    pub path: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Sampler seeds averaged by `eval` and the ablation in `report`.
    pub clips: Vec<u64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ToyConfig::default(),
            run: RunOptions::default(),
            quant: QuantSection::default(),
            plan: PlanConfig::default(),
            eval: EvalConfig::default(),
            out: PathBuf::from("out"),
        }
    }
}

impl Default for PlanConfig {
    fn default() -> Self {
        Self {
            low: Bits::B4,
            high: Bits::B8,
            budget: 6.0,
            counting: BudgetCounting::Params,
            path: None,
        }
    }
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { clips: vec![0, 1, 2, 3] }
    }
}

/// Parses `W4A8`-style bit specs.
pub fn parse_bits(spec: &str) -> CliResult<(Bits, Bits)> {
    let bad = || CliError::config(format!("bit spec {spec:?} is not of the form W<bits>A<bits>"));
    let rest = spec.strip_prefix(['W', 'w']).ok_or_else(bad)?;
    let (w, a) = rest.split_once(['A', 'a']).ok_or_else(bad)?;
    let parse = |s: &str| -> CliResult<Bits> {
        let v: u32 = s.parse().map_err(|_| bad())?;
        Bits::new(v).map_err(|e| CliError::config(e.to_string()))
    };
    Ok((parse(w)?, parse(a)?))
}

/// Command-line overrides applied on top of the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub bits: Option<String>,
    pub budget: Option<f64>,
    pub out: Option<PathBuf>,
}

impl RunConfig {
    pub fn load(path: Option<&Path>, o: &Overrides) -> CliResult<Self> {
        let mut cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| {
                    let cat = if e.kind() == std::io::ErrorKind::NotFound {
                        crate::error::Category::MissingInput
                    } else {
                        crate::error::Category::Config
                    };
                    CliError::new(cat, format!("{}: {e}", p.display()))
                })?;
                toml::from_str(&text).map_err(|e| CliError::config(format!("{}: {e}", p.display())))?
            }
            None => RunConfig::default(),
        };
        if let Some(s) = o.seed {
            cfg.run.seed = s;
        }
        if let Some(b) = &o.bits {
            let (w, a) = parse_bits(b)?;
            cfg.quant.weight_bits = w;
            cfg.quant.act_bits = a;
        }
        if let Some(b) = o.budget {
            cfg.plan.budget = b;
        }
        if let Some(d) = &o.out {
            cfg.out = d.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Checks the settings that do not depend on input files. The budget is
    /// checked where it is used, so an infeasible one gets its own exit code.
    pub fn validate(&self) -> CliResult<()> {
        self.model.validate().map_err(|e| CliError::config(e.to_string()))?;
        partition_timesteps(self.run.steps).map_err(|e| CliError::config(format!("run.steps: {e}")))?;
        BitMenu::new(self.plan.low, self.plan.high).map_err(|e| CliError::config(format!("plan: {e}")))?;
        if !self.plan.budget.is_finite() {
            return Err(CliError::config("plan.budget must be finite"));
        }
        if let Some(a) = self.quant.alpha {
            if !(0.0..=1.0).contains(&a) {
                return Err(CliError::config(format!("quant.alpha must lie in [0, 1], got {a}")));
            }
        }
        if self.eval.clips.is_empty() {
            return Err(CliError::config("eval.clips is empty"));
        }
        Ok(())
    }

    pub fn build_model(&self) -> CliResult<ToyModel> {
        build_from_config(&self.model).map_err(|e| CliError::config(e.to_string()))
    }

    pub fn menu(&self) -> BitMenu {
        BitMenu {
            low: self.plan.low,
            high: self.plan.high,
        }
    }

    pub fn out_path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    /// `p` as given if absolute, otherwise inside the output directory.
    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.out.join(p)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bit_specs() {
        assert_eq!(parse_bits("W4A8").unwrap(), (Bits::B4, Bits::B8));
        assert_eq!(parse_bits("w8a8").unwrap(), (Bits::B8, Bits::B8));
        assert!(parse_bits("W3A8").is_err());
        assert!(parse_bits("4/8").is_err());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<RunConfig>("[model]\nwidht = 64\n").is_err());
        assert!(toml::from_str::<RunConfig>("colour = 1\n").is_err());
        let c: RunConfig = toml::from_str("[quant]\nact_scheme = \"per_tensor\"\nact_mode = \"static\"\n").unwrap();
        assert_eq!(c.quant.act_mode, QuantMode::Static);
        assert_eq!(c.quant.weight_bits, Bits::B4);
    }

    #[test]
    fn default_round_trips_through_toml() {
        let c = RunConfig::default();
        let text = toml::to_string(&c).unwrap();
        assert_eq!(toml::from_str::<RunConfig>(&text).unwrap(), c);
    }
}
