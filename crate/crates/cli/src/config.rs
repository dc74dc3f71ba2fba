//! Run configuration: TOML file, command-line overrides and manifests.

use std::path::Path;

use anyhow::Context;
use evpix::event_stream::{ModelParams, SigmaAlphaMode};
use evpix::photovoltage::{asymptotic_params, normalize, FrontEndParams};
use serde::{Deserialize, Serialize};

/// Normalized model parameters; every field must end up set.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub omega: Option<f64>,
    pub rho: Option<f64>,
    pub theta_minus: Option<f64>,
    pub theta_plus: Option<f64>,
    pub sigma_alpha_mode: Option<SigmaAlphaMode>,
}

/// Raw front end plus voltage thresholds, normalized on load.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrontEndSection {
    pub beta1: f64,
    pub beta2: f64,
    pub beta3: f64,
    pub sigma: f64,
    pub xi1: f64,
    pub xi2: f64,
    pub radiance: f64,
    /// Filter cutoff (rad/s).
    pub omega: f64,
    /// Refractory period (s).
    pub rho: f64,
    /// On threshold (V).
    pub theta_plus_v: f64,
    /// Off threshold (V).
    pub theta_minus_v: f64,
    #[serde(default)]
    pub sigma_alpha_mode: SigmaAlphaMode,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum SamplerChoice {
    /// Path-free sampler on a lattice of reference levels.
    #[default]
    Pathfree,
    /// Path-free sampler with a table per event.
    PathfreeExact,
    /// Bridge-corrected path simulation.
    Oracle,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum StreamFormat {
    #[default]
    Jsonl,
    Csv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StreamSection {
    pub start: f64,
    pub n: usize,
    pub sampler: SamplerChoice,
    pub lattice_spacing: f64,
    pub oracle_dt_factor: f64,
    pub format: StreamFormat,
    pub bins_per_decade: usize,
}

impl Default for StreamSection {
    fn default() -> Self {
        Self {
            start: 0.0,
            n: 100_000,
            sampler: SamplerChoice::Pathfree,
            lattice_spacing: 0.01,
            oracle_dt_factor: 0.01,
            format: StreamFormat::Jsonl,
            bins_per_decade: evpix::analysis::DEFAULT_BINS_PER_DECADE,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExitSection {
    pub omega: f64,
    pub lower: f64,
    pub upper: f64,
    pub start: f64,
    pub n: usize,
    pub oracle_dt_factor: f64,
    /// Fail the run when the two samplers disagree.
    pub cross_check: bool,
    pub ks_alpha: f64,
    /// Time points of the conditional-density series.
    pub density_points: usize,
}

impl Default for ExitSection {
    fn default() -> Self {
        Self {
            omega: 2.0,
            lower: -0.5,
            upper: 1.0,
            start: 0.0,
            n: 10_000,
            oracle_dt_factor: 0.01,
            cross_check: false,
            ks_alpha: 0.01,
            density_points: 400,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConditionalsSection {
    pub z_min: f64,
    pub z_max: f64,
    pub points: usize,
    /// Events of a simulated stream binned against the curves; 0 disables.
    pub overlay_events: usize,
    pub overlay_bin_width: f64,
}

impl Default for ConditionalsSection {
    fn default() -> Self {
        Self {
            z_min: -1.0,
            z_max: 1.0,
            points: 401,
            overlay_events: 0,
            overlay_bin_width: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DynamicsSection {
    pub z0: f64,
    pub n: usize,
    pub determinism_level: f64,
}

impl Default for DynamicsSection {
    fn default() -> Self {
        Self {
            z0: 0.0,
            n: 50,
            determinism_level: 0.99,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MstepSection {
    pub z: f64,
    pub m: Vec<usize>,
    pub replicas: usize,
}

impl Default for MstepSection {
    fn default() -> Self {
        Self {
            z: -0.5,
            m: vec![0, 1, 2, 3, 4, 5, 6, 7, 200],
            replicas: 100_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model: Option<ModelSection>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub front_end: Option<FrontEndSection>,
    pub stream: StreamSection,
    pub exit: ExitSection,
    pub conditionals: ConditionalsSection,
    pub dynamics: DynamicsSection,
    pub mstep: MstepSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            model: None,
            front_end: None,
            stream: StreamSection::default(),
            exit: ExitSection::default(),
            conditionals: ConditionalsSection::default(),
            dynamics: DynamicsSection::default(),
            mstep: MstepSection::default(),
        }
    }
}

/// Configuration problem; reported with exit code 2.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct ConfigError(pub String);

fn config_error(msg: impl Into<String>) -> anyhow::Error {
    ConfigError(msg.into()).into()
}

impl RunConfig {
    pub fn from_file(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        toml::from_str(&text).map_err(|e| config_error(format!("{}: {e}", path.display())))
    }

    /// Model parameters from whichever route the configuration uses.
    pub fn model_params(&self) -> anyhow::Result<ModelParams> {
        match (&self.model, &self.front_end) {
            (Some(_), Some(_)) => Err(config_error("give either [model] or [front_end], not both")),
            (None, None) => Err(config_error(
                "no model parameters: set [model] (omega, rho, theta_minus, theta_plus) or [front_end]",
            )),
            (Some(m), None) => {
                let need = |v: Option<f64>, field: &str| v.ok_or_else(|| config_error(format!("model.{field} is missing")));
                let p = ModelParams {
                    omega: need(m.omega, "omega")?,
                    rho: need(m.rho, "rho")?,
                    theta_minus_tilde: need(m.theta_minus, "theta_minus")?,
                    theta_plus_tilde: need(m.theta_plus, "theta_plus")?,
                    sigma_alpha_mode: m.sigma_alpha_mode.unwrap_or_default(),
                };
                p.validate()?;
                Ok(p)
            }
            (None, Some(f)) => {
                let fe = FrontEndParams {
                    beta1: f.beta1,
                    beta2: f.beta2,
                    beta3: f.beta3,
                    sigma: f.sigma,
                    xi1: f.xi1,
                    xi2: f.xi2,
                    radiance: f.radiance,
                };
                let g = asymptotic_params(&fe)?;
                let th = normalize(&g, f.omega, f.theta_plus_v, f.theta_minus_v)?;
                let p = ModelParams::new(f.omega, f.rho, th.theta_minus_tilde, th.theta_plus_tilde)?
                    .with_mode(f.sigma_alpha_mode);
                Ok(p)
            }
        }
    }
}

/// Everything needed to rerun a command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    pub config: RunConfig,
}

pub const MANIFEST_FILE: &str = "manifest.toml";

impl Manifest {
    pub fn new(command: &str, config: &RunConfig) -> Self {
        Self {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            config: config.clone(),
        }
    }

    pub fn to_toml(&self) -> anyhow::Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn from_file(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        toml::from_str(&text).map_err(|e| config_error(format!("{}: {e}", path.display())))
    }
}
