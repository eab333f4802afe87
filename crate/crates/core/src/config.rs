//! JSON fixture descriptions: manifold, metric, magnetic field, grid and
//! per-command parameter sections. Fixtures ship in-repo so every reported run
//! is reproducible from its config path and seed.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dynamics::IntegratorConfig;
use crate::error::{Error, Result};
use crate::geometry::{BaseManifold, Chart, MagneticForm, MetricField, TwistedPhaseSpace};
use crate::orbit::{CensusConfig, DedupConfig, ShootingConfig};
use crate::symplectic::{DEFAULT_MAX_MULTIPLE, DEFAULT_REL_TOL};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FixtureConfig {
    pub name: String,
    pub manifold: ManifoldConfig,
    pub metric: MetricConfig,
    pub magnetic: MagneticConfig,
    /// Per-axis sample counts for eigenvalue-field sweeps.
    pub grid: Vec<usize>,
    #[serde(default)]
    pub resonance: ResonanceConfig,
    #[serde(default)]
    pub simulate: Option<SimulateSection>,
    #[serde(default)]
    pub converge: Option<ConvergeSection>,
    #[serde(default)]
    pub census: Option<CensusSection>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifoldConfig {
    pub dims: usize,
    /// Periodic-box periods; mutually exclusive with `patch`.
    #[serde(default)]
    pub periods: Option<Vec<f64>>,
    #[serde(default)]
    pub patch: Option<PatchConfig>,
    pub cuplength: u32,
    pub crit: u32,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatchConfig {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MetricConfig {
    Identity,
    Diagonal { values: Vec<f64> },
    ConformalSine { base: f64, amp: f64, axis: usize },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MagneticConfig {
    ConstantSurface { strength: f64 },
    SplitConstant { strengths: Vec<f64> },
    SineSurface { base: f64, amp: f64, axis: usize },
    NonclosedLinear { axis: usize },
    ExactSine,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResonanceConfig {
    pub max_multiple: u32,
    pub rel_tol: f64,
}

impl Default for ResonanceConfig {
    fn default() -> Self {
        Self {
            max_multiple: DEFAULT_MAX_MULTIPLE,
            rel_tol: DEFAULT_REL_TOL,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateSection {
    pub q: Vec<f64>,
    pub p: Vec<f64>,
    pub t_final: f64,
    #[serde(default = "default_step")]
    pub step: f64,
    #[serde(default = "default_stride")]
    pub sample_stride: usize,
    #[serde(default = "default_drift")]
    pub drift_bound: f64,
}

fn default_step() -> f64 {
    1e-3
}
fn default_stride() -> usize {
    10
}
fn default_drift() -> f64 {
    1e-6
}

impl SimulateSection {
    pub fn integrator(&self) -> IntegratorConfig {
        IntegratorConfig {
            step: self.step,
            sample_stride: self.sample_stride,
            drift_bound: self.drift_bound,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvergeSection {
    pub epsilons: Vec<f64>,
    #[serde(default = "default_samples")]
    pub n_samples: usize,
    /// Required decay per epsilon halving, pinned from the baseline run.
    #[serde(default = "default_ratio")]
    pub max_ratio: f64,
}

fn default_samples() -> usize {
    400
}
fn default_ratio() -> f64 {
    0.6
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CensusSection {
    pub epsilons: Vec<f64>,
    #[serde(default = "default_n_base")]
    pub n_base: usize,
    #[serde(default = "default_n_fibre")]
    pub n_fibre: usize,
    #[serde(default)]
    pub shooting: ShootingConfig,
    #[serde(default)]
    pub dedup: DedupConfig,
}

fn default_n_base() -> usize {
    8
}
fn default_n_fibre() -> usize {
    8
}

impl CensusSection {
    pub fn census_config(&self) -> CensusConfig {
        CensusConfig {
            n_base: self.n_base,
            n_fibre: self.n_fibre,
            shooting: self.shooting,
            dedup: self.dedup,
        }
    }
}

impl FixtureConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: FixtureConfig = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.manifold.dims;
        if d == 0 || !d.is_multiple_of(2) {
            return Err(Error::InvalidConfig(format!(
                "manifold dims must be a positive even number, got {d}"
            )));
        }
        match (&self.manifold.periods, &self.manifold.patch) {
            (Some(p), None) => {
                if p.len() != d {
                    return Err(Error::InvalidConfig(format!(
                        "periods length {} != dims {d}",
                        p.len()
                    )));
                }
                if p.iter().any(|&l| l <= 0.0) {
                    return Err(Error::InvalidConfig("periods must be positive".into()));
                }
            }
            (None, Some(patch)) => {
                if patch.lo.len() != d || patch.hi.len() != d {
                    return Err(Error::InvalidConfig("patch bounds must match dims".into()));
                }
                if patch.lo.iter().zip(&patch.hi).any(|(l, h)| l >= h) {
                    return Err(Error::InvalidConfig("patch must have lo < hi".into()));
                }
            }
            _ => {
                return Err(Error::InvalidConfig(
                    "manifold needs exactly one of periods or patch".into(),
                ))
            }
        }
        if self.grid.len() != d {
            return Err(Error::InvalidConfig(format!(
                "grid length {} != dims {d}",
                self.grid.len()
            )));
        }
        if self.resonance.rel_tol <= 0.0 {
            return Err(Error::InvalidConfig("rel_tol must be positive".into()));
        }
        if let Some(c) = &self.census {
            if c.epsilons.iter().any(|&e| e <= 0.0) {
                return Err(Error::InvalidConfig("census epsilons must be positive".into()));
            }
            if c.shooting.tol <= 0.0 || c.dedup.tol_period <= 0.0 {
                return Err(Error::InvalidConfig("tolerances must be positive".into()));
            }
        }
        if let Some(c) = &self.converge {
            if c.epsilons.iter().any(|&e| e <= 0.0) {
                return Err(Error::InvalidConfig(
                    "converge epsilons must be positive".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn build_space(&self) -> Result<TwistedPhaseSpace> {
        let d = self.manifold.dims;
        let chart = match (&self.manifold.periods, &self.manifold.patch) {
            (Some(p), None) => Chart::PeriodicBox { periods: p.clone() },
            (None, Some(patch)) => Chart::Patch {
                lo: patch.lo.clone(),
                hi: patch.hi.clone(),
            },
            _ => unreachable!("validated"),
        };
        let base = BaseManifold {
            chart,
            cuplength: self.manifold.cuplength,
            crit_lower_bound: self.manifold.crit,
        };
        let metric = match &self.metric {
            MetricConfig::Identity => MetricField::identity(d),
            MetricConfig::Diagonal { values } => {
                if values.len() != d {
                    return Err(Error::InvalidConfig("diagonal metric length != dims".into()));
                }
                MetricField::diagonal(values.clone())?
            }
            MetricConfig::ConformalSine { base, amp, axis } => {
                MetricField::conformal_sine(d, *base, *amp, *axis)?
            }
        };
        let magnetic = match &self.magnetic {
            MagneticConfig::ConstantSurface { strength } => {
                if d != 2 {
                    return Err(Error::InvalidConfig("constant_surface needs dims = 2".into()));
                }
                MagneticForm::constant_surface(*strength)
            }
            MagneticConfig::SplitConstant { strengths } => {
                if strengths.len() * 2 != d {
                    return Err(Error::InvalidConfig(
                        "split_constant needs dims / 2 strengths".into(),
                    ));
                }
                MagneticForm::split_constant(strengths.clone())
            }
            MagneticConfig::SineSurface { base, amp, axis } => {
                if d != 2 {
                    return Err(Error::InvalidConfig("sine_surface needs dims = 2".into()));
                }
                MagneticForm::sine_surface(*base, *amp, *axis)?
            }
            MagneticConfig::NonclosedLinear { axis } => MagneticForm::nonclosed_linear(d, *axis)?,
            MagneticConfig::ExactSine => MagneticForm::exact_sine(d)?,
        };
        Ok(TwistedPhaseSpace::new(base, metric, magnetic))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn demo_json() -> &'static str {
        r#"{
            "name": "perturbed-t2",
            "manifold": { "dims": 2, "periods": [6.283185307179586, 6.283185307179586], "cuplength": 2, "crit": 3 },
            "metric": { "kind": "identity" },
            "magnetic": { "kind": "sine_surface", "base": 2.0, "amp": 1.0, "axis": 0 },
            "grid": [16, 16],
            "census": { "epsilons": [0.1, 0.05], "n_base": 4, "n_fibre": 4 }
        }"#
    }

    #[test]
    fn parses_and_builds() {
        let cfg: FixtureConfig = serde_json::from_str(demo_json()).unwrap();
        cfg.validate().unwrap();
        let space = cfg.build_space().unwrap();
        assert_eq!(space.dim_base(), 2);
        assert_eq!(space.base.cuplength, 2);
        let c = cfg.census.unwrap();
        assert_eq!(c.n_base, 4);
        // defaulted shooting tolerance
        assert_eq!(c.shooting.tol, 1e-9);
    }

    #[test]
    fn rejects_unknown_fields_and_bad_dims() {
        let bad = demo_json().replace("\"grid\"", "\"grids\"");
        assert!(serde_json::from_str::<FixtureConfig>(&bad).is_err());

        let cfg: FixtureConfig = serde_json::from_str(demo_json()).unwrap();
        let mut wrong = cfg.clone();
        wrong.grid = vec![16];
        assert!(wrong.validate().is_err());
        let mut wrong = cfg;
        wrong.manifold.periods = None;
        assert!(wrong.validate().is_err());
    }
}
