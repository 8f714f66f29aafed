//! TOML experiment configuration.
//!
//! Every section except `[model]` is optional; missing keys take the
//! defaults of the selected model, which follow the published experiment
//! settings at desk scale (fewer cycles).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hybrid::{BridgingMode, HybridConfig, StageOrder};
use crate::localization::LocalizationSpec;
use crate::models::{CoupledParams, Lorenz63Params, Lorenz96Params};

/// Free-run steps from `(1, 1, 1)` used to find a Lorenz-63 attractor point.
pub const ATTRACTOR_STEPS: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ModelConfig {
    Lorenz63(Lorenz63Params<f64>),
    Lorenz96(Lorenz96Params<f64>),
    Coupled(CoupledParams<f64>),
}

impl ModelConfig {
    pub fn kind(&self) -> &'static str {
        match self {
            Self::Lorenz63(_) => "lorenz63",
            Self::Lorenz96(_) => "lorenz96",
            Self::Coupled(_) => "coupled",
        }
    }

    /// `(grid points, local dimension, periodic)`.
    pub fn grid(&self) -> (usize, usize, bool) {
        match self {
            Self::Lorenz63(_) => (1, 3, false),
            Self::Lorenz96(p) => (p.sites, 1, true),
            Self::Coupled(p) => (p.sites, 3, true),
        }
    }

    pub fn state_dim(&self) -> usize {
        let (points, local, _) = self.grid();
        points * local
    }

    fn validate(&self) -> Result<()> {
        match self {
            Self::Lorenz63(p) => p.validate(),
            Self::Lorenz96(p) => p.validate(),
            Self::Coupled(p) => p.validate(),
        }
    }
}

/// Gaussian initial distribution; the mean is model-specific (an attractor
/// point for Lorenz-63, zero otherwise).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InitialSpec {
    pub variance: f64,
}

/// Lists of values to sweep over; empty lists are not swept.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub alpha: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub theta: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub ensemble_size: Vec<usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub seed: Vec<u64>,
}

impl SweepSpec {
    pub fn is_empty(&self) -> bool {
        self.alpha.is_empty() && self.theta.is_empty() && self.ensemble_size.is_empty() && self.seed.is_empty()
    }
}

/// Fully resolved experiment settings.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub dt: f64,
    pub dt_obs: f64,
    pub obs_every: usize,
    pub obs_component: usize,
    pub obs_variance: f64,
    pub ensemble_size: usize,
    pub hybrid: HybridConfig<f64>,
    pub localization: Option<LocalizationSpec<f64>>,
    /// Total assimilation cycles, spin-up included.
    pub cycles: usize,
    /// Leading cycles run with `alpha = 0` and excluded from the RMSE.
    pub spin_up: usize,
    pub seed: u64,
    pub initial: InitialSpec,
    pub sweep: SweepSpec,
}

impl ExperimentConfig {
    /// Defaults for a model kind: `lorenz63`, `lorenz96` or `coupled`.
    pub fn defaults(kind: &str) -> Result<Self> {
        let hybrid = HybridConfig::fixed(0.0).with_beta(0.2);
        let base = |model, dt, dt_obs, obs_every, localization, cycles, spin_up, variance| Self {
            model,
            dt,
            dt_obs,
            obs_every,
            obs_component: 0,
            obs_variance: 8.0,
            ensemble_size: 20,
            hybrid,
            localization,
            cycles,
            spin_up,
            seed: 0,
            initial: InitialSpec { variance },
            sweep: SweepSpec::default(),
        };
        let loc = Some(LocalizationSpec { radius: 4.0 });
        match kind {
            "lorenz63" => Ok(base(
                ModelConfig::Lorenz63(Lorenz63Params::default()),
                0.01,
                0.12,
                1,
                None,
                2000,
                0,
                1.0,
            )),
            "lorenz96" => Ok(base(
                ModelConfig::Lorenz96(Lorenz96Params::default()),
                0.11 / 22.0,
                0.11,
                2,
                loc,
                2000,
                0,
                0.01,
            )),
            "coupled" => Ok(base(
                ModelConfig::Coupled(CoupledParams::default()),
                0.002,
                0.15,
                2,
                loc,
                600,
                100,
                0.01,
            )),
            other => Err(Error::Config(format!(
                "unknown model kind `{other}` (expected lorenz63, lorenz96 or coupled)"
            ))),
        }
    }

    /// Cycle counts of the published runs.
    pub fn paper_scale(&mut self) {
        match self.model {
            ModelConfig::Lorenz63(_) => {
                self.cycles = 100_000;
                self.spin_up = 0;
            }
            ModelConfig::Lorenz96(_) => {
                self.cycles = 50_000;
                self.spin_up = 0;
            }
            ModelConfig::Coupled(_) => {
                self.cycles = 51_000;
                self.spin_up = 1000;
            }
        }
    }

    /// Integrator steps per observation interval.
    pub fn steps_per_obs(&self) -> Result<usize> {
        steps_between(self.dt, self.dt_obs)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.steps_per_obs()?;
        let (points, local, _) = self.model.grid();
        if self.obs_every == 0 || self.obs_every > points {
            return Err(Error::Config(format!(
                "observation.every = {} must lie in [1, {points}]",
                self.obs_every
            )));
        }
        if self.obs_component >= local {
            return Err(Error::Config(format!(
                "observation.component = {} must be < {local}",
                self.obs_component
            )));
        }
        if !(self.obs_variance >= 0.0) || !self.obs_variance.is_finite() {
            return Err(Error::Config("observation.variance must be >= 0".into()));
        }
        if self.ensemble_size < 2 {
            return Err(Error::Config("filter.ensemble_size must be >= 2".into()));
        }
        self.hybrid.validate().map_err(|e| Error::Config(e.to_string()))?;
        if let Some(loc) = &self.localization {
            if !(loc.radius > 0.0) {
                return Err(Error::Config("localization.radius must be > 0".into()));
            }
        }
        if self.cycles == 0 {
            return Err(Error::Config("experiment.cycles must be >= 1".into()));
        }
        if self.spin_up >= self.cycles {
            return Err(Error::Config(format!(
                "experiment.spin_up = {} leaves no scored cycles out of {}",
                self.spin_up, self.cycles
            )));
        }
        if !(self.initial.variance >= 0.0) || !self.initial.variance.is_finite() {
            return Err(Error::Config("initial.variance must be >= 0".into()));
        }
        for &a in self.sweep.alpha.iter().chain(&self.sweep.theta) {
            if !(0.0..=1.0).contains(&a) {
                return Err(Error::Config(format!("sweep value {a} not in [0, 1]")));
            }
        }
        if self.sweep.ensemble_size.iter().any(|&m| m < 2) {
            return Err(Error::Config("sweep.ensemble_size entries must be >= 2".into()));
        }
        Ok(())
    }

    /// TOML with every key spelled out; parses back to an equal config.
    pub fn to_toml(&self) -> String {
        let raw = RawConfig::from(self);
        toml::to_string(&raw).expect("config serialises")
    }
}

fn steps_between(dt: f64, dt_obs: f64) -> Result<usize> {
    if !(dt > 0.0 && dt_obs > 0.0) || !dt.is_finite() || !dt_obs.is_finite() {
        return Err(Error::Config("dt and dt_obs must be positive".into()));
    }
    let ratio = dt_obs / dt;
    let n = ratio.round();
    if n < 1.0 || (ratio - n).abs() > 1e-9 * n {
        return Err(Error::Config(format!(
            "dt_obs = {dt_obs} is not an integer multiple of dt = {dt}"
        )));
    }
    Ok(n as usize)
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    model: RawModel,
    #[serde(default)]
    integration: RawIntegration,
    #[serde(default)]
    observation: RawObservation,
    #[serde(default)]
    filter: RawFilter,
    #[serde(default)]
    localization: RawLocalization,
    #[serde(default)]
    experiment: RawExperiment,
    #[serde(default)]
    initial: RawInitial,
    #[serde(default, skip_serializing_if = "SweepSpec::is_empty")]
    sweep: SweepSpec,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawModel {
    kind: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    sigma: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    rho: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    beta: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    sites: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    forcing: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    delta: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    epsilon: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    gamma: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    c: Option<f64>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawIntegration {
    #[serde(skip_serializing_if = "Option::is_none")]
    dt: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    dt_obs: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    steps_per_obs: Option<usize>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawObservation {
    #[serde(skip_serializing_if = "Option::is_none")]
    every: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    component: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    variance: Option<f64>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawFilter {
    #[serde(skip_serializing_if = "Option::is_none")]
    ensemble_size: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    alpha: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    theta: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    ordering: Option<StageOrder>,
    #[serde(skip_serializing_if = "Option::is_none")]
    beta: Option<f64>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawLocalization {
    #[serde(skip_serializing_if = "Option::is_none")]
    enabled: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    radius: Option<f64>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawExperiment {
    #[serde(skip_serializing_if = "Option::is_none")]
    cycles: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    spin_up: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawInitial {
    #[serde(skip_serializing_if = "Option::is_none")]
    variance: Option<f64>,
}

fn reject_keys(kind: &str, keys: &[(&str, bool)]) -> Result<()> {
    match keys.iter().find(|(_, present)| *present) {
        Some((name, _)) => Err(Error::Config(format!(
            "[model] key `{name}` does not apply to kind `{kind}`"
        ))),
        None => Ok(()),
    }
}

impl RawModel {
    fn resolve(&self, default: ModelConfig) -> Result<ModelConfig> {
        let kind = self.kind.as_str();
        match default {
            ModelConfig::Lorenz63(d) => {
                reject_keys(
                    kind,
                    &[
                        ("sites", self.sites.is_some()),
                        ("forcing", self.forcing.is_some()),
                        ("delta", self.delta.is_some()),
                        ("epsilon", self.epsilon.is_some()),
                        ("gamma", self.gamma.is_some()),
                        ("c", self.c.is_some()),
                    ],
                )?;
                Ok(ModelConfig::Lorenz63(Lorenz63Params {
                    sigma: self.sigma.unwrap_or(d.sigma),
                    rho: self.rho.unwrap_or(d.rho),
                    beta: self.beta.unwrap_or(d.beta),
                }))
            }
            ModelConfig::Lorenz96(d) => {
                reject_keys(
                    kind,
                    &[
                        ("sigma", self.sigma.is_some()),
                        ("rho", self.rho.is_some()),
                        ("beta", self.beta.is_some()),
                        ("delta", self.delta.is_some()),
                        ("epsilon", self.epsilon.is_some()),
                        ("gamma", self.gamma.is_some()),
                        ("c", self.c.is_some()),
                    ],
                )?;
                Ok(ModelConfig::Lorenz96(Lorenz96Params {
                    sites: self.sites.unwrap_or(d.sites),
                    forcing: self.forcing.unwrap_or(d.forcing),
                }))
            }
            ModelConfig::Coupled(d) => {
                reject_keys(
                    kind,
                    &[
                        ("sigma", self.sigma.is_some()),
                        ("rho", self.rho.is_some()),
                        ("beta", self.beta.is_some()),
                    ],
                )?;
                Ok(ModelConfig::Coupled(CoupledParams {
                    sites: self.sites.unwrap_or(d.sites),
                    forcing: self.forcing.unwrap_or(d.forcing),
                    delta: self.delta.unwrap_or(d.delta),
                    epsilon: self.epsilon.unwrap_or(d.epsilon),
                    gamma: self.gamma.unwrap_or(d.gamma),
                    c: self.c.unwrap_or(d.c),
                }))
            }
        }
    }
}

impl RawConfig {
    fn resolve(self) -> Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::defaults(&self.model.kind)?;
        cfg.model = self.model.resolve(cfg.model)?;

        let i = self.integration;
        if let Some(v) = i.dt_obs {
            cfg.dt_obs = v;
        }
        match (i.dt, i.steps_per_obs) {
            (Some(dt), Some(n)) => {
                if steps_between(dt, cfg.dt_obs)? != n {
                    return Err(Error::Config(format!("dt = {dt} and steps_per_obs = {n} disagree")));
                }
                cfg.dt = dt;
            }
            (Some(dt), None) => cfg.dt = dt,
            (None, Some(0)) => return Err(Error::Config("steps_per_obs must be >= 1".into())),
            (None, Some(n)) => cfg.dt = cfg.dt_obs / n as f64,
            // keep the model's default number of inner steps
            (None, None) if i.dt_obs.is_some() => {
                let defaults = ExperimentConfig::defaults(&self.model.kind)?;
                cfg.dt = cfg.dt_obs / defaults.steps_per_obs()? as f64;
            }
            (None, None) => {}
        }

        let o = self.observation;
        cfg.obs_every = o.every.unwrap_or(cfg.obs_every);
        cfg.obs_component = o.component.unwrap_or(cfg.obs_component);
        cfg.obs_variance = o.variance.unwrap_or(cfg.obs_variance);

        let f = self.filter;
        cfg.ensemble_size = f.ensemble_size.unwrap_or(cfg.ensemble_size);
        cfg.hybrid.mode = match (f.alpha, f.theta) {
            (Some(_), Some(_)) => return Err(Error::Config("[filter] sets both alpha and theta".into())),
            (Some(a), None) => BridgingMode::Fixed(a),
            (None, Some(t)) => BridgingMode::Adaptive(t),
            (None, None) => cfg.hybrid.mode,
        };
        cfg.hybrid.ordering = f.ordering.unwrap_or(cfg.hybrid.ordering);
        cfg.hybrid.beta = f.beta.unwrap_or(cfg.hybrid.beta);

        let l = self.localization;
        cfg.localization = match (l.enabled, l.radius) {
            (Some(false), Some(_)) => return Err(Error::Config("[localization] disabled but radius given".into())),
            (Some(false), None) => None,
            (_, Some(r)) => Some(LocalizationSpec { radius: r }),
            (Some(true), None) => Some(cfg.localization.unwrap_or(LocalizationSpec { radius: 4.0 })),
            (None, None) => cfg.localization,
        };

        let e = self.experiment;
        cfg.cycles = e.cycles.unwrap_or(cfg.cycles);
        cfg.spin_up = e.spin_up.unwrap_or(cfg.spin_up);
        cfg.seed = e.seed.unwrap_or(cfg.seed);
        cfg.initial.variance = self.initial.variance.unwrap_or(cfg.initial.variance);
        cfg.sweep = self.sweep;
        cfg.validate()?;
        Ok(cfg)
    }
}

impl From<&ExperimentConfig> for RawConfig {
    fn from(cfg: &ExperimentConfig) -> Self {
        let mut model = RawModel {
            kind: cfg.model.kind().to_string(),
            ..RawModel::default()
        };
        match cfg.model {
            ModelConfig::Lorenz63(p) => {
                model.sigma = Some(p.sigma);
                model.rho = Some(p.rho);
                model.beta = Some(p.beta);
            }
            ModelConfig::Lorenz96(p) => {
                model.sites = Some(p.sites);
                model.forcing = Some(p.forcing);
            }
            ModelConfig::Coupled(p) => {
                model.sites = Some(p.sites);
                model.forcing = Some(p.forcing);
                model.delta = Some(p.delta);
                model.epsilon = Some(p.epsilon);
                model.gamma = Some(p.gamma);
                model.c = Some(p.c);
            }
        }
        let (alpha, theta) = match cfg.hybrid.mode {
            BridgingMode::Fixed(a) => (Some(a), None),
            BridgingMode::Adaptive(t) => (None, Some(t)),
        };
        Self {
            model,
            integration: RawIntegration {
                dt: Some(cfg.dt),
                dt_obs: Some(cfg.dt_obs),
                steps_per_obs: None,
            },
            observation: RawObservation {
                every: Some(cfg.obs_every),
                component: Some(cfg.obs_component),
                variance: Some(cfg.obs_variance),
            },
            filter: RawFilter {
                ensemble_size: Some(cfg.ensemble_size),
                alpha,
                theta,
                ordering: Some(cfg.hybrid.ordering),
                beta: Some(cfg.hybrid.beta),
            },
            localization: RawLocalization {
                enabled: Some(cfg.localization.is_some()),
                radius: cfg.localization.map(|l| l.radius),
            },
            experiment: RawExperiment {
                cycles: Some(cfg.cycles),
                spin_up: Some(cfg.spin_up),
                seed: Some(cfg.seed),
            },
            initial: RawInitial {
                variance: Some(cfg.initial.variance),
            },
            sweep: cfg.sweep.clone(),
        }
    }
}

/// Parses and validates a TOML experiment description.
///
/// Unknown sections or keys are rejected with their line and column.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let raw: RawConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
    raw.resolve()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_lorenz63_uses_defaults() {
        let cfg = parse_config("[model]\nkind = \"lorenz63\"\n").unwrap();
        assert_eq!(cfg, ExperimentConfig::defaults("lorenz63").unwrap());
        assert_eq!(cfg.steps_per_obs().unwrap(), 12);
        assert_eq!(cfg.hybrid.mode, BridgingMode::Fixed(0.0));
        assert_eq!(cfg.hybrid.beta, 0.2);
        assert!(cfg.localization.is_none());
    }

    #[test]
    fn lorenz96_step_counts() {
        let cfg =
            parse_config("[model]\nkind = \"lorenz96\"\n[integration]\ndt_obs = 0.11\nsteps_per_obs = 22\n").unwrap();
        assert_eq!(cfg.steps_per_obs().unwrap(), 22);
        let cfg = parse_config(&format!(
            "[model]\nkind = \"lorenz96\"\n[integration]\ndt = {}\ndt_obs = 0.11\n",
            0.11 / 22.0
        ))
        .unwrap();
        assert_eq!(cfg.steps_per_obs().unwrap(), 22);
        assert_eq!(cfg.localization, Some(LocalizationSpec { radius: 4.0 }));
        assert_eq!(cfg.obs_every, 2);
    }

    #[test]
    fn rejects_bad_configs() {
        let e = parse_config("[model]\nkind = \"lorenz63\"\n[filter]\nalpah = 0.2\n")
            .unwrap_err()
            .to_string();
        assert!(e.contains("alpah") && e.contains("line"), "{e}");
        assert!(parse_config("[model]\nkind = \"lorenz63\"\n[integration]\ndt = 0.01\ndt_obs = 0.125\n").is_err());
        assert!(parse_config("[model]\nkind = \"lorenz63\"\n[filter]\nalpha = 1.5\n").is_err());
        assert!(parse_config("[model]\nkind = \"lorenz63\"\n[filter]\nalpha = 0.2\ntheta = 0.9\n").is_err());
        assert!(parse_config("[model]\nkind = \"lorenz96\"\nrho = 3.0\n").is_err());
        assert!(parse_config("[model]\nkind = \"lorenz99\"\n").is_err());
        assert!(parse_config("[model]\nkind = \"lorenz63\"\n[experiment]\ncycles = 5\nspin_up = 5\n").is_err());
        assert!(parse_config("[model]\nkind = \"lorenz63\"\n[oops]\n").is_err());
        assert!(parse_config("[filter]\nalpha = 0.1\n").is_err());
    }

    #[test]
    fn serialisation_round_trips() {
        for kind in ["lorenz63", "lorenz96", "coupled"] {
            let mut cfg = ExperimentConfig::defaults(kind).unwrap();
            cfg.hybrid.mode = BridgingMode::Adaptive(0.85);
            cfg.hybrid.ordering = StageOrder::EsrfFirst;
            cfg.seed = 12345;
            cfg.sweep.alpha = vec![0.0, 0.1];
            let text = cfg.to_toml();
            assert_eq!(parse_config(&text).unwrap(), cfg, "{text}");
        }
    }

    #[test]
    fn paper_scale_cycles() {
        let mut cfg = ExperimentConfig::defaults("coupled").unwrap();
        cfg.paper_scale();
        assert_eq!((cfg.cycles, cfg.spin_up), (51_000, 1000));
        assert!(cfg.validate().is_ok());
    }
}
