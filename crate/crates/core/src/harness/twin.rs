use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, RngCore};
use rand_distr::StandardNormal;
use rayon::prelude::*;

use super::config::{ExperimentConfig, ModelConfig, ATTRACTOR_STEPS};
use super::{stream_rng, Stream};
use crate::ensemble::{ensemble_mean, Ensemble};
use crate::error::Result;
use crate::hybrid::{hybrid_update_with_diagnostics, BridgingMode, HybridConfig};
use crate::localization::{localized_hybrid_update_with_diagnostics, FieldEnsemble, GridGeometry, LocalizationSpec};
use crate::models::{balance_residual, balance_solve, MidpointStepper, Model};
use crate::observation::{ComponentSampling, ObservationOperator, Precision};

/// Reference states and observations at `t_k = k dt_obs`, `k = 1..=cycles`.
#[derive(Debug, Clone, PartialEq)]
pub struct TruthAndObs {
    pub reference: Vec<DVector<f64>>,
    pub observations: Vec<DVector<f64>>,
}

/// One row of the per-cycle output.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CycleRecord {
    pub cycle: usize,
    pub rmse: f64,
    pub alpha_mean: f64,
    pub alpha_min: f64,
    pub alpha_max: f64,
    pub ess_mean: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Divergence {
    pub cycle: usize,
    pub reason: String,
}

#[derive(Debug, Clone)]
pub struct ExperimentResult {
    /// One record per cycle, spin-up included.
    pub records: Vec<CycleRecord>,
    /// Time-averaged RMSE over the cycles after spin-up; infinite after
    /// divergence.
    pub rmse: f64,
    pub spin_up: usize,
    pub divergence: Option<Divergence>,
    /// Largest balance residual after the spin-up analyses (coupled model only).
    pub max_balance_residual: Option<f64>,
    pub wall_time: Duration,
}

impl ExperimentResult {
    pub fn diverged(&self) -> bool {
        self.divergence.is_some()
    }
}

pub struct CycleContext<'a> {
    pub cycle: usize,
    pub spin_up: bool,
    pub observation: &'a DVector<f64>,
    pub reference: &'a DVector<f64>,
}

pub struct AnalysisOutput {
    pub ensemble: Ensemble<f64>,
    pub alpha_mean: f64,
    pub alpha_min: f64,
    pub alpha_max: f64,
    pub ess_mean: f64,
}

/// Maps a forecast ensemble to an analysis ensemble.
pub trait AnalysisStep: Sync {
    fn analyze(
        &self,
        forecast: &Ensemble<f64>,
        ctx: &CycleContext<'_>,
        rng: &mut dyn RngCore,
    ) -> Result<AnalysisOutput>;
}

/// The hybrid filter as configured, localized or global.
pub struct HybridAnalysis {
    geometry: GridGeometry,
    local_dim: usize,
    operator: ComponentSampling,
    precision: Precision<f64>,
    variance: f64,
    localization: Option<LocalizationSpec<f64>>,
    hybrid: HybridConfig<f64>,
}

impl HybridAnalysis {
    pub fn from_config(cfg: &ExperimentConfig) -> Result<Self> {
        let (geometry, operator) = observation_layout(cfg)?;
        let precision = Precision::isotropic(geometry.obs_count(), cfg.obs_variance)?;
        Ok(Self {
            local_dim: cfg.model.grid().1,
            geometry,
            operator,
            precision,
            variance: cfg.obs_variance,
            localization: cfg.localization,
            hybrid: cfg.hybrid,
        })
    }
}

fn summary(values: &[f64]) -> (f64, f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    (mean, min, max)
}

impl AnalysisStep for HybridAnalysis {
    fn analyze(
        &self,
        forecast: &Ensemble<f64>,
        ctx: &CycleContext<'_>,
        rng: &mut dyn RngCore,
    ) -> Result<AnalysisOutput> {
        let hybrid = if ctx.spin_up {
            HybridConfig {
                mode: BridgingMode::Fixed(0.0),
                ..self.hybrid
            }
        } else {
            self.hybrid
        };
        match &self.localization {
            None => {
                let o = hybrid_update_with_diagnostics(
                    forecast,
                    ctx.observation,
                    &self.precision,
                    &self.operator,
                    &hybrid,
                    rng,
                )?;
                Ok(AnalysisOutput {
                    ensemble: o.ensemble,
                    alpha_mean: o.alpha,
                    alpha_min: o.alpha,
                    alpha_max: o.alpha,
                    ess_mean: o.ess,
                })
            }
            Some(spec) => {
                let fields = FieldEnsemble::new(forecast.clone(), self.local_dim)?;
                let o = localized_hybrid_update_with_diagnostics(
                    &fields,
                    ctx.observation,
                    &self.geometry,
                    spec,
                    self.variance,
                    &hybrid,
                    rng,
                )?;
                let (alpha_mean, alpha_min, alpha_max) = summary(&o.alphas);
                let (ess_mean, _, _) = summary(&o.ess);
                Ok(AnalysisOutput {
                    ensemble: o.fields.into_stacked(),
                    alpha_mean,
                    alpha_min,
                    alpha_max,
                    ess_mean,
                })
            }
        }
    }
}

fn observation_layout(cfg: &ExperimentConfig) -> Result<(GridGeometry, ComponentSampling)> {
    let (points, local, periodic) = cfg.model.grid();
    let geometry = GridGeometry::every_nth(points, cfg.obs_every, periodic, cfg.obs_component)?;
    let indices = geometry
        .observed
        .iter()
        .map(|&k| k * local + cfg.obs_component)
        .collect();
    let operator = ComponentSampling::new(indices, points * local)?;
    Ok((geometry, operator))
}

fn model_of(cfg: &ExperimentConfig) -> Box<dyn Model<f64>> {
    match cfg.model {
        ModelConfig::Lorenz63(p) => Box::new(p),
        ModelConfig::Lorenz96(p) => Box::new(p),
        ModelConfig::Coupled(p) => Box::new(p),
    }
}

/// State rows entering the RMSE: the slow field `x` for the coupled model,
/// everything otherwise.
fn scored_rows(cfg: &ExperimentConfig) -> Vec<usize> {
    match cfg.model {
        ModelConfig::Coupled(p) => (0..p.sites).map(|l| 3 * l).collect(),
        _ => (0..cfg.model.state_dim()).collect(),
    }
}

fn initial_mean(cfg: &ExperimentConfig) -> Result<DVector<f64>> {
    match cfg.model {
        ModelConfig::Lorenz63(p) => {
            let start = DVector::from_element(3, 1.0);
            MidpointStepper::new(cfg.dt)?.integrate(&p, &start, ATTRACTOR_STEPS)
        }
        _ => Ok(DVector::zeros(cfg.model.state_dim())),
    }
}

fn sample_state<R: Rng + ?Sized>(cfg: &ExperimentConfig, mean: &DVector<f64>, rng: &mut R) -> Result<DVector<f64>> {
    let sd = cfg.initial.variance.sqrt();
    match cfg.model {
        ModelConfig::Coupled(p) => {
            let x = DVector::from_fn(p.sites, |l, _| mean[3 * l] + sd * rng.sample::<f64, _>(StandardNormal));
            let h = balance_solve(&x, p.c)?;
            Ok(DVector::from_fn(3 * p.sites, |k, _| match k % 3 {
                0 => x[k / 3],
                1 => h[k / 3],
                _ => 0.0,
            }))
        }
        _ => Ok(DVector::from_fn(mean.len(), |k, _| {
            mean[k] + sd * rng.sample::<f64, _>(StandardNormal)
        })),
    }
}

/// Initial ensemble drawn from the initial distribution.
pub fn sample_initial_ensemble(cfg: &ExperimentConfig) -> Result<Ensemble<f64>> {
    let mean = initial_mean(cfg)?;
    let mut rng = stream_rng(cfg.seed, Stream::InitialEnsemble);
    let members = (0..cfg.ensemble_size)
        .map(|_| sample_state(cfg, &mean, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    Ensemble::from_members(&members)
}

/// Reference trajectory and noisy observations `y_k = H z_ref(t_k) + sqrt(r) xi_k`.
pub fn generate_truth_and_obs(cfg: &ExperimentConfig) -> Result<TruthAndObs> {
    cfg.validate()?;
    let model = model_of(cfg);
    let steps = cfg.steps_per_obs()?;
    let (_, operator) = observation_layout(cfg)?;
    let mean = initial_mean(cfg)?;
    let mut truth_rng = stream_rng(cfg.seed, Stream::Truth);
    let mut noise_rng = stream_rng(cfg.seed, Stream::ObservationNoise);
    let sd = cfg.obs_variance.sqrt();

    let mut z = sample_state(cfg, &mean, &mut truth_rng)?;
    let mut stepper = MidpointStepper::new(cfg.dt)?;
    let mut reference = Vec::with_capacity(cfg.cycles);
    let mut observations = Vec::with_capacity(cfg.cycles);
    for _ in 0..cfg.cycles {
        z = stepper.integrate(model.as_ref(), &z, steps)?;
        let mut y = operator.observe(z.as_view());
        for v in y.iter_mut() {
            let xi: f64 = noise_rng.sample(StandardNormal);
            *v += sd * xi;
        }
        reference.push(z.clone());
        observations.push(y);
    }
    Ok(TruthAndObs {
        reference,
        observations,
    })
}

fn forecast(model: &dyn Model<f64>, ens: &Ensemble<f64>, dt: f64, steps: usize) -> Result<Ensemble<f64>> {
    let members = (0..ens.size())
        .into_par_iter()
        .map(|i| MidpointStepper::new(dt)?.integrate(model, &ens.member(i), steps))
        .collect::<Result<Vec<_>>>()?;
    Ensemble::from_members(&members)
}

/// Recomputes `h` from `x` for every member; returns the largest residual.
fn rebalance(ens: Ensemble<f64>, c: f64) -> Result<(Ensemble<f64>, f64)> {
    let mut z: DMatrix<f64> = ens.into_matrix();
    let sites = z.nrows() / 3;
    let mut worst = 0.0f64;
    for i in 0..z.ncols() {
        let x = DVector::from_fn(sites, |l, _| z[(3 * l, i)]);
        let h = balance_solve(&x, c)?;
        worst = worst.max(balance_residual(&x, &h, c));
        for l in 0..sites {
            z[(3 * l + 1, i)] = h[l];
        }
    }
    Ok((Ensemble::new(z)?, worst))
}

fn cycle_rmse(ens: &Ensemble<f64>, reference: &DVector<f64>, rows: &[usize]) -> f64 {
    let mean = ensemble_mean(ens);
    let sq: f64 = rows.iter().map(|&r| (mean[r] - reference[r]).powi(2)).sum();
    (sq / rows.len() as f64).sqrt()
}

/// Twin experiment with the configured hybrid filter.
pub fn run_twin_experiment(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    let analysis = HybridAnalysis::from_config(cfg)?;
    run_twin_experiment_with(cfg, &analysis)
}

/// Twin experiment with a custom analysis step.
///
/// Integrator failures and non-finite states in the filter end the run
/// early; the remaining cycles are reported with infinite RMSE and the
/// cause is recorded in [`ExperimentResult::divergence`].
pub fn run_twin_experiment_with(cfg: &ExperimentConfig, analysis: &dyn AnalysisStep) -> Result<ExperimentResult> {
    let start = Instant::now();
    cfg.validate()?;
    let data = generate_truth_and_obs(cfg)?;
    let model = model_of(cfg);
    let steps = cfg.steps_per_obs()?;
    let rows = scored_rows(cfg);
    let balance_c = match cfg.model {
        ModelConfig::Coupled(p) => Some(p.c),
        _ => None,
    };
    let mut rng = stream_rng(cfg.seed, Stream::Rejuvenation);
    let mut ens = sample_initial_ensemble(cfg)?;
    let mut records = Vec::with_capacity(cfg.cycles);
    let mut divergence = None;
    let mut max_balance_residual = None::<f64>;

    for k in 1..=cfg.cycles {
        if divergence.is_some() {
            records.push(CycleRecord {
                cycle: k,
                rmse: f64::INFINITY,
                alpha_mean: f64::NAN,
                alpha_min: f64::NAN,
                alpha_max: f64::NAN,
                ess_mean: f64::NAN,
            });
            continue;
        }
        let spin_up = k <= cfg.spin_up;
        let ctx = CycleContext {
            cycle: k,
            spin_up,
            observation: &data.observations[k - 1],
            reference: &data.reference[k - 1],
        };
        let step = forecast(model.as_ref(), &ens, cfg.dt, steps).and_then(|f| {
            let mut out = analysis.analyze(&f, &ctx, &mut rng)?;
            if let (true, Some(c)) = (spin_up, balance_c) {
                let (balanced, residual) = rebalance(out.ensemble, c)?;
                out.ensemble = balanced;
                max_balance_residual = Some(max_balance_residual.unwrap_or(0.0).max(residual));
            }
            Ok(out)
        });
        match step {
            Ok(out) => {
                let rmse = cycle_rmse(&out.ensemble, ctx.reference, &rows);
                records.push(CycleRecord {
                    cycle: k,
                    rmse,
                    alpha_mean: out.alpha_mean,
                    alpha_min: out.alpha_min,
                    alpha_max: out.alpha_max,
                    ess_mean: out.ess_mean,
                });
                ens = out.ensemble;
            }
            Err(e) => {
                divergence = Some(Divergence {
                    cycle: k,
                    reason: e.to_string(),
                });
                records.push(CycleRecord {
                    cycle: k,
                    rmse: f64::INFINITY,
                    alpha_mean: f64::NAN,
                    alpha_min: f64::NAN,
                    alpha_max: f64::NAN,
                    ess_mean: f64::NAN,
                });
            }
        }
    }

    let scored = &records[cfg.spin_up..];
    let rmse = scored.iter().map(|r| r.rmse).sum::<f64>() / scored.len() as f64;
    Ok(ExperimentResult {
        records,
        rmse,
        spin_up: cfg.spin_up,
        divergence,
        max_balance_residual,
        wall_time: start.elapsed(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;

    struct Oracle;

    impl AnalysisStep for Oracle {
        fn analyze(
            &self,
            forecast: &Ensemble<f64>,
            ctx: &CycleContext<'_>,
            _rng: &mut dyn RngCore,
        ) -> Result<AnalysisOutput> {
            let members = vec![ctx.reference.clone(); forecast.size()];
            Ok(AnalysisOutput {
                ensemble: Ensemble::from_members(&members)?,
                alpha_mean: 0.0,
                alpha_min: 0.0,
                alpha_max: 0.0,
                ess_mean: forecast.size() as f64,
            })
        }
    }

    fn short(kind: &str, cycles: usize) -> ExperimentConfig {
        let mut cfg = ExperimentConfig::defaults(kind).unwrap();
        cfg.cycles = cycles;
        cfg.spin_up = cfg.spin_up.min(cycles / 2);
        cfg.seed = 3;
        cfg
    }

    #[test]
    fn perfect_analysis_gives_zero_rmse() {
        let cfg = short("lorenz63", 20);
        let res = run_twin_experiment_with(&cfg, &Oracle).unwrap();
        assert!(res.rmse <= 1e-12, "{}", res.rmse);
        assert_eq!(res.records.len(), 20);
    }

    #[test]
    fn noiseless_observations_equal_truth() {
        let mut cfg = short("lorenz96", 5);
        cfg.obs_variance = 0.0;
        let data = generate_truth_and_obs(&cfg).unwrap();
        for (z, y) in data.reference.iter().zip(&data.observations) {
            assert_eq!(y.len(), 20);
            for (q, k) in (1..40).step_by(2).enumerate() {
                assert_eq!(y[q], z[k]);
            }
        }
    }

    #[test]
    fn observations_are_reproducible() {
        let cfg = short("lorenz63", 10);
        assert_eq!(
            generate_truth_and_obs(&cfg).unwrap(),
            generate_truth_and_obs(&cfg).unwrap()
        );
        let mut other = cfg.clone();
        other.seed += 1;
        assert_ne!(
            generate_truth_and_obs(&cfg).unwrap(),
            generate_truth_and_obs(&other).unwrap()
        );
    }

    #[test]
    fn rejuvenation_does_not_perturb_truth() {
        let cfg = short("lorenz63", 10);
        let mut other = cfg.clone();
        other.hybrid.beta = 0.0;
        other.ensemble_size = 7;
        assert_eq!(
            generate_truth_and_obs(&cfg).unwrap(),
            generate_truth_and_obs(&other).unwrap()
        );
    }

    #[test]
    fn coupled_initial_members_are_balanced() {
        let cfg = short("coupled", 4);
        let ens = sample_initial_ensemble(&cfg).unwrap();
        let z = ens.member(0);
        let x = DVector::from_fn(40, |l, _| z[3 * l]);
        let h = DVector::from_fn(40, |l, _| z[3 * l + 1]);
        assert!(balance_residual(&x, &h, 0.5) <= 1e-10);
        assert!((0..40).all(|l| z[3 * l + 2] == 0.0));
    }

    #[test]
    fn coupled_spin_up_enforces_balance() {
        let mut cfg = short("coupled", 6);
        cfg.spin_up = 3;
        cfg.ensemble_size = 6;
        let res = run_twin_experiment(&cfg).unwrap();
        assert!(!res.diverged(), "{:?}", res.divergence);
        assert!(res.max_balance_residual.unwrap() <= 1e-10);
        assert_eq!(res.records.len(), 6);
        assert!(res.records[..3].iter().all(|r| r.alpha_max == 0.0));
    }

    #[test]
    fn series_lengths_match_schedule() {
        let mut cfg = short("lorenz96", 30);
        cfg.ensemble_size = 10;
        cfg.hybrid.mode = BridgingMode::Adaptive(0.9);
        let res = run_twin_experiment(&cfg).unwrap();
        assert_eq!(res.records.len(), 30);
        assert_eq!(
            res.records.iter().map(|r| r.cycle).collect::<Vec<_>>(),
            (1..=30).collect::<Vec<_>>()
        );
        assert!(res.rmse.is_finite());
        assert!(res
            .records
            .iter()
            .all(|r| r.alpha_min <= r.alpha_mean && r.alpha_mean <= r.alpha_max));
    }

    #[test]
    fn divergence_is_reported() {
        struct Broken;
        impl AnalysisStep for Broken {
            fn analyze(
                &self,
                _: &Ensemble<f64>,
                ctx: &CycleContext<'_>,
                _: &mut dyn RngCore,
            ) -> Result<AnalysisOutput> {
                Err(Error::NonFinite(format!("cycle {}", ctx.cycle)))
            }
        }
        let cfg = short("lorenz63", 5);
        let res = run_twin_experiment_with(&cfg, &Broken).unwrap();
        assert_eq!(res.divergence.as_ref().unwrap().cycle, 1);
        assert_eq!(res.records.len(), 5);
        assert!(res.rmse.is_infinite());
    }
}
