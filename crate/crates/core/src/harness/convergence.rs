//! Single assimilation step with a bimodal scalar prior.
//!
//! For each ensemble size and bridging parameter the squared error of the
//! analysis mean against the exact posterior mean is averaged over repeats.
//! All `alpha` values see the same prior samples.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ensemble::{ensemble_mean, Ensemble};
use crate::error::{Error, Result};
use crate::hybrid::{hybrid_update, HybridConfig, StageOrder};
use crate::observation::{ComponentSampling, Precision};

/// Equal-weight mixture `N(-separation, variance)` and `N(separation, variance)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BimodalPrior {
    pub separation: f64,
    pub variance: f64,
}

impl Default for BimodalPrior {
    fn default() -> Self {
        Self {
            separation: 1.0,
            variance: 0.25,
        }
    }
}

fn gaussian(z: f64, mean: f64, variance: f64) -> f64 {
    (-(z - mean).powi(2) / (2.0 * variance)).exp() / (2.0 * std::f64::consts::PI * variance).sqrt()
}

impl BimodalPrior {
    pub fn density(&self, z: f64) -> f64 {
        0.5 * (gaussian(z, -self.separation, self.variance) + gaussian(z, self.separation, self.variance))
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
        let xi: f64 = rng.sample(StandardNormal);
        sign * self.separation + self.variance.sqrt() * xi
    }
}

/// Posterior mean for `y = z + N(0, r)`, from the mixture's conjugate update.
pub fn posterior_mean_exact(prior: &BimodalPrior, y: f64, r: f64) -> f64 {
    let (m, v) = (prior.separation, prior.variance);
    let gain = v / (v + r);
    let (wp, wm) = (gaussian(y, m, v + r), gaussian(y, -m, v + r));
    let (mp, mm) = (m + gain * (y - m), -m + gain * (y + m));
    (wp * mp + wm * mm) / (wp + wm)
}

/// Posterior mean by composite Simpson quadrature over `intervals` (even).
pub fn posterior_mean_quadrature(prior: &BimodalPrior, y: f64, r: f64, intervals: usize) -> f64 {
    let n = intervals + intervals % 2;
    let spread = 14.0 * prior.variance.max(r).sqrt();
    let lo = (-prior.separation).min(y) - spread;
    let hi = prior.separation.max(y) + spread;
    let h = (hi - lo) / n as f64;
    let (mut num, mut den) = (0.0, 0.0);
    for k in 0..=n {
        let z = lo + h * k as f64;
        let c = if k == 0 || k == n {
            1.0
        } else if k % 2 == 1 {
            4.0
        } else {
            2.0
        };
        let p = c * prior.density(z) * gaussian(y, z, r);
        num += p * z;
        den += p;
    }
    num / den
}

const QUADRATURE_INTERVALS: usize = 20_000;

fn default_sizes() -> Vec<usize> {
    vec![2, 4, 8, 16, 32, 64, 128, 256]
}

fn default_alphas() -> Vec<f64> {
    (0..=10).map(|k| k as f64 / 10.0).collect()
}

fn default_repeats() -> usize {
    10_000
}

fn default_obs_variance() -> f64 {
    0.5
}

fn default_observation() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvergenceConfig {
    #[serde(default)]
    pub prior: BimodalPrior,
    #[serde(default = "default_obs_variance")]
    pub obs_variance: f64,
    /// The fixed observed value `y`.
    #[serde(default = "default_observation")]
    pub observation: f64,
    #[serde(default = "default_sizes")]
    pub ensemble_sizes: Vec<usize>,
    #[serde(default = "default_alphas")]
    pub alphas: Vec<f64>,
    #[serde(default = "default_repeats")]
    pub repeats: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub ordering: StageOrder,
}

impl Default for ConvergenceConfig {
    fn default() -> Self {
        Self {
            prior: BimodalPrior::default(),
            obs_variance: default_obs_variance(),
            observation: default_observation(),
            ensemble_sizes: default_sizes(),
            alphas: default_alphas(),
            repeats: default_repeats(),
            seed: 0,
            ordering: StageOrder::EtpfFirst,
        }
    }
}

impl ConvergenceConfig {
    pub fn paper_scale(&mut self) {
        self.repeats = 100_000;
    }

    pub fn validate(&self) -> Result<()> {
        if self.repeats == 0 {
            return Err(Error::Config("repeats must be >= 1".into()));
        }
        if self.ensemble_sizes.is_empty() || self.ensemble_sizes.iter().any(|&m| m < 2) {
            return Err(Error::Config(
                "ensemble_sizes must be non-empty with entries >= 2".into(),
            ));
        }
        if self.ensemble_sizes.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("ensemble_sizes must be strictly ascending".into()));
        }
        if self.alphas.is_empty() || self.alphas.iter().any(|a| !(0.0..=1.0).contains(a)) {
            return Err(Error::Config("alphas must be non-empty and lie in [0, 1]".into()));
        }
        if !(self.obs_variance > 0.0) || !(self.prior.variance > 0.0) || !self.observation.is_finite() {
            return Err(Error::Config("variances must be > 0 and the observation finite".into()));
        }
        Ok(())
    }
}

pub fn parse_convergence_config(text: &str) -> Result<ConvergenceConfig> {
    let cfg: ConvergenceConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceRow {
    pub ensemble_size: usize,
    pub optimal_alpha: f64,
    /// RMSE at the optimal `alpha`.
    pub rmse: f64,
    /// RMSE for every grid value, in grid order.
    pub rmse_by_alpha: Vec<f64>,
}

fn squared_errors(cfg: &ConvergenceConfig, m: usize, seed: [u8; 32], exact: f64) -> Result<Vec<f64>> {
    let mut rng = ChaCha8Rng::from_seed(seed);
    let values: Vec<f64> = (0..m).map(|_| cfg.prior.sample(&mut rng)).collect();
    let e = Ensemble::from_scalars(&values)?;
    let y = DVector::from_element(1, cfg.observation);
    let r_inv = Precision::isotropic(1, cfg.obs_variance)?;
    let h = ComponentSampling::new(vec![0], 1)?;
    cfg.alphas
        .iter()
        .map(|&alpha| {
            let hybrid = HybridConfig::fixed(alpha).with_ordering(cfg.ordering);
            let analysis = hybrid_update(&e, &y, &r_inv, &h, &hybrid, &mut rng)?;
            Ok((ensemble_mean(&analysis)[0] - exact).powi(2))
        })
        .collect()
}

/// For each ensemble size, the `alpha` minimising the RMSE of the analysis
/// mean (lowest on ties) and the full RMSE curve.
pub fn run_convergence_study(cfg: &ConvergenceConfig) -> Result<Vec<ConvergenceRow>> {
    cfg.validate()?;
    let exact = posterior_mean_quadrature(&cfg.prior, cfg.observation, cfg.obs_variance, QUADRATURE_INTERVALS);
    cfg.ensemble_sizes
        .iter()
        .map(|&m| {
            let mut master = ChaCha8Rng::seed_from_u64(cfg.seed);
            master.set_stream(m as u64);
            let seeds: Vec<[u8; 32]> = (0..cfg.repeats).map(|_| master.random()).collect();
            let per_repeat = seeds
                .into_par_iter()
                .map(|s| squared_errors(cfg, m, s, exact))
                .collect::<Result<Vec<_>>>()?;
            let mut sums = vec![0.0; cfg.alphas.len()];
            for errs in &per_repeat {
                for (acc, e) in sums.iter_mut().zip(errs) {
                    *acc += e;
                }
            }
            let rmse_by_alpha: Vec<f64> = sums.iter().map(|s| (s / cfg.repeats as f64).sqrt()).collect();
            let best = (0..rmse_by_alpha.len()).fold(0, |b, k| if rmse_by_alpha[k] < rmse_by_alpha[b] { k } else { b });
            Ok(ConvergenceRow {
                ensemble_size: m,
                optimal_alpha: cfg.alphas[best],
                rmse: rmse_by_alpha[best],
                rmse_by_alpha,
            })
        })
        .collect()
}
