//! Bridging the ETPF and the ESRF by splitting the likelihood.
//!
//! The factor `exp(-alpha/2 ...)` is assimilated by the particle filter and
//! `exp(-(1 - alpha)/2 ...)` by the Kalman filter, in either order. The
//! second stage always recomputes its coefficients from the intermediate
//! ensemble. Particle rejuvenation with forecast anomalies is applied last.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::ensemble::{anomalies, apply_transform, AnomalyMatrix, Ensemble};
use crate::error::{Error, Result};
use crate::esrf::{esrf_coefficients, obs_space_stats};
use crate::etpf::{effective_sample_size, etpf_coefficients, innovation_quad_forms, weights_from_quad_forms};
use crate::observation::{ObservationOperator, Precision};
use crate::scalar::Real;

/// Number of bisection steps for the adaptive bridging parameter.
pub const BISECTION_STEPS: usize = 40;

/// Fixed `alpha`, or `alpha` chosen so that `M_eff(alpha)/M = theta`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BridgingMode<T> {
    Fixed(T),
    Adaptive(T),
}

impl<T: Real> BridgingMode<T> {
    pub fn validate(&self) -> Result<()> {
        let (name, v) = match self {
            Self::Fixed(a) => ("alpha", *a),
            Self::Adaptive(t) => ("theta", *t),
        };
        if !(v >= T::zero() && v <= T::one()) {
            return Err(Error::OutOfRange(format!(
                "{name} = {} not in [0, 1]",
                v.to_f64_lossy()
            )));
        }
        Ok(())
    }
}

/// Which filter is applied first.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum StageOrder {
    /// ETPF, then ESRF on the intermediate ensemble.
    #[default]
    #[serde(rename = "A", alias = "etpf-esrf")]
    EtpfFirst,
    /// ESRF, then ETPF on the intermediate ensemble.
    #[serde(rename = "B", alias = "esrf-etpf")]
    EsrfFirst,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HybridConfig<T> {
    pub mode: BridgingMode<T>,
    pub ordering: StageOrder,
    /// Rejuvenation strength, `>= 0`.
    pub beta: T,
}

impl<T: Real> HybridConfig<T> {
    pub fn new(mode: BridgingMode<T>, ordering: StageOrder, beta: T) -> Result<Self> {
        let cfg = Self { mode, ordering, beta };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn fixed(alpha: T) -> Self {
        Self {
            mode: BridgingMode::Fixed(alpha),
            ordering: StageOrder::EtpfFirst,
            beta: T::zero(),
        }
    }

    pub fn with_beta(mut self, beta: T) -> Self {
        self.beta = beta;
        self
    }

    pub fn with_ordering(mut self, ordering: StageOrder) -> Self {
        self.ordering = ordering;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.mode.validate()?;
        if !(self.beta >= T::zero()) || !self.beta.is_finite() {
            return Err(Error::OutOfRange(format!(
                "beta = {} must be >= 0",
                self.beta.to_f64_lossy()
            )));
        }
        Ok(())
    }
}

fn ess_ratio<T: Real>(quad: &DVector<T>, alpha: T) -> T {
    effective_sample_size(&weights_from_quad_forms(quad, alpha)) / T::from_usize_lossy(quad.len())
}

/// Adaptive `alpha` from precomputed innovation quadratic forms.
pub fn adaptive_alpha_from_quad<T: Real>(quad: &DVector<T>, theta: T) -> T {
    if theta >= T::one() || ess_ratio(quad, T::zero()) <= theta {
        return T::zero();
    }
    if ess_ratio(quad, T::one()) > theta {
        return T::one();
    }
    let (mut lo, mut hi) = (T::zero(), T::one());
    let half = T::lit(0.5);
    for _ in 0..BISECTION_STEPS {
        let mid = (lo + hi) * half;
        if ess_ratio(quad, mid) > theta {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    (lo + hi) * half
}

/// `alpha` solving `M_eff(alpha)/M = theta` by bisection.
///
/// Returns 0 when `theta = 1`, and 1 when even `alpha = 1` keeps the ratio
/// above `theta`.
pub fn adaptive_alpha<T: Real>(
    obs_values: &DMatrix<T>,
    y_obs: &DVector<T>,
    r_inv: &Precision<T>,
    theta: T,
) -> Result<T> {
    if !(theta >= T::zero() && theta <= T::one()) {
        return Err(Error::OutOfRange(format!(
            "theta = {} not in [0, 1]",
            theta.to_f64_lossy()
        )));
    }
    let quad = innovation_quad_forms(obs_values, y_obs, r_inv)?;
    Ok(adaptive_alpha_from_quad(&quad, theta))
}

pub(crate) fn resolve_alpha<T: Real>(mode: &BridgingMode<T>, quad: &DVector<T>) -> T {
    match *mode {
        BridgingMode::Fixed(a) => a,
        BridgingMode::Adaptive(theta) => adaptive_alpha_from_quad(quad, theta),
    }
}

/// Analysis ensemble together with the resolved bridging parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct HybridOutcome<T: Real> {
    pub ensemble: Ensemble<T>,
    pub alpha: T,
    /// Effective sample size of the weights used by the particle-filter stage.
    pub ess: T,
}

/// One hybrid analysis step followed by rejuvenation.
pub fn hybrid_update<T, H, R>(
    e: &Ensemble<T>,
    y_obs: &DVector<T>,
    r_inv: &Precision<T>,
    h: &H,
    cfg: &HybridConfig<T>,
    rng: &mut R,
) -> Result<Ensemble<T>>
where
    T: Real,
    H: ObservationOperator<T> + ?Sized,
    R: Rng + ?Sized,
{
    hybrid_update_with_diagnostics(e, y_obs, r_inv, h, cfg, rng).map(|o| o.ensemble)
}

pub fn hybrid_update_with_diagnostics<T, H, R>(
    e: &Ensemble<T>,
    y_obs: &DVector<T>,
    r_inv: &Precision<T>,
    h: &H,
    cfg: &HybridConfig<T>,
    rng: &mut R,
) -> Result<HybridOutcome<T>>
where
    T: Real,
    H: ObservationOperator<T> + ?Sized,
    R: Rng + ?Sized,
{
    cfg.validate()?;
    let forecast_stats = obs_space_stats(e, h)?;
    let forecast_quad = innovation_quad_forms(&forecast_stats.values, y_obs, r_inv)?;
    let alpha = resolve_alpha(&cfg.mode, &forecast_quad);

    let (analysis, ess) = match cfg.ordering {
        StageOrder::EtpfFirst => {
            let w = weights_from_quad_forms(&forecast_quad, alpha);
            let intermediate = apply_transform(e, &etpf_coefficients(e, &w)?)?;
            let stats = obs_space_stats(&intermediate, h)?;
            let d_kf = esrf_coefficients(&stats, y_obs, r_inv, alpha)?;
            (apply_transform(&intermediate, &d_kf)?, effective_sample_size(&w))
        }
        StageOrder::EsrfFirst => {
            let d_kf = esrf_coefficients(&forecast_stats, y_obs, r_inv, alpha)?;
            let intermediate = apply_transform(e, &d_kf)?;
            let stats = obs_space_stats(&intermediate, h)?;
            let quad = innovation_quad_forms(&stats.values, y_obs, r_inv)?;
            let w = weights_from_quad_forms(&quad, alpha);
            let d_pf = etpf_coefficients(&intermediate, &w)?;
            (apply_transform(&intermediate, &d_pf)?, effective_sample_size(&w))
        }
    };
    let ensemble = rejuvenate(&analysis, &anomalies(e), cfg.beta, rng)?;
    Ok(HybridOutcome { ensemble, alpha, ess })
}

/// `M x M` standard normal draws with every row centred to sum zero.
pub fn rejuvenation_noise<T: Real, R: Rng + ?Sized>(m: usize, rng: &mut R) -> DMatrix<T> {
    // filled row by row so the draw order does not depend on storage layout
    let mut xi = DMatrix::zeros(m, m);
    for i in 0..m {
        for j in 0..m {
            xi[(i, j)] = T::lit(rng.sample::<f64, _>(StandardNormal));
        }
    }
    let inv_m = T::one() / T::from_usize_lossy(m);
    for mut row in xi.row_iter_mut() {
        let mean = row.sum() * inv_m;
        row.add_scalar_mut(-mean);
    }
    xi
}

/// Adds `beta/sqrt(M-1) * A^f xi` to the analysis members.
pub fn apply_rejuvenation<T: Real>(
    e_analysis: &Ensemble<T>,
    forecast_anomalies: &AnomalyMatrix<T>,
    beta: T,
    xi: &DMatrix<T>,
) -> Result<Ensemble<T>> {
    let m = e_analysis.size();
    if forecast_anomalies.size() != m || forecast_anomalies.dim() != e_analysis.dim() || xi.shape() != (m, m) {
        return Err(Error::Dimension("rejuvenation operands disagree in shape".into()));
    }
    let factor = beta / T::from_usize_lossy(m - 1).sqrt();
    let perturbation = forecast_anomalies.matrix() * xi * factor;
    Ensemble::new(e_analysis.matrix() + perturbation)
}

/// Mean-preserving particle rejuvenation. `beta = 0` returns the input unchanged.
pub fn rejuvenate<T: Real, R: Rng + ?Sized>(
    e_analysis: &Ensemble<T>,
    forecast_anomalies: &AnomalyMatrix<T>,
    beta: T,
    rng: &mut R,
) -> Result<Ensemble<T>> {
    if !(beta >= T::zero()) {
        return Err(Error::OutOfRange("beta must be >= 0".into()));
    }
    if beta == T::zero() {
        return Ok(e_analysis.clone());
    }
    let xi = rejuvenation_noise(e_analysis.size(), rng);
    apply_rejuvenation(e_analysis, forecast_anomalies, beta, &xi)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ensemble::ensemble_mean;
    use crate::etpf::importance_weights;
    use crate::observation::LinearObservation;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn theta_one_gives_zero() {
        let h = DMatrix::from_row_slice(1, 3, &[0.0, 1.0, 5.0]);
        let y = DVector::from_vec(vec![0.0]);
        let r = Precision::isotropic(1, 1.0).unwrap();
        assert_eq!(adaptive_alpha(&h, &y, &r, 1.0).unwrap(), 0.0);
    }

    #[test]
    fn unreachable_theta_saturates() {
        let h = DMatrix::from_row_slice(1, 2, &[-1.0, 1.0]);
        let y = DVector::from_vec(vec![0.0]);
        let r = Precision::isotropic(1, 1.0).unwrap();
        assert_eq!(adaptive_alpha(&h, &y, &r, 0.5).unwrap(), 1.0);
    }

    #[test]
    fn two_member_closed_form() {
        // w1(alpha) = 0.75 <=> exp(-2 alpha) = 1/3, where M_eff = 1.6
        let h = DMatrix::from_row_slice(1, 2, &[1.0, 3.0]);
        let y = DVector::from_vec(vec![1.0]);
        let r = Precision::isotropic(1, 1.0).unwrap();
        let alpha = adaptive_alpha(&h, &y, &r, 0.8).unwrap();
        assert_relative_eq!(alpha, 3f64.ln() / 2.0, epsilon = 1e-9);
        let w = importance_weights(&h, &y, &r, alpha).unwrap();
        assert_relative_eq!(effective_sample_size(&w), 1.6, epsilon = 1e-9);
    }

    #[test]
    fn config_validation() {
        assert!(HybridConfig::new(BridgingMode::Fixed(1.2), StageOrder::EtpfFirst, 0.0).is_err());
        assert!(HybridConfig::new(BridgingMode::Adaptive(-0.1), StageOrder::EtpfFirst, 0.0).is_err());
        assert!(HybridConfig::new(BridgingMode::Fixed(0.2), StageOrder::EsrfFirst, -1.0).is_err());
        assert!(HybridConfig::new(BridgingMode::Fixed(0.2), StageOrder::EsrfFirst, 0.2).is_ok());
    }

    #[test]
    fn rejuvenation_beta_zero_and_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let f = Ensemble::from_scalars(&[0.0, 1.0, 4.0]).unwrap();
        let a = Ensemble::from_scalars(&[1.0, 1.5, 2.0]).unwrap();
        let anom = anomalies(&f);
        assert_eq!(rejuvenate(&a, &anom, 0.0, &mut rng).unwrap(), a);
        let r = rejuvenate(&a, &anom, 0.7, &mut rng).unwrap();
        assert_ne!(r, a);
        assert_relative_eq!(ensemble_mean(&r)[0], ensemble_mean(&a)[0], epsilon = 1e-12);
    }

    #[test]
    fn rejuvenation_is_reproducible() {
        let f = Ensemble::from_scalars(&[0.0f64, 1.0, 4.0]).unwrap();
        let a = Ensemble::from_scalars(&[1.0f64, 1.5, 2.0]).unwrap();
        let run = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rejuvenate(&a, &anomalies(&f), 0.2, &mut rng).unwrap()
        };
        let (x, y) = (run(11), run(11));
        assert_eq!(
            x.matrix().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            y.matrix().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        assert_ne!(run(11), run(12));
    }

    #[test]
    fn noise_rows_sum_to_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let xi: DMatrix<f64> = rejuvenation_noise(5, &mut rng);
        for row in xi.row_iter() {
            assert!(row.sum().abs() < 1e-14);
        }
    }

    #[test]
    fn worked_two_member_composition() {
        // forecast {-1, 1}, y = 1, R = 1, alpha = 0.5, ordering A, no rejuvenation
        let e = Ensemble::from_scalars(&[-1.0, 1.0]).unwrap();
        let y = DVector::from_vec(vec![1.0]);
        let r = Precision::isotropic(1, 1.0).unwrap();
        let h = LinearObservation::new(DMatrix::identity(1, 1));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = hybrid_update(&e, &y, &r, &h, &HybridConfig::fixed(0.5), &mut rng).unwrap();

        // PF stage by hand: innovations -2 and 0, w ∝ (e^{-1}, 1)
        let w1 = (-1.0f64).exp() / (1.0 + (-1.0f64).exp());
        let w2 = 1.0 - w1;
        // sorted monotone coupling: member 1 (state 1) keeps all of its own
        // column and sends 2 w2 - 1 to column 1; member 0 supplies the rest
        let z_h = [-(2.0 * w1) + (2.0 * w2 - 1.0), 1.0];
        // KF stage by hand on {z_h0, 1}: scalar ESRF with weight (1 - alpha)
        let mean_h = (z_h[0] + z_h[1]) / 2.0;
        let a = [z_h[0] - mean_h, z_h[1] - mean_h];
        let var_h = a[0] * a[0] + a[1] * a[1];
        let gain = var_h / (var_h + 1.0 / 0.5);
        let mean_a = mean_h + gain * (1.0 - mean_h);
        let shrink = (1.0 / (1.0 + 0.5 * var_h)).sqrt();
        let expected = [mean_a + shrink * a[0], mean_a + shrink * a[1]];

        assert_relative_eq!(out.matrix()[0], expected[0], epsilon = 1e-12);
        assert_relative_eq!(out.matrix()[1], expected[1], epsilon = 1e-12);
    }

    #[test]
    fn limits_reduce_to_single_filters() {
        let e = Ensemble::new(DMatrix::from_row_slice(
            2,
            4,
            &[0.1, 1.3, -0.7, 2.2, 1.0, 0.0, 0.5, -1.5],
        ))
        .unwrap();
        let h = LinearObservation::new(DMatrix::from_row_slice(1, 2, &[1.0, 0.0]));
        let y = DVector::from_vec(vec![0.9]);
        let r = Precision::isotropic(1, 0.5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let stats = obs_space_stats(&e, &h).unwrap();

        let kf = apply_transform(&e, &esrf_coefficients(&stats, &y, &r, 0.0).unwrap()).unwrap();
        let hyb0 = hybrid_update(&e, &y, &r, &h, &HybridConfig::fixed(0.0), &mut rng).unwrap();
        assert_relative_eq!(kf.matrix(), hyb0.matrix(), epsilon = 1e-12);

        let w = importance_weights(&stats.values, &y, &r, 1.0).unwrap();
        let pf = apply_transform(&e, &etpf_coefficients(&e, &w).unwrap()).unwrap();
        let hyb1 = hybrid_update(&e, &y, &r, &h, &HybridConfig::fixed(1.0), &mut rng).unwrap();
        assert_relative_eq!(pf.matrix(), hyb1.matrix(), epsilon = 1e-12);

        let b1 = hybrid_update(
            &e,
            &y,
            &r,
            &h,
            &HybridConfig::fixed(1.0).with_ordering(StageOrder::EsrfFirst),
            &mut rng,
        )
        .unwrap();
        assert_relative_eq!(pf.matrix(), b1.matrix(), epsilon = 1e-12);
    }
}
