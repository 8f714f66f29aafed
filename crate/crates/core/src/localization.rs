//! R-localization of the hybrid filter for spatially extended states.
//!
//! Each grid point gets its own tapered observation precision `R(x_k)^{-1}`,
//! its own bridging parameter and its own pair of transforms. Stage two of
//! the update reads the fully assembled intermediate field, so the two stages
//! are separated by a barrier; within a stage the grid points are
//! independent and processed in parallel.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;

use crate::ensemble::{anomalies, apply_transform, Ensemble};
use crate::error::{Error, Result};
use crate::esrf::{esrf_coefficients, ObsSpaceStats};
use crate::etpf::{effective_sample_size, etpf_coefficients, innovation_quad_forms, weights_from_quad_forms};
use crate::hybrid::{apply_rejuvenation, rejuvenation_noise, resolve_alpha, HybridConfig, StageOrder};
use crate::observation::Precision;
use crate::scalar::Real;

/// Fifth-order compactly supported taper: 1 at 0, 0 beyond 2.
pub fn taper<T: Real>(t: T) -> Result<T> {
    if !(t >= T::zero()) {
        return Err(Error::OutOfRange(format!(
            "taper argument {} must be >= 0",
            t.to_f64_lossy()
        )));
    }
    Ok(gaspari_cohn(t))
}

fn gaspari_cohn<T: Real>(t: T) -> T {
    let c = |x: f64| T::lit(x);
    if t <= T::one() {
        let t2 = t * t;
        let t3 = t2 * t;
        let t4 = t3 * t;
        let t5 = t4 * t;
        T::one() - c(5.0 / 3.0) * t2 + c(5.0 / 8.0) * t3 + c(0.5) * t4 - c(0.25) * t5
    } else if t < c(2.0) {
        taper_outer_branch(t)
    } else {
        T::zero()
    }
}

/// The `1 <= t <= 2` polynomial, exposed for continuity checks.
pub fn taper_outer_branch<T: Real>(t: T) -> T {
    let c = |x: f64| T::lit(x);
    let t2 = t * t;
    let t3 = t2 * t;
    let t4 = t3 * t;
    let t5 = t4 * t;
    -c(2.0 / 3.0) / t + c(4.0) - c(5.0) * t + c(5.0 / 3.0) * t2 + c(5.0 / 8.0) * t3 - c(0.5) * t4 + c(1.0 / 12.0) * t5
}

/// The `0 <= t <= 1` polynomial, exposed for continuity checks.
pub fn taper_inner_branch<T: Real>(t: T) -> T {
    let c = |x: f64| T::lit(x);
    let t2 = t * t;
    T::one() - c(5.0 / 3.0) * t2 + c(5.0 / 8.0) * t2 * t + c(0.5) * t2 * t2 - c(0.25) * t2 * t2 * t
}

/// One-dimensional grid with a subset of observed points.
#[derive(Debug, Clone, PartialEq)]
pub struct GridGeometry {
    pub points: usize,
    pub periodic: bool,
    /// Grid indices of the observation sites, in observation order.
    pub observed: Vec<usize>,
    /// Component of the local state read at each observed site.
    pub component: usize,
}

impl GridGeometry {
    pub fn new(points: usize, periodic: bool, observed: Vec<usize>, component: usize) -> Result<Self> {
        if points == 0 {
            return Err(Error::Dimension("grid has no points".into()));
        }
        if observed.is_empty() {
            return Err(Error::Dimension("no observed grid points".into()));
        }
        if let Some(bad) = observed.iter().find(|&&g| g >= points) {
            return Err(Error::Dimension(format!(
                "observed index {bad} outside grid of {points}"
            )));
        }
        Ok(Self {
            points,
            periodic,
            observed,
            component,
        })
    }

    /// Observes every `every`-th point: indices `every-1, 2 every-1, ...`.
    pub fn every_nth(points: usize, every: usize, periodic: bool, component: usize) -> Result<Self> {
        if every == 0 {
            return Err(Error::OutOfRange("observation stride must be >= 1".into()));
        }
        let observed = (0..points).filter(|k| k % every == every - 1).collect();
        Self::new(points, periodic, observed, component)
    }

    pub fn obs_count(&self) -> usize {
        self.observed.len()
    }

    /// Distance in grid-index units, wrapping around on periodic grids.
    pub fn distance(&self, a: usize, b: usize) -> usize {
        let d = a.abs_diff(b);
        if self.periodic {
            d.min(self.points - d)
        } else {
            d
        }
    }
}

/// Localization radius in grid-index units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalizationSpec<T> {
    pub radius: T,
}

impl<T: Real> LocalizationSpec<T> {
    pub fn new(radius: T) -> Result<Self> {
        if !(radius > T::zero()) {
            return Err(Error::OutOfRange("localization radius must be > 0".into()));
        }
        Ok(Self { radius })
    }
}

/// Diagonal `rho(dist(x_k, site_q)/R_loc)/r` over all observation sites.
pub fn localized_r_inverse<T: Real>(
    k: usize,
    geom: &GridGeometry,
    spec: &LocalizationSpec<T>,
    variance: T,
) -> Result<Precision<T>> {
    if !(variance > T::zero()) {
        return Err(Error::OutOfRange("observation variance must be > 0".into()));
    }
    if k >= geom.points {
        return Err(Error::Dimension(format!(
            "grid index {k} outside grid of {}",
            geom.points
        )));
    }
    let diag = geom
        .observed
        .iter()
        .map(|&g| gaspari_cohn(T::from_usize_lossy(geom.distance(k, g)) / spec.radius) / variance);
    Ok(Precision::Diagonal(DVector::from_iterator(geom.obs_count(), diag)))
}

/// Ensemble of spatial fields with `N` local components at each of `K` points.
///
/// The stacked state is point-major: rows `k N .. (k + 1) N` belong to `x_k`.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldEnsemble<T: Real> {
    local_dim: usize,
    states: Ensemble<T>,
}

impl<T: Real> FieldEnsemble<T> {
    pub fn new(states: Ensemble<T>, local_dim: usize) -> Result<Self> {
        if local_dim == 0 || !states.dim().is_multiple_of(local_dim) {
            return Err(Error::Dimension(format!(
                "state dimension {} is not a multiple of local dimension {local_dim}",
                states.dim()
            )));
        }
        Ok(Self { local_dim, states })
    }

    pub fn from_points(points: &[Ensemble<T>]) -> Result<Self> {
        let first = points.first().ok_or_else(|| Error::Empty("no grid points".into()))?;
        let (n, m) = (first.dim(), first.size());
        if points.iter().any(|p| p.dim() != n || p.size() != m) {
            return Err(Error::Dimension(
                "grid points disagree in local dimension or ensemble size".into(),
            ));
        }
        let mut stacked = DMatrix::zeros(n * points.len(), m);
        for (k, p) in points.iter().enumerate() {
            stacked.rows_mut(k * n, n).copy_from(p.matrix());
        }
        Self::new(Ensemble::new(stacked)?, n)
    }

    pub fn local_dim(&self) -> usize {
        self.local_dim
    }

    pub fn points(&self) -> usize {
        self.states.dim() / self.local_dim
    }

    pub fn size(&self) -> usize {
        self.states.size()
    }

    pub fn local(&self, k: usize) -> Result<Ensemble<T>> {
        self.states.rows(k * self.local_dim, self.local_dim)
    }

    pub fn stacked(&self) -> &Ensemble<T> {
        &self.states
    }

    pub fn into_stacked(self) -> Ensemble<T> {
        self.states
    }

    /// Reads `H z` for every member.
    fn observe(&self, geom: &GridGeometry) -> DMatrix<T> {
        let z = self.states.matrix();
        let n = self.local_dim;
        DMatrix::from_fn(geom.obs_count(), self.size(), |q, i| {
            z[(geom.observed[q] * n + geom.component, i)]
        })
    }
}

/// Localized analysis with per-point diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalizedOutcome<T: Real> {
    pub fields: FieldEnsemble<T>,
    pub alphas: Vec<T>,
    pub ess: Vec<T>,
}

/// Localized hybrid update of a field ensemble followed by rejuvenation with
/// one shared noise matrix.
pub fn localized_hybrid_update<T: Real, R: Rng + ?Sized>(
    fields: &FieldEnsemble<T>,
    y_obs: &DVector<T>,
    geom: &GridGeometry,
    spec: &LocalizationSpec<T>,
    obs_variance: T,
    cfg: &HybridConfig<T>,
    rng: &mut R,
) -> Result<FieldEnsemble<T>> {
    localized_hybrid_update_with_diagnostics(fields, y_obs, geom, spec, obs_variance, cfg, rng).map(|o| o.fields)
}

pub fn localized_hybrid_update_with_diagnostics<T: Real, R: Rng + ?Sized>(
    fields: &FieldEnsemble<T>,
    y_obs: &DVector<T>,
    geom: &GridGeometry,
    spec: &LocalizationSpec<T>,
    obs_variance: T,
    cfg: &HybridConfig<T>,
    rng: &mut R,
) -> Result<LocalizedOutcome<T>> {
    cfg.validate()?;
    let points = fields.points();
    if geom.points != points {
        return Err(Error::Dimension(format!(
            "geometry has {} points, fields have {points}",
            geom.points
        )));
    }
    if geom.component >= fields.local_dim() {
        return Err(Error::Dimension(format!(
            "observed component {} outside local dimension {}",
            geom.component,
            fields.local_dim()
        )));
    }
    if y_obs.len() != geom.obs_count() {
        return Err(Error::Dimension(format!(
            "{} observations for {} sites",
            y_obs.len(),
            geom.obs_count()
        )));
    }

    let precisions: Vec<Precision<T>> = (0..points)
        .map(|k| localized_r_inverse(k, geom, spec, obs_variance))
        .collect::<Result<_>>()?;
    let forecast_values = fields.observe(geom);
    let forecast_quads: Vec<DVector<T>> = precisions
        .par_iter()
        .map(|r| innovation_quad_forms(&forecast_values, y_obs, r))
        .collect::<Result<_>>()?;
    let alphas: Vec<T> = forecast_quads.iter().map(|q| resolve_alpha(&cfg.mode, q)).collect();

    let (analysis, ess) = match cfg.ordering {
        StageOrder::EtpfFirst => {
            let (intermediate, ess) = particle_stage(fields, &forecast_quads, &alphas)?;
            let stats = ObsSpaceStats::from_values(intermediate.observe(geom))?;
            (kalman_stage(&intermediate, &stats, y_obs, &precisions, &alphas)?, ess)
        }
        StageOrder::EsrfFirst => {
            let stats = ObsSpaceStats::from_values(forecast_values)?;
            let intermediate = kalman_stage(fields, &stats, y_obs, &precisions, &alphas)?;
            let values = intermediate.observe(geom);
            let quads: Vec<DVector<T>> = precisions
                .par_iter()
                .map(|r| innovation_quad_forms(&values, y_obs, r))
                .collect::<Result<_>>()?;
            particle_stage(&intermediate, &quads, &alphas)?
        }
    };

    let fields_out = if cfg.beta == T::zero() {
        analysis
    } else {
        let xi = rejuvenation_noise(fields.size(), rng);
        let stacked = apply_rejuvenation(analysis.stacked(), &anomalies(fields.stacked()), cfg.beta, &xi)?;
        FieldEnsemble::new(stacked, fields.local_dim())?
    };
    Ok(LocalizedOutcome {
        fields: fields_out,
        alphas,
        ess,
    })
}

fn particle_stage<T: Real>(
    fields: &FieldEnsemble<T>,
    quads: &[DVector<T>],
    alphas: &[T],
) -> Result<(FieldEnsemble<T>, Vec<T>)> {
    let updated: Vec<(Ensemble<T>, T)> = (0..fields.points())
        .into_par_iter()
        .map(|k| {
            let local = fields.local(k)?;
            let w = weights_from_quad_forms(&quads[k], alphas[k]);
            let out = apply_transform(&local, &etpf_coefficients(&local, &w)?)?;
            Ok((out, effective_sample_size(&w)))
        })
        .collect::<Result<_>>()?;
    let (locals, ess): (Vec<_>, Vec<_>) = updated.into_iter().unzip();
    Ok((FieldEnsemble::from_points(&locals)?, ess))
}

fn kalman_stage<T: Real>(
    fields: &FieldEnsemble<T>,
    stats: &ObsSpaceStats<T>,
    y_obs: &DVector<T>,
    precisions: &[Precision<T>],
    alphas: &[T],
) -> Result<FieldEnsemble<T>> {
    let locals: Vec<Ensemble<T>> = (0..fields.points())
        .into_par_iter()
        .map(|k| {
            let local = fields.local(k)?;
            let d = esrf_coefficients(stats, y_obs, &precisions[k], alphas[k])?;
            apply_transform(&local, &d)
        })
        .collect::<Result<_>>()?;
    FieldEnsemble::from_points(&locals)
}
