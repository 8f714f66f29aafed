//! Ensemble square root filter coefficients with a tempered Kalman factor.
//!
//! With `HA` the observation-space anomalies and `c = (1 - alpha)/(M - 1)`,
//!
//! ```text
//! S   = (I + c HA^T R^{-1} HA)^{-1/2}
//! w_i = 1/M - c e_i^T S^2 HA^T R^{-1} (mean(h) - y)
//! d_ij = w_i - 1/M + s_ij
//! ```
//!
//! `S` is the symmetric positive definite root. When fewer observations
//! carry weight than there are members, the root is assembled from the
//! eigendecomposition of the small observation-space Gram matrix instead of
//! the `M x M` one; both give the same matrix.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::ensemble::{column_mean, Ensemble, TransformMatrix};
use crate::error::{Error, Result};
use crate::observation::{ObservationOperator, Precision};
use crate::scalar::Real;

/// Members mapped to observation space.
#[derive(Debug, Clone, PartialEq)]
pub struct ObsSpaceStats<T: Real> {
    /// `h(z_i)`, one column per member.
    pub values: DMatrix<T>,
    /// `h(z_i) - mean`.
    pub anomalies: DMatrix<T>,
    pub mean: DVector<T>,
}

impl<T: Real> ObsSpaceStats<T> {
    /// Builds the statistics from precomputed observation values.
    pub fn from_values(values: DMatrix<T>) -> Result<Self> {
        if values.ncols() < 2 || values.nrows() == 0 {
            return Err(Error::Dimension(format!(
                "observation values must be N_y x M with M >= 2, got {}x{}",
                values.nrows(),
                values.ncols()
            )));
        }
        let mean = column_mean(&values);
        let mut anomalies = values.clone();
        for mut col in anomalies.column_iter_mut() {
            col -= &mean;
        }
        Ok(Self {
            values,
            anomalies,
            mean,
        })
    }

    pub fn size(&self) -> usize {
        self.values.ncols()
    }

    pub fn obs_dim(&self) -> usize {
        self.values.nrows()
    }
}

pub fn obs_space_stats<T: Real, H: ObservationOperator<T> + ?Sized>(
    e: &Ensemble<T>,
    h: &H,
) -> Result<ObsSpaceStats<T>> {
    if let Some(n) = h.state_dim() {
        if n != e.dim() {
            return Err(Error::Dimension(format!(
                "observation operator expects states of dimension {n}, ensemble has {}",
                e.dim()
            )));
        }
    }
    let ny = h.obs_dim();
    let mut values = DMatrix::zeros(ny, e.size());
    for (i, z) in e.matrix().column_iter().enumerate() {
        let hz = h.observe(z);
        if hz.len() != ny {
            return Err(Error::Dimension(format!(
                "observation operator returned {} values, declared {ny}",
                hz.len()
            )));
        }
        values.set_column(i, &hz);
    }
    ObsSpaceStats::from_values(values)
}

/// The square root `S(alpha)`, mean weights `w_hat(alpha)` and their inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct EsrfIntermediates<T: Real> {
    pub s: DMatrix<T>,
    pub w_hat: DVector<T>,
    pub ha: DMatrix<T>,
    pub hzbar: DVector<T>,
}

impl<T: Real> EsrfIntermediates<T> {
    /// `d_ij = w_hat_i - 1/M + s_ij`.
    pub fn coefficients(&self) -> Result<TransformMatrix<T>> {
        let m = self.w_hat.len();
        let inv_m = T::one() / T::from_usize_lossy(m);
        let shift = self.w_hat.add_scalar(-inv_m);
        let mut d = self.s.clone();
        for mut col in d.column_iter_mut() {
            col += &shift;
        }
        TransformMatrix::new(d)
    }
}

/// Eigenvalue floor for the inverse square root.
const EIGEN_FLOOR: f64 = 1e-14;

/// Which factorization computes `S`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RootMethod {
    /// Observation-space route when it is smaller, else ensemble space.
    Auto,
    /// Eigendecomposition of the `M x M` matrix.
    EnsembleSpace,
}

pub fn esrf_intermediates<T: Real>(
    obs: &ObsSpaceStats<T>,
    y_obs: &DVector<T>,
    r_inv: &Precision<T>,
    alpha: T,
    method: RootMethod,
) -> Result<EsrfIntermediates<T>> {
    if !(alpha >= T::zero() && alpha <= T::one()) {
        return Err(Error::OutOfRange(format!(
            "alpha = {} not in [0, 1]",
            alpha.to_f64_lossy()
        )));
    }
    let (ny, m) = obs.anomalies.shape();
    if y_obs.len() != ny || r_inv.dim() != ny {
        return Err(Error::Dimension(format!(
            "observation dimension {ny}, y has {}, precision has {}",
            y_obs.len(),
            r_inv.dim()
        )));
    }
    r_inv.validate()?;
    if y_obs.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("observation vector".into()));
    }
    let ha = obs.anomalies.clone();
    let hzbar = obs.mean.clone();
    let inv_m = T::one() / T::from_usize_lossy(m);
    let scale = (T::one() - alpha) / T::from_usize_lossy(m - 1);

    if scale == T::zero() || r_inv.is_zero() {
        return Ok(EsrfIntermediates {
            s: DMatrix::identity(m, m),
            w_hat: DVector::from_element(m, inv_m),
            ha,
            hzbar,
        });
    }

    let innovation = &hzbar - y_obs;
    // x = HA^T R^{-1} (H zbar - y)
    let x = ha.tr_mul(&r_inv.apply(&innovation));

    let active: Option<Vec<usize>> = match (method, r_inv) {
        (RootMethod::Auto, Precision::Diagonal(d)) => {
            let idx: Vec<usize> = (0..ny).filter(|&q| d[q] > T::zero()).collect();
            (idx.len() < m).then_some(idx)
        }
        _ => None,
    };

    let (s, s2x) = match (active, r_inv) {
        (Some(idx), Precision::Diagonal(d)) => observation_space_root(&ha, d, &idx, scale, &x)?,
        _ => ensemble_space_root(&ha, r_inv, scale, &x)?,
    };
    let w_hat = DVector::from_fn(m, |i, _| inv_m - scale * s2x[i]);
    Ok(EsrfIntermediates { s, w_hat, ha, hzbar })
}

/// `(S, S^2 x)` from the `M x M` symmetric eigendecomposition.
fn ensemble_space_root<T: Real>(
    ha: &DMatrix<T>,
    r_inv: &Precision<T>,
    scale: T,
    x: &DVector<T>,
) -> Result<(DMatrix<T>, DVector<T>)> {
    let m = ha.ncols();
    let gram = ha.tr_mul(&r_inv.apply_matrix(ha));
    let mut a = DMatrix::identity(m, m) + gram * scale;
    // exact symmetrization of round-off in the Gram product
    let half = T::lit(0.5);
    for i in 0..m {
        for j in 0..i {
            let v = (a[(i, j)] + a[(j, i)]) * half;
            a[(i, j)] = v;
            a[(j, i)] = v;
        }
    }
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("ESRF matrix".into()));
    }
    let eig = SymmetricEigen::new(a);
    let floor = T::lit(EIGEN_FLOOR);
    if let Some(bad) = eig.eigenvalues.iter().find(|l| !l.is_finite() || **l <= T::zero()) {
        return Err(Error::NotPositiveDefinite(format!(
            "eigenvalue {} of I + c HA^T R^-1 HA",
            bad.to_f64_lossy()
        )));
    }
    let q = &eig.eigenvectors;
    let inv_sqrt = eig.eigenvalues.map(|l| T::one() / l.max(floor).sqrt());
    let inv = eig.eigenvalues.map(|l| T::one() / l.max(floor));
    let s = q * DMatrix::from_diagonal(&inv_sqrt) * q.transpose();
    let s2x = q * inv.component_mul(&q.tr_mul(x));
    Ok((s, s2x))
}

/// `(S, S^2 x)` via `c HA^T R^{-1} HA = U U^T` with `U` of width `n < M`.
///
/// With `U^T U = W diag(s) W^T` and `P = U W`,
/// `S = I + P diag(g(s)) P^T` where `g(s) = ((1+s)^{-1/2} - 1)/s`, and
/// `S^2 = I + P diag(-1/(1+s)) P^T`. Both factors are smooth at `s = 0`.
fn observation_space_root<T: Real>(
    ha: &DMatrix<T>,
    r_diag: &DVector<T>,
    active: &[usize],
    scale: T,
    x: &DVector<T>,
) -> Result<(DMatrix<T>, DVector<T>)> {
    let m = ha.ncols();
    if active.is_empty() {
        return Ok((DMatrix::identity(m, m), x.clone()));
    }
    let n = active.len();
    let mut u = DMatrix::zeros(m, n);
    for (k, &q) in active.iter().enumerate() {
        let f = (scale * r_diag[q]).sqrt();
        for i in 0..m {
            u[(i, k)] = ha[(q, i)] * f;
        }
    }
    if u.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("ESRF observation-space factor".into()));
    }
    let eig = SymmetricEigen::new(u.tr_mul(&u));
    if let Some(bad) = eig.eigenvalues.iter().find(|l| !l.is_finite()) {
        return Err(Error::NotPositiveDefinite(format!("eigenvalue {}", bad.to_f64_lossy())));
    }
    let p = &u * &eig.eigenvectors;
    let one = T::one();
    let spec = eig.eigenvalues.map(|l| l.max(T::zero()));
    let g = spec.map(|s| {
        let r = (one + s).sqrt();
        -one / (r * (one + r))
    });
    let h = spec.map(|s| -one / (one + s));

    let pg = DMatrix::from_fn(m, n, |i, k| p[(i, k)] * g[k]);
    let mut s = DMatrix::identity(m, m);
    s.gemm(one, &pg, &p.transpose(), one);
    let s2x = x + &p * h.component_mul(&p.tr_mul(x));
    Ok((s, s2x))
}

/// Tempered ESRF transform `d^KF(alpha)`.
pub fn esrf_coefficients<T: Real>(
    obs: &ObsSpaceStats<T>,
    y_obs: &DVector<T>,
    r_inv: &Precision<T>,
    alpha: T,
) -> Result<TransformMatrix<T>> {
    if (T::one() - alpha) == T::zero() || r_inv.is_zero() {
        // validates inputs, then the transform is exactly the identity
        esrf_intermediates(obs, y_obs, r_inv, alpha, RootMethod::Auto)?;
        return Ok(TransformMatrix::identity(obs.size()));
    }
    esrf_intermediates(obs, y_obs, r_inv, alpha, RootMethod::Auto)?.coefficients()
}
