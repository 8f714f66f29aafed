//! Importance weights, effective sample size and ETPF transform coefficients.

use nalgebra::{DMatrix, DVector};

use crate::ensemble::{Ensemble, TransformMatrix};
use crate::error::{Error, Result};
use crate::observation::Precision;
use crate::scalar::Real;
use crate::transport::{solve_transport, solve_transport_1d, CostMatrix};

/// Probability vector over ensemble members.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightVector<T: Real> {
    w: DVector<T>,
}

impl<T: Real> WeightVector<T> {
    pub fn new(w: DVector<T>) -> Result<Self> {
        if w.is_empty() {
            return Err(Error::Empty("weight vector".into()));
        }
        if w.iter().any(|v| !v.is_finite() || *v < T::zero()) {
            return Err(Error::InvalidWeights("entries must be finite and nonnegative".into()));
        }
        let sum = w.sum();
        if (sum - T::one()).abs() > T::tol(1e-12) {
            return Err(Error::InvalidWeights(format!("weights sum to {}", sum.to_f64_lossy())));
        }
        Ok(Self { w })
    }

    pub fn uniform(m: usize) -> Self {
        Self {
            w: DVector::from_element(m, T::one() / T::from_usize_lossy(m)),
        }
    }

    pub fn as_vector(&self) -> &DVector<T> {
        &self.w
    }

    pub fn len(&self) -> usize {
        self.w.len()
    }

    pub fn is_empty(&self) -> bool {
        self.w.is_empty()
    }

    /// True when every entry is bitwise equal.
    pub fn is_uniform(&self) -> bool {
        self.w.iter().all(|v| *v == self.w[0])
    }
}

/// `q_i = (h_i - y)^T R^{-1} (h_i - y)` for each column `h_i` of `obs_values`.
pub fn innovation_quad_forms<T: Real>(
    obs_values: &DMatrix<T>,
    y_obs: &DVector<T>,
    r_inv: &Precision<T>,
) -> Result<DVector<T>> {
    if obs_values.nrows() != y_obs.len() || r_inv.dim() != y_obs.len() {
        return Err(Error::Dimension(format!(
            "observation values have {} rows, y has {}, precision has {}",
            obs_values.nrows(),
            y_obs.len(),
            r_inv.dim()
        )));
    }
    if obs_values.iter().chain(y_obs.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("observation values".into()));
    }
    let q = DVector::from_iterator(
        obs_values.ncols(),
        obs_values.column_iter().map(|h| r_inv.quad_form((h - y_obs).as_view())),
    );
    if q.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("innovation quadratic form".into()));
    }
    Ok(q)
}

/// Normalized `exp(-alpha q_i / 2)`, computed with a max-shift in log space.
pub fn weights_from_quad_forms<T: Real>(quad: &DVector<T>, alpha: T) -> WeightVector<T> {
    let half = T::lit(0.5);
    let logs = quad.map(|q| -alpha * half * q);
    let max = logs.max();
    let unnorm = logs.map(|l| (l - max).exp());
    let total = unnorm.sum();
    WeightVector { w: unnorm / total }
}

fn check_alpha<T: Real>(alpha: T) -> Result<()> {
    if !(alpha >= T::zero() && alpha <= T::one()) {
        return Err(Error::OutOfRange(format!(
            "alpha = {} not in [0, 1]",
            alpha.to_f64_lossy()
        )));
    }
    Ok(())
}

/// Tempered importance weights `w_i ∝ exp(-(alpha/2)(h_i - y)^T R^{-1} (h_i - y))`.
///
/// `obs_values` holds one column `h(z_i)` per member.
pub fn importance_weights<T: Real>(
    obs_values: &DMatrix<T>,
    y_obs: &DVector<T>,
    r_inv: &Precision<T>,
    alpha: T,
) -> Result<WeightVector<T>> {
    check_alpha(alpha)?;
    let quad = innovation_quad_forms(obs_values, y_obs, r_inv)?;
    Ok(weights_from_quad_forms(&quad, alpha))
}

/// `1 / sum_i w_i^2`.
pub fn effective_sample_size<T: Real>(w: &WeightVector<T>) -> T {
    if w.is_uniform() {
        return T::from_usize_lossy(w.len());
    }
    T::one() / w.w.norm_squared()
}

/// Transport-based resampling coefficients `d_ij = t*_ij`.
///
/// Scalar states use the sorting solver; otherwise the network simplex.
/// Uniform weights short-circuit to the identity, which is optimal (zero cost).
pub fn etpf_coefficients<T: Real>(e: &Ensemble<T>, w: &WeightVector<T>) -> Result<TransformMatrix<T>> {
    let m = e.size();
    if w.len() != m {
        return Err(Error::Dimension(format!("{} weights for {} members", w.len(), m)));
    }
    if w.is_uniform() {
        return Ok(TransformMatrix::identity(m));
    }
    let plan = if e.dim() == 1 {
        let states: Vec<T> = e.matrix().row(0).iter().copied().collect();
        solve_transport_1d(&states, w.as_vector())?
    } else {
        solve_transport(&CostMatrix::squared_euclidean(e), w.as_vector())?
    };
    TransformMatrix::new(plan.into_matrix())
}
