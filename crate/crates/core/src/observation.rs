//! Observation operators and observation-error precisions.

use nalgebra::{DMatrix, DVector, DVectorView};

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Maps a model state to observation space, `h(z)`.
pub trait ObservationOperator<T: Real>: Sync {
    fn obs_dim(&self) -> usize;

    /// Expected state dimension, when the operator knows it.
    fn state_dim(&self) -> Option<usize> {
        None
    }

    fn observe(&self, state: DVectorView<'_, T>) -> DVector<T>;
}

/// Linear operator `h(z) = H z`.
#[derive(Debug, Clone)]
pub struct LinearObservation<T: Real> {
    pub h: DMatrix<T>,
}

impl<T: Real> LinearObservation<T> {
    pub fn new(h: DMatrix<T>) -> Self {
        Self { h }
    }
}

impl<T: Real> ObservationOperator<T> for LinearObservation<T> {
    fn obs_dim(&self) -> usize {
        self.h.nrows()
    }

    fn state_dim(&self) -> Option<usize> {
        Some(self.h.ncols())
    }

    fn observe(&self, state: DVectorView<'_, T>) -> DVector<T> {
        &self.h * state
    }
}

/// Reads individual state components: `h(z)_q = z[indices[q]]`.
#[derive(Debug, Clone)]
pub struct ComponentSampling {
    pub indices: Vec<usize>,
    pub state_dim: usize,
}

impl ComponentSampling {
    pub fn new(indices: Vec<usize>, state_dim: usize) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::Dimension("no observed components".into()));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= state_dim) {
            return Err(Error::Dimension(format!(
                "observed component {bad} outside state of dimension {state_dim}"
            )));
        }
        Ok(Self { indices, state_dim })
    }

    pub fn to_matrix<T: Real>(&self) -> DMatrix<T> {
        let mut h = DMatrix::zeros(self.indices.len(), self.state_dim);
        for (q, &i) in self.indices.iter().enumerate() {
            h[(q, i)] = T::one();
        }
        h
    }
}

impl<T: Real> ObservationOperator<T> for ComponentSampling {
    fn obs_dim(&self) -> usize {
        self.indices.len()
    }

    fn state_dim(&self) -> Option<usize> {
        Some(self.state_dim)
    }

    fn observe(&self, state: DVectorView<'_, T>) -> DVector<T> {
        DVector::from_iterator(self.indices.len(), self.indices.iter().map(|&i| state[i]))
    }
}

/// Arbitrary (possibly nonlinear) operator given as a closure.
pub struct FnObservation<F> {
    f: F,
    obs_dim: usize,
}

impl<F> FnObservation<F> {
    pub fn new(obs_dim: usize, f: F) -> Self {
        Self { f, obs_dim }
    }
}

impl<T, F> ObservationOperator<T> for FnObservation<F>
where
    T: Real,
    F: Fn(DVectorView<'_, T>) -> DVector<T> + Sync,
{
    fn obs_dim(&self) -> usize {
        self.obs_dim
    }

    fn observe(&self, state: DVectorView<'_, T>) -> DVector<T> {
        (self.f)(state)
    }
}

/// Observation-error precision `R^{-1}`, diagonal or dense.
#[derive(Debug, Clone, PartialEq)]
pub enum Precision<T: Real> {
    Diagonal(DVector<T>),
    Dense(DMatrix<T>),
}

impl<T: Real> Precision<T> {
    /// `R = r I` of size `n`.
    pub fn isotropic(n: usize, variance: T) -> Result<Self> {
        if !(variance > T::zero()) {
            return Err(Error::OutOfRange("observation variance must be positive".into()));
        }
        Ok(Self::Diagonal(DVector::from_element(n, T::one() / variance)))
    }

    pub fn dim(&self) -> usize {
        match self {
            Self::Diagonal(d) => d.len(),
            Self::Dense(m) => m.nrows(),
        }
    }

    /// Finite, symmetric, with nonnegative diagonal.
    pub fn validate(&self) -> Result<()> {
        match self {
            Self::Diagonal(d) => {
                if d.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite("precision diagonal".into()));
                }
                if d.iter().any(|v| *v < T::zero()) {
                    return Err(Error::OutOfRange("negative precision entry".into()));
                }
            }
            Self::Dense(m) => {
                if m.nrows() != m.ncols() {
                    return Err(Error::Dimension("dense precision must be square".into()));
                }
                if m.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite("dense precision".into()));
                }
                let scale = m.amax();
                let tol = T::tol(1e-12) * (T::one() + scale);
                for i in 0..m.nrows() {
                    for j in 0..i {
                        if (m[(i, j)] - m[(j, i)]).abs() > tol {
                            return Err(Error::NotPositiveDefinite(format!(
                                "precision not symmetric at ({i}, {j})"
                            )));
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// True when every entry is exactly zero (no observation carries information).
    pub fn is_zero(&self) -> bool {
        match self {
            Self::Diagonal(d) => d.iter().all(|v| *v == T::zero()),
            Self::Dense(m) => m.iter().all(|v| *v == T::zero()),
        }
    }

    /// `R^{-1} v`.
    pub fn apply(&self, v: &DVector<T>) -> DVector<T> {
        match self {
            Self::Diagonal(d) => d.component_mul(v),
            Self::Dense(m) => m * v,
        }
    }

    /// `R^{-1} B` for a matrix with `dim()` rows.
    pub fn apply_matrix(&self, b: &DMatrix<T>) -> DMatrix<T> {
        match self {
            Self::Diagonal(d) => {
                let mut out = b.clone();
                for (mut row, w) in out.row_iter_mut().zip(d.iter()) {
                    row *= *w;
                }
                out
            }
            Self::Dense(m) => m * b,
        }
    }

    /// `v^T R^{-1} v`.
    pub fn quad_form(&self, v: DVectorView<'_, T>) -> T {
        match self {
            Self::Diagonal(d) => v.iter().zip(d.iter()).fold(T::zero(), |acc, (x, w)| acc + *w * *x * *x),
            Self::Dense(m) => v.dot(&(m * v)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sampling_matches_matrix_form() {
        let s = ComponentSampling::new(vec![0, 2], 3).unwrap();
        let z = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        let direct = ObservationOperator::<f64>::observe(&s, z.as_view());
        let via_matrix = s.to_matrix::<f64>() * &z;
        assert_eq!(direct, via_matrix);
        assert!(ComponentSampling::new(vec![3], 3).is_err());
    }

    #[test]
    fn quad_forms_agree() {
        let v = DVector::from_vec(vec![1.0, -2.0]);
        let diag = Precision::Diagonal(DVector::from_vec(vec![0.5, 2.0]));
        let dense = Precision::Dense(DMatrix::from_diagonal(&DVector::from_vec(vec![0.5, 2.0])));
        assert_eq!(diag.quad_form(v.as_view()), 8.5);
        assert_eq!(dense.quad_form(v.as_view()), 8.5);
        assert_eq!(diag.apply(&v), dense.apply(&v));
    }

    #[test]
    fn validation() {
        assert!(Precision::Diagonal(DVector::from_vec(vec![-1.0])).validate().is_err());
        let asym = Precision::Dense(DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]));
        assert!(asym.validate().is_err());
        assert!(Precision::<f64>::isotropic(3, 0.0).is_err());
        assert!(Precision::isotropic(3, 8.0).unwrap().validate().is_ok());
    }
}
