//! Ensemble containers, sample statistics and the generic linear transform.
//!
//! An ensemble is stored as an `N_z x M` matrix whose columns are members, so
//! every analysis step is a right-multiplication `Z^a = Z^f D`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::scalar::Real;

/// `M >= 2` finite state vectors of common dimension `N_z >= 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble<T: Real> {
    members: DMatrix<T>,
}

impl<T: Real> Ensemble<T> {
    /// Wraps an `N_z x M` matrix (one member per column).
    pub fn new(members: DMatrix<T>) -> Result<Self> {
        if members.ncols() < 2 {
            return Err(Error::InvalidEnsemble(format!(
                "need at least 2 members, got {}",
                members.ncols()
            )));
        }
        if members.nrows() < 1 {
            return Err(Error::InvalidEnsemble("state dimension is zero".into()));
        }
        if let Some(pos) = members.iter().position(|v| !v.is_finite()) {
            let (row, col) = (pos % members.nrows(), pos / members.nrows());
            return Err(Error::NonFinite(format!("member {col}, component {row}")));
        }
        Ok(Self { members })
    }

    pub fn from_members(members: &[DVector<T>]) -> Result<Self> {
        let first = members
            .first()
            .ok_or_else(|| Error::InvalidEnsemble("no members".into()))?;
        if let Some(bad) = members.iter().position(|m| m.len() != first.len()) {
            return Err(Error::Dimension(format!(
                "member {bad} has length {}, expected {}",
                members[bad].len(),
                first.len()
            )));
        }
        Self::new(DMatrix::from_columns(members))
    }

    /// Scalar ensemble (`N_z = 1`).
    pub fn from_scalars(values: &[T]) -> Result<Self> {
        Self::new(DMatrix::from_row_slice(1, values.len(), values))
    }

    /// Ensemble size `M`.
    pub fn size(&self) -> usize {
        self.members.ncols()
    }

    /// State dimension `N_z`.
    pub fn dim(&self) -> usize {
        self.members.nrows()
    }

    pub fn member(&self, i: usize) -> DVector<T> {
        self.members.column(i).into_owned()
    }

    pub fn matrix(&self) -> &DMatrix<T> {
        &self.members
    }

    pub fn into_matrix(self) -> DMatrix<T> {
        self.members
    }

    /// Rows `start..start + len` of every member, as a smaller ensemble.
    pub fn rows(&self, start: usize, len: usize) -> Result<Self> {
        if len == 0 || start + len > self.dim() {
            return Err(Error::Dimension(format!(
                "rows {start}..{} out of range for dimension {}",
                start + len,
                self.dim()
            )));
        }
        Ok(Self {
            members: self.members.rows(start, len).into_owned(),
        })
    }
}

/// `M x M` coefficients `d_ij` whose columns each sum to one.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformMatrix<T: Real> {
    entries: DMatrix<T>,
}

impl<T: Real> TransformMatrix<T> {
    /// Checks squareness and unit column sums.
    ///
    /// The sum tolerance is `1e-12` scaled by the column's absolute mass
    /// `max(1, sum_i |d_ij|)`, the round-off bound for summing that column.
    pub fn new(entries: DMatrix<T>) -> Result<Self> {
        if entries.nrows() != entries.ncols() {
            return Err(Error::Dimension(format!(
                "transform must be square, got {}x{}",
                entries.nrows(),
                entries.ncols()
            )));
        }
        let tol = T::tol(1e-12);
        let m = entries.nrows().max(1);
        for (j, col) in entries.as_slice().chunks(m).enumerate() {
            let sum = col.iter().fold(T::zero(), |acc, v| acc + *v);
            // the absolute mass is only needed when the plain bound fails
            let within = |bound: T| (sum - T::one()).abs() <= bound;
            if !sum.is_finite() || !(within(tol) || within(tol * col.iter().fold(T::one(), |m, v| m + v.abs()))) {
                return Err(Error::ColumnSum {
                    column: j,
                    sum: sum.to_f64_lossy(),
                });
            }
        }
        Ok(Self { entries })
    }

    pub fn identity(m: usize) -> Self {
        Self {
            entries: DMatrix::identity(m, m),
        }
    }

    /// Every column equal to `(1/M, ..., 1/M)`.
    pub fn uniform(m: usize) -> Self {
        Self {
            entries: DMatrix::from_element(m, m, T::one() / T::from_usize_lossy(m)),
        }
    }

    pub fn size(&self) -> usize {
        self.entries.ncols()
    }

    pub fn matrix(&self) -> &DMatrix<T> {
        &self.entries
    }

    pub fn into_matrix(self) -> DMatrix<T> {
        self.entries
    }

    pub fn is_identity(&self) -> bool {
        self.entries.iter().enumerate().all(|(k, v)| {
            *v == if k % (self.size() + 1) == 0 {
                T::one()
            } else {
                T::zero()
            }
        })
    }

    /// Composition `self * other`: applying `self` then `other`.
    pub fn then(&self, other: &Self) -> Result<Self> {
        if self.size() != other.size() {
            return Err(Error::Dimension("transform sizes differ".into()));
        }
        Self::new(&self.entries * &other.entries)
    }
}

/// Deviations of the members from the ensemble mean, `N_z x M`.
#[derive(Debug, Clone, PartialEq)]
pub struct AnomalyMatrix<T: Real> {
    entries: DMatrix<T>,
}

impl<T: Real> AnomalyMatrix<T> {
    pub fn matrix(&self) -> &DMatrix<T> {
        &self.entries
    }

    pub fn size(&self) -> usize {
        self.entries.ncols()
    }

    pub fn dim(&self) -> usize {
        self.entries.nrows()
    }
}

pub fn ensemble_mean<T: Real>(e: &Ensemble<T>) -> DVector<T> {
    column_mean(e.matrix())
}

pub(crate) fn column_mean<T: Real>(m: &DMatrix<T>) -> DVector<T> {
    let inv = T::one() / T::from_usize_lossy(m.ncols());
    m.column_sum() * inv
}

pub fn anomalies<T: Real>(e: &Ensemble<T>) -> AnomalyMatrix<T> {
    let mean = ensemble_mean(e);
    let mut entries = e.matrix().clone();
    for mut col in entries.column_iter_mut() {
        col -= &mean;
    }
    AnomalyMatrix { entries }
}

/// `z^a_j = sum_i z^f_i d_ij`.
pub fn apply_transform<T: Real>(e: &Ensemble<T>, d: &TransformMatrix<T>) -> Result<Ensemble<T>> {
    if d.size() != e.size() {
        return Err(Error::Dimension(format!(
            "transform is {0}x{0} but ensemble has {1} members",
            d.size(),
            e.size()
        )));
    }
    if d.is_identity() {
        return Ok(e.clone());
    }
    // as (D^T Z^T)^T: column dot products are much faster than the generic
    // row-by-matrix product
    Ensemble::new(d.matrix().tr_mul(&e.matrix().transpose()).transpose())
}

/// Time-averaged RMSE: `(1/K) sum_k sqrt(|est_k - ref_k|^2 / N_z)`.
pub fn time_avg_rmse<T: Real>(estimates: &[DVector<T>], references: &[DVector<T>]) -> Result<T> {
    if estimates.is_empty() {
        return Err(Error::Empty("no estimates".into()));
    }
    if estimates.len() != references.len() {
        return Err(Error::Dimension(format!(
            "{} estimates vs {} references",
            estimates.len(),
            references.len()
        )));
    }
    let mut total = T::zero();
    for (k, (est, reference)) in estimates.iter().zip(references).enumerate() {
        if est.len() != reference.len() || est.is_empty() {
            return Err(Error::Dimension(format!(
                "step {k}: state dimensions differ or are zero"
            )));
        }
        total += rmse(est, reference);
    }
    Ok(total / T::from_usize_lossy(estimates.len()))
}

/// Single-time RMSE `sqrt(|a - b|^2 / N_z)`.
pub fn rmse<T: Real>(a: &DVector<T>, b: &DVector<T>) -> T {
    let sq = (a - b).norm_squared();
    (sq / T::from_usize_lossy(a.len())).sqrt()
}
