//! Test dynamics and the implicit midpoint integrator.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Autonomous vector field `dz/dt = f(z)`.
pub trait Model<T: Real>: Sync {
    fn dim(&self) -> usize;

    fn rhs(&self, z: &DVector<T>) -> DVector<T>;

    /// Analytic Jacobian, if available; otherwise finite differences are used.
    fn jacobian(&self, _z: &DVector<T>) -> Option<DMatrix<T>> {
        None
    }
}

/// Wraps a closure as a [`Model`].
pub struct FnModel<F> {
    dim: usize,
    f: F,
}

impl<F> FnModel<F> {
    pub fn new(dim: usize, f: F) -> Self {
        Self { dim, f }
    }
}

impl<T: Real, F: Fn(&DVector<T>) -> DVector<T> + Sync> Model<T> for FnModel<F> {
    fn dim(&self) -> usize {
        self.dim
    }

    fn rhs(&self, z: &DVector<T>) -> DVector<T> {
        (self.f)(z)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Lorenz63Params<T> {
    pub sigma: T,
    pub rho: T,
    pub beta: T,
}

impl<T: Real> Default for Lorenz63Params<T> {
    fn default() -> Self {
        Self {
            sigma: T::lit(10.0),
            rho: T::lit(28.0),
            beta: T::lit(8.0 / 3.0),
        }
    }
}

impl<T: Real> Lorenz63Params<T> {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > T::zero() && self.rho > T::zero() && self.beta > T::zero()) {
            return Err(Error::OutOfRange("Lorenz-63 parameters must be positive".into()));
        }
        Ok(())
    }
}

pub fn lorenz63_rhs<T: Real>(z: &DVector<T>, p: &Lorenz63Params<T>) -> DVector<T> {
    let (x, y, w) = (z[0], z[1], z[2]);
    DVector::from_vec(vec![p.sigma * (y - x), x * (p.rho - w) - y, x * y - p.beta * w])
}

impl<T: Real> Model<T> for Lorenz63Params<T> {
    fn dim(&self) -> usize {
        3
    }

    fn rhs(&self, z: &DVector<T>) -> DVector<T> {
        lorenz63_rhs(z, self)
    }

    fn jacobian(&self, z: &DVector<T>) -> Option<DMatrix<T>> {
        let (x, y, w) = (z[0], z[1], z[2]);
        Some(DMatrix::from_row_slice(
            3,
            3,
            &[
                -self.sigma,
                self.sigma,
                T::zero(),
                self.rho - w,
                -T::one(),
                -x,
                y,
                x,
                -self.beta,
            ],
        ))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Lorenz96Params<T> {
    pub sites: usize,
    pub forcing: T,
}

impl<T: Real> Default for Lorenz96Params<T> {
    fn default() -> Self {
        Self {
            sites: 40,
            forcing: T::lit(8.0),
        }
    }
}

impl<T: Real> Lorenz96Params<T> {
    pub fn validate(&self) -> Result<()> {
        if self.sites < 4 {
            return Err(Error::OutOfRange("Lorenz-96 needs at least 4 sites".into()));
        }
        Ok(())
    }
}

/// `(x_{l+1} - x_{l-2}) x_{l-1} - x_l + F` with periodic indices.
pub fn lorenz96_rhs<T: Real>(x: &DVector<T>, p: &Lorenz96Params<T>) -> DVector<T> {
    let n = x.len();
    DVector::from_fn(n, |l, _| {
        let next = x[(l + 1) % n];
        let prev = x[(l + n - 1) % n];
        let prev2 = x[(l + n - 2) % n];
        (next - prev2) * prev - x[l] + p.forcing
    })
}

impl<T: Real> Model<T> for Lorenz96Params<T> {
    fn dim(&self) -> usize {
        self.sites
    }

    fn rhs(&self, z: &DVector<T>) -> DVector<T> {
        lorenz96_rhs(z, self)
    }

    fn jacobian(&self, x: &DVector<T>) -> Option<DMatrix<T>> {
        let n = x.len();
        let mut j = DMatrix::zeros(n, n);
        for l in 0..n {
            let (lp, lm, lm2) = ((l + 1) % n, (l + n - 1) % n, (l + n - 2) % n);
            j[(l, lp)] += x[lm];
            j[(l, lm2)] -= x[lm];
            j[(l, lm)] += x[lp] - x[lm2];
            j[(l, l)] -= T::one();
        }
        Some(j)
    }
}

/// Lorenz-96 advection coupled to a damped discrete wave equation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoupledParams<T> {
    pub sites: usize,
    pub forcing: T,
    pub delta: T,
    pub epsilon: T,
    pub gamma: T,
    pub c: T,
}

impl<T: Real> Default for CoupledParams<T> {
    fn default() -> Self {
        Self {
            sites: 40,
            forcing: T::lit(8.0),
            delta: T::lit(0.1),
            epsilon: T::lit(0.0025),
            gamma: T::lit(0.1),
            c: T::lit(0.5),
        }
    }
}

impl<T: Real> CoupledParams<T> {
    pub fn validate(&self) -> Result<()> {
        if self.sites < 4 {
            return Err(Error::OutOfRange("coupled model needs at least 4 sites".into()));
        }
        if !(self.epsilon > T::zero() && self.gamma > T::zero() && self.c > T::zero()) {
            return Err(Error::OutOfRange("epsilon, gamma and c must be positive".into()));
        }
        if !(self.delta >= T::zero() && self.delta <= T::one()) {
            return Err(Error::OutOfRange("delta must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Slow field `x`, wave height `h` and its rate `hdot`.
#[derive(Debug, Clone, PartialEq)]
pub struct CoupledState<T: Real> {
    pub x: DVector<T>,
    pub h: DVector<T>,
    pub hdot: DVector<T>,
}

impl<T: Real> CoupledState<T> {
    /// Flat site-major layout `(x_0, h_0, hdot_0, x_1, ...)`.
    pub fn to_vector(&self) -> DVector<T> {
        let n = self.x.len();
        DVector::from_fn(3 * n, |k, _| match k % 3 {
            0 => self.x[k / 3],
            1 => self.h[k / 3],
            _ => self.hdot[k / 3],
        })
    }

    pub fn from_vector(z: &DVector<T>) -> Result<Self> {
        if !z.len().is_multiple_of(3) {
            return Err(Error::Dimension(format!(
                "coupled state length {} not a multiple of 3",
                z.len()
            )));
        }
        let n = z.len() / 3;
        Ok(Self {
            x: DVector::from_fn(n, |l, _| z[3 * l]),
            h: DVector::from_fn(n, |l, _| z[3 * l + 1]),
            hdot: DVector::from_fn(n, |l, _| z[3 * l + 2]),
        })
    }
}

pub fn coupled_rhs<T: Real>(s: &CoupledState<T>, p: &CoupledParams<T>) -> CoupledState<T> {
    let n = s.x.len();
    let (x, h, hdot) = (&s.x, &s.h, &s.hdot);
    let one = T::one();
    let two = T::lit(2.0);
    let eps2 = p.epsilon * p.epsilon;
    let c2 = p.c * p.c;
    let xdot = DVector::from_fn(n, |l, _| {
        let (lp, lm, lm2) = ((l + 1) % n, (l + n - 1) % n, (l + n - 2) % n);
        (one - p.delta) * (x[lp] - x[lm2]) * x[lm] + p.delta * (x[lm] * h[lp] - x[lm2] * h[lm]) - x[l] + p.forcing
    });
    let hddot = DVector::from_fn(n, |l, _| {
        let (lp, lm) = ((l + 1) % n, (l + n - 1) % n);
        (-h[l] + c2 * (h[lp] - two * h[l] + h[lm]) + x[l]) / eps2 - two * p.gamma * hdot[l]
    });
    CoupledState {
        x: xdot,
        h: hdot.clone(),
        hdot: hddot,
    }
}

impl<T: Real> Model<T> for CoupledParams<T> {
    fn dim(&self) -> usize {
        3 * self.sites
    }

    fn rhs(&self, z: &DVector<T>) -> DVector<T> {
        let s = CoupledState::from_vector(z).expect("coupled state length");
        coupled_rhs(&s, self).to_vector()
    }

    fn jacobian(&self, z: &DVector<T>) -> Option<DMatrix<T>> {
        let n = z.len() / 3;
        let (xi, hi, di) = (|l: usize| 3 * l, |l: usize| 3 * l + 1, |l: usize| 3 * l + 2);
        let x = |l: usize| z[3 * l];
        let h = |l: usize| z[3 * l + 1];
        let one = T::one();
        let two = T::lit(2.0);
        let d = self.delta;
        let inv_eps2 = one / (self.epsilon * self.epsilon);
        let c2 = self.c * self.c;
        let mut j = DMatrix::zeros(3 * n, 3 * n);
        for l in 0..n {
            let (lp, lm, lm2) = ((l + 1) % n, (l + n - 1) % n, (l + n - 2) % n);
            let r = xi(l);
            j[(r, xi(lp))] += (one - d) * x(lm);
            j[(r, xi(lm2))] -= (one - d) * x(lm) + d * h(lm);
            j[(r, xi(lm))] += (one - d) * (x(lp) - x(lm2)) + d * h(lp);
            j[(r, xi(l))] -= one;
            j[(r, hi(lp))] += d * x(lm);
            j[(r, hi(lm))] -= d * x(lm2);

            j[(hi(l), di(l))] += one;

            let r = di(l);
            j[(r, hi(l))] += (-one - two * c2) * inv_eps2;
            j[(r, hi(lp))] += c2 * inv_eps2;
            j[(r, hi(lm))] += c2 * inv_eps2;
            j[(r, xi(l))] += inv_eps2;
            j[(r, di(l))] -= two * self.gamma;
        }
        Some(j)
    }
}

fn balance_matrix<T: Real>(n: usize, c: T) -> DMatrix<T> {
    let c2 = c * c;
    let mut a = DMatrix::zeros(n, n);
    for l in 0..n {
        a[(l, l)] += T::one() + T::lit(2.0) * c2;
        a[(l, (l + 1) % n)] -= c2;
        a[(l, (l + n - 1) % n)] -= c2;
    }
    a
}

/// Solves `x = (I - c^2 Δ) h` on the periodic grid for `h`.
pub fn balance_solve<T: Real>(x: &DVector<T>, c: T) -> Result<DVector<T>> {
    let n = x.len();
    if n < 3 {
        return Err(Error::Dimension("balance relation needs at least 3 sites".into()));
    }
    if c == T::zero() {
        return Ok(x.clone());
    }
    balance_matrix(n, c)
        .lu()
        .solve(x)
        .ok_or_else(|| Error::NotPositiveDefinite("balance operator singular".into()))
}

/// `max_l |x_l - (h_l - c^2 (h_{l+1} - 2 h_l + h_{l-1}))|`.
pub fn balance_residual<T: Real>(x: &DVector<T>, h: &DVector<T>, c: T) -> T {
    let n = x.len();
    let c2 = c * c;
    let two = T::lit(2.0);
    (0..n).fold(T::zero(), |acc, l| {
        let lap = h[(l + 1) % n] - two * h[l] + h[(l + n - 1) % n];
        acc.max((x[l] - (h[l] - c2 * lap)).abs())
    })
}

/// Fixed-point iterations before switching to Newton.
pub const FIXED_POINT_ITERATIONS: usize = 50;
const NEWTON_ITERATIONS: usize = 50;
const CHORD_ITERATIONS: usize = 30;

fn finite_difference_jacobian<T: Real, M: Model<T> + ?Sized>(model: &M, z: &DVector<T>) -> DMatrix<T> {
    let n = z.len();
    let f0 = model.rhs(z);
    let root_eps = T::default_epsilon().sqrt();
    let mut j = DMatrix::zeros(n, n);
    let mut zp = z.clone();
    for k in 0..n {
        let step = root_eps * (T::one() + z[k].abs());
        zp[k] = z[k] + step;
        let fk = model.rhs(&zp);
        j.set_column(k, &((fk - &f0) / step));
        zp[k] = z[k];
    }
    j
}

fn max_scalar<T: Real>() -> T {
    T::max_value().unwrap_or_else(|| T::lit(f64::MAX))
}

/// Implicit midpoint rule `z' = z + dt f((z + z')/2)` with state kept
/// between steps.
///
/// Each step is solved to a residual of `1e-12 (1 + |z|)`. Fixed-point
/// iteration is tried first. Once it fails (stiff fast waves) the stepper
/// switches to chord iterations with a cached factorisation of
/// `I - dt/2 J`, refreshed when it stops contracting, and finally to full
/// Newton.
pub struct MidpointStepper<T: Real> {
    dt: T,
    stiff: bool,
    lu: Option<nalgebra::LU<T, nalgebra::Dyn, nalgebra::Dyn>>,
}

impl<T: Real> MidpointStepper<T> {
    pub fn new(dt: T) -> Result<Self> {
        if !(dt > T::zero()) || !dt.is_finite() {
            return Err(Error::OutOfRange("step size must be positive".into()));
        }
        Ok(Self {
            dt,
            stiff: false,
            lu: None,
        })
    }

    pub fn dt(&self) -> T {
        self.dt
    }

    fn newton_matrix<M: Model<T> + ?Sized>(
        &self,
        model: &M,
        mid: &DVector<T>,
    ) -> nalgebra::LU<T, nalgebra::Dyn, nalgebra::Dyn> {
        let n = mid.len();
        let jf = model
            .jacobian(mid)
            .unwrap_or_else(|| finite_difference_jacobian(model, mid));
        (DMatrix::identity(n, n) - jf * (self.dt * T::lit(0.5))).lu()
    }

    pub fn step<M: Model<T> + ?Sized>(&mut self, model: &M, z: &DVector<T>) -> Result<DVector<T>> {
        if z.len() != model.dim() {
            return Err(Error::Dimension(format!(
                "state of length {} for model of dimension {}",
                z.len(),
                model.dim()
            )));
        }
        let dt = self.dt;
        let half = T::lit(0.5);
        let tol = T::tol(1e-12) * (T::one() + z.amax());
        let residual_at = |w: &DVector<T>| -> (DVector<T>, T) {
            let g = w - z - model.rhs(&((z + w) * half)) * dt;
            let r = g.amax();
            (g, r)
        };

        let mut w = z + model.rhs(z) * dt;
        if !self.stiff {
            let mut prev = max_scalar::<T>();
            for _ in 0..FIXED_POINT_ITERATIONS {
                let next = z + model.rhs(&((z + &w) * half)) * dt;
                let res = (&next - &w).amax();
                if !res.is_finite() || res > prev {
                    break;
                }
                w = next;
                prev = res;
                if res <= tol {
                    return Ok(w);
                }
            }
            self.stiff = true;
            w = z.clone();
        } else {
            w = z.clone();
        }

        // chord iterations on G(w) = w - z - dt f((z + w)/2)
        for attempt in 0..2 {
            if self.lu.is_none() || attempt > 0 {
                self.lu = Some(self.newton_matrix(model, z));
            }
            let lu = self.lu.as_ref().expect("factorisation present");
            let mut trial = w.clone();
            let mut last = max_scalar::<T>();
            let mut slow = 0;
            for _ in 0..CHORD_ITERATIONS {
                let (g, res) = residual_at(&trial);
                if !res.is_finite() {
                    break;
                }
                if res <= tol {
                    return Ok(trial);
                }
                if res > last * half {
                    slow += 1;
                    if slow >= 3 {
                        break;
                    }
                }
                last = res;
                match lu.solve(&g) {
                    Some(step) => trial -= step,
                    None => break,
                }
            }
        }

        let n = z.len();
        let mut last_res = max_scalar::<T>();
        for _ in 0..NEWTON_ITERATIONS {
            let (g, res) = residual_at(&w);
            if !res.is_finite() {
                break;
            }
            if res <= tol {
                return Ok(w);
            }
            let mid = (z + &w) * half;
            let jf = model
                .jacobian(&mid)
                .unwrap_or_else(|| finite_difference_jacobian(model, &mid));
            let jg = DMatrix::identity(n, n) - jf * (dt * half);
            let step = jg
                .lu()
                .solve(&g)
                .ok_or_else(|| Error::NoConvergence("singular Newton matrix in implicit midpoint".into()))?;
            w -= &step;
            // round-off floor: the step no longer changes the iterate and
            // the residual stopped decreasing
            let floor = T::default_epsilon() * T::lit(16.0) * (T::one() + w.amax());
            if step.amax() <= floor && res >= last_res * half {
                return Ok(w);
            }
            last_res = res;
        }
        Err(Error::NoConvergence(format!(
            "implicit midpoint did not converge with dt = {}",
            dt.to_f64_lossy()
        )))
    }

    pub fn integrate<M: Model<T> + ?Sized>(&mut self, model: &M, z: &DVector<T>, steps: usize) -> Result<DVector<T>> {
        let mut state = z.clone();
        for _ in 0..steps {
            state = self.step(model, &state)?;
        }
        Ok(state)
    }
}

/// One step of `z' = z + dt f((z + z')/2)`.
pub fn implicit_midpoint_step<T: Real, M: Model<T> + ?Sized>(model: &M, z: &DVector<T>, dt: T) -> Result<DVector<T>> {
    MidpointStepper::new(dt)?.step(model, z)
}

/// `steps` implicit midpoint steps.
pub fn integrate<T: Real, M: Model<T> + ?Sized>(model: &M, z: &DVector<T>, dt: T, steps: usize) -> Result<DVector<T>> {
    MidpointStepper::new(dt)?.integrate(model, z, steps)
}
