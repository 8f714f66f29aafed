//! Discrete optimal transport between a weighted ensemble and the uniform one.
//!
//! The problem is: minimize `sum_ij t_ij c_ij` over `t_ij >= 0` with column
//! sums 1 and row sums `M w_i`. [`solve_transport`] runs the network simplex
//! method on the bipartite `M x M` transportation graph; [`solve_transport_1d`]
//! is the closed-form monotone coupling for scalar states.

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector};

use crate::ensemble::Ensemble;
use crate::error::{Error, Result};
use crate::scalar::Real;

/// Feasibility tolerance on plan marginals.
pub const FEASIBILITY_TOL: f64 = 1e-9;

/// Pairwise costs `c_ij = |z_i - z_j|^2`.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix<T: Real> {
    entries: DMatrix<T>,
}

impl<T: Real> CostMatrix<T> {
    /// Checks the matrix is square, finite, nonnegative and symmetric with a zero diagonal.
    pub fn new(entries: DMatrix<T>) -> Result<Self> {
        let m = entries.nrows();
        if m != entries.ncols() || m == 0 {
            return Err(Error::Dimension(format!(
                "cost matrix must be square and nonempty, got {}x{}",
                m,
                entries.ncols()
            )));
        }
        if entries.iter().any(|c| !c.is_finite()) {
            return Err(Error::NonFinite("cost matrix".into()));
        }
        if entries.iter().any(|c| *c < T::zero()) {
            return Err(Error::OutOfRange("negative cost".into()));
        }
        for i in 0..m {
            if entries[(i, i)] != T::zero() {
                return Err(Error::OutOfRange(format!("nonzero diagonal cost at {i}")));
            }
            for j in 0..i {
                if entries[(i, j)] != entries[(j, i)] {
                    return Err(Error::OutOfRange(format!("cost not symmetric at ({i}, {j})")));
                }
            }
        }
        Ok(Self { entries })
    }

    pub fn squared_euclidean(e: &Ensemble<T>) -> Self {
        let z = e.matrix();
        let m = z.ncols();
        let mut entries = DMatrix::zeros(m, m);
        for i in 0..m {
            for j in 0..i {
                let c = (z.column(i) - z.column(j)).norm_squared();
                entries[(i, j)] = c;
                entries[(j, i)] = c;
            }
        }
        Self { entries }
    }

    pub fn from_scalars(states: &[T]) -> Self {
        let m = states.len();
        Self {
            entries: DMatrix::from_fn(m, m, |i, j| {
                let d = states[i] - states[j];
                d * d
            }),
        }
    }

    pub fn size(&self) -> usize {
        self.entries.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<T> {
        &self.entries
    }
}

/// Dual potentials `u_i + v_j <= c_ij`, tight on the plan's support.
#[derive(Debug, Clone, PartialEq)]
pub struct DualPotentials<T: Real> {
    pub row: DVector<T>,
    pub col: DVector<T>,
}

/// Coupling `t_ij` with column sums 1 and row sums `M w_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct TransportPlan<T: Real> {
    entries: DMatrix<T>,
    row_marginals: DVector<T>,
    objective: T,
    duals: Option<DualPotentials<T>>,
}

impl<T: Real> TransportPlan<T> {
    pub fn matrix(&self) -> &DMatrix<T> {
        &self.entries
    }

    pub fn into_matrix(self) -> DMatrix<T> {
        self.entries
    }

    /// Target row sums `M w_i`.
    pub fn row_marginals(&self) -> &DVector<T> {
        &self.row_marginals
    }

    pub fn objective(&self) -> T {
        self.objective
    }

    /// Optimal dual potentials; present for plans from [`solve_transport`].
    pub fn duals(&self) -> Option<&DualPotentials<T>> {
        self.duals.as_ref()
    }

    pub fn size(&self) -> usize {
        self.entries.ncols()
    }
}

fn check_weights<T: Real>(weights: &DVector<T>, m: usize) -> Result<()> {
    if weights.len() != m {
        return Err(Error::Dimension(format!("{} weights for {} states", weights.len(), m)));
    }
    if m == 0 {
        return Err(Error::Empty("transport problem with no states".into()));
    }
    if weights.iter().any(|w| !w.is_finite()) {
        return Err(Error::InvalidWeights("non-finite weight".into()));
    }
    if weights.iter().any(|w| *w < T::zero()) {
        return Err(Error::InvalidWeights("negative weight".into()));
    }
    let sum = weights.sum();
    if (sum - T::one()).abs() > T::tol(1e-12) {
        return Err(Error::InvalidWeights(format!("weights sum to {}", sum.to_f64_lossy())));
    }
    Ok(())
}

fn objective_of<T: Real>(plan: &DMatrix<T>, cost: &DMatrix<T>) -> T {
    plan.iter()
        .zip(cost.iter())
        .fold(T::zero(), |acc, (t, c)| acc + *t * *c)
}

// Nodes 0..m are rows (sources), m..2m are columns (sinks).
struct SpanningTree {
    m: usize,
    basic: Vec<bool>,
    row_adj: Vec<Vec<usize>>,
    col_adj: Vec<Vec<usize>>,
}

impl SpanningTree {
    fn new(m: usize) -> Self {
        Self {
            m,
            basic: vec![false; m * m],
            row_adj: vec![Vec::new(); m],
            col_adj: vec![Vec::new(); m],
        }
    }

    fn insert(&mut self, i: usize, j: usize) {
        debug_assert!(!self.basic[i * self.m + j]);
        self.basic[i * self.m + j] = true;
        self.row_adj[i].push(j);
        self.col_adj[j].push(i);
    }

    fn remove(&mut self, i: usize, j: usize) {
        self.basic[i * self.m + j] = false;
        self.row_adj[i].retain(|&c| c != j);
        self.col_adj[j].retain(|&r| r != i);
    }

    fn neighbours(&self, node: usize) -> impl Iterator<Item = usize> + '_ {
        let m = self.m;
        let (rows, cols): (&[usize], &[usize]) = if node < m {
            (&[], &self.row_adj[node])
        } else {
            (&self.col_adj[node - m], &[])
        };
        rows.iter().copied().chain(cols.iter().map(move |&j| j + m))
    }
}

/// Potentials from the spanning tree rooted at row 0, with parent links and depths.
struct TreeLabels<T> {
    u: Vec<T>,
    v: Vec<T>,
    parent: Vec<usize>,
    depth: Vec<usize>,
}

fn label_tree<T: Real>(tree: &SpanningTree, cost: &DMatrix<T>) -> Result<TreeLabels<T>> {
    let m = tree.m;
    let unset = usize::MAX;
    let mut u = vec![T::zero(); m];
    let mut v = vec![T::zero(); m];
    let mut parent = vec![unset; 2 * m];
    let mut depth = vec![0usize; 2 * m];
    let mut seen = vec![false; 2 * m];
    let mut queue = VecDeque::with_capacity(2 * m);
    seen[0] = true;
    queue.push_back(0usize);
    let mut visited = 0;
    while let Some(node) = queue.pop_front() {
        visited += 1;
        for next in tree.neighbours(node) {
            if seen[next] {
                continue;
            }
            seen[next] = true;
            parent[next] = node;
            depth[next] = depth[node] + 1;
            if node < m {
                let j = next - m;
                v[j] = cost[(node, j)] - u[node];
            } else {
                let j = node - m;
                u[next] = cost[(next, j)] - v[j];
            }
            queue.push_back(next);
        }
    }
    if visited != 2 * m {
        return Err(Error::Infeasible("basis is not a spanning tree".into()));
    }
    Ok(TreeLabels { u, v, parent, depth })
}

/// Initial basic feasible tree by the north-west corner rule.
fn north_west_corner<T: Real>(supply: &[T], m: usize) -> (DMatrix<T>, SpanningTree) {
    let mut flow = DMatrix::zeros(m, m);
    let mut tree = SpanningTree::new(m);
    let mut row_left = supply.to_vec();
    let mut col_left = vec![T::one(); m];
    let (mut i, mut j) = (0usize, 0usize);
    loop {
        let q = if i == m - 1 {
            col_left[j]
        } else if j == m - 1 {
            row_left[i]
        } else {
            row_left[i].min(col_left[j])
        };
        let q = q.max(T::zero());
        flow[(i, j)] = q;
        tree.insert(i, j);
        row_left[i] -= q;
        col_left[j] -= q;
        if i == m - 1 && j == m - 1 {
            break;
        }
        if i == m - 1 {
            j += 1;
        } else if j == m - 1 || row_left[i] <= col_left[j] {
            i += 1;
        } else {
            j += 1;
        }
    }
    (flow, tree)
}

/// Exact optimal coupling by the network simplex method.
///
/// Pricing is Dantzig's most-negative reduced cost (lowest index on ties);
/// after a long run of degenerate pivots it switches to Bland's rule, which
/// cannot cycle. The result is deterministic for given inputs.
pub fn solve_transport<T: Real>(cost: &CostMatrix<T>, weights: &DVector<T>) -> Result<TransportPlan<T>> {
    let m = cost.size();
    check_weights(weights, m)?;
    let c = cost.matrix();
    let mass = T::from_usize_lossy(m);
    let supply: Vec<T> = weights.iter().map(|w| *w * mass).collect();
    let (mut flow, mut tree) = north_west_corner(&supply, m);

    let cmax = c.amax();
    let price_tol = T::tol(1e-11) * (T::one() + cmax);
    let max_pivots = 200 * m * m + 1000;
    let degenerate_limit = 4 * m * m + 50;
    let mut degenerate_run = 0usize;
    let mut bland = false;

    let mut labels = label_tree(&tree, c)?;
    for _ in 0..max_pivots {
        // pricing
        let mut entering = None;
        let mut best = -price_tol;
        'scan: for i in 0..m {
            for j in 0..m {
                if tree.basic[i * m + j] {
                    continue;
                }
                let reduced = c[(i, j)] - labels.u[i] - labels.v[j];
                if reduced < best {
                    entering = Some((i, j));
                    if bland {
                        break 'scan;
                    }
                    best = reduced;
                }
            }
        }
        let Some((ei, ej)) = entering else {
            let objective = objective_of(&flow, c);
            return Ok(TransportPlan {
                entries: flow,
                row_marginals: DVector::from_vec(supply),
                objective,
                duals: Some(DualPotentials {
                    row: DVector::from_vec(labels.u),
                    col: DVector::from_vec(labels.v),
                }),
            });
        };

        // cycle through the tree from column ej back to row ei
        let cycle = tree_path(&labels, ej + m, ei, m);
        let mut theta = T::max_value().unwrap_or_else(|| T::lit(f64::MAX));
        let mut leaving = None;
        for (k, &(i, j)) in cycle.iter().enumerate() {
            if k % 2 == 0 {
                let f = flow[(i, j)];
                let better = match leaving {
                    None => true,
                    Some((li, lj)) => f < theta || (f == theta && i * m + j < li * m + lj),
                };
                if better {
                    theta = f;
                    leaving = Some((i, j));
                }
            }
        }
        let (li, lj) = leaving.ok_or_else(|| Error::Infeasible("empty pivot cycle".into()))?;
        let theta = theta.max(T::zero());
        for (k, &(i, j)) in cycle.iter().enumerate() {
            if k % 2 == 0 {
                flow[(i, j)] = (flow[(i, j)] - theta).max(T::zero());
            } else {
                flow[(i, j)] += theta;
            }
        }
        flow[(li, lj)] = T::zero();
        flow[(ei, ej)] = theta;
        tree.remove(li, lj);
        tree.insert(ei, ej);

        if theta == T::zero() {
            degenerate_run += 1;
            if degenerate_run > degenerate_limit {
                bland = true;
            }
        } else {
            degenerate_run = 0;
        }
        labels = label_tree(&tree, c)?;
    }
    Err(Error::NoConvergence(format!(
        "network simplex exceeded {max_pivots} pivots"
    )))
}

/// Tree edges on the path from node `from` to node `to`, in order from `from`.
fn tree_path<T>(labels: &TreeLabels<T>, from: usize, to: usize, m: usize) -> Vec<(usize, usize)> {
    let cell = |a: usize, b: usize| if a < m { (a, b - m) } else { (b, a - m) };
    let mut up_from = Vec::new();
    let mut up_to = Vec::new();
    let (mut a, mut b) = (from, to);
    while labels.depth[a] > labels.depth[b] {
        let p = labels.parent[a];
        up_from.push(cell(a, p));
        a = p;
    }
    while labels.depth[b] > labels.depth[a] {
        let p = labels.parent[b];
        up_to.push(cell(b, p));
        b = p;
    }
    while a != b {
        let pa = labels.parent[a];
        let pb = labels.parent[b];
        up_from.push(cell(a, pa));
        up_to.push(cell(b, pb));
        a = pa;
        b = pb;
    }
    up_from.extend(up_to.into_iter().rev());
    up_from
}

/// Monotone coupling for scalar states.
///
/// Sorting makes the squared-distance cost a Monge array, so the sweep that
/// hands sorted source mass to sorted targets in order is optimal.
pub fn solve_transport_1d<T: Real>(states: &[T], weights: &DVector<T>) -> Result<TransportPlan<T>> {
    let m = states.len();
    check_weights(weights, m)?;
    if states.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("transport states".into()));
    }
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| states[a].partial_cmp(&states[b]).unwrap().then(a.cmp(&b)));

    let mass = T::from_usize_lossy(m);
    let supply: Vec<T> = weights.iter().map(|w| *w * mass).collect();
    let mut plan = DMatrix::zeros(m, m);
    let mut objective = T::zero();
    let mut src = 0usize;
    let mut src_left = supply[order[0]];
    for &j in &order {
        let mut need = T::one();
        loop {
            let i = order[src];
            let last_source = src == m - 1;
            let gap = (states[i] - states[j]) * (states[i] - states[j]);
            if last_source || src_left >= need {
                plan[(i, j)] += need;
                objective += need * gap;
                src_left -= need;
                break;
            }
            let give = src_left.max(T::zero());
            plan[(i, j)] += give;
            objective += give * gap;
            need -= give;
            src += 1;
            src_left = supply[order[src]];
        }
    }
    Ok(TransportPlan {
        entries: plan,
        row_marginals: DVector::from_vec(supply),
        objective,
        duals: None,
    })
}

/// Marginal and sign diagnostics for a plan.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlanDiagnostics {
    pub max_col_violation: f64,
    pub max_row_violation: f64,
    pub min_entry: f64,
    pub passed: bool,
}

pub fn validate_plan<T: Real>(plan: &TransportPlan<T>, weights: &DVector<T>) -> PlanDiagnostics {
    let t = plan.matrix();
    let m = t.ncols();
    let mass = m as f64;
    let max_col_violation = t
        .column_iter()
        .map(|c| (c.sum().to_f64_lossy() - 1.0).abs())
        .fold(0.0, f64::max);
    let max_row_violation = if weights.len() == t.nrows() {
        t.row_iter()
            .zip(weights.iter())
            .map(|(r, w)| (r.sum().to_f64_lossy() - w.to_f64_lossy() * mass).abs())
            .fold(0.0, f64::max)
    } else {
        f64::INFINITY
    };
    let min_entry = t.iter().map(|v| v.to_f64_lossy()).fold(f64::INFINITY, f64::min);
    let passed = max_col_violation <= FEASIBILITY_TOL
        && max_row_violation <= FEASIBILITY_TOL
        && min_entry >= -FEASIBILITY_TOL
        && t.nrows() == m;
    PlanDiagnostics {
        max_col_violation,
        max_row_violation,
        min_entry,
        passed,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn dv(v: &[f64]) -> DVector<f64> {
        DVector::from_vec(v.to_vec())
    }

    #[test]
    fn uniform_weights_give_identity() {
        let states = [0.3, -1.0, 2.0, 0.9];
        let cost = CostMatrix::from_scalars(&states);
        let w = dv(&[0.25; 4]);
        let plan = solve_transport(&cost, &w).unwrap();
        assert_eq!(plan.matrix(), &DMatrix::identity(4, 4));
        assert_eq!(plan.objective(), 0.0);
        let plan1d = solve_transport_1d(&states, &w).unwrap();
        assert_eq!(plan1d.matrix(), &DMatrix::identity(4, 4));
    }

    #[test]
    fn two_member_worked_case() {
        let states = [0.0, 1.0];
        let w = dv(&[0.75, 0.25]);
        let expected = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 0.5]);
        let plan = solve_transport(&CostMatrix::from_scalars(&states), &w).unwrap();
        assert_relative_eq!(plan.matrix(), &expected, epsilon = 1e-15);
        assert_relative_eq!(plan.objective(), 0.5, epsilon = 1e-15);
        let plan1d = solve_transport_1d(&states, &w).unwrap();
        assert_relative_eq!(plan1d.matrix(), &expected, epsilon = 1e-15);
        assert_relative_eq!(plan1d.objective(), 0.5, epsilon = 1e-15);
    }

    #[test]
    fn duplicated_states_cost_nothing() {
        let states = [2.0, 2.0, 2.0];
        let w = dv(&[0.6, 0.1, 0.3]);
        let plan = solve_transport_1d(&states, &w).unwrap();
        assert_eq!(plan.objective(), 0.0);
        assert!(validate_plan(&plan, &w).passed);
    }

    #[test]
    fn degenerate_zero_weight_rows_keep_shape() {
        let states = [0.0, 1.0, 3.0];
        let w = dv(&[0.0, 1.0, 0.0]);
        let plan = solve_transport(&CostMatrix::from_scalars(&states), &w).unwrap();
        assert_eq!(plan.matrix().shape(), (3, 3));
        assert_relative_eq!(plan.matrix().row(1).sum(), 3.0, epsilon = 1e-12);
        assert_relative_eq!(plan.objective(), 1.0 + 4.0, epsilon = 1e-12);
    }

    #[test]
    fn rejects_bad_weights() {
        let cost = CostMatrix::from_scalars(&[0.0, 1.0]);
        assert!(matches!(
            solve_transport(&cost, &dv(&[0.7, 0.7])),
            Err(Error::InvalidWeights(_))
        ));
        assert!(matches!(
            solve_transport(&cost, &dv(&[1.5, -0.5])),
            Err(Error::InvalidWeights(_))
        ));
        assert!(matches!(solve_transport(&cost, &dv(&[1.0])), Err(Error::Dimension(_))));
        assert!(solve_transport_1d(&[0.0, f64::NAN], &dv(&[0.5, 0.5])).is_err());
    }

    #[test]
    fn cost_matrix_validation() {
        assert!(CostMatrix::new(DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 2.0, 0.0])).is_err());
        assert!(CostMatrix::new(DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 0.0])).is_err());
        assert!(CostMatrix::new(DMatrix::from_row_slice(2, 2, &[0.0, -1.0, -1.0, 0.0])).is_err());
        assert!(CostMatrix::new(DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0])).is_ok());
    }

    #[test]
    fn diagnostics_flag_negative_entries() {
        let w = dv(&[0.5, 0.5]);
        let identity = solve_transport_1d(&[0.0, 1.0], &w).unwrap();
        assert!(validate_plan(&identity, &w).passed);

        let mut bad = identity.clone();
        bad.entries[(0, 1)] = -1e-6;
        let diag = validate_plan(&bad, &w);
        assert!(!diag.passed);
        assert_eq!(diag.min_entry, -1e-6);
    }

    #[test]
    fn single_precision_solver() {
        let states = [0.0f32, 1.0];
        let w = DVector::from_vec(vec![0.75f32, 0.25]);
        let plan = solve_transport(&CostMatrix::from_scalars(&states), &w).unwrap();
        assert!((plan.objective() - 0.5).abs() < 1e-6);
    }
}
