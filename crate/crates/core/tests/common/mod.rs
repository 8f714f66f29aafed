#![allow(dead_code)]

use hetpf::Ensemble;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

pub fn random_ensemble<R: Rng>(rng: &mut R, dim: usize, m: usize, scale: f64) -> Ensemble<f64> {
    Ensemble::new(DMatrix::from_fn(dim, m, |_, _| {
        scale * rng.sample::<f64, _>(StandardNormal)
    }))
    .unwrap()
}

pub fn random_weights<R: Rng>(rng: &mut R, m: usize) -> DVector<f64> {
    let raw = DVector::from_fn(m, |_, _| rng.random_range(0.05..1.0));
    let s = raw.sum();
    raw / s
}

/// Integer supplies `k_i >= 0` summing to `2M`, i.e. weights in multiples of `1/(2M)`.
pub fn half_unit_supplies<R: Rng>(rng: &mut R, m: usize) -> Vec<usize> {
    let mut k = vec![0usize; m];
    for _ in 0..2 * m {
        k[rng.random_range(0..m)] += 1;
    }
    k
}

/// Minimum of `sum c_ij t_ij` over integer flows in half units: row sums
/// `supply`, column sums 2. Exhaustive enumeration, for `M <= 4`.
pub fn brute_force_transport(cost: &DMatrix<f64>, supply: &[usize]) -> f64 {
    let m = supply.len();
    // every way to split 2 units of one column over the rows
    let mut splits = Vec::new();
    for a in 0..m {
        for b in a..m {
            let mut s = vec![0usize; m];
            s[a] += 1;
            s[b] += 1;
            splits.push(s);
        }
    }
    fn recurse(
        j: usize,
        m: usize,
        splits: &[Vec<usize>],
        cost: &DMatrix<f64>,
        left: &mut Vec<usize>,
        acc: f64,
        best: &mut f64,
    ) {
        if j == m {
            if left.iter().all(|&v| v == 0) && acc < *best {
                *best = acc;
            }
            return;
        }
        for s in splits {
            if s.iter().zip(left.iter()).all(|(a, b)| a <= b) {
                let c: f64 = (0..m).map(|i| s[i] as f64 * 0.5 * cost[(i, j)]).sum();
                for i in 0..m {
                    left[i] -= s[i];
                }
                recurse(j + 1, m, splits, cost, left, acc + c, best);
                for i in 0..m {
                    left[i] += s[i];
                }
            }
        }
    }
    let mut best = f64::INFINITY;
    let mut left = supply.to_vec();
    recurse(0, m, &splits, cost, &mut left, 0.0, &mut best);
    best
}

pub fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Unbiased sample covariance of the members.
pub fn sample_covariance(e: &Ensemble<f64>) -> DMatrix<f64> {
    let a = hetpf::anomalies(e).matrix().clone();
    &a * a.transpose() / (e.size() as f64 - 1.0)
}
