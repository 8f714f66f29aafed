use rayon::prelude::*;

use super::config::ExperimentConfig;
use super::twin::{run_twin_experiment, ExperimentResult};
use crate::error::Result;
use crate::hybrid::BridgingMode;

/// One point of a sweep; `None` leaves the base configuration unchanged.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepJob {
    pub alpha: Option<f64>,
    pub theta: Option<f64>,
    pub ensemble_size: Option<usize>,
    pub seed: Option<u64>,
}

impl SweepJob {
    pub fn apply(&self, base: &ExperimentConfig) -> ExperimentConfig {
        let mut cfg = base.clone();
        if let Some(a) = self.alpha {
            cfg.hybrid.mode = BridgingMode::Fixed(a);
        }
        if let Some(t) = self.theta {
            cfg.hybrid.mode = BridgingMode::Adaptive(t);
        }
        if let Some(m) = self.ensemble_size {
            cfg.ensemble_size = m;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        cfg.sweep = Default::default();
        cfg
    }
}

#[derive(Debug, Clone)]
pub struct SweepOutcome {
    pub job: SweepJob,
    pub result: ExperimentResult,
}

/// Cartesian product of the sweep lists. Fixed `alpha` values come before
/// adaptive `theta` values; seeds vary fastest.
pub fn sweep_jobs(cfg: &ExperimentConfig) -> Vec<SweepJob> {
    let s = &cfg.sweep;
    let mut modes: Vec<(Option<f64>, Option<f64>)> = s.alpha.iter().map(|&a| (Some(a), None)).collect();
    modes.extend(s.theta.iter().map(|&t| (None, Some(t))));
    if modes.is_empty() {
        modes.push((None, None));
    }
    let sizes: Vec<Option<usize>> = if s.ensemble_size.is_empty() {
        vec![None]
    } else {
        s.ensemble_size.iter().map(|&m| Some(m)).collect()
    };
    let seeds: Vec<Option<u64>> = if s.seed.is_empty() {
        vec![None]
    } else {
        s.seed.iter().map(|&v| Some(v)).collect()
    };
    let mut jobs = Vec::with_capacity(modes.len() * sizes.len() * seeds.len());
    for &(alpha, theta) in &modes {
        for &ensemble_size in &sizes {
            for &seed in &seeds {
                jobs.push(SweepJob {
                    alpha,
                    theta,
                    ensemble_size,
                    seed,
                });
            }
        }
    }
    jobs
}

/// Runs all sweep jobs concurrently; outcomes are in job order.
pub fn run_sweep(cfg: &ExperimentConfig) -> Result<Vec<SweepOutcome>> {
    cfg.validate()?;
    sweep_jobs(cfg)
        .into_par_iter()
        .map(|job| {
            let result = run_twin_experiment(&job.apply(cfg))?;
            Ok(SweepOutcome { job, result })
        })
        .collect()
}
