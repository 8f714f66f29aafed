//! Hybrid ensemble transform particle filtering.
//!
//! The analysis steps in this crate are all linear ensemble transforms: an
//! `M x M` coefficient matrix with unit column sums is right-multiplied onto
//! the forecast ensemble. Two such transforms are provided, a square root
//! Kalman filter ([`esrf`]) and an optimal-transport particle filter
//! ([`etpf`]), and [`hybrid`] bridges them by splitting the likelihood with a
//! parameter `alpha` in `[0, 1]`. [`localization`] applies the same bridge per
//! grid point with a tapered observation precision.
//!
//! All numerical code is generic over [`Real`] (`f32` or `f64`); the `*64`
//! aliases below are what the experiment harness uses.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod ensemble;
pub mod error;
pub mod esrf;
pub mod etpf;
pub mod harness;
pub mod hybrid;
pub mod localization;
pub mod models;
pub mod observation;
pub mod scalar;
pub mod transport;

pub use ensemble::{
    anomalies, apply_transform, ensemble_mean, time_avg_rmse, AnomalyMatrix, Ensemble, TransformMatrix,
};
pub use error::{Error, Result};
pub use esrf::{esrf_coefficients, esrf_intermediates, obs_space_stats, EsrfIntermediates, ObsSpaceStats, RootMethod};
pub use etpf::{effective_sample_size, etpf_coefficients, importance_weights, WeightVector};
pub use hybrid::{
    adaptive_alpha, hybrid_update, hybrid_update_with_diagnostics, rejuvenate, BridgingMode, HybridConfig,
    HybridOutcome, StageOrder,
};
pub use localization::{
    localized_hybrid_update, localized_hybrid_update_with_diagnostics, localized_r_inverse, taper, FieldEnsemble,
    GridGeometry, LocalizationSpec, LocalizedOutcome,
};
pub use models::{
    implicit_midpoint_step, integrate, CoupledParams, CoupledState, Lorenz63Params, Lorenz96Params, Model,
};
pub use observation::{ComponentSampling, FnObservation, LinearObservation, ObservationOperator, Precision};
pub use scalar::Real;
pub use transport::{solve_transport, solve_transport_1d, validate_plan, CostMatrix, PlanDiagnostics, TransportPlan};

pub type Ensemble64 = Ensemble<f64>;
pub type Ensemble32 = Ensemble<f32>;
pub type TransformMatrix64 = TransformMatrix<f64>;
pub type TransformMatrix32 = TransformMatrix<f32>;
pub type TransportPlan64 = TransportPlan<f64>;
pub type TransportPlan32 = TransportPlan<f32>;
pub type WeightVector64 = WeightVector<f64>;
pub type WeightVector32 = WeightVector<f32>;
pub type FieldEnsemble64 = FieldEnsemble<f64>;
pub type HybridConfig64 = HybridConfig<f64>;
