//! Particle block online EM for hidden Markov models.
//!
//! The crate is generic over the floating-point type through [`Real`]; the
//! aliases at the bottom fix it to `f64` (and `f32`) for everyday use.
//!
//! * [`model`]: the model contract and parameter/statistic types.
//! * [`smc`]: auxiliary particle filter.
//! * [`smoother`]: forward-only smoothing of the sufficient statistic.
//! * [`boem`]: block schedules, parameter updates and the estimation loop.
//! * [`oracles`]: exact block statistics for finite and linear-Gaussian models.
//! * [`models`]: stochastic volatility, linear-Gaussian, finite HMM and SLAM.

pub mod boem;
pub mod error;
pub mod model;
pub mod models;
pub mod oracles;
pub mod rng;
pub mod scalar;
pub mod smc;
pub mod smoother;

pub use boem::{
    pboem_update, run, run_block, run_with, BlockEstimator, BlockInit, BlockSchedule, BlockSize,
    EstimatorState, ExactBlockEstimator, ParticleBlockEstimator, ParticleRule, RunOptions,
    TraceRecord, UpdateEvents,
};
pub use error::{Error, Result};
pub use model::{
    log_joint_increment, ExponentialFamily, MStep, Parameter, ParameterBox, StateSpaceModel,
    SufficientStatistic,
};
pub use scalar::Real;
pub use smc::{
    effective_sample_size, init_particles, propagate, reweight, Bootstrap, InstrumentalKernel,
    ParticleSystem,
};
pub use smoother::{finalize_block_statistic, update_statistics, ForwardSmoother, SmoothedStatistics};

pub type Parameter64 = Parameter<f64>;
pub type Statistic64 = SufficientStatistic<f64>;
pub type EstimatorState64 = EstimatorState<f64>;
pub type TraceRecord64 = TraceRecord<f64>;
pub type SvModel64 = models::SvModel<f64>;
pub type LgssmModel64 = models::LgssmModel<f64>;
pub type FiniteHmm64 = models::FiniteHmm<f64>;

pub type Parameter32 = Parameter<f32>;
pub type Statistic32 = SufficientStatistic<f32>;
pub type SvModel32 = models::SvModel<f32>;
