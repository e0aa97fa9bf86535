//! Analysis step: the ensemble score filter (training-free score estimate
//! plus likelihood-guided reverse diffusion) and a stochastic EnKF baseline.

pub mod enkf;
pub mod ensf;
mod kernel;
pub mod observation;
pub mod schedule;

pub use enkf::{enkf_analysis, ENKF_RIDGE};
pub use ensf::{
    ensf_analysis, estimate_prior_score, posterior_score, prior_score_batch, reverse_sde_sample, score_weights,
    FilterConfig, LikelihoodStep, ScoreMode,
};
pub use observation::{mask_hash, ObsOperator, Observation, ObservationModel};
pub use schedule::{DiffusionSchedule, NoiseProfile};

use crate::state::{Ensemble, StateVector};

/// Posterior ensemble with its mean; `regularized` reports that the EnKF
/// innovation covariance needed a ridge.
#[derive(Clone, Debug, PartialEq)]
pub struct AnalysisResult {
    pub ensemble: Ensemble,
    pub estimate: StateVector,
    pub regularized: bool,
}
