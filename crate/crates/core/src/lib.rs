//! Hybrid forecasting with recurrent neural surrogates corrected by ensemble
//! data assimilation (ensemble score filter and ensemble Kalman filter).

pub mod dynamics;
pub mod error;
pub mod filters;
pub mod harness;
pub mod surrogate;
pub mod state;

pub use error::{Error, Result};
pub use state::{ensemble_mean, gaussian_draw, rmse, Ensemble, RngStream, StateVector};
