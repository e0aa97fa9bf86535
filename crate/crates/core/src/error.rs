use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("integration blew up at step {step}")]
    IntegrationBlowup { step: usize },

    #[error("training diverged at epoch {epoch}, batch {batch}")]
    TrainingDiverged { epoch: usize, batch: usize },

    #[error("rollout diverged at step {step}")]
    RolloutDiverged { step: usize },

    #[error("reverse sampler diverged at tau = {tau}, member {member}")]
    SamplerDiverged { tau: f64, member: usize },

    #[error("pseudo-time {tau} outside the guarded schedule domain [{lo}, {hi}]")]
    ScheduleDomain { tau: f64, lo: f64, hi: f64 },

    #[error("experiment failed: {failed} of {total} trials failed")]
    ExperimentFailed { failed: usize, total: usize },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }

    /// True for failures caused by numerical divergence rather than bad input.
    pub fn is_divergence(&self) -> bool {
        matches!(
            self,
            Error::IntegrationBlowup { .. }
                | Error::TrainingDiverged { .. }
                | Error::RolloutDiverged { .. }
                | Error::SamplerDiverged { .. }
                | Error::ExperimentFailed { .. }
        )
    }
}

pub(crate) fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::Dimension { expected, got })
    }
}
