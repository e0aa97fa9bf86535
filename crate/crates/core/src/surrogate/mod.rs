//! Recurrent forecast surrogates: a multi-layer LSTM and a recurrent
//! DeepONet, their training loop, rollouts and checkpoint format.

pub mod checkpoint;
pub mod lstm;
pub mod model;
pub mod train;

use ndarray::{s, Array3};

pub use checkpoint::{ArchDescriptor, Checkpoint, TrainingManifest};
pub use lstm::{lstm_cell_forward, LstmLayerParams, LstmStack, Normalization};
pub use model::{
    Dense, LstmArch, LstmModel, RDeepOnetArch, RDeepOnetModel, Surrogate, SurrogateModel, Trainable,
};
pub use train::{
    evaluate_mse, fit_normalization, train, train_sequential, AdamState, SupervisedPairs, TrainConfig,
};

use crate::error::{check_dim, Error, Result};
use crate::state::StateVector;

/// Single-step prediction of state `k` from the `K` true states before it.
pub fn predict_ssp<S: Surrogate + ?Sized>(model: &S, true_states: &[StateVector], k: usize) -> Result<StateVector> {
    let w = model.window();
    if k < w || k > true_states.len() {
        return Err(Error::arg(format!(
            "ssp step {k} needs {w} preceding states within {} available",
            true_states.len()
        )));
    }
    model.forward(&true_states[k - w..k])
}

/// SSP predictions for every step `K..=n` of a trajectory, batched.
pub fn predict_ssp_all<S: Surrogate + ?Sized>(model: &S, true_states: &[StateVector]) -> Result<Vec<StateVector>> {
    let w = model.window();
    let d = model.state_dim();
    if true_states.len() <= w {
        return Ok(Vec::new());
    }
    let n = true_states.len() - w;
    let mut windows = Array3::zeros((n, w, d));
    for i in 0..n {
        for t in 0..w {
            check_dim(d, true_states[i + t].dim())?;
            windows.slice_mut(s![i, t, ..]).assign(&true_states[i + t].view());
        }
    }
    let out = model.forward_batch(windows.view());
    out.rows()
        .into_iter()
        .enumerate()
        .map(|(i, r)| {
            if r.iter().all(|v| v.is_finite()) {
                Ok(StateVector::from_vec_unchecked(r.to_vec()))
            } else {
                Err(Error::RolloutDiverged { step: i })
            }
        })
        .collect()
}

/// Autoregressive long-term prediction: `n_steps` states after the seed
/// window, each fed back as input.
pub fn predict_ltp_rollout<S: Surrogate + ?Sized>(
    model: &S,
    seed_window: &[StateVector],
    n_steps: usize,
) -> Result<Vec<StateVector>> {
    check_dim(model.window(), seed_window.len())?;
    let mut window: Vec<StateVector> = seed_window.to_vec();
    let mut out = Vec::with_capacity(n_steps);
    for step in 0..n_steps {
        let next = model
            .forward(&window)
            .map_err(|e| match e {
                Error::RolloutDiverged { .. } => Error::RolloutDiverged { step },
                other => other,
            })?;
        window.remove(0);
        window.push(next.clone());
        out.push(next);
    }
    Ok(out)
}
