use serde::{Deserialize, Serialize};

use super::scenario::{scenario_dataset, scenario_epochs, Scenario};
use crate::dynamics::{System, TrajectoryDataset};
use crate::error::{Error, Result};
use crate::state::RngStream;
use crate::surrogate::train::train_with_state;
use crate::surrogate::{
    fit_normalization, AdamState, LstmArch, LstmModel, RDeepOnetArch, RDeepOnetModel, SupervisedPairs,
    SurrogateModel, Trainable, TrainConfig, TrainingManifest,
};

/// Training data size, architecture and optimizer settings for one
/// surrogate. Lorenz-96 gets an LSTM, KdV an R-DeepONet.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SurrogateSpec {
    pub n_trajectories: usize,
    pub n_steps: usize,
    pub window: usize,
    pub lstm_hidden: Vec<usize>,
    pub branch_hidden: Vec<usize>,
    /// Last width is the latent size `p`.
    pub trunk_widths: Vec<usize>,
    pub residual: bool,
    /// Epoch budget for SA and SI; IA trains a third of it.
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub clip_norm: Option<f64>,
    pub seed: u64,
}

impl SurrogateSpec {
    /// Settings that train in about a minute on one core.
    pub fn desk(system: &System) -> Self {
        match system {
            System::Lorenz96(_) => SurrogateSpec {
                n_trajectories: 40,
                n_steps: 500,
                window: 10,
                lstm_hidden: vec![32, 32],
                branch_hidden: Vec::new(),
                trunk_widths: Vec::new(),
                residual: true,
                epochs: 30,
                batch_size: 128,
                lr: 1e-3,
                clip_norm: Some(5.0),
                seed: 1,
            },
            System::Kdv(_) => SurrogateSpec {
                n_trajectories: 10,
                n_steps: 250,
                window: 10,
                lstm_hidden: Vec::new(),
                branch_hidden: vec![32, 32],
                trunk_widths: vec![32, 64, 64],
                residual: true,
                epochs: 20,
                batch_size: 64,
                lr: 1e-3,
                clip_norm: Some(5.0),
                seed: 1,
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainedSurrogate {
    pub model: SurrogateModel,
    /// Per-epoch training loss (per epoch and trajectory for KdV).
    pub loss_trace: Vec<f64>,
    pub manifest: TrainingManifest,
}

/// Generates the scenario's training data and trains on it.
pub fn train_surrogate(system: &System, scenario: Scenario, spec: &SurrogateSpec) -> Result<TrainedSurrogate> {
    let data = scenario_dataset(scenario, system, spec.n_trajectories, spec.n_steps, spec.epochs, spec.seed)?;
    train_on_dataset(system, &data.dataset, scenario, spec)
}

/// Trains a fresh surrogate on `dataset`. The epoch count follows the
/// scenario; data noise is whatever the dataset carries.
pub fn train_on_dataset(
    system: &System,
    dataset: &TrajectoryDataset,
    scenario: Scenario,
    spec: &SurrogateSpec,
) -> Result<TrainedSurrogate> {
    train_on_dataset_with(system, dataset, scenario, spec, &mut |_| {})
}

/// Mini-batch Adam over `groups` in turn, one optimizer state throughout,
/// reporting every epoch loss as it is produced.
fn fit<M: Trainable>(
    model: &mut M,
    groups: &[SupervisedPairs],
    cfg: &TrainConfig,
    rng: &mut RngStream,
    on_epoch: &mut dyn FnMut(f64),
) -> Result<Vec<f64>> {
    let mut adam = AdamState::new(model.n_params(), cfg.lr);
    let one = TrainConfig { epochs: 1, ..cfg.clone() };
    let mut trace = Vec::new();
    for g in groups {
        for _ in 0..cfg.epochs {
            let loss = match train_with_state(model, g, &one, rng, &mut adam) {
                Ok(l) => l[0],
                Err(Error::TrainingDiverged { batch, .. }) => {
                    return Err(Error::TrainingDiverged {
                        epoch: trace.len(),
                        batch,
                    })
                }
                Err(e) => return Err(e),
            };
            on_epoch(loss);
            trace.push(loss);
        }
    }
    Ok(trace)
}

/// [`train_on_dataset`] with a callback receiving each epoch loss, so a
/// caller still has the trace when training diverges.
pub fn train_on_dataset_with(
    system: &System,
    dataset: &TrajectoryDataset,
    scenario: Scenario,
    spec: &SurrogateSpec,
    on_epoch: &mut dyn FnMut(f64),
) -> Result<TrainedSurrogate> {
    if dataset.manifest.system != system.kind() || dataset.manifest.dim != system.dim() {
        return Err(Error::arg(format!(
            "dataset is {} with d={}, expected {} with d={}",
            dataset.manifest.system,
            dataset.manifest.dim,
            system.kind(),
            system.dim()
        )));
    }
    let cfg = TrainConfig {
        epochs: scenario_epochs(scenario, spec.epochs),
        batch_size: spec.batch_size,
        lr: spec.lr,
        clip_norm: spec.clip_norm,
    };
    let init_rng = &mut RngStream::new(spec.seed, 100);
    let train_rng = &mut RngStream::new(spec.seed, 101);
    let all = SupervisedPairs::from_trajectories(&dataset.trajectories, spec.window)?;
    let norm = fit_normalization(&all, spec.residual);
    let (model, loss_trace) = match system {
        System::Lorenz96(_) => {
            let arch = LstmArch {
                state_dim: system.dim(),
                hidden: spec.lstm_hidden.clone(),
                window: spec.window,
                residual: spec.residual,
                norm,
            };
            let mut m = LstmModel::new(arch, init_rng)?;
            let trace = fit(&mut m, std::slice::from_ref(&all), &cfg, train_rng, on_epoch)?;
            (SurrogateModel::Lstm(m), trace)
        }
        System::Kdv(kdv) => {
            let arch = RDeepOnetArch {
                n_grid: kdv.n_grid,
                length: kdv.length,
                branch_hidden: spec.branch_hidden.clone(),
                trunk_widths: spec.trunk_widths.clone(),
                history: spec.window,
                residual: spec.residual,
                norm,
            };
            let mut m = RDeepOnetModel::new(arch, init_rng)?;
            let groups = dataset
                .trajectories
                .iter()
                .map(|t| SupervisedPairs::from_trajectories(std::slice::from_ref(t), spec.window))
                .collect::<Result<Vec<_>>>()?;
            let trace = fit(&mut m, &groups, &cfg, train_rng, on_epoch)?;
            (SurrogateModel::RDeepOnet(m), trace)
        }
    };
    Ok(TrainedSurrogate {
        model,
        loss_trace,
        manifest: TrainingManifest {
            dataset_sha256: dataset.content_hash(),
            epochs: cfg.epochs,
            batch_size: cfg.batch_size,
            lr: cfg.lr,
            seed: spec.seed,
            scenario: scenario.name().to_string(),
        },
    })
}
