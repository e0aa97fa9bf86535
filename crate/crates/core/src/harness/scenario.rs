use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dynamics::{System, SystemKind, TrajectoryDataset};
use crate::error::{Error, Result};

/// Training-data regime for the surrogate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    /// Sufficient and accurate: clean data, full epoch budget.
    Sa,
    /// Sufficient but inaccurate: noisy data, full epoch budget.
    Si,
    /// Insufficient but accurate: clean data, a third of the epochs.
    Ia,
}

impl Scenario {
    pub fn name(self) -> &'static str {
        match self {
            Scenario::Sa => "sa",
            Scenario::Si => "si",
            Scenario::Ia => "ia",
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scenario {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sa" => Ok(Scenario::Sa),
            "si" => Ok(Scenario::Si),
            "ia" => Ok(Scenario::Ia),
            other => Err(Error::Parse(format!("unknown scenario `{other}`"))),
        }
    }
}

/// Additive training-data noise std for a scenario.
pub fn scenario_noise_std(scenario: Scenario, kind: SystemKind) -> f64 {
    match (scenario, kind) {
        (Scenario::Si, SystemKind::Lorenz96) => 0.2,
        (Scenario::Si, SystemKind::Kdv) => 0.5,
        _ => 0.0,
    }
}

/// Epoch budget for a scenario given the full (SA) budget.
pub fn scenario_epochs(scenario: Scenario, full_epochs: usize) -> usize {
    match scenario {
        Scenario::Ia => (full_epochs / 3).max(1),
        _ => full_epochs,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScenarioData {
    pub dataset: TrajectoryDataset,
    pub epochs: usize,
}

/// Training trajectories and epoch budget for `scenario`. All scenarios
/// share the clean trajectories for a given seed; SI adds noise on top.
pub fn scenario_dataset(
    scenario: Scenario,
    system: &System,
    n_trajectories: usize,
    n_steps: usize,
    full_epochs: usize,
    seed: u64,
) -> Result<ScenarioData> {
    let noise = scenario_noise_std(scenario, system.kind());
    let dataset = TrajectoryDataset::generate(system, n_trajectories, n_steps, noise, seed)?;
    Ok(ScenarioData {
        dataset,
        epochs: scenario_epochs(scenario, full_epochs),
    })
}
