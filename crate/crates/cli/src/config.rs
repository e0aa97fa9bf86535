//! TOML run configuration. Every table rejects unknown keys; every key has a
//! default, so an empty file is a valid desk-scale Lorenz-96 run.

use std::path::PathBuf;

use ensf_core::dynamics::{KdvSystem, Lorenz96System, System, SystemKind};
use ensf_core::filters::{DiffusionSchedule, FilterConfig, LikelihoodStep, NoiseProfile, ObsOperator, ScoreMode};
use ensf_core::harness::{
    ExperimentSpec, FilterKind, ObservationCycle, ObservationSpec, Scenario, SurrogateSpec,
};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Master seed for data, initialization, training and trials.
    pub seed: u64,
    pub system: SystemSection,
    pub data: DataSection,
    pub surrogate: SurrogateSection,
    pub filter: FilterSection,
    pub cycle: CycleSection,
    pub experiment: ExperimentSection,
    pub output: OutputSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SystemSection {
    pub kind: String,
    pub dim: Option<usize>,
    pub forcing: Option<f64>,
    pub dt: Option<f64>,
    pub length: Option<f64>,
    pub n_grid: Option<usize>,
    pub dt_frame: Option<f64>,
}

impl Default for SystemSection {
    fn default() -> Self {
        SystemSection {
            kind: "lorenz96".into(),
            dim: None,
            forcing: None,
            dt: None,
            length: None,
            n_grid: None,
            dt_frame: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub scenario: String,
    pub n_trajectories: Option<usize>,
    pub n_steps: Option<usize>,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            scenario: "sa".into(),
            n_trajectories: None,
            n_steps: None,
        }
    }
}

/// Overrides on top of the desk-scale surrogate for the configured system.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SurrogateSection {
    pub window: Option<usize>,
    pub lstm_hidden: Option<Vec<usize>>,
    pub branch_hidden: Option<Vec<usize>>,
    pub trunk_widths: Option<Vec<usize>>,
    pub residual: Option<bool>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub lr: Option<f64>,
    /// Zero disables clipping.
    pub clip_norm: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FilterSection {
    /// Any of `none-ltp`, `ssp`, `ensf`, `enkf`.
    pub methods: Vec<String>,
    pub partial: bool,
    pub ensemble_size: usize,
    pub init_std: f64,
    pub forecast_noise_std: f64,
    pub obs_operator: ObsOperator,
    pub obs_noise_std: f64,
    pub noise_profile: NoiseProfile,
    pub likelihood_step: LikelihoodStep,
    pub score: ScoreMode,
    pub n_reverse_steps: usize,
    pub tau_min: f64,
    pub minibatch: Option<usize>,
}

impl Default for FilterSection {
    fn default() -> Self {
        let lib = FilterConfig::default();
        FilterSection {
            methods: ["none-ltp", "ssp", "ensf", "enkf"].map(String::from).to_vec(),
            partial: false,
            ensemble_size: 100,
            init_std: 0.1,
            forecast_noise_std: 0.0,
            obs_operator: ObsOperator::Arctan,
            obs_noise_std: 0.01,
            noise_profile: NoiseProfile::Sqrt,
            likelihood_step: lib.likelihood_step,
            score: lib.score,
            n_reverse_steps: lib.schedule.n_reverse_steps,
            tau_min: lib.schedule.tau_min,
            minibatch: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CycleSection {
    pub length: usize,
    pub assimilation: usize,
}

impl Default for CycleSection {
    fn default() -> Self {
        let c = ObservationCycle::default();
        CycleSection {
            length: c.length,
            assimilation: c.assimilation,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentSection {
    pub n_trials: usize,
    /// Defaults to 500 steps (Lorenz-96) or 200 frames (KdV).
    pub horizon: Option<usize>,
    pub workers: usize,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        ExperimentSection {
            n_trials: 10,
            horizon: None,
            workers: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub dir: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection { dir: "out".into() }
    }
}

fn invalid(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| invalid(e.to_string()))
    }

    /// Checks every section, so any stage rejects a bad file up front.
    pub fn validate(&self) -> Result<(), CliError> {
        let system = self.system()?;
        let window = self.surrogate_spec(&system)?.window;
        for m in self.methods()? {
            self.experiment(system, m, window)?;
        }
        Ok(())
    }

    pub fn system(&self) -> Result<System, CliError> {
        let s = &self.system;
        let kind: SystemKind = s.kind.parse().map_err(|e: ensf_core::Error| invalid(e.to_string()))?;
        match kind {
            SystemKind::Lorenz96 => {
                if s.length.is_some() || s.n_grid.is_some() || s.dt_frame.is_some() {
                    return Err(invalid("length, n_grid and dt_frame apply to kdv only"));
                }
                let d = Lorenz96System::default();
                Lorenz96System::new(s.dim.unwrap_or(d.dim), s.forcing.unwrap_or(d.forcing), s.dt.unwrap_or(d.dt))
                    .map(System::Lorenz96)
                    .map_err(|e| invalid(e.to_string()))
            }
            SystemKind::Kdv => {
                if s.dim.is_some() || s.forcing.is_some() || s.dt.is_some() {
                    return Err(invalid("dim, forcing and dt apply to lorenz96 only"));
                }
                let d = KdvSystem::default();
                KdvSystem::new(
                    s.length.unwrap_or(d.length),
                    s.n_grid.unwrap_or(d.n_grid),
                    s.dt_frame.unwrap_or(d.dt_frame),
                )
                .map(System::Kdv)
                .map_err(|e| invalid(e.to_string()))
            }
        }
    }

    pub fn scenario(&self) -> Result<Scenario, CliError> {
        self.data.scenario.parse().map_err(|e: ensf_core::Error| invalid(e.to_string()))
    }

    pub fn surrogate_spec(&self, system: &System) -> Result<SurrogateSpec, CliError> {
        let o = &self.surrogate;
        let mut s = SurrogateSpec::desk(system);
        s.seed = self.seed;
        if let Some(v) = self.data.n_trajectories {
            s.n_trajectories = v;
        }
        if let Some(v) = self.data.n_steps {
            s.n_steps = v;
        }
        if let Some(v) = o.window {
            s.window = v;
        }
        match system {
            System::Lorenz96(_) => {
                if o.branch_hidden.is_some() || o.trunk_widths.is_some() {
                    return Err(invalid("branch_hidden and trunk_widths apply to kdv only"));
                }
                if let Some(v) = &o.lstm_hidden {
                    s.lstm_hidden = v.clone();
                }
            }
            System::Kdv(_) => {
                if o.lstm_hidden.is_some() {
                    return Err(invalid("lstm_hidden applies to lorenz96 only"));
                }
                if let Some(v) = &o.branch_hidden {
                    s.branch_hidden = v.clone();
                }
                if let Some(v) = &o.trunk_widths {
                    s.trunk_widths = v.clone();
                }
            }
        }
        if let Some(v) = o.residual {
            s.residual = v;
        }
        if let Some(v) = o.epochs {
            s.epochs = v;
        }
        if let Some(v) = o.batch_size {
            s.batch_size = v;
        }
        if let Some(v) = o.lr {
            s.lr = v;
        }
        if let Some(v) = o.clip_norm {
            s.clip_norm = (v > 0.0).then_some(v);
        }
        let layers_ok = match system {
            System::Lorenz96(_) => !s.lstm_hidden.is_empty(),
            System::Kdv(_) => !s.branch_hidden.is_empty() && !s.trunk_widths.is_empty(),
        };
        if s.window == 0 || s.batch_size == 0 || s.n_trajectories == 0 || !layers_ok {
            return Err(invalid("window, batch_size, n_trajectories and layer lists must be non-empty"));
        }
        if s.n_steps <= s.window {
            return Err(invalid(format!("n_steps {} must exceed the window {}", s.n_steps, s.window)));
        }
        if !(s.lr >= 0.0) {
            return Err(invalid("lr must be >= 0"));
        }
        Ok(s)
    }

    pub fn methods(&self) -> Result<Vec<FilterKind>, CliError> {
        if self.filter.methods.is_empty() {
            return Err(invalid("filter.methods is empty"));
        }
        let mut out: Vec<FilterKind> = Vec::new();
        for m in &self.filter.methods {
            let f: FilterKind = m.parse().map_err(|e: ensf_core::Error| invalid(e.to_string()))?;
            if out.contains(&f) {
                return Err(invalid(format!("method `{m}` listed twice")));
            }
            out.push(f);
        }
        Ok(out)
    }

    /// Experiment for one method against a surrogate with history `window`.
    pub fn experiment(&self, system: System, filter: FilterKind, window: usize) -> Result<ExperimentSpec, CliError> {
        let f = &self.filter;
        let mut spec = ExperimentSpec::new(system, filter, window);
        spec.scenario = self.scenario()?;
        spec.seed = self.seed;
        spec.n_trials = self.experiment.n_trials;
        spec.workers = self.experiment.workers;
        if let Some(h) = self.experiment.horizon {
            spec.horizon = h;
        }
        spec.cycle = ObservationCycle {
            length: self.cycle.length,
            assimilation: self.cycle.assimilation,
            warm_up: window,
        };
        let mut obs = ObservationSpec::standard(system.kind(), system.dim(), f.partial);
        obs.operator = f.obs_operator;
        obs.noise_std = f.obs_noise_std;
        spec.observation = obs;
        spec.ensemble_size = f.ensemble_size;
        spec.init_std = f.init_std;
        spec.forecast_noise_std = f.forecast_noise_std;
        spec.filter_config = FilterConfig {
            minibatch: f.minibatch,
            schedule: DiffusionSchedule {
                n_reverse_steps: f.n_reverse_steps,
                tau_min: f.tau_min,
                profile: f.noise_profile,
            },
            likelihood_step: f.likelihood_step,
            score: f.score,
        };
        spec.label = label(filter, f.partial);
        if f.n_reverse_steps == 0 || !(f.tau_min > 0.0 && f.tau_min < 0.5) {
            return Err(invalid("n_reverse_steps must be >= 1 and tau_min in (0, 0.5)"));
        }
        if f.minibatch == Some(0) {
            return Err(invalid("minibatch must be >= 1"));
        }
        spec.validate().map_err(|e| invalid(e.to_string()))?;
        Ok(spec)
    }
}

/// Directory and report label of a method: its name, with `-partial` for
/// partial coverage on ensemble filters.
pub fn label(filter: FilterKind, partial: bool) -> String {
    if partial && filter.is_ensemble_filter() {
        format!("{}-partial", filter.name())
    } else {
        filter.name().to_string()
    }
}

/// Dotted paths of every key with a representative value.
#[cfg(test)]
fn known_keys() -> Vec<(String, toml::Value)> {
    let mut cfg = RunConfig::default();
    // optional keys only serialize when set
    cfg.system.dim = Some(0);
    cfg.system.forcing = Some(0.0);
    cfg.system.dt = Some(0.0);
    cfg.system.length = Some(0.0);
    cfg.system.n_grid = Some(0);
    cfg.system.dt_frame = Some(0.0);
    cfg.data.n_trajectories = Some(0);
    cfg.data.n_steps = Some(0);
    cfg.surrogate = SurrogateSection {
        window: Some(0),
        lstm_hidden: Some(vec![]),
        branch_hidden: Some(vec![]),
        trunk_widths: Some(vec![]),
        residual: Some(true),
        epochs: Some(0),
        batch_size: Some(0),
        lr: Some(0.0),
        clip_norm: Some(0.0),
    };
    cfg.filter.minibatch = Some(0);
    cfg.experiment.horizon = Some(0);
    let value = toml::Value::try_from(&cfg).expect("config serializes");
    let mut keys = Vec::new();
    collect_keys(&value, "", &mut keys);
    keys
}

#[cfg(test)]
fn collect_keys(v: &toml::Value, prefix: &str, out: &mut Vec<(String, toml::Value)>) {
    if let toml::Value::Table(t) = v {
        for (k, child) in t {
            let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
            if child.is_table() {
                collect_keys(child, &path, out);
            } else {
                out.push((path, child.clone()));
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ensf_core::harness::{Coverage, MaskRedraw};

    #[test]
    fn empty_file_is_desk_lorenz() {
        let cfg = RunConfig::parse("").unwrap();
        let sys = cfg.system().unwrap();
        assert_eq!(sys.dim(), 20);
        let spec = cfg.experiment(sys, FilterKind::Ensf, 10).unwrap();
        assert_eq!(spec.horizon, 500);
        assert_eq!(spec.filter_config.schedule.profile, NoiseProfile::Sqrt);
        assert_eq!(spec.observation.coverage, Coverage::Full);
        assert_eq!(cfg.methods().unwrap().len(), 4);
    }

    #[test]
    fn sections_override_defaults() {
        let text = r#"
seed = 7
[system]
kind = "kdv"
n_grid = 64
[data]
scenario = "si"
n_trajectories = 3
[surrogate]
branch_hidden = [8]
epochs = 4
clip_norm = 0
[filter]
methods = ["enkf", "none"]
partial = true
noise_profile = "linear"
likelihood_step = "linearly_implicit"
[experiment]
horizon = 40
"#;
        let cfg = RunConfig::parse(text).unwrap();
        let sys = cfg.system().unwrap();
        assert_eq!(sys.dim(), 64);
        let s = cfg.surrogate_spec(&sys).unwrap();
        assert_eq!((s.seed, s.n_trajectories, s.epochs, s.clip_norm), (7, 3, 4, None));
        assert_eq!(s.branch_hidden, vec![8]);
        assert_eq!(cfg.methods().unwrap(), vec![FilterKind::Enkf, FilterKind::NoneLtp]);
        let e = cfg.experiment(sys, FilterKind::Enkf, s.window).unwrap();
        assert_eq!(e.label, "enkf-partial");
        assert_eq!(e.scenario, Scenario::Si);
        assert_eq!(e.filter_config.likelihood_step, LikelihoodStep::LinearlyImplicit);
        assert!(matches!(
            e.observation.coverage,
            Coverage::Partial {
                redraw: MaskRedraw::PerStep,
                ..
            }
        ));
    }

    #[test]
    fn misspelled_keys_are_rejected() {
        for text in ["sed = 1", "[system]\nknd = \"kdv\"", "[filters]\npartial = true", "[cycle]\nlenght = 3"] {
            assert!(matches!(RunConfig::parse(text), Err(CliError::Config(_))), "{text}");
        }
    }

    #[test]
    fn inconsistent_values_are_rejected() {
        let bad = [
            "[system]\nkind = \"kdv\"\ndim = 5",
            "[system]\nkind = \"heat\"",
            "[surrogate]\ntrunk_widths = [3]",
            "[filter]\nmethods = [\"ensf\", \"ensf\"]",
            "[filter]\nmethods = [\"kalman\"]",
            "[data]\nscenario = \"xx\"",
        ];
        for text in bad {
            let cfg = RunConfig::parse(text).unwrap();
            let res = cfg.system().and_then(|s| {
                cfg.surrogate_spec(&s)?;
                cfg.methods()?;
                cfg.scenario()?;
                Ok(())
            });
            assert!(matches!(res, Err(CliError::Config(_))), "{text}");
        }
        let cfg = RunConfig::parse("[cycle]\nlength = 5\nassimilation = 5").unwrap();
        assert!(cfg.experiment(cfg.system().unwrap(), FilterKind::Enkf, 10).is_err());
    }

    fn document(path: &str, value: &toml::Value) -> String {
        match path.split_once('.') {
            Some((table, key)) => format!("[{table}]\n{key} = {value}\n"),
            None => format!("{path} = {value}\n"),
        }
    }

    #[test]
    fn key_listing_covers_sections() {
        let keys: Vec<String> = known_keys().into_iter().map(|k| k.0).collect();
        for k in ["seed", "system.kind", "filter.noise_profile", "surrogate.clip_norm", "output.dir"] {
            assert!(keys.iter().any(|x| x == k), "{k} missing from {keys:?}");
        }
        assert!(keys.len() > 35);
    }

    #[test]
    fn every_key_parses_and_every_mangled_key_fails() {
        for (path, value) in known_keys() {
            let good = document(&path, &value);
            assert!(RunConfig::parse(&good).is_ok(), "{good}");
            let (head, last) = path.rsplit_once('.').map_or(("", path.as_str()), |(h, l)| (h, l));
            let mut chars: Vec<char> = last.chars().collect();
            chars.swap(0, 1);
            let swapped: String = chars.into_iter().collect();
            for bad_key in [format!("{last}x"), last[..last.len() - 1].to_string(), last.to_uppercase(), swapped] {
                if bad_key == last {
                    continue;
                }
                let mangled = if head.is_empty() { bad_key } else { format!("{head}.{bad_key}") };
                let text = document(&mangled, &value);
                assert!(matches!(RunConfig::parse(&text), Err(CliError::Config(_))), "accepted {text}");
            }
        }
    }
}
