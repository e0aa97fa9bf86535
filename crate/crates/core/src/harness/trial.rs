use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use ndarray::{s, Array2, Array3, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{Coverage, ExperimentSpec, FilterKind, MaskRedraw, ObservationCycle};
use crate::error::{check_dim, Error, Result};
use crate::filters::{enkf_analysis, ensf_analysis, mask_hash, ObservationModel};
use crate::state::{rmse, Ensemble, RngStream, StateVector};
use crate::surrogate::{predict_ssp_all, Surrogate};

/// What happened at a recorded step.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    /// An analysis was applied after the forecast.
    Analysis,
    /// The step lies in the forecast-only part of the cycle.
    #[serde(rename = "forecast")]
    ForecastOnly,
    /// The step lies in the observed part of the cycle but the method does
    /// not assimilate.
    Unfiltered,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Analysis => "analysis",
            Phase::ForecastOnly => "forecast",
            Phase::Unfiltered => "unfiltered",
        }
    }

    pub fn in_observed_window(self) -> bool {
        self != Phase::ForecastOnly
    }

    fn at(cycle: &ObservationCycle, filter: FilterKind, step: usize) -> Phase {
        if !cycle.is_assimilation_step(step) {
            Phase::ForecastOnly
        } else if filter.is_ensemble_filter() {
            Phase::Analysis
        } else {
            Phase::Unfiltered
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Phase {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "analysis" => Ok(Phase::Analysis),
            "forecast" => Ok(Phase::ForecastOnly),
            "unfiltered" => Ok(Phase::Unfiltered),
            other => Err(Error::Parse(format!("unknown phase `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrialFailure {
    pub step: usize,
    pub reason: String,
}

/// Means of RMSE and squared RMSE, overall and split by cycle window.
/// Empty splits are NaN.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplitStats {
    pub rmse: f64,
    pub rmse_obs: f64,
    pub rmse_non_obs: f64,
    pub mse: f64,
    pub mse_obs: f64,
    pub mse_non_obs: f64,
}

impl SplitStats {
    /// Statistics of a trace of per-step RMSE values and squared values.
    pub fn from_traces(rmse: &[f64], mse: &[f64], phase: &[Phase]) -> Self {
        fn mean_where(v: &[f64], phase: &[Phase], keep: impl Fn(Phase) -> bool) -> f64 {
            let (mut sum, mut n) = (0.0, 0usize);
            for (x, p) in v.iter().zip(phase) {
                if keep(*p) {
                    sum += x;
                    n += 1;
                }
            }
            if n == 0 {
                f64::NAN
            } else {
                sum / n as f64
            }
        }
        SplitStats {
            rmse: mean_where(rmse, phase, |_| true),
            rmse_obs: mean_where(rmse, phase, Phase::in_observed_window),
            rmse_non_obs: mean_where(rmse, phase, |p| !p.in_observed_window()),
            mse: mean_where(mse, phase, |_| true),
            mse_obs: mean_where(mse, phase, Phase::in_observed_window),
            mse_non_obs: mean_where(mse, phase, |p| !p.in_observed_window()),
        }
    }
}

/// One trial. Traces start at step `first_step` (the warm-up length); a
/// failed trial keeps the steps recorded before the failure.
#[derive(Clone, Debug, PartialEq)]
pub struct RunRecord {
    pub trial: usize,
    pub seed: u64,
    pub filter: FilterKind,
    pub first_step: usize,
    pub rmse: Vec<f64>,
    pub spread: Vec<f64>,
    pub phase: Vec<Phase>,
    pub mask_hash: Vec<Option<u64>>,
    /// Analyses whose innovation covariance needed a ridge.
    pub regularized_steps: usize,
    pub wall_clock_secs: f64,
    pub failure: Option<TrialFailure>,
}

impl RunRecord {
    pub fn succeeded(&self) -> bool {
        self.failure.is_none()
    }

    pub fn stats(&self) -> SplitStats {
        let sq: Vec<f64> = self.rmse.iter().map(|r| r * r).collect();
        SplitStats::from_traces(&self.rmse, &sq, &self.phase)
    }

    fn push(&mut self, rmse: f64, spread: f64, phase: Phase, hash: Option<u64>) {
        self.rmse.push(rmse);
        self.spread.push(spread);
        self.phase.push(phase);
        self.mask_hash.push(hash);
    }

    fn fail(&mut self, step: usize, err: Error) {
        self.failure = Some(TrialFailure {
            step,
            reason: err.to_string(),
        });
    }
}

/// Aggregate over the successful trials of one experiment.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentReport {
    pub label: String,
    pub filter: FilterKind,
    pub first_step: usize,
    pub n_trials: usize,
    pub failures: usize,
    /// Per-step RMSE averaged across successful trials.
    pub mean_trace: Vec<f64>,
    /// Per-step squared RMSE averaged across successful trials.
    pub mean_mse_trace: Vec<f64>,
    pub phase: Vec<Phase>,
    pub stats: SplitStats,
    pub records: Vec<RunRecord>,
}

fn trial_failure(err: Error, step: usize, record: &mut RunRecord) -> Result<()> {
    if err.is_divergence() {
        record.fail(step, err);
        Ok(())
    } else {
        Err(err)
    }
}

/// Runs trial `trial` of `spec`: a fresh truth trajectory from the numerical
/// solver, then per step a surrogate forecast and, for ensemble filters on
/// observed steps, an analysis. Divergence marks the trial failed; other
/// errors are returned.
pub fn run_trial<S: Surrogate + ?Sized>(spec: &ExperimentSpec, model: &S, trial: usize) -> Result<RunRecord> {
    spec.validate()?;
    let d = spec.system.dim();
    let k = spec.cycle.warm_up;
    check_dim(d, model.state_dim())?;
    if model.window() != k {
        return Err(Error::arg(format!(
            "warm-up {k} must equal the surrogate window {}",
            model.window()
        )));
    }
    let started = Instant::now();
    let root = RngStream::new(spec.seed, trial as u64 + 1);
    let x0 = spec.system.random_initial_state(&mut root.fork(0))?;
    let truth = spec.system.trajectory(&x0, spec.horizon - 1)?;

    let mut record = RunRecord {
        trial,
        seed: spec.seed,
        filter: spec.filter,
        first_step: k,
        rmse: Vec::new(),
        spread: Vec::new(),
        phase: Vec::new(),
        mask_hash: Vec::new(),
        regularized_steps: 0,
        wall_clock_secs: 0.0,
        failure: None,
    };

    match spec.filter {
        FilterKind::Ssp => match predict_ssp_all(model, &truth) {
            Ok(preds) => {
                for (i, p) in preds.iter().enumerate() {
                    let n = k + i;
                    let e = rmse(p, &truth[n])?;
                    record.push(e, 0.0, Phase::at(&spec.cycle, spec.filter, n), None);
                }
            }
            Err(Error::RolloutDiverged { step }) => {
                record.fail(k + step, Error::RolloutDiverged { step: k + step });
            }
            Err(e) => return Err(e),
        },
        FilterKind::NoneLtp => {
            let mut window: Vec<StateVector> = truth[..k].to_vec();
            for n in k..spec.horizon {
                let next = match model.forward(&window) {
                    Ok(v) => v,
                    Err(e) => {
                        let e = match e {
                            Error::RolloutDiverged { .. } => Error::RolloutDiverged { step: n },
                            other => other,
                        };
                        trial_failure(e, n, &mut record)?;
                        break;
                    }
                };
                let e = rmse(&next, &truth[n])?;
                record.push(e, 0.0, Phase::at(&spec.cycle, spec.filter, n), None);
                window.remove(0);
                window.push(next);
            }
        }
        FilterKind::Ensf | FilterKind::Enkf => {
            run_filtered(spec, model, &truth, &root, &mut record)?;
        }
    }
    record.wall_clock_secs = started.elapsed().as_secs_f64();
    Ok(record)
}

fn draw_mask(d: usize, observed: usize, rng: &mut RngStream) -> Vec<bool> {
    let mut mask = vec![false; d];
    for i in rng.sample_indices(d, observed) {
        mask[i] = true;
    }
    mask
}

fn run_filtered<S: Surrogate + ?Sized>(
    spec: &ExperimentSpec,
    model: &S,
    truth: &[StateVector],
    root: &RngStream,
    record: &mut RunRecord,
) -> Result<()> {
    let d = spec.system.dim();
    let k = spec.cycle.warm_up;
    let j = spec.ensemble_size;

    // Initial ensemble around the true state, advanced by the solver through
    // the warm-up window.
    let mut init_rng = root.fork(1);
    let mut windows = Array3::<f64>::zeros((j, k, d));
    for m in 0..j {
        let start: Vec<f64> = truth[0]
            .iter()
            .map(|x| x + spec.init_std * init_rng.standard_normal())
            .collect();
        let path = spec.system.trajectory(&StateVector::new(start)?, k - 1)?;
        for (t, state) in path.iter().enumerate() {
            windows.slice_mut(s![m, t, ..]).assign(&state.view());
        }
    }

    let mut obs_rng = root.fork(2);
    let mut mask_rng = root.fork(3);
    let mut filter_rng = root.fork(4);
    let mut noise_rng = root.fork(5);
    let var = spec.observation.noise_std * spec.observation.noise_std;
    let mut cycle_mask: Option<(usize, Vec<bool>)> = None;

    for n in k..spec.horizon {
        let mut forecast: Array2<f64> = model.forward_batch(windows.view());
        if !forecast.iter().all(|v| v.is_finite()) {
            return trial_failure(Error::RolloutDiverged { step: n }, n, record);
        }
        if spec.forecast_noise_std > 0.0 {
            forecast.mapv_inplace(|v| v + spec.forecast_noise_std * noise_rng.standard_normal());
        }
        let phase = Phase::at(&spec.cycle, spec.filter, n);
        let mut hash = None;
        let members = if phase == Phase::Analysis {
            let (mask, retain) = match spec.observation.coverage {
                Coverage::Full => (vec![true; d], false),
                Coverage::Partial {
                    observed,
                    redraw,
                    retain_unobserved,
                } => {
                    let mask = match redraw {
                        MaskRedraw::PerStep => draw_mask(d, observed, &mut mask_rng),
                        MaskRedraw::PerCycle => {
                            let c = spec.cycle.cycle_index(n).expect("analysis steps follow the warm-up");
                            match &cycle_mask {
                                Some((idx, m)) if *idx == c => m.clone(),
                                _ => {
                                    let m = draw_mask(d, observed, &mut mask_rng);
                                    cycle_mask = Some((c, m.clone()));
                                    m
                                }
                            }
                        }
                    };
                    (mask, retain_unobserved)
                }
            };
            hash = Some(mask_hash(&mask));
            let om = ObservationModel::new(spec.observation.operator, vec![var; d], mask.clone())?;
            let y = om.observe(&truth[n], &mut obs_rng)?;
            let prior = Ensemble::new(forecast.clone(), n)?;
            let result = match spec.filter {
                FilterKind::Ensf => ensf_analysis(&prior, &y, &om, &spec.filter_config, &mut filter_rng),
                _ => enkf_analysis(&prior, &y, &om, &mut filter_rng),
            };
            let result = match result {
                Ok(r) => r,
                Err(e) => return trial_failure(e, n, record),
            };
            if result.regularized {
                record.regularized_steps += 1;
            }
            let mut analysis = result.ensemble.into_members();
            if retain {
                for (i, observed) in mask.iter().enumerate() {
                    if !observed {
                        analysis.column_mut(i).assign(&forecast.column(i));
                    }
                }
            }
            analysis
        } else {
            forecast
        };

        let ens = Ensemble::new(members, n)?;
        let estimate = ens.mean();
        let e = rmse(&estimate, &truth[n])?;
        if !e.is_finite() {
            return trial_failure(Error::RolloutDiverged { step: n }, n, record);
        }
        record.push(e, ens.spread(), phase, hash);

        // Slide each member's window forward by one state.
        let members = ens.into_members();
        for (mut w, row) in windows.axis_iter_mut(Axis(0)).zip(members.rows()) {
            for t in 1..k {
                let (mut dst, src) = w.multi_slice_mut((s![t - 1, ..], s![t, ..]));
                dst.assign(&src);
            }
            w.row_mut(k - 1).assign(&row);
        }
    }
    Ok(())
}

/// Runs every trial of `spec` on a pool of `spec.workers` threads. Results
/// come back in trial order regardless of scheduling.
pub fn run_trials<S: Surrogate + ?Sized>(spec: &ExperimentSpec, model: &S) -> Result<Vec<RunRecord>> {
    spec.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(spec.workers)
        .build()
        .map_err(|e| Error::arg(format!("worker pool: {e}")))?;
    let results: Vec<Result<RunRecord>> =
        pool.install(|| (0..spec.n_trials).into_par_iter().map(|t| run_trial(spec, model, t)).collect());
    results.into_iter().collect()
}

/// Averages the successful records, which must share one step range. More
/// than half failing is an error.
pub fn aggregate(label: &str, filter: FilterKind, records: Vec<RunRecord>) -> Result<ExperimentReport> {
    let total = records.len();
    let failures = records.iter().filter(|r| !r.succeeded()).count();
    if total == 0 || 2 * failures > total {
        return Err(Error::ExperimentFailed { failed: failures, total });
    }
    let ok: Vec<&RunRecord> = records.iter().filter(|r| r.succeeded()).collect();
    let first_step = ok[0].first_step;
    let phase = ok[0].phase.clone();
    let len = phase.len();
    let mut mean_trace = vec![0.0; len];
    let mut mean_mse_trace = vec![0.0; len];
    for r in &ok {
        check_dim(len, r.rmse.len())?;
        if r.first_step != first_step || r.phase != phase {
            return Err(Error::arg(format!("trial {} covers a different step range", r.trial)));
        }
        for (i, e) in r.rmse.iter().enumerate() {
            mean_trace[i] += e;
            mean_mse_trace[i] += e * e;
        }
    }
    let n_ok = ok.len() as f64;
    mean_trace.iter_mut().for_each(|v| *v /= n_ok);
    mean_mse_trace.iter_mut().for_each(|v| *v /= n_ok);
    let stats = SplitStats::from_traces(&mean_trace, &mean_mse_trace, &phase);
    Ok(ExperimentReport {
        label: label.to_string(),
        filter,
        first_step,
        n_trials: total,
        failures,
        mean_trace,
        mean_mse_trace,
        phase,
        stats,
        records,
    })
}

/// [`run_trials`] followed by [`aggregate`].
pub fn run_experiment<S: Surrogate + ?Sized>(spec: &ExperimentSpec, model: &S) -> Result<ExperimentReport> {
    let records = run_trials(spec, model)?;
    aggregate(&spec.label, spec.filter, records)
}
