//! The pipeline stages. Each reads what the previous stage wrote under the
//! output directory:
//!
//! ```text
//! out/config.toml              resolved configuration
//! out/data/                    training trajectories
//! out/model.ckpt, loss.csv     trained surrogate and its loss trace
//! out/runs/<label>/            trial_NNN.csv logs and meta.json
//! out/summary.csv, step_rmse.csv, rmse.svg
//! ```

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use ensf_core::dynamics::{System, TrajectoryDataset};
use ensf_core::harness::{
    aggregate, read_run_log, run_trials, scenario_dataset, scenario_noise_std, summary_rows, train_on_dataset_with,
    write_run_log, write_step_report, write_summary, ExperimentReport, FilterKind, Phase, RunRecord, Scenario,
    TrialFailure,
};
use ensf_core::surrogate::{Checkpoint, Surrogate};
use serde::{Deserialize, Serialize};

use crate::config::{label, RunConfig};
use crate::error::CliError;
use crate::svg::{rmse_chart, Series};

pub struct Context {
    pub cfg: RunConfig,
    pub out: PathBuf,
}

/// Per-method run metadata next to the trial logs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunMeta {
    pub label: String,
    pub filter: FilterKind,
    pub scenario: Scenario,
    pub seed: u64,
    pub first_step: usize,
    pub trials: Vec<TrialMeta>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrialMeta {
    pub trial: usize,
    pub seed: u64,
    pub regularized_steps: usize,
    pub failure: Option<FailureMeta>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FailureMeta {
    pub step: usize,
    pub reason: String,
}

impl Context {
    pub fn data_dir(&self) -> PathBuf {
        self.out.join("data")
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.out.join("model.ckpt")
    }

    pub fn run_dir(&self, label: &str) -> PathBuf {
        self.out.join("runs").join(label)
    }
}

fn trial_file(dir: &Path, trial: usize) -> PathBuf {
    dir.join(format!("trial_{trial:03}.csv"))
}

fn create(path: &Path) -> Result<BufWriter<fs::File>, CliError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(CliError::io(parent))?;
    }
    fs::File::create(path).map(BufWriter::new).map_err(CliError::io(path))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    let mut f = create(path)?;
    f.write_all(text.as_bytes()).and_then(|_| f.flush()).map_err(CliError::io(path))
}

fn require(paths: &[PathBuf]) -> Result<(), CliError> {
    let missing: Vec<PathBuf> = paths.iter().filter(|p| !p.exists()).cloned().collect();
    if missing.is_empty() {
        Ok(())
    } else {
        Err(CliError::MissingInputs(missing))
    }
}

pub fn generate(ctx: &Context) -> Result<(), CliError> {
    let system = ctx.cfg.system()?;
    let scenario = ctx.cfg.scenario()?;
    let spec = ctx.cfg.surrogate_spec(&system)?;
    let data = scenario_dataset(scenario, &system, spec.n_trajectories, spec.n_steps, spec.epochs, spec.seed)?;
    let dir = ctx.data_dir();
    data.dataset.save(&dir)?;
    let resolved = toml::to_string(&ctx.cfg).map_err(|e| CliError::Config(e.to_string()))?;
    write_text(&ctx.out.join("config.toml"), &resolved)?;
    eprintln!(
        "generate: {} trajectories of {} steps ({}, scenario {scenario}) -> {} [sha256 {}]",
        spec.n_trajectories,
        spec.n_steps,
        system.kind(),
        dir.display(),
        &data.dataset.content_hash()[..16]
    );
    Ok(())
}

fn load_dataset(ctx: &Context, system: &System, scenario: Scenario) -> Result<TrajectoryDataset, CliError> {
    let dir = ctx.data_dir();
    require(&[dir.join("manifest.txt")])?;
    let data = TrajectoryDataset::load(&dir)?;
    let m = &data.manifest;
    let noise = scenario_noise_std(scenario, system.kind());
    if m.system != system.kind() || m.dim != system.dim() || m.dt != system.dt() || m.noise_std != noise {
        return Err(CliError::Config(format!(
            "{} holds {} data (d={}, dt={}, noise {}) but the config asks for {} (d={}, dt={}, noise {noise}); rerun generate",
            dir.display(),
            m.system,
            m.dim,
            m.dt,
            m.noise_std,
            system.kind(),
            system.dim(),
            system.dt()
        )));
    }
    Ok(data)
}

fn write_loss(path: &Path, trace: &[f64]) -> Result<(), CliError> {
    let mut text = String::from("epoch,loss\n");
    for (i, l) in trace.iter().enumerate() {
        text.push_str(&format!("{i},{l}\n"));
    }
    write_text(path, &text)
}

pub fn train(ctx: &Context) -> Result<(), CliError> {
    let system = ctx.cfg.system()?;
    let scenario = ctx.cfg.scenario()?;
    let spec = ctx.cfg.surrogate_spec(&system)?;
    let dataset = load_dataset(ctx, &system, scenario)?;
    let mut trace = Vec::new();
    let result = train_on_dataset_with(&system, &dataset, scenario, &spec, &mut |l| trace.push(l));
    // the trace is kept even when training diverged
    write_loss(&ctx.out.join("loss.csv"), &trace)?;
    let trained = result?;
    let path = ctx.checkpoint_path();
    Checkpoint {
        model: trained.model,
        manifest: trained.manifest,
    }
    .save(&path)?;
    eprintln!(
        "train: {} epochs, final loss {:.4e} -> {}",
        trace.len(),
        trace.last().copied().unwrap_or(f64::NAN),
        path.display()
    );
    Ok(())
}

fn load_checkpoint(ctx: &Context, system: &System) -> Result<Checkpoint, CliError> {
    let path = ctx.checkpoint_path();
    require(std::slice::from_ref(&path))?;
    let ck = Checkpoint::load(&path)?;
    if ck.model.state_dim() != system.dim() {
        return Err(CliError::Config(format!(
            "{} maps d={} states but the system has d={}",
            path.display(),
            ck.model.state_dim(),
            system.dim()
        )));
    }
    Ok(ck)
}

pub fn filter(ctx: &Context) -> Result<(), CliError> {
    let system = ctx.cfg.system()?;
    let methods = ctx.cfg.methods()?;
    // check the configuration before touching inputs
    let window = ctx.cfg.surrogate_spec(&system)?.window;
    for &m in &methods {
        ctx.cfg.experiment(system, m, window)?;
    }
    let ck = load_checkpoint(ctx, &system)?;
    let mut first_failure = None;
    for &m in &methods {
        let spec = ctx.cfg.experiment(system, m, ck.model.window())?;
        let records = run_trials(&spec, &ck.model)?;
        let dir = ctx.run_dir(&spec.label);
        for r in &records {
            let path = trial_file(&dir, r.trial);
            let mut f = create(&path)?;
            write_run_log(&mut f, r)?;
            f.flush().map_err(CliError::io(&path))?;
        }
        let meta = RunMeta {
            label: spec.label.clone(),
            filter: spec.filter,
            scenario: spec.scenario,
            seed: spec.seed,
            first_step: spec.cycle.warm_up,
            trials: records
                .iter()
                .map(|r| TrialMeta {
                    trial: r.trial,
                    seed: r.seed,
                    regularized_steps: r.regularized_steps,
                    failure: r.failure.as_ref().map(|f| FailureMeta {
                        step: f.step,
                        reason: f.reason.clone(),
                    }),
                })
                .collect(),
        };
        let json = serde_json::to_string_pretty(&meta).expect("run metadata serializes");
        write_text(&dir.join("meta.json"), &(json + "\n"))?;
        let failed = records.iter().filter(|r| !r.succeeded()).count();
        eprintln!(
            "filter: {} {} trials ({failed} failed) -> {}",
            spec.label,
            records.len(),
            dir.display()
        );
        if 2 * failed > records.len() && first_failure.is_none() {
            first_failure = Some(ensf_core::Error::ExperimentFailed {
                failed,
                total: records.len(),
            });
        }
    }
    match first_failure {
        Some(e) => Err(e.into()),
        None => Ok(()),
    }
}

fn read_meta(path: &Path) -> Result<RunMeta, CliError> {
    let text = fs::read_to_string(path).map_err(CliError::io(path))?;
    serde_json::from_str(&text).map_err(|source| CliError::Json {
        path: path.to_path_buf(),
        source,
    })
}

/// Rebuilds the records of one method from its logs. The per-step MSE is
/// the squared logged RMSE.
fn load_records(dir: &Path, meta: &RunMeta) -> Result<Vec<RunRecord>, CliError> {
    let mut records = Vec::with_capacity(meta.trials.len());
    for t in &meta.trials {
        let path = trial_file(dir, t.trial);
        let f = fs::File::open(&path).map_err(CliError::io(&path))?;
        let rows = read_run_log(std::io::BufReader::new(f))?;
        if rows.first().is_some_and(|r| r.step != meta.first_step) {
            return Err(CliError::Config(format!(
                "{} starts at step {}, meta.json says {}",
                path.display(),
                rows[0].step,
                meta.first_step
            )));
        }
        records.push(RunRecord {
            trial: t.trial,
            seed: t.seed,
            filter: meta.filter,
            first_step: meta.first_step,
            rmse: rows.iter().map(|r| r.rmse_vs_truth).collect(),
            spread: rows.iter().map(|r| r.ensemble_spread).collect(),
            phase: rows.iter().map(|r| r.phase).collect(),
            mask_hash: rows.iter().map(|r| r.obs_mask_hash).collect(),
            regularized_steps: t.regularized_steps,
            wall_clock_secs: 0.0,
            failure: t.failure.as_ref().map(|f| TrialFailure {
                step: f.step,
                reason: f.reason.clone(),
            }),
        });
    }
    Ok(records)
}

pub fn report(ctx: &Context) -> Result<Vec<ExperimentReport>, CliError> {
    let methods = ctx.cfg.methods()?;
    let labels: Vec<String> = methods.iter().map(|&m| label(m, ctx.cfg.filter.partial)).collect();
    let mut missing = Vec::new();
    let mut metas = Vec::new();
    for l in &labels {
        let dir = ctx.run_dir(l);
        let meta_path = dir.join("meta.json");
        if !meta_path.exists() {
            missing.push(meta_path);
            continue;
        }
        let meta = read_meta(&meta_path)?;
        missing.extend(meta.trials.iter().map(|t| trial_file(&dir, t.trial)).filter(|p| !p.exists()));
        metas.push((dir, meta));
    }
    if !missing.is_empty() {
        return Err(CliError::MissingInputs(missing));
    }
    let mut reports = Vec::new();
    for (dir, meta) in &metas {
        let records = load_records(dir, meta)?;
        reports.push(aggregate(&meta.label, meta.filter, records)?);
    }
    let refs: Vec<&ExperimentReport> = reports.iter().collect();
    let rows = summary_rows(&refs);

    let summary = ctx.out.join("summary.csv");
    let mut f = create(&summary)?;
    write_summary(&mut f, &rows)?;
    f.flush().map_err(CliError::io(&summary))?;

    let steps = ctx.out.join("step_rmse.csv");
    let mut f = create(&steps)?;
    write_step_report(&mut f, &refs)?;
    f.flush().map_err(CliError::io(&steps))?;

    let series: Vec<Series> = reports
        .iter()
        .map(|r| Series {
            label: &r.label,
            values: &r.mean_trace,
        })
        .collect();
    let shaded: Vec<bool> = reports[0].phase.iter().map(|p| *p == Phase::ForecastOnly).collect();
    write_text(&ctx.out.join("rmse.svg"), &rmse_chart(&series, reports[0].first_step, &shaded))?;

    println!("{:<28} {:>12} {:>12} {:>9}", "method", "mean MSE", "mean RMSE", "failures");
    for r in &rows {
        println!("{:<28} {:>12.5} {:>12.5} {:>9}", r.method, r.mean_mse, r.mean_rmse, r.failures);
    }
    Ok(reports)
}

pub fn run_all(ctx: &Context) -> Result<(), CliError> {
    generate(ctx)?;
    train(ctx)?;
    filter(ctx)?;
    report(ctx).map(|_| ())
}
