use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use super::observation::{Observation, ObservationModel};
use super::schedule::DiffusionSchedule;
use super::kernel::MemberColumns;
use super::AnalysisResult;
use crate::error::{check_dim, Error, Result};
use crate::state::{Ensemble, RngStream, StateVector};

/// How the likelihood part of the posterior score enters each reverse step.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LikelihoodStep {
    /// Plain Euler-Maruyama on the full posterior score.
    Explicit,
    /// Gauss-Newton linearization of the likelihood at the new point:
    /// `dz = c g / (1 + c h'^2 / var)` with `c = sigma^2 v dtau`. Equal to the
    /// explicit step for weak likelihoods, stable for sharp ones.
    LinearlyImplicit,
    /// Backward Euler on the likelihood drift: each observed component
    /// solves its one-dimensional proximal problem. The first Gauss-Newton
    /// iterate is the linearly implicit step; iterating with backtracking
    /// keeps saturating operators such as arctan from overshooting.
    Implicit,
}

/// Which forecast members enter the prior score of each reverse sample.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreMode {
    /// Kernel-weighted estimate over the forecast (or a shared minibatch).
    #[default]
    Kernel,
    /// Sample `j` uses forecast member `j` alone: a minibatch of one per
    /// query point, so the weight is identically 1.
    Paired,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterConfig {
    /// Members drawn (without replacement, once per reverse step) for the
    /// score estimate; `None` uses the whole forecast. Ignored when paired.
    pub minibatch: Option<usize>,
    pub schedule: DiffusionSchedule,
    pub likelihood_step: LikelihoodStep,
    #[serde(default)]
    pub score: ScoreMode,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig {
            minibatch: None,
            schedule: DiffusionSchedule::default(),
            likelihood_step: LikelihoodStep::Implicit,
            score: ScoreMode::Kernel,
        }
    }
}

/// Normalized kernel weights `(n_query, n_members)` of each query point
/// against each forecast member: a softmax over `-|z - alpha x_j|^2 / (2 beta^2)`.
pub fn score_weights(
    members: ArrayView2<f64>,
    z: ArrayView2<f64>,
    tau: f64,
    sched: &DiffusionSchedule,
) -> Result<Array2<f64>> {
    let (cols, k, c) = prepare(members, z, tau, sched)?;
    let mut out = Array2::zeros((z.nrows(), cols.n));
    for (zr, mut orow) in z.rows().into_iter().zip(out.rows_mut()) {
        let w = orow.as_slice_mut().expect("standard layout");
        let sum = cols.weights_into(&zr.to_vec(), k, c, w);
        w.iter_mut().for_each(|v| *v /= sum);
    }
    Ok(out)
}

fn prepare(
    members: ArrayView2<f64>,
    z: ArrayView2<f64>,
    tau: f64,
    sched: &DiffusionSchedule,
) -> Result<(MemberColumns, f64, f64)> {
    sched.check(tau)?;
    check_dim(members.ncols(), z.ncols())?;
    if members.nrows() == 0 {
        return Err(Error::arg("score needs at least one member"));
    }
    let a = sched.alpha(tau);
    let b2 = sched.beta(tau).powi(2);
    // |z - a x|^2 = |z|^2 - 2a z.x + a^2 |x|^2; the |z|^2 term cancels
    Ok((MemberColumns::new(members), a / b2, 0.5 * a * a / b2))
}

/// Monte-Carlo prior score at every row of `z`: `-(z - alpha * sum_j w_j x_j) / beta^2`.
pub fn prior_score_batch(
    members: ArrayView2<f64>,
    z: ArrayView2<f64>,
    tau: f64,
    sched: &DiffusionSchedule,
) -> Result<Array2<f64>> {
    let (cols, k, c) = prepare(members, z, tau, sched)?;
    let a = sched.alpha(tau);
    let b2 = sched.beta(tau).powi(2);
    let mut out = Array2::zeros(z.raw_dim());
    let mut mix = vec![0.0; z.ncols()];
    for (zr, mut orow) in z.rows().into_iter().zip(out.rows_mut()) {
        let zr = zr.to_vec();
        cols.weighted_mean(&zr, k, c, &mut mix);
        for ((o, m), zi) in orow.iter_mut().zip(&mix).zip(&zr) {
            *o = (a * m - zi) / b2;
        }
    }
    Ok(out)
}

/// Prior score of the forecast ensemble (all members) at a single point.
pub fn estimate_prior_score(
    forecast: &Ensemble,
    z: &StateVector,
    tau: f64,
    sched: &DiffusionSchedule,
) -> Result<StateVector> {
    check_dim(forecast.dim(), z.dim())?;
    let zq = z.view().insert_axis(Axis(0));
    let s = prior_score_batch(forecast.members(), zq, tau, sched)?;
    Ok(StateVector::from_vec_unchecked(s.row(0).to_vec()))
}

/// `prior + v(tau) * grad_loglik`.
pub fn posterior_score(
    prior_score: &StateVector,
    tau: f64,
    grad_loglik: &StateVector,
    sched: &DiffusionSchedule,
) -> Result<StateVector> {
    check_dim(prior_score.dim(), grad_loglik.dim())?;
    let v = sched.damping(sched.clamp(tau));
    Ok(StateVector::from_vec_unchecked(
        prior_score
            .iter()
            .zip(grad_loglik.iter())
            .map(|(p, g)| p + v * g)
            .collect(),
    ))
}

/// Integrates the reverse-time SDE from standard-Gaussian draws at
/// `tau = 1 - tau_min` down to `tau_min`, one output member per forecast
/// member. With an observation the likelihood guides the drift.
pub fn reverse_sde_sample(
    forecast: &Ensemble,
    obs: Option<(&Observation, &ObservationModel)>,
    cfg: &FilterConfig,
    rng: &mut RngStream,
) -> Result<Ensemble> {
    let j = forecast.size();
    let d = forecast.dim();
    if let Some((y, om)) = obs {
        check_dim(d, om.dim())?;
        check_dim(d, y.dim())?;
    }
    let n_batch = cfg.minibatch.unwrap_or(j);
    if n_batch < 1 || n_batch > j {
        return Err(Error::arg(format!("minibatch {n_batch} outside [1, {j}]")));
    }
    let sched = &cfg.schedule;
    let grid = sched.reverse_grid();
    let mut z = Array2::from_shape_simple_fn((j, d), || rng.standard_normal());
    let mut batch_members = Array2::zeros((n_batch, d));
    for k in 0..sched.n_reverse_steps {
        let tau = grid[k];
        let dt = tau - grid[k + 1];
        let members = if n_batch == j || cfg.score == ScoreMode::Paired {
            forecast.members()
        } else {
            let idx = rng.sample_indices(j, n_batch);
            for (r, i) in idx.iter().enumerate() {
                batch_members.row_mut(r).assign(&forecast.members().row(*i));
            }
            batch_members.view()
        };
        let prior = match cfg.score {
            ScoreMode::Kernel => prior_score_batch(members, z.view(), tau, sched)?,
            ScoreMode::Paired => {
                sched.check(tau)?;
                let (a, b2) = (sched.alpha(tau), sched.beta(tau).powi(2));
                (&forecast.members() * a - &z) / b2
            }
        };
        let b = sched.drift(tau);
        let g2 = sched.diffusion_sq(tau);
        let noise_scale = (g2 * dt).sqrt();
        // Z <- Z - (b Z - g^2 S) dt + g sqrt(dt) xi
        let mut next = &z * (1.0 - b * dt) + &prior * (g2 * dt);
        if let Some((y, om)) = obs {
            let c = g2 * sched.damping(tau) * dt;
            match cfg.likelihood_step {
                LikelihoodStep::Explicit => next.scaled_add(c, &om.grad_and_curvature_batch(z.view(), y)?.0),
                LikelihoodStep::LinearlyImplicit => {
                    let (grad, curv) = om.grad_and_curvature_batch(z.view(), y)?;
                    ndarray::Zip::from(&mut next)
                        .and(&grad)
                        .and(&curv)
                        .for_each(|n, g, h| *n += c * g / (1.0 + c * h));
                }
                LikelihoodStep::Implicit => {
                    next += &om.prox_increment_batch(z.view(), y, c)?;
                }
            }
        }
        next.mapv_inplace(|v| v + noise_scale * rng.standard_normal());
        for (member, row) in next.rows().into_iter().enumerate() {
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::SamplerDiverged {
                    tau: grid[k + 1],
                    member,
                });
            }
        }
        z = next;
    }
    Ensemble::new(z, forecast.time_index)
}

/// Ensemble score filter analysis: likelihood-guided reverse SDE from the
/// forecast; the estimate is the analysis mean.
pub fn ensf_analysis(
    forecast: &Ensemble,
    obs: &Observation,
    om: &ObservationModel,
    cfg: &FilterConfig,
    rng: &mut RngStream,
) -> Result<AnalysisResult> {
    let ensemble = reverse_sde_sample(forecast, Some((obs, om)), cfg, rng)?;
    let estimate = ensemble.mean();
    Ok(AnalysisResult {
        ensemble,
        estimate,
        regularized: false,
    })
}

#[cfg(test)]
mod tests {
    use super::super::observation::ObsOperator;
    use super::*;
    use proptest::prelude::*;

    fn gaussian_ensemble(j: usize, mean: &[f64], std: f64, seed: u64) -> Ensemble {
        let mut rng = RngStream::new(seed, 0);
        let m = Array2::from_shape_fn((j, mean.len()), |(_, i)| mean[i] + std * rng.standard_normal());
        Ensemble::new(m, 0).unwrap()
    }

    #[test]
    fn single_member_closed_form() {
        let sched = DiffusionSchedule::default();
        let x = ndarray::array![[1.0, -2.0, 0.5]];
        let z = ndarray::array![[0.3, 0.1, 4.0], [-7.0, 2.0, 0.0]];
        for &tau in &[1e-3, 0.2, 0.7, 0.999] {
            let s = prior_score_batch(x.view(), z.view(), tau, &sched).unwrap();
            let (a, b2) = (1.0 - tau, tau * tau);
            for r in 0..2 {
                for i in 0..3 {
                    let exact = -(z[[r, i]] - a * x[[0, i]]) / b2;
                    assert!((s[[r, i]] - exact).abs() <= 1e-12 * exact.abs().max(1.0));
                }
            }
        }
    }

    #[test]
    fn out_of_domain_tau_is_rejected() {
        let sched = DiffusionSchedule::default();
        let x = ndarray::array![[1.0]];
        assert!(matches!(
            prior_score_batch(x.view(), x.view(), 1e-5, &sched),
            Err(Error::ScheduleDomain { .. })
        ));
    }

    fn gaussian_score_errors(j: usize, tau: f64, seed: u64) -> (f64, f64) {
        let (m, s) = ([2.0, -1.0], 0.7);
        let e = gaussian_ensemble(j, &m, s, seed);
        let sched = DiffusionSchedule::default();
        let mut rng = RngStream::new(seed, 1);
        let a = 1.0 - tau;
        let var = a * a * s * s + tau * tau;
        let z = Array2::from_shape_fn((20, 2), |(_, i)| a * m[i] + var.sqrt() * rng.uniform_range(-2.0, 2.0));
        let est = prior_score_batch(e.members(), z.view(), tau, &sched).unwrap();
        let exact = Array2::from_shape_fn((20, 2), |(r, i)| -(z[[r, i]] - a * m[i]) / var);
        let diff = &est - &exact;
        let norm = |v: ndarray::ArrayView1<f64>| v.dot(&v).sqrt();
        let worst = (0..20)
            .map(|r| norm(diff.row(r)) / norm(exact.row(r)))
            .fold(0.0, f64::max);
        let pooled = diff.iter().map(|v| v * v).sum::<f64>().sqrt() / exact.iter().map(|v| v * v).sum::<f64>().sqrt();
        (worst, pooled)
    }

    #[test]
    fn gaussian_score_oracle() {
        for &tau in &[0.5, 0.9] {
            let (worst, _) = gaussian_score_errors(10_000, tau, 3);
            assert!(worst < 0.1, "tau {tau}: worst relative error {worst}");
        }
    }

    #[test]
    fn small_tau_score_error_shrinks_with_ensemble_size() {
        // at tau = 0.1 the kernel is narrow and few members carry weight
        let (_, small) = gaussian_score_errors(10_000, 0.1, 4);
        let (_, large) = gaussian_score_errors(1_000_000, 0.1, 4);
        assert!(large < 0.1, "pooled error {large} at J=1e6");
        assert!(large < small);
    }

    #[test]
    fn posterior_score_damping() {
        let sched = DiffusionSchedule::default();
        let p = StateVector::new(vec![1.0, 2.0]).unwrap();
        let g = StateVector::new(vec![10.0, -10.0]).unwrap();
        let at_one = posterior_score(&p, 1.0, &g, &sched).unwrap();
        assert!((at_one[0] - 1.0).abs() < 1e-2 + 1e-12);
        let at_zero = posterior_score(&p, 0.0, &g, &sched).unwrap();
        assert!((at_zero[0] - (1.0 + 10.0 * (1.0 - 1e-3))).abs() < 1e-12);
        let none = posterior_score(&p, 0.4, &StateVector::zeros(2), &sched).unwrap();
        assert_eq!(none, p);
    }

    #[test]
    fn reconstructs_standard_gaussian() {
        let j = 4000;
        let e = gaussian_ensemble(j, &[0.0, 0.0], 1.0, 5);
        let out = reverse_sde_sample(&e, None, &FilterConfig::default(), &mut RngStream::new(6, 0)).unwrap();
        let mean = out.mean();
        for i in 0..2 {
            assert!(mean[i].abs() < 3.0 / (j as f64).sqrt(), "mean {}", mean[i]);
            let var = out.members().column(i).var(1.0);
            assert!((0.9..=1.1).contains(&var), "var {var}");
        }
    }

    #[test]
    fn sharp_identity_likelihood_pins_to_observation() {
        // Dense 1-d forecast: the kernel prior has members within 1e-2 of y.
        let e = gaussian_ensemble(2000, &[0.0], 1.0, 8);
        let om = ObservationModel::new(ObsOperator::Identity, vec![1e-6], vec![true]).unwrap();
        let y = Observation { values: vec![Some(0.4)] };
        let r = ensf_analysis(&e, &y, &om, &FilterConfig::default(), &mut RngStream::new(9, 0)).unwrap();
        assert!((r.estimate[0] - 0.4).abs() < 1e-2, "{:?}", r.estimate);
    }

    #[test]
    fn analysis_contracts_observed_spread() {
        let e = gaussian_ensemble(500, &[0.0, 0.0], 1.0, 10);
        let om = ObservationModel::partial(ObsOperator::Identity, 2, 0.5, &[0]).unwrap();
        let y = Observation {
            values: vec![Some(0.8), None],
        };
        let r = ensf_analysis(&e, &y, &om, &FilterConfig::default(), &mut RngStream::new(2, 0)).unwrap();
        let before = e.members().column(0).std(1.0);
        let after = r.ensemble.members().column(0).std(1.0);
        assert!(after <= before, "{after} > {before}");
    }

    #[test]
    fn minibatch_bounds() {
        let e = gaussian_ensemble(10, &[0.0], 1.0, 1);
        let cfg = FilterConfig {
            minibatch: Some(11),
            ..FilterConfig::default()
        };
        assert!(reverse_sde_sample(&e, None, &cfg, &mut RngStream::new(1, 0)).is_err());
        let cfg = FilterConfig {
            minibatch: Some(4),
            ..FilterConfig::default()
        };
        assert_eq!(reverse_sde_sample(&e, None, &cfg, &mut RngStream::new(1, 0)).unwrap().size(), 10);
    }

    #[test]
    fn explicit_step_diverges_on_sharp_likelihood() {
        let e = gaussian_ensemble(50, &[0.0], 1.0, 1);
        let om = ObservationModel::full(ObsOperator::Identity, 1, 1e-4).unwrap();
        let y = Observation { values: vec![Some(0.5)] };
        let cfg = FilterConfig {
            likelihood_step: LikelihoodStep::Explicit,
            ..FilterConfig::default()
        };
        let r = ensf_analysis(&e, &y, &om, &cfg, &mut RngStream::new(1, 0));
        assert!(matches!(r, Err(Error::SamplerDiverged { .. })), "{r:?}");
    }

    proptest! {
        #[test]
        fn weights_are_a_distribution_and_translation_invariant(
            seed in any::<u64>(),
            tau in 0.001f64..0.999,
            n in 1usize..20,
        ) {
            let sched = DiffusionSchedule::default();
            let mut rng = RngStream::new(seed, 0);
            let x = Array2::from_shape_simple_fn((n, 3), || 2.0 * rng.standard_normal());
            let z = Array2::from_shape_simple_fn((4, 3), || 2.0 * rng.standard_normal());
            let w = score_weights(x.view(), z.view(), tau, &sched).unwrap();
            for row in w.rows() {
                prop_assert!(row.iter().all(|v| *v >= 0.0));
                prop_assert!((row.sum() - 1.0).abs() < 1e-12);
            }
            // shift members by u and queries by alpha u: weights unchanged
            let u = ndarray::array![0.7, -1.3, 2.1];
            let a = sched.alpha(tau);
            let xs = &x + &u;
            let zs = &z + &(&u * a);
            let ws = score_weights(xs.view(), zs.view(), tau, &sched).unwrap();
            for (p, q) in w.iter().zip(ws.iter()) {
                prop_assert!((p - q).abs() < 1e-6);
            }
        }
    }
}
