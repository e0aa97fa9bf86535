use nalgebra::{DMatrix, DVector};

use super::observation::{Observation, ObservationModel};
use super::AnalysisResult;
use crate::error::{check_dim, Error, Result};
use crate::state::{Ensemble, RngStream};

/// Ridge added to the innovation covariance when it is not positive definite.
pub const ENKF_RIDGE: f64 = 1e-8;

/// Stochastic (perturbed-observation) ensemble Kalman filter update over the
/// observed components, without localization or inflation.
pub fn enkf_analysis(
    forecast: &Ensemble,
    obs: &Observation,
    om: &ObservationModel,
    rng: &mut RngStream,
) -> Result<AnalysisResult> {
    let (j, d) = (forecast.size(), forecast.dim());
    check_dim(d, om.dim())?;
    check_dim(d, obs.dim())?;
    let idx = om.observed_indices();
    let m = idx.len();
    let mut y = DVector::zeros(m);
    for (k, &i) in idx.iter().enumerate() {
        y[k] = obs.values[i].ok_or_else(|| Error::arg(format!("observation missing component {i}")))?;
    }
    let x = forecast.members();
    let hx = DMatrix::from_fn(j, m, |r, k| om.operator.apply(x[[r, idx[k]]]));
    let xm = DMatrix::from_fn(j, d, |r, i| x[[r, i]]);

    let x_mean = xm.row_mean();
    let hx_mean = hx.row_mean();
    let xa = DMatrix::from_fn(j, d, |r, i| xm[(r, i)] - x_mean[i]);
    let ha = DMatrix::from_fn(j, m, |r, k| hx[(r, k)] - hx_mean[k]);
    let scale = 1.0 / (j as f64 - 1.0);
    let c_xy = xa.transpose() * &ha * scale;
    let mut c_yy = ha.transpose() * &ha * scale;
    for (k, &i) in idx.iter().enumerate() {
        c_yy[(k, k)] += om.noise_var()[i];
    }

    let mut regularized = false;
    let chol = match c_yy.clone().cholesky() {
        Some(c) => c,
        None => {
            regularized = true;
            let ridged = c_yy + DMatrix::identity(m, m) * ENKF_RIDGE;
            ridged
                .cholesky()
                .ok_or_else(|| Error::arg("innovation covariance singular after ridge"))?
        }
    };

    // innovations d_j = y + eps_j - h(x_j), one column per member
    let mut innov = DMatrix::zeros(m, j);
    for r in 0..j {
        for (k, &i) in idx.iter().enumerate() {
            let eps = om.noise_var()[i].sqrt() * rng.standard_normal();
            innov[(k, r)] = y[k] + eps - hx[(r, k)];
        }
    }
    let increments = &c_xy * chol.solve(&innov);
    let mut members = forecast.members().to_owned();
    for r in 0..j {
        for i in 0..d {
            members[[r, i]] += increments[(i, r)];
        }
    }
    let ensemble = Ensemble::new(members, forecast.time_index)?;
    let estimate = ensemble.mean();
    Ok(AnalysisResult {
        ensemble,
        estimate,
        regularized,
    })
}

#[cfg(test)]
mod tests {
    use super::super::observation::ObsOperator;
    use super::*;
    use ndarray::Array2;

    #[test]
    fn scalar_hand_case() {
        let e = Ensemble::new(ndarray::array![[0.0], [2.0]], 0).unwrap();
        let om = ObservationModel::full(ObsOperator::Identity, 1, 2f64.sqrt()).unwrap();
        let y = Observation { values: vec![Some(3.0)] };
        // gain 2 / (2 + 2) = 0.5, expected mean 1 + 0.5 (3 - 1) = 2, and the
        // member-averaged perturbation has std 0.5 * sqrt(2) / sqrt(2)
        let n = 4000;
        let mut total = 0.0;
        for seed in 0..n {
            total += enkf_analysis(&e, &y, &om, &mut RngStream::new(seed, 0)).unwrap().estimate[0];
        }
        let mean = total / n as f64;
        let se = 0.5 / (n as f64).sqrt();
        assert!((mean - 2.0).abs() < 4.0 * se, "mean {mean}");
    }

    #[test]
    fn huge_noise_leaves_forecast() {
        let mut rng = RngStream::new(1, 0);
        let e = Ensemble::new(Array2::from_shape_simple_fn((30, 3), || rng.standard_normal()), 0).unwrap();
        let om = ObservationModel::full(ObsOperator::Identity, 3, 1e6).unwrap();
        let y = Observation {
            values: vec![Some(5.0), Some(-5.0), Some(1.0)],
        };
        let r = enkf_analysis(&e, &y, &om, &mut rng).unwrap();
        let max_change = (&r.ensemble.members() - &e.members())
            .iter()
            .fold(0.0f64, |a, v| a.max(v.abs()));
        assert!(max_change < 1e-3, "{max_change}");
    }

    #[test]
    fn linear_gaussian_matches_kalman() {
        let (m0, s0, so, yv) = ([1.0, -0.5], 1.0, 0.5, [2.0, 0.5]);
        let j = 5000;
        let mut rng = RngStream::new(11, 0);
        let e = Ensemble::new(
            Array2::from_shape_fn((j, 2), |(_, i)| m0[i] + s0 * rng.standard_normal()),
            0,
        )
        .unwrap();
        let om = ObservationModel::full(ObsOperator::Identity, 2, so).unwrap();
        let y = Observation {
            values: yv.iter().map(|v| Some(*v)).collect(),
        };
        let r = enkf_analysis(&e, &y, &om, &mut rng).unwrap();
        let (p0, po) = (1.0 / (s0 * s0), 1.0 / (so * so));
        let post_sd = (1.0 / (p0 + po)).sqrt();
        for i in 0..2 {
            let exact = (p0 * m0[i] + po * yv[i]) / (p0 + po);
            assert!((r.estimate[i] - exact).abs() < 3.0 * post_sd / (j as f64).sqrt() * 2.0);
        }
    }

    #[test]
    fn unobserved_components_update_through_correlation() {
        // second component is a copy of the first
        let mut rng = RngStream::new(2, 0);
        let m = Array2::from_shape_fn((400, 2), |_| 0.0);
        let mut e = m;
        for r in 0..400 {
            let v = rng.standard_normal();
            e[[r, 0]] = v;
            e[[r, 1]] = v;
        }
        let e = Ensemble::new(e, 0).unwrap();
        let om = ObservationModel::partial(ObsOperator::Identity, 2, 0.1, &[0]).unwrap();
        let y = Observation {
            values: vec![Some(1.0), None],
        };
        let r = enkf_analysis(&e, &y, &om, &mut rng).unwrap();
        assert!((r.estimate[1] - r.estimate[0]).abs() < 1e-9);
        assert!(r.estimate[1] > 0.8);
        assert!(!r.regularized);
    }
}
