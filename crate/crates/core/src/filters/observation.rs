use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::state::{RngStream, StateVector};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObsOperator {
    Identity,
    Arctan,
}

impl ObsOperator {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            ObsOperator::Identity => x,
            ObsOperator::Arctan => x.atan(),
        }
    }

    pub fn derivative(self, x: f64) -> f64 {
        match self {
            ObsOperator::Identity => 1.0,
            ObsOperator::Arctan => 1.0 / (1.0 + x * x),
        }
    }
}

/// Componentwise observation `y_i = h(x_i) + N(0, var_i)` on a subset of
/// components.
#[derive(Clone, Debug, PartialEq)]
pub struct ObservationModel {
    pub operator: ObsOperator,
    noise_var: Vec<f64>,
    mask: Vec<bool>,
}

/// Observed values, `None` where the component is not observed.
#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    pub values: Vec<Option<f64>>,
}

impl Observation {
    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn observed_indices(&self) -> Vec<usize> {
        (0..self.values.len()).filter(|i| self.values[*i].is_some()).collect()
    }
}

impl ObservationModel {
    pub fn new(operator: ObsOperator, noise_var: Vec<f64>, mask: Vec<bool>) -> Result<Self> {
        check_dim(noise_var.len(), mask.len())?;
        if !mask.iter().any(|m| *m) {
            return Err(Error::arg("observation mask must observe at least one component"));
        }
        if mask.iter().zip(&noise_var).any(|(m, v)| *m && !(*v > 0.0 && v.is_finite())) {
            return Err(Error::arg("observed components need finite noise variance > 0"));
        }
        Ok(ObservationModel {
            operator,
            noise_var,
            mask,
        })
    }

    /// Same noise standard deviation on every component; all observed.
    pub fn full(operator: ObsOperator, d: usize, noise_std: f64) -> Result<Self> {
        Self::new(operator, vec![noise_std * noise_std; d], vec![true; d])
    }

    /// Same noise standard deviation on every component; only `observed`.
    pub fn partial(operator: ObsOperator, d: usize, noise_std: f64, observed: &[usize]) -> Result<Self> {
        let mut mask = vec![false; d];
        for &i in observed {
            *mask
                .get_mut(i)
                .ok_or_else(|| Error::arg(format!("observed index {i} out of range {d}")))? = true;
        }
        Self::new(operator, vec![noise_std * noise_std; d], mask)
    }

    /// Copy with a different observed subset.
    pub fn with_mask(&self, mask: Vec<bool>) -> Result<Self> {
        Self::new(self.operator, self.noise_var.clone(), mask)
    }

    pub fn dim(&self) -> usize {
        self.mask.len()
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn noise_var(&self) -> &[f64] {
        &self.noise_var
    }

    pub fn observed_indices(&self) -> Vec<usize> {
        (0..self.mask.len()).filter(|i| self.mask[*i]).collect()
    }

    pub fn observe(&self, x_true: &StateVector, rng: &mut RngStream) -> Result<Observation> {
        check_dim(self.dim(), x_true.dim())?;
        let values = (0..self.dim())
            .map(|i| {
                self.mask[i].then(|| {
                    self.operator.apply(x_true[i]) + self.noise_var[i].sqrt() * rng.standard_normal()
                })
            })
            .collect();
        Ok(Observation { values })
    }

    fn check_obs(&self, y: &Observation) -> Result<()> {
        check_dim(self.dim(), y.dim())?;
        for i in 0..self.dim() {
            if self.mask[i] && y.values[i].is_none() {
                return Err(Error::arg(format!("observation missing component {i}")));
            }
        }
        Ok(())
    }

    /// `-1/2 sum_i (h(z_i) - y_i)^2 / var_i` over observed components.
    pub fn log_likelihood(&self, z: &[f64], y: &Observation) -> Result<f64> {
        check_dim(self.dim(), z.len())?;
        self.check_obs(y)?;
        Ok(self
            .observed_indices()
            .into_iter()
            .map(|i| {
                let r = self.operator.apply(z[i]) - y.values[i].expect("checked");
                -0.5 * r * r / self.noise_var[i]
            })
            .sum())
    }

    pub fn log_likelihood_grad(&self, z: &StateVector, y: &Observation) -> Result<StateVector> {
        check_dim(self.dim(), z.dim())?;
        self.check_obs(y)?;
        let g = (0..self.dim())
            .map(|i| match (self.mask[i], y.values[i]) {
                (true, Some(yi)) => {
                    -self.operator.derivative(z[i]) * (self.operator.apply(z[i]) - yi) / self.noise_var[i]
                }
                _ => 0.0,
            })
            .collect();
        Ok(StateVector::from_vec_unchecked(g))
    }

    /// Row-wise likelihood gradient for a batch `(n, d)` and the Gauss-Newton
    /// curvature `h'(z)^2 / var`, both zero on unobserved components.
    pub fn grad_and_curvature_batch(&self, z: ArrayView2<f64>, y: &Observation) -> Result<(Array2<f64>, Array2<f64>)> {
        check_dim(self.dim(), z.ncols())?;
        self.check_obs(y)?;
        let mut g = Array2::zeros(z.raw_dim());
        let mut c = Array2::zeros(z.raw_dim());
        for i in self.observed_indices() {
            let yi = y.values[i].expect("checked");
            let var = self.noise_var[i];
            for r in 0..z.nrows() {
                let zi = z[[r, i]];
                let dh = self.operator.derivative(zi);
                g[[r, i]] = -dh * (self.operator.apply(zi) - yi) / var;
                c[[r, i]] = dh * dh / var;
            }
        }
        Ok((g, c))
    }
}

fn prox_scalar(op: ObsOperator, z0: f64, y: f64, var: f64, c: f64) -> f64 {
    let phi = |z: f64, r: f64| 0.5 * (z - z0) * (z - z0) / c + 0.5 * r * r / var;
    let mut z = z0;
    let mut r = op.apply(z) - y;
    let mut f = phi(z, r);
    for _ in 0..PROX_ITERS {
        let dh = op.derivative(z);
        let grad = (z - z0) / c + dh * r / var;
        let mut step = -grad / (1.0 / c + dh * dh / var);
        if step.abs() <= 1e-4 * (1.0 + z.abs()) {
            return z + step;
        }
        let mut accepted = false;
        for _ in 0..60 {
            let r_new = op.apply(z + step) - y;
            let f_new = phi(z + step, r_new);
            if f_new <= f {
                z += step;
                r = r_new;
                f = f_new;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    z
}

const PROX_ITERS: usize = 30;

impl ObservationModel {
    /// Backward-Euler increment of the likelihood drift with weight `c`:
    /// per observed component, the minimizer of
    /// `(z - z0)^2 / (2c) + (h(z) - y)^2 / (2 var)` minus `z0`, found by
    /// Gauss-Newton with backtracking from `z0`. Zero elsewhere.
    pub fn prox_increment_batch(&self, z: ArrayView2<f64>, y: &Observation, c: f64) -> Result<Array2<f64>> {
        check_dim(self.dim(), z.ncols())?;
        self.check_obs(y)?;
        let mut out = Array2::zeros(z.raw_dim());
        if !(c > 0.0) {
            return Ok(out);
        }
        for i in self.observed_indices() {
            let yi = y.values[i].expect("checked");
            let var = self.noise_var[i];
            for r in 0..z.nrows() {
                let z0 = z[[r, i]];
                out[[r, i]] = match self.operator {
                    ObsOperator::Identity => c * (yi - z0) / (var + c),
                    op => prox_scalar(op, z0, yi, var, c) - z0,
                };
            }
        }
        Ok(out)
    }
}

/// 64-bit FNV-1a over the mask bits, for logging which components were seen.
pub fn mask_hash(mask: &[bool]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for m in mask {
        h ^= *m as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}
