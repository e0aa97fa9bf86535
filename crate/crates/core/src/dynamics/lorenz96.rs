use crate::error::{check_dim, Error, Result};
use crate::state::{RngStream, StateVector};

/// Cyclic Lorenz-96 model `dx_i/dt = (x_{i+1} - x_{i-2}) x_{i-1} - x_i + F`
/// advanced with fixed-step RK4.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Lorenz96System {
    pub dim: usize,
    pub forcing: f64,
    pub dt: f64,
}

impl Default for Lorenz96System {
    fn default() -> Self {
        Lorenz96System {
            dim: 20,
            forcing: 8.0,
            dt: 10.0 / 2500.0,
        }
    }
}

impl Lorenz96System {
    pub fn new(dim: usize, forcing: f64, dt: f64) -> Result<Self> {
        if dim < 4 {
            return Err(Error::arg(format!("Lorenz-96 needs d >= 4, got {dim}")));
        }
        if !(dt > 0.0) || !forcing.is_finite() {
            return Err(Error::arg("Lorenz-96 needs dt > 0 and finite forcing"));
        }
        Ok(Lorenz96System { dim, forcing, dt })
    }

    fn rhs_into(&self, x: &[f64], out: &mut [f64]) {
        let d = self.dim;
        for i in 0..d {
            let ip1 = x[(i + 1) % d];
            let im1 = x[(i + d - 1) % d];
            let im2 = x[(i + d - 2) % d];
            out[i] = (ip1 - im2) * im1 - x[i] + self.forcing;
        }
    }

    pub fn rhs(&self, x: &StateVector) -> Result<StateVector> {
        check_dim(self.dim, x.dim())?;
        let mut out = vec![0.0; self.dim];
        self.rhs_into(x, &mut out);
        Ok(StateVector::from_vec_unchecked(out))
    }

    /// One classical RK4 step of size `dt`.
    pub fn rk4_step(&self, x: &StateVector) -> Result<StateVector> {
        self.rk4_step_indexed(x, 0)
    }

    fn rk4_step_indexed(&self, x: &StateVector, step: usize) -> Result<StateVector> {
        check_dim(self.dim, x.dim())?;
        let out = self.rk4_raw(x, self.dt);
        if out.iter().all(|v| v.is_finite()) {
            Ok(StateVector::from_vec_unchecked(out))
        } else {
            Err(Error::IntegrationBlowup { step })
        }
    }

    pub(crate) fn rk4_raw(&self, x: &[f64], h: f64) -> Vec<f64> {
        let d = self.dim;
        let mut k1 = vec![0.0; d];
        let mut k2 = vec![0.0; d];
        let mut k3 = vec![0.0; d];
        let mut k4 = vec![0.0; d];
        let mut tmp = vec![0.0; d];
        self.rhs_into(x, &mut k1);
        for i in 0..d {
            tmp[i] = x[i] + 0.5 * h * k1[i];
        }
        self.rhs_into(&tmp, &mut k2);
        for i in 0..d {
            tmp[i] = x[i] + 0.5 * h * k2[i];
        }
        self.rhs_into(&tmp, &mut k3);
        for i in 0..d {
            tmp[i] = x[i] + h * k3[i];
        }
        self.rhs_into(&tmp, &mut k4);
        (0..d)
            .map(|i| x[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
            .collect()
    }

    /// `[x0, step(x0), ...]` with `n_steps + 1` states. With `noise`, each
    /// stored state gets an independent N(0, std^2) perturbation per
    /// component; the clean path is what gets integrated.
    pub fn generate_trajectory(
        &self,
        x0: &StateVector,
        n_steps: usize,
        noise: Option<(&mut RngStream, f64)>,
    ) -> Result<Vec<StateVector>> {
        check_dim(self.dim, x0.dim())?;
        let mut clean = Vec::with_capacity(n_steps + 1);
        clean.push(x0.clone());
        for step in 0..n_steps {
            let next = self.rk4_step_indexed(clean.last().unwrap(), step)?;
            clean.push(next);
        }
        match noise {
            None => Ok(clean),
            Some((rng, std)) => {
                if !(std >= 0.0) {
                    return Err(Error::arg("noise std must be >= 0"));
                }
                Ok(clean
                    .into_iter()
                    .map(|s| {
                        let v = s.iter().map(|x| x + std * rng.standard_normal()).collect();
                        StateVector::from_vec_unchecked(v)
                    })
                    .collect())
            }
        }
    }

    /// Random state on the attractor: `F + N(0, 1)` per component, then
    /// `spin_up` RK4 steps.
    pub fn spun_up_state(&self, rng: &mut RngStream, spin_up: usize) -> Result<StateVector> {
        let x: Vec<f64> = (0..self.dim)
            .map(|_| self.forcing + rng.standard_normal())
            .collect();
        let traj = self.generate_trajectory(&StateVector::from_vec_unchecked(x), spin_up, None)?;
        Ok(traj.into_iter().last().unwrap())
    }
}

pub const DEFAULT_SPIN_UP: usize = 500;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::state::rmse;
    use proptest::prelude::*;

    fn brute_rhs(x: &[f64], f: f64) -> Vec<f64> {
        let d = x.len() as isize;
        let at = |i: isize| x[i.rem_euclid(d) as usize];
        (0..d)
            .map(|i| (at(i + 1) - at(i - 2)) * at(i - 1) - at(i) + f)
            .collect()
    }

    #[test]
    fn fixed_point_and_origin() {
        let sys = Lorenz96System::new(10, 8.0, 0.004).unwrap();
        let r = sys.rhs(&StateVector::filled(10, 8.0)).unwrap();
        assert!(r.iter().all(|v| *v == 0.0));
        let r = sys.rhs(&StateVector::zeros(10)).unwrap();
        assert!(r.iter().all(|v| *v == 8.0));
        let x = sys.rk4_step(&StateVector::filled(10, 8.0)).unwrap();
        assert!(x.iter().all(|v| (*v - 8.0).abs() < 1e-14));
    }

    #[test]
    fn hand_evaluated_stencil() {
        let sys = Lorenz96System::new(4, 8.0, 0.004).unwrap();
        let r = sys.rhs(&StateVector::new(vec![1.0, 2.0, 3.0, 4.0]).unwrap()).unwrap();
        // i=0: (x1-x2)x3 - x0 + F = (2-3)*4 - 1 + 8
        // i=1: (x2-x3)x0 - x1 + F = (3-4)*1 - 2 + 8
        // i=2: (x3-x0)x1 - x2 + F = (4-1)*2 - 3 + 8
        // i=3: (x0-x1)x2 - x3 + F = (1-2)*3 - 4 + 8
        assert_eq!(r.as_slice(), &[3.0, 5.0, 11.0, 1.0]);
    }

    #[test]
    fn rejects_bad_shapes() {
        assert!(Lorenz96System::new(3, 8.0, 0.01).is_err());
        let sys = Lorenz96System::default();
        assert!(matches!(
            sys.rhs(&StateVector::zeros(5)),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn blowup_is_reported() {
        let sys = Lorenz96System::new(4, 8.0, 10.0).unwrap();
        let x0 = StateVector::new(vec![1e200, -1e200, 2e200, 0.0]).unwrap();
        assert!(matches!(
            sys.generate_trajectory(&x0, 5, None),
            Err(Error::IntegrationBlowup { .. })
        ));
    }

    #[test]
    fn rk4_fourth_order() {
        let base = Lorenz96System::default();
        let mut rng = RngStream::new(3, 0);
        let x0 = base.spun_up_state(&mut rng, 200).unwrap();
        let h = 0.02;
        let fine = {
            let mut x = x0.to_vec();
            for _ in 0..100 {
                x = base.rk4_raw(&x, h / 100.0);
            }
            x
        };
        let err = |steps: usize| {
            let mut x = x0.to_vec();
            for _ in 0..steps {
                x = base.rk4_raw(&x, h / steps as f64);
            }
            rmse(&x, &fine).unwrap()
        };
        let ratio = err(1) / err(2);
        assert!(ratio.log2() >= 3.9, "order {}", ratio.log2());
        assert!((ratio / 16.0 - 1.0).abs() < 0.25, "ratio {ratio}");
    }

    #[test]
    fn chaotic_divergence() {
        let sys = Lorenz96System::default();
        let mut rng = RngStream::new(11, 0);
        let a = sys.spun_up_state(&mut rng, 500).unwrap();
        let mut b = a.to_vec();
        b[0] += 1e-8;
        let b = StateVector::new(b).unwrap();
        // t = 20
        let ta = sys.generate_trajectory(&a, 5000, None).unwrap();
        let tb = sys.generate_trajectory(&b, 5000, None).unwrap();
        let sep: Vec<f64> = ta
            .iter()
            .zip(&tb)
            .map(|(x, y)| x.iter().zip(y.iter()).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max))
            .collect();
        let by_t10 = sep[..=2500].iter().cloned().fold(0.0, f64::max);
        let by_t20 = sep.iter().cloned().fold(0.0, f64::max);
        assert!(by_t10 > 1e-8 * 1e4, "growth by t=10: {by_t10}");
        assert!(by_t20 > 1.0, "separation by t=20: {by_t20}");
    }

    #[test]
    fn trajectory_noise_handling() {
        let sys = Lorenz96System::default();
        let mut rng = RngStream::new(5, 0);
        let x0 = sys.spun_up_state(&mut rng, 100).unwrap();
        assert_eq!(sys.generate_trajectory(&x0, 0, None).unwrap(), vec![x0.clone()]);

        let clean = sys.generate_trajectory(&x0, 50, None).unwrap();
        let mut r = RngStream::new(9, 1);
        let zero = sys.generate_trajectory(&x0, 50, Some((&mut r, 0.0))).unwrap();
        assert_eq!(clean, zero);

        let n = 10_000;
        let clean = sys.generate_trajectory(&x0, n, None).unwrap();
        let mut r = RngStream::new(9, 2);
        let noisy = sys.generate_trajectory(&x0, n, Some((&mut r, 0.2))).unwrap();
        for i in 0..sys.dim {
            let m: f64 = clean
                .iter()
                .zip(&noisy)
                .map(|(c, y)| y[i] - c[i])
                .sum::<f64>()
                / (n + 1) as f64;
            assert!(m.abs() <= 0.01, "component {i} noise mean {m}");
        }
    }

    proptest! {
        #[test]
        fn rhs_matches_brute_force(
            d in 4usize..=40,
            seed in any::<u64>(),
            f in -10.0f64..10.0,
        ) {
            let mut rng = RngStream::new(seed, 0);
            let x: Vec<f64> = (0..d).map(|_| 5.0 * rng.standard_normal()).collect();
            let sys = Lorenz96System::new(d, f, 0.01).unwrap();
            let r = sys.rhs(&StateVector::new(x.clone()).unwrap()).unwrap();
            prop_assert_eq!(r.to_vec(), brute_rhs(&x, f));
        }
    }
}
