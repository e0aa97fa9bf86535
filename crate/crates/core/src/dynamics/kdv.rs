use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{check_dim, Error, Result};
use crate::state::{RngStream, StateVector};

const BLOWUP: f64 = 1e3;

/// Soliton parameters: amplitude/speed `c > 0` and phase `a`, so the peak of
/// `c/2 sech^2(sqrt(c)/2 x - a)` sits at `x = 2a / sqrt(c)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Soliton {
    pub c: f64,
    pub a: f64,
}

impl Soliton {
    pub fn at_peak(c: f64, peak: f64) -> Self {
        Soliton {
            c,
            a: peak * c.sqrt() / 2.0,
        }
    }

    pub fn peak(&self) -> f64 {
        2.0 * self.a / self.c.sqrt()
    }
}

/// `c/2 sech^2(sqrt(c)/2 x - a)` evaluated pointwise.
pub fn soliton_profile(c: f64, a: f64, x: &[f64]) -> Vec<f64> {
    assert!(c > 0.0, "soliton amplitude must be positive");
    let k = c.sqrt() / 2.0;
    x.iter()
        .map(|&xi| {
            let s = 1.0 / (k * xi - a).cosh();
            0.5 * c * s * s
        })
        .collect()
}

/// KdV `v_t = -6 v v_x - v_xxx` on a periodic domain `[0, L)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KdvSystem {
    pub length: f64,
    pub n_grid: usize,
    pub dt_internal: f64,
    pub dt_frame: f64,
}

impl Default for KdvSystem {
    fn default() -> Self {
        KdvSystem::new(50.0, 100, 0.01).expect("default KdV configuration is valid")
    }
}

impl KdvSystem {
    /// Sub-step is `min(1e-4, 0.1 dx^3)`.
    pub fn new(length: f64, n_grid: usize, dt_frame: f64) -> Result<Self> {
        if !(length > 0.0) || n_grid < 4 || !(dt_frame > 0.0) {
            return Err(Error::arg("KdV needs L > 0, n_grid >= 4, dt_frame > 0"));
        }
        let dx = length / n_grid as f64;
        Ok(KdvSystem {
            length,
            n_grid,
            dt_internal: (0.1 * dx * dx * dx).min(1e-4),
            dt_frame,
        })
    }

    pub fn dx(&self) -> f64 {
        self.length / self.n_grid as f64
    }

    pub fn grid(&self) -> Vec<f64> {
        (0..self.n_grid).map(|i| i as f64 * self.dx()).collect()
    }

    /// Sum of soliton profiles, each wrapped with its nearest periodic images.
    pub fn initial_condition(&self, solitons: &[Soliton]) -> StateVector {
        let grid = self.grid();
        let mut v = vec![0.0; self.n_grid];
        for s in solitons {
            for shift in [-self.length, 0.0, self.length] {
                let xs: Vec<f64> = grid.iter().map(|x| x - shift).collect();
                for (vi, p) in v.iter_mut().zip(soliton_profile(s.c, s.a, &xs)) {
                    *vi += p;
                }
            }
        }
        StateVector::from_vec_unchecked(v)
    }

    /// Two solitons with `c ~ U[0.5, 2]` and peaks in `[5, 45]` (scaled to
    /// the domain) at least 10 apart.
    pub fn random_two_soliton(&self, rng: &mut RngStream) -> [Soliton; 2] {
        let scale = self.length / 50.0;
        let lo = 5.0 * scale;
        let hi = 45.0 * scale;
        let gap = 10.0 * scale;
        let p1 = rng.uniform_range(lo, hi);
        let p2 = loop {
            let p = rng.uniform_range(lo, hi);
            if (p - p1).abs() >= gap {
                break p;
            }
        };
        let c1 = rng.uniform_range(0.5, 2.0);
        let c2 = rng.uniform_range(0.5, 2.0);
        [Soliton::at_peak(c1, p1), Soliton::at_peak(c2, p2)]
    }

    pub fn solver(&self) -> KdvSolver {
        KdvSolver::new(*self)
    }

    pub fn mass(&self, v: &[f64]) -> f64 {
        v.iter().sum::<f64>() * self.dx()
    }

    pub fn momentum(&self, v: &[f64]) -> f64 {
        v.iter().map(|x| x * x).sum::<f64>() * self.dx()
    }
}

/// Split-step Fourier integrator: exact dispersion in spectral space and a
/// midpoint step for the advective term, Strang-composed.
pub struct KdvSolver {
    sys: KdvSystem,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
    /// Spectral derivative multipliers `i k`, zero at the Nyquist mode.
    ik: Vec<Complex64>,
    half_disp: Vec<Complex64>,
    full_disp: Vec<Complex64>,
    n_sub: usize,
    h: f64,
}

impl KdvSolver {
    pub fn new(sys: KdvSystem) -> Self {
        let n = sys.n_grid;
        let mut planner = FftPlanner::new();
        let forward = planner.plan_fft_forward(n);
        let inverse = planner.plan_fft_inverse(n);
        let n_sub = (sys.dt_frame / sys.dt_internal).ceil().max(1.0) as usize;
        let h = sys.dt_frame / n_sub as f64;
        let wavenumber = |j: usize| -> f64 {
            let m = if j <= n / 2 { j as f64 } else { j as f64 - n as f64 };
            if n % 2 == 0 && j == n / 2 {
                0.0
            } else {
                2.0 * PI * m / sys.length
            }
        };
        let ks: Vec<f64> = (0..n).map(wavenumber).collect();
        let disp = |tau: f64| -> Vec<Complex64> {
            ks.iter()
                .map(|k| Complex64::from_polar(1.0, k * k * k * tau))
                .collect()
        };
        KdvSolver {
            ik: ks.iter().map(|k| Complex64::new(0.0, *k)).collect(),
            half_disp: disp(0.5 * h),
            full_disp: disp(h),
            forward,
            inverse,
            n_sub,
            h,
            sys,
        }
    }

    pub fn system(&self) -> &KdvSystem {
        &self.sys
    }

    /// Spectrum of `-6 v v_x = -3 (v^2)_x` given the spectrum of `v`.
    fn advection(&self, vhat: &[Complex64], scratch: &mut Vec<Complex64>) -> Vec<Complex64> {
        let n = self.sys.n_grid as f64;
        scratch.clear();
        scratch.extend_from_slice(vhat);
        self.inverse.process(scratch);
        for z in scratch.iter_mut() {
            let v = z.re / n;
            *z = Complex64::new(v * v, 0.0);
        }
        self.forward.process(scratch);
        scratch.iter().zip(&self.ik).map(|(w, ik)| -3.0 * ik * w).collect()
    }

    /// Advances `v` by one frame interval.
    pub fn step(&self, v: &StateVector) -> Result<StateVector> {
        check_dim(self.sys.n_grid, v.dim())?;
        let n = self.sys.n_grid;
        let mut vhat: Vec<Complex64> = v.iter().map(|x| Complex64::new(*x, 0.0)).collect();
        self.forward.process(&mut vhat);
        let mut scratch = Vec::with_capacity(n);
        let mut half = vec![Complex64::new(0.0, 0.0); n];
        for s in 0..self.n_sub {
            let disp = if s == 0 { &self.half_disp } else { &self.full_disp };
            for (z, e) in vhat.iter_mut().zip(disp) {
                *z *= e;
            }
            let n0 = self.advection(&vhat, &mut scratch);
            for ((m, z), a) in half.iter_mut().zip(&vhat).zip(&n0) {
                *m = z + 0.5 * self.h * a;
            }
            let n1 = self.advection(&half, &mut scratch);
            for (z, a) in vhat.iter_mut().zip(&n1) {
                *z += self.h * a;
            }
        }
        for (z, e) in vhat.iter_mut().zip(&self.half_disp) {
            *z *= e;
        }
        self.inverse.process(&mut vhat);
        let out: Vec<f64> = vhat.iter().map(|z| z.re / n as f64).collect();
        if out.iter().any(|x| !x.is_finite() || x.abs() > BLOWUP) {
            return Err(Error::IntegrationBlowup { step: 0 });
        }
        Ok(StateVector::from_vec_unchecked(out))
    }

    /// `[v0, step(v0), ...]`, `n_frames + 1` snapshots.
    pub fn trajectory(&self, v0: &StateVector, n_frames: usize) -> Result<Vec<StateVector>> {
        let mut out = Vec::with_capacity(n_frames + 1);
        out.push(v0.clone());
        for frame in 0..n_frames {
            let next = self
                .step(out.last().unwrap())
                .map_err(|e| match e {
                    Error::IntegrationBlowup { .. } => Error::IntegrationBlowup { step: frame },
                    other => other,
                })?;
            out.push(next);
        }
        Ok(out)
    }
}

/// Free function form of [`KdvSolver::step`]; builds the FFT plans per call.
pub fn kdv_step(sys: &KdvSystem, v: &StateVector) -> Result<StateVector> {
    sys.solver().step(v)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn analytic(sys: &KdvSystem, s: Soliton, t: f64) -> Vec<f64> {
        // v(x,t) = c/2 sech^2(sqrt(c)(x - ct)/2 - a), with periodic images
        let shifted = Soliton {
            c: s.c,
            a: s.a + s.c.sqrt() * s.c * t / 2.0,
        };
        sys.initial_condition(&[shifted]).into_vec()
    }

    #[test]
    fn profile_examples() {
        assert_eq!(soliton_profile(1.0, 0.0, &[0.0]), vec![0.5]);
        let c = 1.7;
        let a = 3.0;
        let p = soliton_profile(c, a, &[2.0 * a / c.sqrt()]);
        assert!((p[0] - c / 2.0).abs() < 1e-15);
    }

    #[test]
    fn profile_integral_matches_analytic() {
        for c in [0.5, 1.0, 2.0] {
            let n = 400_001;
            let (lo, hi) = (-100.0, 100.0);
            let h = (hi - lo) / (n - 1) as f64;
            let xs: Vec<f64> = (0..n).map(|i| lo + i as f64 * h).collect();
            let v = soliton_profile(c, 0.0, &xs);
            let integral = h * (v.iter().sum::<f64>() - 0.5 * (v[0] + v[n - 1]));
            assert!((integral - 2.0 * c.sqrt()).abs() < 1e-6, "c={c}: {integral}");
        }
    }

    #[test]
    fn zero_field_stays_zero() {
        let sys = KdvSystem::default();
        let v = sys.solver().step(&StateVector::zeros(sys.n_grid)).unwrap();
        assert!(v.iter().all(|x| *x == 0.0));
    }

    #[test]
    fn single_soliton_travels_at_speed_c() {
        let sys = KdvSystem::new(50.0, 256, 0.01).unwrap();
        let solver = sys.solver();
        let s = Soliton::at_peak(1.0, 20.0);
        let mut v = sys.initial_condition(&[s]);
        let frames = 300;
        for _ in 0..frames {
            v = solver.step(&v).unwrap();
        }
        let t = frames as f64 * sys.dt_frame;
        let exact = analytic(&sys, s, t);
        let err = v
            .iter()
            .zip(&exact)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(err < 1e-2, "L-inf error {err}");
        let argmax = v
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        let peak = argmax as f64 * sys.dx();
        assert!((peak - (20.0 + t)).abs() <= sys.dx(), "peak at {peak}");
    }

    #[test]
    fn mass_and_momentum_conserved() {
        let sys = KdvSystem::default();
        let solver = sys.solver();
        let mut rng = RngStream::new(4, 0);
        let mut v = sys.initial_condition(&sys.random_two_soliton(&mut rng));
        let m0 = sys.mass(&v);
        let p0 = sys.momentum(&v);
        for _ in 0..100 {
            let next = solver.step(&v).unwrap();
            assert!((sys.mass(&next) - sys.mass(&v)).abs() <= 1e-6 * m0.abs());
            v = next;
        }
        // 100 frames = 1 time unit
        assert!((sys.mass(&v) - m0).abs() / m0 < 1e-5);
        assert!((sys.momentum(&v) - p0).abs() / p0 < 1e-5);
    }

    #[test]
    fn two_solitons_reemerge_after_overtaking() {
        let sys = KdvSystem::new(50.0, 256, 0.05).unwrap();
        let solver = sys.solver();
        let tall = Soliton::at_peak(2.0, 10.0);
        let short = Soliton::at_peak(0.5, 22.0);
        let mut v = sys.initial_condition(&[tall, short]);
        // relative speed 1.5 closes a gap of 12 and reopens it by ~10
        let frames = 300;
        for _ in 0..frames {
            v = solver.step(&v).unwrap();
        }
        let grid = sys.grid();
        let t = frames as f64 * sys.dt_frame;
        let tall_pos = (10.0 + 2.0 * t) % sys.length;
        let local_max = |center: f64, radius: f64| {
            grid.iter()
                .zip(v.iter())
                .filter(|(x, _)| {
                    let d = (*x - center).abs();
                    d.min(sys.length - d) < radius
                })
                .map(|(_, y)| *y)
                .fold(f64::MIN, f64::max)
        };
        let tall_peak = local_max(tall_pos, 4.0);
        let short_peak = local_max(22.0 + 0.5 * t, 4.0);
        assert!(tall_pos > 22.0 + 0.5 * t + 6.0, "tall soliton should lead");
        assert!((tall_peak - 1.0).abs() / 1.0 < 0.02, "tall peak {tall_peak}");
        assert!((short_peak - 0.25).abs() / 0.25 < 0.02, "short peak {short_peak}");
    }

    #[test]
    fn blowup_is_reported() {
        let sys = KdvSystem::new(50.0, 64, 0.01).unwrap();
        let v = StateVector::new(vec![5e3; 64]).unwrap();
        assert!(matches!(
            sys.solver().step(&v),
            Err(Error::IntegrationBlowup { .. })
        ));
    }
}
