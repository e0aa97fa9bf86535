use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Noise level of the forward process as a function of pseudo-time.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseProfile {
    /// `beta = tau`
    #[default]
    Linear,
    /// `beta^2 = tau`
    Sqrt,
}

/// Diffusion schedule `alpha = 1 - tau` with `beta` from a [`NoiseProfile`]
/// on pseudo-time `tau in [0, 1]`, plus the reverse-time Euler-Maruyama grid.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiffusionSchedule {
    pub n_reverse_steps: usize,
    pub tau_min: f64,
    #[serde(default)]
    pub profile: NoiseProfile,
}

impl Default for DiffusionSchedule {
    fn default() -> Self {
        DiffusionSchedule {
            n_reverse_steps: 100,
            tau_min: 1e-3,
            profile: NoiseProfile::Linear,
        }
    }
}

impl DiffusionSchedule {
    pub fn new(n_reverse_steps: usize, tau_min: f64) -> Result<Self> {
        if n_reverse_steps == 0 || !(tau_min > 0.0 && tau_min < 0.5) {
            return Err(Error::arg("need n_reverse_steps >= 1 and tau_min in (0, 0.5)"));
        }
        Ok(DiffusionSchedule {
            n_reverse_steps,
            tau_min,
            profile: NoiseProfile::Linear,
        })
    }

    pub fn with_profile(self, profile: NoiseProfile) -> Self {
        DiffusionSchedule { profile, ..self }
    }

    pub fn alpha(&self, tau: f64) -> f64 {
        1.0 - tau
    }

    pub fn beta(&self, tau: f64) -> f64 {
        match self.profile {
            NoiseProfile::Linear => tau,
            NoiseProfile::Sqrt => tau.sqrt(),
        }
    }

    /// `d log(alpha) / d tau`
    pub fn drift(&self, tau: f64) -> f64 {
        -1.0 / (1.0 - tau)
    }

    /// `d beta^2 / d tau - 2 (d log alpha / d tau) beta^2`
    pub fn diffusion_sq(&self, tau: f64) -> f64 {
        match self.profile {
            NoiseProfile::Linear => 2.0 * tau + 2.0 * tau * tau / (1.0 - tau),
            NoiseProfile::Sqrt => 1.0 + 2.0 * tau / (1.0 - tau),
        }
    }

    /// Likelihood damping `v(tau) = 1 - tau`.
    pub fn damping(&self, tau: f64) -> f64 {
        1.0 - tau
    }

    pub fn clamp(&self, tau: f64) -> f64 {
        tau.clamp(self.tau_min, 1.0 - self.tau_min)
    }

    /// Errors unless `tau` lies in `[tau_min, 1 - tau_min]` (up to rounding).
    pub fn check(&self, tau: f64) -> Result<()> {
        let (lo, hi) = (self.tau_min, 1.0 - self.tau_min);
        let slack = 1e-12;
        if tau >= lo - slack && tau <= hi + slack {
            Ok(())
        } else {
            Err(Error::ScheduleDomain { tau, lo, hi })
        }
    }

    /// Uniform grid from `1 - tau_min` down to `tau_min`, `n_reverse_steps + 1`
    /// points.
    pub fn reverse_grid(&self) -> Vec<f64> {
        let (hi, lo) = (1.0 - self.tau_min, self.tau_min);
        let n = self.n_reverse_steps;
        (0..=n)
            .map(|k| if k == n { lo } else { hi - (hi - lo) * k as f64 / n as f64 })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoint_values() {
        let s = DiffusionSchedule::default();
        assert_eq!((s.alpha(0.0), s.beta(0.0)), (1.0, 0.0));
        assert_eq!((s.alpha(1.0), s.beta(1.0)), (0.0, 1.0));
        assert_eq!((s.damping(0.0), s.damping(1.0)), (1.0, 0.0));
    }

    #[test]
    fn coefficients_match_finite_differences() {
        for s in [
            DiffusionSchedule::default(),
            DiffusionSchedule::default().with_profile(NoiseProfile::Sqrt),
        ] {
            coefficients_consistent(&s);
        }
    }

    fn coefficients_consistent(s: &DiffusionSchedule) {
        let h = 1e-6;
        for &tau in &[0.01, 0.3, 0.5, 0.9] {
            let dlog_alpha = ((s.alpha(tau + h)).ln() - (s.alpha(tau - h)).ln()) / (2.0 * h);
            assert!((dlog_alpha - s.drift(tau)).abs() < 1e-6);
            let dbeta2 = (s.beta(tau + h).powi(2) - s.beta(tau - h).powi(2)) / (2.0 * h);
            let g2 = dbeta2 - 2.0 * dlog_alpha * s.beta(tau).powi(2);
            assert!((g2 - s.diffusion_sq(tau)).abs() < 1e-6);
        }
    }

    #[test]
    fn grid_and_domain() {
        let s = DiffusionSchedule::default();
        let g = s.reverse_grid();
        assert_eq!(g.len(), 101);
        assert_eq!(g[0], 1.0 - 1e-3);
        assert_eq!(g[100], 1e-3);
        assert!(g.windows(2).all(|w| w[1] < w[0]));
        for t in &g {
            s.check(*t).unwrap();
        }
        assert!(matches!(s.check(0.0), Err(Error::ScheduleDomain { .. })));
        assert!(s.check(1.0).is_err());
        // injected likelihood magnitude v(tau) |grad| shrinks as tau grows
        let grad_norm = 3.0;
        for w in g.windows(2) {
            assert!(s.damping(w[0]) * grad_norm <= s.damping(w[1]) * grad_norm);
        }
    }
}
