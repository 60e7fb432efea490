//! Discrete variance-preserving noise schedules and the forward process.
//!
//! Index 0 denotes clean data (`alpha_bar[0] = 1`); noise levels run `1..=T`.

use std::f64::consts::FRAC_PI_2;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Cosine,
    Linear,
}

const COSINE_OFFSET: f64 = 0.008;
const ALPHA_MIN: f64 = 0.001;
const ALPHA_MAX: f64 = 0.999;

/// Per-step coefficients of a `T`-step diffusion. All arrays have length
/// `T + 1`; entry 0 is the clean-data convention (`alpha = alpha_bar = 1`).
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn build(kind: ScheduleKind, steps: usize) -> Result<Self> {
        ensure!(steps >= 1, "schedule needs at least one step, got {steps}");
        let alpha: Vec<f64> = match kind {
            ScheduleKind::Cosine => {
                let f = |t: usize| {
                    let u = (t as f64 / steps as f64 + COSINE_OFFSET) / (1.0 + COSINE_OFFSET);
                    (u * FRAC_PI_2).cos().powi(2)
                };
                (1..=steps)
                    .map(|t| (f(t) / f(t - 1)).clamp(ALPHA_MIN, ALPHA_MAX))
                    .collect()
            }
            ScheduleKind::Linear => {
                // Conventional endpoints for T = 1000, rescaled so that the
                // total noise injected is comparable at other lengths.
                let scale = 1000.0 / steps as f64;
                let (b1, bt) = (1e-4 * scale, 0.02 * scale);
                (0..steps)
                    .map(|i| {
                        let frac = if steps == 1 { 0.0 } else { i as f64 / (steps - 1) as f64 };
                        (1.0 - (b1 + (bt - b1) * frac)).clamp(ALPHA_MIN, ALPHA_MAX)
                    })
                    .collect()
            }
        };
        Self::from_alphas(alpha)
    }

    /// Schedule from explicit per-step `alpha_1..alpha_T`, each in `(0, 1]`.
    pub fn from_alphas(alphas: Vec<f64>) -> Result<Self> {
        ensure!(!alphas.is_empty(), "schedule needs at least one step");
        for (i, &a) in alphas.iter().enumerate() {
            ensure!(a > 0.0 && a <= 1.0, "alpha_{} = {a} outside (0, 1]", i + 1);
        }
        let mut alpha = Vec::with_capacity(alphas.len() + 1);
        let mut alpha_bar = Vec::with_capacity(alphas.len() + 1);
        alpha.push(1.0);
        alpha_bar.push(1.0);
        for a in alphas {
            let prev = *alpha_bar.last().expect("non-empty");
            alpha.push(a);
            alpha_bar.push(prev * a);
        }
        Ok(NoiseSchedule { alpha, alpha_bar })
    }

    /// Rebuild from stored `alpha` and `alpha_bar` arrays (both length `T + 1`),
    /// checking the cumulative-product relation bit-exactly.
    pub fn from_arrays(alpha: Vec<f64>, alpha_bar: Vec<f64>) -> Result<Self> {
        let rebuilt = Self::from_alphas(alpha.get(1..).unwrap_or(&[]).to_vec())?;
        if rebuilt.alpha != alpha || rebuilt.alpha_bar != alpha_bar {
            return Err(Error::contract(
                "stored schedule arrays are inconsistent with their cumulative product",
            ));
        }
        Ok(rebuilt)
    }

    /// Number of noise levels `T`.
    pub fn steps(&self) -> usize {
        self.alpha.len() - 1
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn beta(&self, t: usize) -> f64 {
        1.0 - self.alpha[t]
    }

    /// Reverse-process standard deviation, `sigma_t^2 = 1 - alpha_t`.
    pub fn sigma(&self, t: usize) -> f64 {
        (1.0 - self.alpha[t]).sqrt()
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alpha
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub(crate) fn check_step(&self, t: usize) -> Result<()> {
        ensure!(t <= self.steps(), "step {t} outside 0..={}", self.steps());
        Ok(())
    }
}

/// Forward-process draw `sqrt(abar_t) x0 + sqrt(1 - abar_t) eps`.
pub fn q_sample(x0: &Tensor, t: usize, eps: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    ensure!(t >= 1 && t <= sched.steps(), "q_sample step {t} outside 1..={}", sched.steps());
    q_sample_at(x0, t, eps, sched)
}

/// As [`q_sample`] but also accepting `t = 0` (returns `x0`).
pub(crate) fn q_sample_at(x0: &Tensor, t: usize, eps: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    sched.check_step(t)?;
    let ab = sched.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    x0.zip_map(eps, "q_sample", |x, e| a * x + b * e)
}

/// The two coefficients of the posterior mean `mu_{t+1}(x0, x_{t+1})`:
/// `(coefficient on x0, coefficient on x_{t+1})`.
pub fn posterior_coefficients(t: usize, sched: &NoiseSchedule) -> Result<(f64, f64)> {
    ensure!(t < sched.steps(), "posterior step {t} must be below T = {}", sched.steps());
    let (ab_t, ab_next, a_next) = (sched.alpha_bar(t), sched.alpha_bar(t + 1), sched.alpha(t + 1));
    let denom = 1.0 - ab_next;
    if denom <= 0.0 {
        return Err(Error::numeric(format!(
            "posterior mean undefined: 1 - alpha_bar_{} = 0",
            t + 1
        )));
    }
    Ok((
        ab_t.sqrt() * (1.0 - a_next) / denom,
        a_next.sqrt() * (1.0 - ab_t) / denom,
    ))
}

/// Mean of `q(x_t | x0, x_{t+1})`.
pub fn posterior_mean(x0: &Tensor, x_next: &Tensor, t: usize, sched: &NoiseSchedule) -> Result<Tensor> {
    let (c0, c1) = posterior_coefficients(t, sched)?;
    x0.zip_map(x_next, "posterior_mean", |a, b| c0 * a + c1 * b)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_first_step_matches_formula() {
        // f(t) = cos^2(((t/T + s)/(1 + s)) * pi/2), T = 10, s = 0.008, by hand:
        // f(1)/f(0) = 0.972092737113969 (evaluated independently in Python).
        let s = NoiseSchedule::build(ScheduleKind::Cosine, 10).unwrap();
        assert!((s.alpha_bar(1) - 0.972092737113969).abs() < 1e-14);
    }

    #[test]
    fn unit_alphas_give_unit_alpha_bar() {
        let s = NoiseSchedule::from_alphas(vec![1.0; 7]).unwrap();
        assert!(s.alpha_bars().iter().all(|&a| a == 1.0));
    }

    #[test]
    fn schedules_are_monotone_and_consistent() {
        for kind in [ScheduleKind::Cosine, ScheduleKind::Linear] {
            for steps in [1, 2, 10, 100, 1000] {
                let s = NoiseSchedule::build(kind, steps).unwrap();
                assert_eq!(s.steps(), steps);
                assert!(s.alpha_bar(steps) < s.alpha_bar(0));
                if steps > 1 {
                    assert!(s.alpha_bar(steps) < s.alpha_bar(1));
                }
                for t in 1..=steps {
                    assert!(s.alpha_bar(t) <= s.alpha_bar(t - 1));
                    assert_eq!(s.alpha_bar(t), s.alpha_bar(t - 1) * s.alpha(t));
                    assert!((s.sigma(t).powi(2) - (1.0 - s.alpha(t))).abs() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn zero_steps_rejected() {
        assert!(NoiseSchedule::build(ScheduleKind::Cosine, 0).is_err());
    }

    #[test]
    fn q_sample_edge_cases() {
        let x0 = Tensor::from_fn(&[3, 2], |i| i as f64 - 2.0);
        let eps = Tensor::from_fn(&[3, 2], |i| (i as f64).sin());
        let ident = NoiseSchedule::from_alphas(vec![1.0; 3]).unwrap();
        assert_eq!(q_sample(&x0, 2, &eps, &ident).unwrap(), x0);

        // alpha_bar_1 = 0.25 (alpha_1 = 0.25): 0.5 * 1 + sqrt(0.75) * 0.5.
        let quarter = NoiseSchedule::from_alphas(vec![0.25]).unwrap();
        let y = q_sample(&Tensor::scalar(1.0), 1, &Tensor::scalar(0.5), &quarter).unwrap();
        assert!((y.item().unwrap() - 0.9330127018922193).abs() < 1e-15);

        assert!(q_sample(&x0, 1, &Tensor::zeros(&[2, 3]), &ident).is_err());
        assert!(q_sample(&x0, 0, &eps, &ident).is_err());
    }

    #[test]
    fn q_sample_with_vanishing_signal() {
        // alpha_bar can only reach 0 through the clip floor; the zero case
        // is checked through the formula with a tiny alpha_bar instead.
        let s = NoiseSchedule::from_alphas(vec![1e-300]).unwrap();
        let y = q_sample(&Tensor::ones(&[4]), 1, &Tensor::zeros(&[4]), &s).unwrap();
        assert!(y.max_abs() < 1e-149);
    }

    #[test]
    fn posterior_mean_edge_cases() {
        let s = NoiseSchedule::from_alphas(vec![0.9, 1.0, 0.8]).unwrap();
        let x0 = Tensor::from_fn(&[4], |i| i as f64);
        let xn = Tensor::from_fn(&[4], |i| 10.0 - i as f64);
        // alpha_2 = 1: x0 coefficient vanishes.
        assert_eq!(posterior_mean(&x0, &xn, 1, &s).unwrap(), xn);

        let v = Tensor::from_fn(&[4], |i| 0.5 * i as f64 - 1.0);
        for t in 0..3 {
            let (c0, c1) = posterior_coefficients(t, &s).unwrap();
            let mu = posterior_mean(&v, &v, t, &s).unwrap();
            for (m, &x) in mu.data().iter().zip(v.data()) {
                assert!((m - x * (c0 + c1)).abs() < 1e-15);
            }
        }
        assert!(posterior_mean(&x0, &xn, 3, &s).is_err());

        let degenerate = NoiseSchedule::from_alphas(vec![1.0, 1.0]).unwrap();
        assert!(matches!(
            posterior_mean(&x0, &xn, 0, &degenerate),
            Err(Error::Numeric(_))
        ));
    }
}
