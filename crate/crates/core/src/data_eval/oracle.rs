use crate::error::{ensure, Result};
use crate::models::NoisePredictor;
use crate::schedule::NoiseSchedule;
use crate::tensor::Tensor;

/// Posterior-mean noise `E[eps | x_t]` when every coordinate of the data is
/// independently `N(mu, sigma^2)`:
/// `sqrt(1 - abar) (x - sqrt(abar) mu) / (abar sigma^2 + 1 - abar)`.
pub fn optimal_eps_oracle(x_t: &Tensor, t: usize, mu: f64, sigma: f64, sched: &NoiseSchedule) -> Result<Tensor> {
    ensure!(t <= sched.steps(), "step {t} outside 0..={}", sched.steps());
    ensure!(sigma >= 0.0, "sigma must be non-negative");
    let ab = sched.alpha_bar(t);
    let var = 1.0 - ab;
    let total = ab * sigma * sigma + var;
    if total == 0.0 {
        return Ok(Tensor::zeros(x_t.shape()));
    }
    let (c, m) = (var.sqrt() / total, ab.sqrt() * mu);
    Ok(x_t.map(|x| c * (x - m)))
}

/// Minimum attainable noise-prediction loss per coordinate at step `t`, the
/// posterior variance of the noise: `abar sigma^2 / (abar sigma^2 + 1 - abar)`.
pub fn optimal_loss(t: usize, sigma: f64, sched: &NoiseSchedule) -> Result<f64> {
    ensure!(t <= sched.steps(), "step {t} outside 0..={}", sched.steps());
    let ab = sched.alpha_bar(t);
    let total = ab * sigma * sigma + 1.0 - ab;
    Ok(if total == 0.0 { 0.0 } else { ab * sigma * sigma / total })
}

/// Minimum loss averaged over uniformly drawn `t` in `1..=T`, summed over
/// `dim` coordinates.
pub fn optimal_loss_average(sigma: f64, dim: usize, sched: &NoiseSchedule) -> Result<f64> {
    let mut total = 0.0;
    for t in 1..=sched.steps() {
        total += optimal_loss(t, sigma, sched)?;
    }
    Ok(dim as f64 * total / sched.steps() as f64)
}

/// Bayes-optimal noise predictor for Gaussian data, usable as a teacher or
/// a reference model.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianOracle {
    pub mu: f64,
    pub sigma: f64,
    sched: NoiseSchedule,
}

impl GaussianOracle {
    pub fn new(mu: f64, sigma: f64, sched: NoiseSchedule) -> Result<Self> {
        ensure!(mu.is_finite() && sigma >= 0.0 && sigma.is_finite(), "need finite mu and sigma >= 0");
        Ok(GaussianOracle { mu, sigma, sched })
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.sched
    }
}

impl NoisePredictor for GaussianOracle {
    fn predict_eps(&self, x: &Tensor, t: usize) -> Result<Tensor> {
        optimal_eps_oracle(x, t, self.mu, self.sigma, &self.sched)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::ScheduleKind;

    #[test]
    fn average_minimum_loss_for_reference_gaussian() {
        // N(2, 0.5^2), cosine schedule, T = 100: average of
        // (abar/4)/(abar/4 + 1 - abar) over t = 1..100, computed separately.
        let s = NoiseSchedule::build(ScheduleKind::Cosine, 100).unwrap();
        let avg = optimal_loss_average(0.5, 1, &s).unwrap();
        assert!((avg - 0.3228019676740433).abs() < 1e-12, "{avg}");
    }

    #[test]
    fn unit_variance_data_gives_identity_scaling() {
        // With sigma = 1 the denominator is 1: E[eps|x] = sqrt(1-abar)(x - sqrt(abar) mu).
        let s = NoiseSchedule::build(ScheduleKind::Cosine, 10).unwrap();
        let x = Tensor::column(vec![0.5, -2.0]).unwrap();
        let e = optimal_eps_oracle(&x, 4, 1.0, 1.0, &s).unwrap();
        let ab = s.alpha_bar(4);
        for (o, v) in e.data().iter().zip(x.data()) {
            assert!((o - (1.0 - ab).sqrt() * (v - ab.sqrt())).abs() < 1e-15);
        }
    }
}
