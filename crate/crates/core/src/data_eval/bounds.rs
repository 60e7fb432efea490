use serde::{Deserialize, Serialize};

use super::distance::{gaussian_kl, gaussian_w1, w1_1d};
use crate::consistency::cm_sample;
use crate::error::{ensure, Error, Result};
use crate::models::ConsistencyModel;
use crate::schedule::NoiseSchedule;
use crate::tensor::Tensor;

/// Result of checking `lhs <= rhs + slack`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundCheck {
    pub lhs: f64,
    pub rhs: f64,
    pub slack: f64,
    pub pass: bool,
}

impl BoundCheck {
    fn new(lhs: f64, rhs: f64, slack: f64) -> Result<Self> {
        if !lhs.is_finite() || !rhs.is_finite() {
            return Err(Error::numeric(format!("non-finite bound terms: lhs = {lhs}, rhs = {rhs}")));
        }
        Ok(BoundCheck {
            lhs,
            rhs,
            slack,
            pass: lhs <= rhs + slack,
        })
    }
}

/// Transport-entropy inequality at noise level `t`, with reference
/// `q = N(0, 1 - abar_t)` and perturbed `q~ = N(m, scale^2 (1 - abar_t))`:
/// `W1(q, q~) <= sqrt(2 (1 - abar_t) KL(q~ || q))`.
pub fn verify_talagrand(m: f64, scale: f64, t: usize, sched: &NoiseSchedule) -> Result<BoundCheck> {
    ensure!(t >= 1 && t <= sched.steps(), "step {t} outside 1..={}", sched.steps());
    ensure!(scale > 0.0 && scale.is_finite() && m.is_finite(), "need finite m and scale > 0");
    let var = 1.0 - sched.alpha_bar(t);
    if var <= 0.0 {
        return Err(Error::numeric(format!("reference variance vanishes at step {t}")));
    }
    let s = var.sqrt();
    let lhs = gaussian_w1(0.0, s, m, scale * s)?;
    let rhs = (2.0 * var * gaussian_kl(m, scale * s, 0.0, s)?).sqrt();
    BoundCheck::new(lhs, rhs, 1e-12)
}

/// The inequality on a `points x points` grid: `m` evenly spaced in
/// `[-m_max, m_max]` and `t` evenly spaced over `1..=T`.
pub fn talagrand_grid(
    sched: &NoiseSchedule,
    m_max: f64,
    scale: f64,
    points: usize,
) -> Result<Vec<(f64, usize, BoundCheck)>> {
    ensure!(points >= 2, "grid needs at least two points per axis");
    let big_t = sched.steps();
    let mut out = Vec::with_capacity(points * points);
    for i in 0..points {
        let m = -m_max + 2.0 * m_max * i as f64 / (points - 1) as f64;
        for j in 0..points {
            let t = 1 + (j * (big_t - 1)) / (points - 1);
            out.push((m, t, verify_talagrand(m, scale, t, sched)?));
        }
    }
    Ok(out)
}

/// Compare the one-step sample distance to data with `sqrt(T * loss)`:
/// `W1(f(x_T, T), data) <= sqrt(T * final_cd_loss) + 0.1`, using `n` samples.
pub fn verify_cd_bound(
    model: &ConsistencyModel,
    sched: &NoiseSchedule,
    data: &Tensor,
    final_cd_loss: f64,
    n: usize,
    seed: u64,
) -> Result<BoundCheck> {
    ensure!(data.ndim() == 2 && data.cols() == 1, "bound check needs 1-D data");
    ensure!(model.data_dim() == 1, "bound check needs a 1-D model");
    ensure!(final_cd_loss >= 0.0, "loss must be non-negative, got {final_cd_loss}");
    let samples = cm_sample(model, 1, n, sched, seed)?;
    let lhs = w1_1d(samples.data(), data.data())?;
    let rhs = (sched.steps() as f64 * final_cd_loss).sqrt();
    BoundCheck::new(lhs, rhs, 0.1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::ScheduleKind;

    #[test]
    fn equal_variance_shift_is_exact() {
        // Equal variances: W1 = |m| and sqrt(2 var KL) = |m|.
        let s = NoiseSchedule::build(ScheduleKind::Cosine, 50).unwrap();
        let c = verify_talagrand(0.7, 1.0, 30, &s).unwrap();
        assert!((c.lhs - 0.7).abs() < 1e-12 && (c.rhs - 0.7).abs() < 1e-12);
        assert!(c.pass);
    }

    #[test]
    fn grid_holds_for_scales() {
        let s = NoiseSchedule::build(ScheduleKind::Cosine, 100).unwrap();
        for scale in [0.5, 1.0, 2.0] {
            for (m, t, c) in talagrand_grid(&s, 3.0, scale, 10).unwrap() {
                assert!(c.pass, "m = {m}, t = {t}, scale = {scale}: {c:?}");
            }
        }
    }

    #[test]
    fn rejects_step_zero() {
        let s = NoiseSchedule::build(ScheduleKind::Cosine, 10).unwrap();
        assert!(verify_talagrand(0.0, 1.0, 0, &s).is_err());
    }
}
