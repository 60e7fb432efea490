//! Reverse-process samplers over uniform-stride timestep sub-schedules.
//!
//! Every sampler is expressed as a pure update on `(x_{t_next}, eps_hat)` plus
//! a thin wrapper that queries the model, so the updates can be checked
//! against each other without a network in the loop.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::models::NoisePredictor;
use crate::rng::SeededRng;
use crate::schedule::NoiseSchedule;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerKind {
    Ancestral,
    Ddim,
    DpmSolver,
    /// Epsilon scaling wrapped around a base sampler.
    Es,
}

impl std::str::FromStr for SamplerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ancestral" | "iddpm" => Ok(SamplerKind::Ancestral),
            "ddim" => Ok(SamplerKind::Ddim),
            "dpm_solver" | "dpm-solver" => Ok(SamplerKind::DpmSolver),
            "es" => Ok(SamplerKind::Es),
            other => Err(Error::contract(format!("unknown sampler '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimestepSelection {
    #[default]
    UniformStride,
}

/// Noise-scaling factor `lambda(t)` for epsilon scaling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum EsSchedule {
    Constant(f64),
    /// One value per step `t = 1..=T`.
    PerStep(Vec<f64>),
}

impl Default for EsSchedule {
    fn default() -> Self {
        EsSchedule::Constant(0.99)
    }
}

impl EsSchedule {
    pub fn lambda(&self, t: usize) -> Result<f64> {
        let v = match self {
            EsSchedule::Constant(v) => *v,
            EsSchedule::PerStep(vs) => *vs.get(t.wrapping_sub(1)).ok_or_else(|| {
                Error::contract(format!("ES schedule has no entry for step {t}"))
            })?,
        };
        ensure!(v > 0.0 && v <= 1.0, "ES scale {v} at step {t} outside (0, 1]");
        Ok(v)
    }

    pub fn validate(&self, steps: usize) -> Result<()> {
        match self {
            EsSchedule::Constant(_) => self.lambda(1).map(|_| ()),
            EsSchedule::PerStep(vs) => {
                ensure!(
                    vs.len() == steps,
                    "ES schedule has {} entries, expected {steps}",
                    vs.len()
                );
                (1..=steps).try_for_each(|t| self.lambda(t).map(|_| ()))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub kind: SamplerKind,
    pub nfe: usize,
    pub timestep_selection: TimestepSelection,
    pub es_lambda: EsSchedule,
    /// Sampler wrapped by ES.
    pub es_base: SamplerKind,
    pub solver_order: u8,
    pub seed: u64,
    /// Clip each coordinate of the denoised estimate `x0_hat` to
    /// `[-bound, bound]` and re-derive the noise prediction from it before
    /// every update. Off by default.
    pub clip_denoised: Option<f64>,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            kind: SamplerKind::Ddim,
            nfe: 10,
            timestep_selection: TimestepSelection::UniformStride,
            es_lambda: EsSchedule::default(),
            es_base: SamplerKind::Ancestral,
            solver_order: 2,
            seed: 0,
            clip_denoised: None,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self, steps: usize) -> Result<()> {
        ensure!(
            self.nfe >= 1 && self.nfe <= steps,
            "nfe {} outside 1..={steps}",
            self.nfe
        );
        ensure!(
            self.solver_order == 1 || self.solver_order == 2,
            "solver order must be 1 or 2, got {}",
            self.solver_order
        );
        if let Some(b) = self.clip_denoised {
            ensure!(b > 0.0 && b.is_finite(), "clip bound must be positive and finite, got {b}");
        }
        if self.kind == SamplerKind::Es {
            ensure!(self.es_base != SamplerKind::Es, "ES cannot wrap itself");
            self.es_lambda.validate(steps)?;
        }
        Ok(())
    }
}

/// Decreasing time grid `T = tau_nfe > ... > tau_0 = 0` with
/// `tau_i = floor(i T / nfe)`.
pub fn timesteps(nfe: usize, steps: usize) -> Result<Vec<usize>> {
    ensure!(nfe >= 1 && nfe <= steps, "nfe {nfe} outside 1..={steps}");
    Ok((0..=nfe).rev().map(|i| i * steps / nfe).collect())
}

fn check_pair(t_next: usize, t: usize, sched: &NoiseSchedule) -> Result<()> {
    ensure!(t < t_next, "reverse step needs t < t_next, got t = {t}, t_next = {t_next}");
    ensure!(t_next <= sched.steps(), "step {t_next} outside 1..={}", sched.steps());
    Ok(())
}

fn check_eps(x: &Tensor, eps: &Tensor) -> Result<()> {
    if x.shape() != eps.shape() {
        return Err(Error::dims("sampler", x.shape(), eps.shape()));
    }
    Ok(())
}

/// Ancestral update with the effective per-step `alpha = abar_t / abar_{t_next}`
/// and reverse variance `1 - alpha`.
pub fn ancestral_update(
    x_next: &Tensor,
    eps_hat: &Tensor,
    t_next: usize,
    t: usize,
    noise: &Tensor,
    sched: &NoiseSchedule,
) -> Result<Tensor> {
    check_pair(t_next, t, sched)?;
    check_eps(x_next, eps_hat)?;
    check_eps(x_next, noise)?;
    let ab_next = sched.alpha_bar(t_next);
    let alpha = ab_next / sched.alpha_bar(t);
    if ab_next >= 1.0 {
        return Err(Error::numeric(format!("1 - alpha_bar_{t_next} = 0 in ancestral step")));
    }
    let inv_sqrt_alpha = 1.0 / alpha.sqrt();
    let eps_coef = (1.0 - alpha) / (1.0 - ab_next).sqrt();
    let sigma = (1.0 - alpha).sqrt();
    let mut out = x_next.clone();
    for ((o, &e), &z) in out.data_mut().iter_mut().zip(eps_hat.data()).zip(noise.data()) {
        *o = inv_sqrt_alpha * (*o - eps_coef * e) + sigma * z;
    }
    Ok(out)
}

/// Deterministic DDIM (`eta = 0`) update.
pub fn ddim_update(x_next: &Tensor, eps_hat: &Tensor, t_next: usize, t: usize, sched: &NoiseSchedule) -> Result<Tensor> {
    check_pair(t_next, t, sched)?;
    check_eps(x_next, eps_hat)?;
    let (ab_next, ab) = (sched.alpha_bar(t_next), sched.alpha_bar(t));
    if ab_next <= 0.0 {
        return Err(Error::numeric(format!("alpha_bar_{t_next} = 0 in DDIM step")));
    }
    let (s_next, s) = ((1.0 - ab_next).sqrt(), (1.0 - ab).sqrt());
    let (a_next, a) = (ab_next.sqrt(), ab.sqrt());
    x_next.zip_map(eps_hat, "ddim", |x, e| {
        let x0 = (x - s_next * e) / a_next;
        a * x0 + s * e
    })
}

/// Half log-SNR `lambda(t) = log(sqrt(abar) / sqrt(1 - abar))`.
fn half_log_snr(sched: &NoiseSchedule, t: usize) -> f64 {
    let ab = sched.alpha_bar(t);
    0.5 * (ab.ln() - (1.0 - ab).ln())
}

/// Previous noise prediction kept by the second-order solver.
#[derive(Debug, Clone, PartialEq)]
pub struct DpmHistory {
    pub t: usize,
    pub eps: Tensor,
}

/// DPM-Solver update in log-SNR time. Order 1 is the exponential-integrator
/// Euler step; order 2 adds the multistep correction from the previous
/// prediction. Falls back to order 1 without history and on the final step
/// to `t = 0`, where the log-SNR is infinite.
pub fn dpm_solver_update(
    x_next: &Tensor,
    eps_hat: &Tensor,
    t_next: usize,
    t: usize,
    order: u8,
    history: Option<&DpmHistory>,
    sched: &NoiseSchedule,
) -> Result<Tensor> {
    check_pair(t_next, t, sched)?;
    check_eps(x_next, eps_hat)?;
    ensure!(order == 1 || order == 2, "solver order must be 1 or 2, got {order}");
    let ab_next = sched.alpha_bar(t_next);
    if ab_next <= 0.0 || ab_next >= 1.0 {
        return Err(Error::numeric(format!("log-SNR undefined at step {t_next}")));
    }
    let (a_s, s_s) = (ab_next.sqrt(), (1.0 - ab_next).sqrt());
    let ab = sched.alpha_bar(t);
    let a_t = ab.sqrt();

    // sigma_t * (e^h - 1), written without e^h when sigma_t = 0.
    let phi = if ab >= 1.0 {
        a_t * s_s / a_s
    } else {
        let h = half_log_snr(sched, t) - half_log_snr(sched, t_next);
        (1.0 - ab).sqrt() * h.exp_m1()
    };
    let ratio = a_t / a_s;

    let correction = match history {
        Some(prev) if order == 2 && ab < 1.0 => {
            check_eps(eps_hat, &prev.eps)?;
            ensure!(prev.t > t_next, "history step {} must precede {t_next}", prev.t);
            let h = half_log_snr(sched, t) - half_log_snr(sched, t_next);
            let h_prev = half_log_snr(sched, t_next) - half_log_snr(sched, prev.t);
            Some((0.5 * h / h_prev, &prev.eps))
        }
        _ => None,
    };

    let mut out = x_next.clone();
    for (i, (o, &e)) in out.data_mut().iter_mut().zip(eps_hat.data()).enumerate() {
        let d = match correction {
            Some((c, prev)) => e + c * (e - prev.data()[i]),
            None => e,
        };
        *o = ratio * *o - phi * d;
    }
    Ok(out)
}

/// Scale a noise prediction by `lambda(t)`.
pub fn es_wrap(eps_hat: &Tensor, t: usize, schedule: &EsSchedule) -> Result<Tensor> {
    let lambda = schedule.lambda(t)?;
    Ok(eps_hat.scale(lambda))
}

/// Noise prediction consistent with the clipped denoised estimate:
/// `x0 = clip((x - sqrt(1 - abar) eps) / sqrt(abar))`, then
/// `eps' = (x - sqrt(abar) x0) / sqrt(1 - abar)`. Unchanged where no
/// coordinate of `x0` leaves `[-bound, bound]`.
pub fn clip_denoised(x: &Tensor, eps_hat: &Tensor, t: usize, bound: f64, sched: &NoiseSchedule) -> Result<Tensor> {
    ensure!(t >= 1 && t <= sched.steps(), "step {t} outside 1..={}", sched.steps());
    let ab = sched.alpha_bar(t);
    let (a, s) = (ab.sqrt(), (1.0 - ab).sqrt());
    if s == 0.0 {
        return Err(Error::numeric(format!("no noise at step {t}; cannot re-derive the prediction")));
    }
    x.zip_map(eps_hat, "clip_denoised", |xv, ev| {
        let x0 = (xv - s * ev) / a;
        let c = x0.clamp(-bound, bound);
        if c == x0 {
            ev
        } else {
            (xv - a * c) / s
        }
    })
}

pub fn ancestral_step(
    model: &dyn NoisePredictor,
    x_next: &Tensor,
    t_next: usize,
    t: usize,
    noise: &Tensor,
    sched: &NoiseSchedule,
) -> Result<Tensor> {
    check_pair(t_next, t, sched)?;
    let eps = model.predict_eps(x_next, t_next)?;
    ancestral_update(x_next, &eps, t_next, t, noise, sched)
}

pub fn ddim_step(model: &dyn NoisePredictor, x_next: &Tensor, t_next: usize, t: usize, sched: &NoiseSchedule) -> Result<Tensor> {
    check_pair(t_next, t, sched)?;
    let eps = model.predict_eps(x_next, t_next)?;
    ddim_update(x_next, &eps, t_next, t, sched)
}

/// One solver step; returns the new state and the history entry for the next step.
pub fn dpm_solver_step(
    model: &dyn NoisePredictor,
    x_next: &Tensor,
    t_next: usize,
    t: usize,
    order: u8,
    history: Option<&DpmHistory>,
    sched: &NoiseSchedule,
) -> Result<(Tensor, DpmHistory)> {
    check_pair(t_next, t, sched)?;
    let eps = model.predict_eps(x_next, t_next)?;
    let x = dpm_solver_update(x_next, &eps, t_next, t, order, history, sched)?;
    Ok((x, DpmHistory { t: t_next, eps }))
}

/// States visited by a batch of chains, from `t = T` down to `t = 0`.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub states: Vec<(usize, Tensor)>,
    pub config: SamplerConfig,
}

impl Trajectory {
    /// Samples at `t = 0`.
    pub fn final_samples(&self) -> &Tensor {
        &self.states.last().expect("trajectory is never empty").1
    }

    pub fn into_final(mut self) -> Tensor {
        self.states.pop().expect("trajectory is never empty").1
    }
}

/// Per-chain Gaussian draws; chain `i` uses its own stream so results do not
/// depend on how chains are batched.
struct ChainNoise {
    streams: Vec<SeededRng>,
    dim: usize,
}

impl ChainNoise {
    fn new(seed: u64, n: usize, dim: usize) -> Self {
        ChainNoise {
            streams: (0..n as u64).map(|i| SeededRng::with_stream(seed, i)).collect(),
            dim,
        }
    }

    fn draw(&mut self) -> Tensor {
        let mut data = Vec::with_capacity(self.streams.len() * self.dim);
        for rng in &mut self.streams {
            data.extend((0..self.dim).map(|_| rng.normal()));
        }
        Tensor::new(vec![self.streams.len(), self.dim], data).expect("noise shape")
    }
}

/// Draw `n` chains from `x_T ~ N(0, I)` down to `t = 0`.
pub fn sample(
    model: &dyn NoisePredictor,
    cfg: &SamplerConfig,
    n: usize,
    dim: usize,
    sched: &NoiseSchedule,
) -> Result<Trajectory> {
    ensure!(n >= 1 && dim >= 1, "need at least one chain of positive dimension");
    cfg.validate(sched.steps())?;
    let grid = timesteps(cfg.nfe, sched.steps())?;
    let mut noise = ChainNoise::new(cfg.seed, n, dim);
    let mut x = noise.draw();
    let mut states = vec![(grid[0], x.clone())];
    let mut history: Option<DpmHistory> = None;

    let (base, scaled) = match cfg.kind {
        SamplerKind::Es => (cfg.es_base, true),
        k => (k, false),
    };

    for pair in grid.windows(2) {
        let (t_next, t) = (pair[0], pair[1]);
        let mut eps = model.predict_eps(&x, t_next)?;
        if scaled {
            eps = es_wrap(&eps, t_next, &cfg.es_lambda)?;
        }
        if let Some(bound) = cfg.clip_denoised {
            eps = clip_denoised(&x, &eps, t_next, bound, sched)?;
        }
        x = match base {
            SamplerKind::Ancestral => {
                let z = if t > 0 {
                    noise.draw()
                } else {
                    Tensor::zeros(&[n, dim])
                };
                ancestral_update(&x, &eps, t_next, t, &z, sched)?
            }
            SamplerKind::Ddim => ddim_update(&x, &eps, t_next, t, sched)?,
            SamplerKind::DpmSolver => {
                let out = dpm_solver_update(&x, &eps, t_next, t, cfg.solver_order, history.as_ref(), sched)?;
                history = Some(DpmHistory { t: t_next, eps });
                out
            }
            SamplerKind::Es => unreachable!("validated above"),
        };
        if x.has_nan() {
            return Err(Error::numeric(format!("NaN in sampler state at step {t}")));
        }
        states.push((t, x.clone()));
    }
    Ok(Trajectory {
        states,
        config: cfg.clone(),
    })
}
