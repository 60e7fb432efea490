//! Noise-prediction training, standard and with adversarial input
//! perturbation of the noisy sample.
//!
//! The adversarial trainer reuses a single backward pass per inner step for
//! both the perturbation gradient and the parameter gradient, so `K` inner
//! steps cost `K` forward/backward passes and make `K` parameter updates.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::data_eval::{sliced_wasserstein, w1_1d, Dataset, MetricsReport, Provenance};
use crate::error::{ensure, Error, Result};
use crate::models::{EmaPair, EpsModel, EpsNet, NoisePredictor, Parameterized};
use crate::optim::{Optimizer, OptimizerKind};
use crate::rng::{RngState, SeededRng};
use crate::samplers::{sample, SamplerConfig};
use crate::schedule::NoiseSchedule;
use crate::tensor::Tensor;

/// Gradient norms at or below this leave the perturbation unchanged.
pub const GRAD_NORM_FLOOR: f64 = 1e-12;

/// Per-step loss weight `lambda(t)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LossWeight {
    Constant(f64),
    /// One weight per step. Indexed by `t` directly, so entry 0 is the weight
    /// of step 0 (used by consistency losses) and entry `T` the last step.
    PerStep(Vec<f64>),
}

impl Default for LossWeight {
    fn default() -> Self {
        LossWeight::Constant(1.0)
    }
}

impl LossWeight {
    pub fn at(&self, t: usize) -> Result<f64> {
        let w = match self {
            LossWeight::Constant(w) => *w,
            LossWeight::PerStep(ws) => *ws
                .get(t)
                .ok_or_else(|| Error::contract(format!("no loss weight for step {t}")))?,
        };
        ensure!(w.is_finite() && w >= 0.0, "loss weight {w} at step {t} must be finite and non-negative");
        Ok(w)
    }

    pub(crate) fn column(&self, steps: &[usize]) -> Result<Tensor> {
        Tensor::column(steps.iter().map(|&t| self.at(t)).collect::<Result<Vec<_>>>()?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimestepSampling {
    /// One step shared by the whole batch.
    #[default]
    PerBatch,
    PerExample,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturbNorm {
    #[default]
    L2,
}

/// Granularity of the perturbation-gradient normalization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturbScope {
    /// Each row is normalized by its own gradient norm, so every example
    /// gets its own perturbation budget.
    #[default]
    PerSample,
    /// The whole batch tensor shares one norm.
    Batch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeltaReset {
    #[default]
    PerBatch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AtConfig {
    /// Inner steps per batch, each also a parameter update.
    pub k: usize,
    /// Perturbation step size.
    pub adv_lr: f64,
    pub norm: PerturbNorm,
    pub scope: PerturbScope,
    pub delta_reset: DeltaReset,
    /// Optional projection radius for each perturbation.
    pub radius: Option<f64>,
}

impl Default for AtConfig {
    fn default() -> Self {
        AtConfig {
            k: 3,
            adv_lr: 0.1,
            norm: PerturbNorm::L2,
            scope: PerturbScope::default(),
            delta_reset: DeltaReset::PerBatch,
            radius: None,
        }
    }
}

impl AtConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.k >= 1, "adversarial steps must be at least 1");
        ensure!(
            self.adv_lr > 0.0 && self.adv_lr.is_finite(),
            "adversarial step size must be positive, got {}",
            self.adv_lr
        );
        if let Some(r) = self.radius {
            ensure!(r > 0.0 && r.is_finite(), "projection radius must be positive, got {r}");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    /// Total number of parameter updates.
    pub iterations: u64,
    pub seed: u64,
    pub loss_weight: LossWeight,
    pub optimizer: OptimizerKind,
    pub timesteps: TimestepSampling,
    pub ema_mu: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            batch_size: 256,
            iterations: 10_000,
            seed: 0,
            loss_weight: LossWeight::default(),
            optimizer: OptimizerKind::default(),
            timesteps: TimestepSampling::PerBatch,
            ema_mu: 0.999,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.lr > 0.0 && self.lr.is_finite(), "learning rate must be positive, got {}", self.lr);
        ensure!(self.batch_size >= 1, "batch size must be positive");
        ensure!((0.0..=1.0).contains(&self.ema_mu), "EMA rate {} outside [0, 1]", self.ema_mu);
        if let LossWeight::Constant(_) = self.loss_weight {
            self.loss_weight.at(0)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TrainMode {
    Standard,
    Adversarial(AtConfig),
}

impl TrainMode {
    fn inner_steps(&self) -> usize {
        match self {
            TrainMode::Standard => 1,
            TrainMode::Adversarial(at) => at.k,
        }
    }
}

/// Noisy inputs `sqrt(abar_t) x0 + sqrt(1 - abar_t) eps` with per-row steps.
pub(crate) fn noisy_rows(x0: &Tensor, steps: &[usize], eps: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    if x0.shape() != eps.shape() {
        return Err(Error::dims("noisy_rows", x0.shape(), eps.shape()));
    }
    ensure!(x0.ndim() == 2 && x0.rows() == steps.len(), "need one step per row");
    let mut out = x0.clone();
    let d = x0.cols();
    for (i, &t) in steps.iter().enumerate() {
        sched.check_step(t)?;
        let ab = sched.alpha_bar(t);
        let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
        for j in i * d..(i + 1) * d {
            out.data_mut()[j] = a * x0.data()[j] + b * eps.data()[j];
        }
    }
    Ok(out)
}

/// Per-row `1 / sqrt(1 - abar_t)`; zero for rows whose perturbation is zero
/// when `abar_t = 1`, an error otherwise.
fn target_scales(steps: &[usize], delta: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    let mut scales = Vec::with_capacity(steps.len());
    for (i, &t) in steps.iter().enumerate() {
        let var = 1.0 - sched.alpha_bar(t);
        if var > 0.0 {
            scales.push(1.0 / var.sqrt());
        } else if delta.row(i).iter().all(|&v| v == 0.0) {
            scales.push(0.0);
        } else {
            return Err(Error::numeric(format!(
                "perturbed target undefined at step {t}: 1 - alpha_bar = 0"
            )));
        }
    }
    Tensor::column(scales)
}

fn weighted_row_mean<'t>(per_row: Var<'t>, weights: &Tensor) -> Result<Var<'t>> {
    let w = per_row.tape().constant(weights.clone());
    per_row.mul(w)?.mean()
}

/// Batch mean of `lambda(t) ||eps_theta(x_t + delta, t) - eps - delta / sqrt(1 - abar_t)||^2`.
/// With `delta = 0` this is the standard noise-prediction loss.
#[allow(clippy::too_many_arguments)]
pub fn at_loss_graph<'t, N: EpsNet<'t>>(
    net: &N,
    x0: &Tensor,
    steps: &[usize],
    eps: &Tensor,
    delta: Var<'t>,
    weights: &Tensor,
    sched: &NoiseSchedule,
) -> Result<Var<'t>> {
    let tape = delta.tape();
    let xt = noisy_rows(x0, steps, eps, sched)?;
    let dv = delta.value();
    if dv.shape() != xt.shape() {
        return Err(Error::dims("at_loss", xt.shape(), dv.shape()));
    }
    let scales = tape.constant(target_scales(steps, &dv, sched)?);
    let input = tape.constant(xt).add(delta)?;
    let target = tape.constant(eps.clone()).add(delta.mul(scales)?)?;
    let resid = net.eps(input, steps)?.sub(target)?;
    weighted_row_mean(resid.square()?.sum_cols()?, weights)
}

/// Batch mean of `lambda(t) ||eps_theta(x_t, t) - eps||^2`.
pub fn standard_loss_graph<'t, N: EpsNet<'t>>(
    net: &N,
    tape: &'t Tape,
    x0: &Tensor,
    steps: &[usize],
    eps: &Tensor,
    weights: &Tensor,
    sched: &NoiseSchedule,
) -> Result<Var<'t>> {
    let xt = noisy_rows(x0, steps, eps, sched)?;
    let resid = net.eps(tape.constant(xt), steps)?.sub(tape.constant(eps.clone()))?;
    weighted_row_mean(resid.square()?.sum_cols()?, weights)
}

fn check_step_range(t: usize, sched: &NoiseSchedule) -> Result<()> {
    ensure!(t >= 1 && t <= sched.steps(), "training step {t} outside 1..={}", sched.steps());
    Ok(())
}

/// Standard loss at a single step with unit weight.
pub fn standard_loss(model: &EpsModel, x0: &Tensor, t: usize, eps: &Tensor, sched: &NoiseSchedule) -> Result<f64> {
    check_step_range(t, sched)?;
    let tape = Tape::new();
    let net = model.bind(&tape, false);
    let steps = vec![t; x0.rows()];
    let w = Tensor::ones(&[x0.rows(), 1]);
    standard_loss_graph(&net, &tape, x0, &steps, eps, &w, sched)?.value().item()
}

/// Perturbed loss at a single step with unit weight.
pub fn at_loss(
    model: &EpsModel,
    x0: &Tensor,
    t: usize,
    eps: &Tensor,
    delta: &Tensor,
    sched: &NoiseSchedule,
) -> Result<f64> {
    check_step_range(t, sched)?;
    let tape = Tape::new();
    let net = model.bind(&tape, false);
    let steps = vec![t; x0.rows()];
    let w = Tensor::ones(&[x0.rows(), 1]);
    let d = tape.constant(delta.clone());
    at_loss_graph(&net, x0, &steps, eps, d, &w, sched)?.value().item()
}

/// One normalized ascent step `delta + alpha g / ||g||`. Rows (or the whole
/// batch) with gradient norm at most [`GRAD_NORM_FLOOR`] are left unchanged.
pub fn at_inner_ascent(grad: &Tensor, delta: &Tensor, alpha: f64, scope: PerturbScope) -> Result<Tensor> {
    if grad.shape() != delta.shape() {
        return Err(Error::dims("at_inner_ascent", grad.shape(), delta.shape()));
    }
    ensure!(alpha > 0.0, "ascent step size must be positive, got {alpha}");
    let mut out = delta.clone();
    match scope {
        PerturbScope::Batch => {
            let n = grad.norm();
            if n > GRAD_NORM_FLOOR {
                out.axpy(alpha / n, grad)?;
            }
        }
        PerturbScope::PerSample => {
            ensure!(grad.ndim() == 2, "per-sample ascent needs a [batch, dim] gradient");
            for (i, n) in grad.row_norms().into_iter().enumerate() {
                if n > GRAD_NORM_FLOOR {
                    let g = grad.row(i);
                    for (o, &gv) in out.row_mut(i).iter_mut().zip(g) {
                        *o += alpha * gv / n;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Project onto the ball of radius `radius` (per row or for the whole batch).
pub fn project_radius(delta: &mut Tensor, radius: f64, scope: PerturbScope) {
    match scope {
        PerturbScope::Batch => {
            let n = delta.norm();
            if n > radius {
                *delta = delta.scale(radius / n);
            }
        }
        PerturbScope::PerSample => {
            for (i, n) in delta.row_norms().into_iter().enumerate() {
                if n > radius {
                    delta.row_mut(i).iter_mut().for_each(|v| *v *= radius / n);
                }
            }
        }
    }
}

/// Largest perturbation norm in the batch under the given scope.
pub(crate) fn delta_magnitude(delta: &Tensor, scope: PerturbScope) -> f64 {
    match scope {
        PerturbScope::Batch => delta.norm(),
        PerturbScope::PerSample => delta.row_norms().into_iter().fold(0.0, f64::max),
    }
}

/// Outcome of one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    /// Step of the first row (all rows under per-batch sampling).
    pub t: usize,
    /// Loss of the last inner step, evaluated before its update.
    pub loss: f64,
    pub losses: Vec<f64>,
    /// Perturbation magnitude after the final ascent.
    pub delta_norm: f64,
    pub updates: usize,
}

/// Sample `n` rows from the dataset with replacement.
pub(crate) fn draw_batch(data: &Tensor, n: usize, rng: &mut SeededRng) -> Tensor {
    let idx: Vec<usize> = (0..n).map(|_| rng.int_inclusive(0, data.rows() - 1)).collect();
    data.gather_rows(&idx).expect("indices in range")
}

pub(crate) fn draw_steps(n: usize, lo: usize, hi: usize, mode: TimestepSampling, rng: &mut SeededRng) -> Vec<usize> {
    match mode {
        TimestepSampling::PerBatch => vec![rng.int_inclusive(lo, hi); n],
        TimestepSampling::PerExample => (0..n).map(|_| rng.int_inclusive(lo, hi)).collect(),
    }
}

/// Serializable training position for checkpoints.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainerState {
    pub updates: u64,
    pub batches: u64,
    pub rng: RngState,
    pub optimizer_step: u64,
    pub moments: (Vec<f64>, Vec<f64>),
}

/// Noise-prediction trainer: online/EMA models, optimizer and data RNG.
#[derive(Debug, Clone)]
pub struct DpmTrainer {
    pub ema: EmaPair<EpsModel>,
    opt: Optimizer,
    rng: SeededRng,
    updates: u64,
    batches: u64,
}

impl DpmTrainer {
    pub fn new(model: EpsModel, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let opt = Optimizer::new(cfg.optimizer, cfg.lr, &model.param_shapes());
        Ok(DpmTrainer {
            ema: EmaPair::new(model, cfg.ema_mu)?,
            opt,
            rng: SeededRng::with_stream(cfg.seed, 1),
            updates: 0,
            batches: 0,
        })
    }

    /// Rebuild from checkpointed parts.
    pub fn restore(ema: EmaPair<EpsModel>, cfg: &TrainConfig, state: &TrainerState) -> Result<Self> {
        let mut t = Self::new(ema.online.clone(), cfg)?;
        t.ema = EmaPair::from_parts(ema.online, ema.target, cfg.ema_mu)?;
        t.opt.restore(state.optimizer_step, &state.moments.0, &state.moments.1)?;
        t.rng = SeededRng::from_state(&state.rng).ok_or_else(|| Error::contract("corrupt RNG state"))?;
        t.updates = state.updates;
        t.batches = state.batches;
        Ok(t)
    }

    pub fn state(&self) -> TrainerState {
        TrainerState {
            updates: self.updates,
            batches: self.batches,
            rng: self.rng.state(),
            optimizer_step: self.opt.steps_taken(),
            moments: self.opt.moments(),
        }
    }

    pub fn updates(&self) -> u64 {
        self.updates
    }

    pub fn batches(&self) -> u64 {
        self.batches
    }

    pub fn model(&self) -> &EpsModel {
        &self.ema.online
    }

    pub fn ema_model(&self) -> &EpsModel {
        &self.ema.target
    }

    /// Train on one batch. The steps, clean data and noise are fixed for the
    /// batch; the perturbation starts at zero and is refined by ascent
    /// between parameter updates. At most `max_updates` updates are made.
    pub fn train_step(
        &mut self,
        x0: &Tensor,
        mode: &TrainMode,
        cfg: &TrainConfig,
        sched: &NoiseSchedule,
        max_updates: usize,
    ) -> Result<StepReport> {
        ensure!(x0.ndim() == 2 && x0.rows() >= 1, "batch must be a non-empty [batch, dim] tensor");
        if let TrainMode::Adversarial(at) = mode {
            at.validate()?;
        }
        let n = x0.rows();
        let steps = draw_steps(n, 1, sched.steps(), cfg.timesteps, &mut self.rng);
        let eps = self.rng.normal_tensor(x0.shape());
        let weights = cfg.loss_weight.column(&steps)?;
        let mut delta = Tensor::zeros(x0.shape());
        let inner = mode.inner_steps().min(max_updates.max(1));
        let mut losses = Vec::with_capacity(inner);

        for _ in 0..inner {
            let result = self.inner_update(x0, &steps, &eps, &mut delta, &weights, mode, sched);
            match result {
                Ok(loss) => losses.push(loss),
                Err(e) => {
                    let scope = match mode {
                        TrainMode::Adversarial(at) => at.scope,
                        TrainMode::Standard => PerturbScope::Batch,
                    };
                    return Err(Error::numeric(format!(
                        "{e} (update {}, t = {}, |delta| = {:e}, last loss = {:?})",
                        self.updates,
                        steps[0],
                        delta_magnitude(&delta, scope),
                        losses.last()
                    )));
                }
            }
        }
        self.batches += 1;
        let delta_norm = match mode {
            TrainMode::Adversarial(at) => delta_magnitude(&delta, at.scope),
            TrainMode::Standard => 0.0,
        };
        Ok(StepReport {
            t: steps[0],
            loss: *losses.last().expect("at least one inner step"),
            losses,
            delta_norm,
            updates: inner,
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn inner_update(
        &mut self,
        x0: &Tensor,
        steps: &[usize],
        eps: &Tensor,
        delta: &mut Tensor,
        weights: &Tensor,
        mode: &TrainMode,
        sched: &NoiseSchedule,
    ) -> Result<f64> {
        let (loss, grads, g_delta) = {
            let tape = Tape::new();
            let net = self.ema.online.bind(&tape, true);
            let adversarial = matches!(mode, TrainMode::Adversarial(_));
            let dv = if adversarial {
                tape.leaf(delta.clone())
            } else {
                tape.constant(delta.clone())
            };
            let loss = at_loss_graph(&net, x0, steps, eps, dv, weights, sched)?;
            let mut grads = tape.backward(loss)?;
            let pg: Vec<Tensor> = net.param_vars().into_iter().map(|v| grads.take(v)).collect();
            let gd = adversarial.then(|| grads.take(dv));
            (loss.value().item()?, pg, gd)
        };
        if let (TrainMode::Adversarial(at), Some(g)) = (mode, g_delta) {
            *delta = at_inner_ascent(&g, delta, at.adv_lr, at.scope)?;
            if let Some(r) = at.radius {
                project_radius(delta, r, at.scope);
            }
        }
        self.opt.apply(self.ema.online.params_mut(), &grads)?;
        if !self.ema.online.params_finite() {
            return Err(Error::numeric("non-finite parameters after update"));
        }
        self.ema.update()?;
        self.updates += 1;
        Ok(loss)
    }

    /// Draw batches from `data` until at least `until` updates have been
    /// made, never exceeding `cfg.iterations`. Stops only at batch
    /// boundaries, so splitting a run into several calls does not change it.
    pub fn run(
        &mut self,
        data: &Tensor,
        mode: &TrainMode,
        cfg: &TrainConfig,
        sched: &NoiseSchedule,
        until: u64,
        mut on_batch: impl FnMut(&DpmTrainer, &StepReport) -> Result<()>,
    ) -> Result<()> {
        ensure!(data.ndim() == 2 && data.rows() >= 1, "training data must be a non-empty [n, dim] tensor");
        let until = until.min(cfg.iterations);
        while self.updates < until {
            let x0 = draw_batch(data, cfg.batch_size, &mut self.rng);
            let remaining = (cfg.iterations - self.updates) as usize;
            let report = self.train_step(&x0, mode, cfg, sched, remaining)?;
            on_batch(self, &report)?;
        }
        Ok(())
    }
}

/// Sample-quality evaluation attached to a training run.
#[derive(Debug, Clone)]
pub struct EvalSpec<'a> {
    /// Reference data in normalized coordinates.
    pub reference: &'a Tensor,
    pub sampler: SamplerConfig,
    pub n_samples: usize,
    /// Projections for the sliced distance (ignored for 1-D data).
    pub n_proj: usize,
    pub seed: u64,
}

/// Distance between model samples and the reference: exact `W1` in one
/// dimension, sliced `W1` otherwise.
pub fn sample_distance(model: &dyn NoisePredictor, spec: &EvalSpec<'_>, sched: &NoiseSchedule) -> Result<f64> {
    let dim = spec.reference.cols();
    let samples = sample(model, &spec.sampler, spec.n_samples, dim, sched)?.into_final();
    if dim == 1 {
        w1_1d(samples.data(), spec.reference.data())
    } else {
        sliced_wasserstein(&samples, spec.reference, spec.n_proj, spec.seed)
    }
}

/// Name of the metric produced by [`sample_distance`].
pub fn sample_distance_name(dim: usize) -> &'static str {
    if dim == 1 {
        "w1"
    } else {
        "sliced_wasserstein"
    }
}

/// Averages batch losses between snapshot boundaries, which fall at the first
/// batch end at or past each multiple of `every` updates.
#[derive(Debug, Clone)]
pub struct LossWindow {
    every: u64,
    next: u64,
    sum: f64,
    count: usize,
}

impl LossWindow {
    /// `every = 0` disables snapshots.
    pub fn new(every: u64, updates: u64) -> Self {
        let next = if every == 0 { u64::MAX } else { (updates / every + 1) * every };
        LossWindow {
            every,
            next,
            sum: 0.0,
            count: 0,
        }
    }

    /// Record a batch that ended at `updates`; returns the window mean when a
    /// boundary is reached.
    pub fn observe(&mut self, updates: u64, loss: f64) -> Option<f64> {
        self.sum += loss;
        self.count += 1;
        if updates < self.next {
            return None;
        }
        let mean = self.sum / self.count as f64;
        self.sum = 0.0;
        self.count = 0;
        self.next = (updates / self.every + 1) * self.every;
        Some(mean)
    }
}

/// Train a fresh model for `cfg.iterations` updates, recording `train_loss`
/// (and the sample distance when `eval` is given, using the EMA model) every
/// `eval_every` updates.
pub fn train(
    model: EpsModel,
    data: &Dataset,
    mode: &TrainMode,
    cfg: &TrainConfig,
    sched: &NoiseSchedule,
    eval_every: u64,
    eval: Option<&EvalSpec<'_>>,
) -> Result<(DpmTrainer, MetricsReport)> {
    let mut trainer = DpmTrainer::new(model, cfg)?;
    let mut report = MetricsReport::new(Provenance {
        config_hash: String::new(),
        seed: cfg.seed,
    });
    let mut window = LossWindow::new(eval_every, 0);
    trainer.run(data.samples(), mode, cfg, sched, cfg.iterations, |tr, step| {
        if let Some(mean) = window.observe(tr.updates(), step.loss) {
            report.push(tr.updates(), "train_loss", mean)?;
            if let Some(spec) = eval {
                let d = sample_distance(tr.ema_model(), spec, sched)?;
                report.push(tr.updates(), sample_distance_name(data.dim()), d)?;
            }
        }
        Ok(())
    })?;
    Ok((trainer, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ascent_normalizes_each_row() {
        let g = Tensor::new(vec![3, 2], vec![3.0, 4.0, 0.0, 0.0, 0.0, -2.0]).unwrap();
        let d = Tensor::zeros(&[3, 2]);
        let out = at_inner_ascent(&g, &d, 0.5, PerturbScope::PerSample).unwrap();
        assert_eq!(out.data(), &[0.3, 0.4, 0.0, 0.0, 0.0, -0.5]);
        let batch = at_inner_ascent(&g, &d, 0.5, PerturbScope::Batch).unwrap();
        assert!((batch.norm() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn ascent_ignores_vanishing_gradient() {
        let g = Tensor::full(&[2, 2], 1e-14);
        let d = Tensor::full(&[2, 2], 0.25);
        assert_eq!(at_inner_ascent(&g, &d, 1.0, PerturbScope::PerSample).unwrap(), d);
        assert_eq!(at_inner_ascent(&g, &d, 1.0, PerturbScope::Batch).unwrap(), d);
    }

    #[test]
    fn projection_caps_norm() {
        let mut d = Tensor::new(vec![2, 2], vec![3.0, 4.0, 0.1, 0.0]).unwrap();
        project_radius(&mut d, 1.0, PerturbScope::PerSample);
        assert!((d.row_norms()[0] - 1.0).abs() < 1e-15);
        assert_eq!(d.row(1), &[0.1, 0.0]);
    }

    #[test]
    fn weights_index_by_step() {
        let w = LossWeight::PerStep(vec![0.5, 1.0, 2.0]);
        assert_eq!(w.at(2).unwrap(), 2.0);
        assert!(w.at(3).is_err());
        assert!(LossWeight::Constant(-1.0).at(0).is_err());
    }

    #[test]
    fn loss_window_boundaries() {
        let mut w = LossWindow::new(10, 0);
        assert_eq!(w.observe(3, 1.0), None);
        assert_eq!(w.observe(6, 2.0), None);
        assert_eq!(w.observe(12, 3.0), Some(2.0));
        assert_eq!(w.observe(19, 5.0), None);
        assert_eq!(w.observe(20, 7.0), Some(6.0));
        let mut off = LossWindow::new(0, 0);
        assert_eq!(off.observe(1_000_000, 1.0), None);
    }

    #[test]
    fn config_validation() {
        assert!(AtConfig { k: 0, ..Default::default() }.validate().is_err());
        assert!(AtConfig { adv_lr: 0.0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { batch_size: 0, ..Default::default() }.validate().is_err());
    }
}
