//! Consistency distillation from a frozen noise predictor, optionally with
//! adversarial perturbation of the teacher-step output.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{ensure, Error, Result};
use crate::models::{ConsistencyModel, ConsistencyNet, EmaPair, NoisePredictor, Parameterized};
use crate::optim::Optimizer;
use crate::rng::SeededRng;
use crate::samplers::ddim_update;
use crate::schedule::{q_sample, q_sample_at, NoiseSchedule};
use crate::tensor::Tensor;
use crate::training::{
    at_inner_ascent, delta_magnitude, draw_batch, project_radius, AtConfig, LossWeight, PerturbScope,
    TimestepSampling, TrainConfig, TrainerState,
};

/// One-step teacher solver used to produce `Phi_hat(x_{t+1}, t+1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OdeSolverKind {
    Euler,
    #[default]
    Ddim,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceMetric {
    #[default]
    L2,
    L1,
}

/// Which side of the distillation loss receives the perturbed teacher output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturbBranch {
    /// `d(f_theta(x_{t+1}, t+1), f_target(Phi_hat + delta, t))`.
    #[default]
    Target,
    /// `d(f_theta(Phi_hat + delta, t), f_target(x_{t+1}, t+1))`.
    Student,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CdConfig {
    pub solver: OdeSolverKind,
    pub metric: DistanceMetric,
    pub ema_mu: f64,
    pub perturb_branch: PerturbBranch,
    pub loss_weight: LossWeight,
}

impl Default for CdConfig {
    fn default() -> Self {
        CdConfig {
            solver: OdeSolverKind::Ddim,
            metric: DistanceMetric::L2,
            ema_mu: 0.95,
            perturb_branch: PerturbBranch::Target,
            loss_weight: LossWeight::default(),
        }
    }
}

/// Probability-flow Euler step with drift scale `h = Delta_s * beta`:
/// `x + (h / 2) (x - eps / sqrt(1 - abar_{t_next}))`. `h = 0` returns `x`.
pub fn euler_update(x_next: &Tensor, eps_hat: &Tensor, h: f64, t_next: usize, sched: &NoiseSchedule) -> Result<Tensor> {
    if h == 0.0 {
        return Ok(x_next.clone());
    }
    ensure!(t_next >= 1 && t_next <= sched.steps(), "step {t_next} outside 1..={}", sched.steps());
    let var = 1.0 - sched.alpha_bar(t_next);
    if var <= 0.0 {
        return Err(Error::numeric(format!("score undefined at step {t_next}: 1 - alpha_bar = 0")));
    }
    let inv = 1.0 / var.sqrt();
    x_next.zip_map(eps_hat, "euler_update", |x, e| x + 0.5 * h * (x - e * inv))
}

/// One teacher step from `t_next` to `t < t_next`.
pub fn phi_hat(
    x_next: &Tensor,
    t_next: usize,
    t: usize,
    teacher: &dyn NoisePredictor,
    solver: OdeSolverKind,
    sched: &NoiseSchedule,
) -> Result<Tensor> {
    ensure!(t < t_next && t_next <= sched.steps(), "teacher step needs t < t_next <= T, got {t} -> {t_next}");
    let eps = teacher.predict_eps(x_next, t_next)?;
    if eps.shape() != x_next.shape() {
        return Err(Error::dims("phi_hat", x_next.shape(), eps.shape()));
    }
    match solver {
        OdeSolverKind::Ddim => ddim_update(x_next, &eps, t_next, t, sched),
        OdeSolverKind::Euler => {
            let h = 1.0 - sched.alpha_bar(t_next) / sched.alpha_bar(t);
            euler_update(x_next, &eps, h, t_next, sched)
        }
    }
}

fn row_distance<'t>(a: Var<'t>, b: Var<'t>, metric: DistanceMetric) -> Result<Var<'t>> {
    let diff = a.sub(b)?;
    match metric {
        DistanceMetric::L2 => diff.square()?.sum_cols(),
        DistanceMetric::L1 => diff.abs()?.sum_cols(),
    }
}

/// Nodes of one distillation-loss evaluation.
pub struct CdGraph<'t> {
    pub loss: Var<'t>,
    pub student_params: Vec<Var<'t>>,
    pub target_params: Vec<Var<'t>>,
    pub delta: Var<'t>,
    /// Input fed to the perturbed branch, `Phi_hat + delta`.
    pub perturbed_input: Var<'t>,
}

/// Build the distillation loss on `tape`. The student is bound as trainable
/// and the target as constants, so gradients reach only the student and the
/// perturbation. `delta_grad` makes the perturbation a gradient leaf.
#[allow(clippy::too_many_arguments)]
pub fn cd_graph<'t>(
    tape: &'t Tape,
    student: &'t ConsistencyModel,
    target: &'t ConsistencyModel,
    x_next: &Tensor,
    phi: &Tensor,
    delta: &Tensor,
    delta_grad: bool,
    t_next: usize,
    cfg: &CdConfig,
) -> Result<CdGraph<'t>> {
    ensure!(t_next >= 1, "distillation needs t_next >= 1");
    if x_next.shape() != phi.shape() || phi.shape() != delta.shape() {
        return Err(Error::dims("cd_loss", x_next.shape(), phi.shape()));
    }
    let t = t_next - 1;
    let n = x_next.rows();
    let s = student.bind(tape, true);
    let g = target.bind(tape, false);
    let dv = if delta_grad {
        tape.leaf(delta.clone())
    } else {
        tape.constant(delta.clone())
    };
    let perturbed = tape.constant(phi.clone()).add(dv)?;
    let xn = tape.constant(x_next.clone());
    let (lhs, rhs) = match cfg.perturb_branch {
        PerturbBranch::Target => (s.denoise(xn, &vec![t_next; n])?, g.denoise(perturbed, &vec![t; n])?),
        PerturbBranch::Student => (s.denoise(perturbed, &vec![t; n])?, g.denoise(xn, &vec![t_next; n])?),
    };
    let w = cfg.loss_weight.at(t)?;
    let loss = row_distance(lhs, rhs, cfg.metric)?.mean()?.scale(w)?;
    Ok(CdGraph {
        loss,
        student_params: s.param_vars(),
        target_params: g.param_vars(),
        delta: dv,
        perturbed_input: perturbed,
    })
}

/// Distillation loss `lambda(t) d(f_student(x_{t+1}, t+1), f_target(Phi_hat, t))`
/// with the teacher step taken from `x_next` at `t_next` to `t_next - 1`.
pub fn cd_loss(
    student: &ConsistencyModel,
    target: &ConsistencyModel,
    x_next: &Tensor,
    t_next: usize,
    teacher: &dyn NoisePredictor,
    cfg: &CdConfig,
    sched: &NoiseSchedule,
) -> Result<f64> {
    ensure!(t_next >= 1 && t_next <= sched.steps(), "step {t_next} outside 1..={}", sched.steps());
    let phi = phi_hat(x_next, t_next, t_next - 1, teacher, cfg.solver, sched)?;
    let tape = Tape::new();
    let zero = Tensor::zeros(x_next.shape());
    cd_graph(&tape, student, target, x_next, &phi, &zero, false, t_next, cfg)?
        .loss
        .value()
        .item()
}

/// Perturbed consistency-training loss without a teacher:
/// `lambda(t) d(f_student(x_{t+1}, t+1), f_target(x_t + delta, t))`, where both
/// noisy points share the same `x0` and noise draw.
#[allow(clippy::too_many_arguments)]
pub fn ct_adv_loss(
    student: &ConsistencyModel,
    target: &ConsistencyModel,
    x0: &Tensor,
    t: usize,
    eps: &Tensor,
    delta: &Tensor,
    cfg: &CdConfig,
    sched: &NoiseSchedule,
) -> Result<f64> {
    ensure!(t < sched.steps(), "step {t} must be below T = {}", sched.steps());
    let xt = q_sample_at(x0, t, eps, sched)?;
    let xn = q_sample(x0, t + 1, eps, sched)?;
    let tape = Tape::new();
    let cfg = CdConfig {
        perturb_branch: PerturbBranch::Target,
        ..cfg.clone()
    };
    cd_graph(&tape, student, target, &xn, &xt, delta, false, t + 1, &cfg)?
        .loss
        .value()
        .item()
}

/// Consistency-model sampling with `steps` evaluations on the ladder
/// `tau_j = floor((steps - j) T / steps)`, re-noising between evaluations.
pub fn cm_sample(model: &ConsistencyModel, steps: usize, n: usize, sched: &NoiseSchedule, seed: u64) -> Result<Tensor> {
    let big_t = sched.steps();
    ensure!(steps >= 1 && steps <= big_t, "sampling steps {steps} outside 1..={big_t}");
    ensure!(n >= 1, "need at least one sample");
    let dim = model.data_dim();
    let mut streams: Vec<SeededRng> = (0..n as u64).map(|i| SeededRng::with_stream(seed, i)).collect();
    let mut draw = || {
        let mut data = Vec::with_capacity(n * dim);
        for rng in &mut streams {
            data.extend((0..dim).map(|_| rng.normal()));
        }
        Tensor::new(vec![n, dim], data)
    };
    let ladder: Vec<usize> = (0..steps).map(|j| (steps - j) * big_t / steps).collect();
    let mut x = model.cm_forward(&draw()?, ladder[0])?;
    for &tau in &ladder[1..] {
        let z = draw()?;
        let noisy = q_sample(&x, tau, &z, sched)?;
        x = model.cm_forward(&noisy, tau)?;
    }
    Ok(x)
}

/// Mean per-step distillation loss of a model against itself,
/// `(1/T) sum_t E d(f(x_{t+1}, t+1), f(Phi_hat(x_{t+1}), t))`, estimated with
/// `n` data rows per step.
pub fn evaluate_cd_loss(
    model: &ConsistencyModel,
    teacher: &dyn NoisePredictor,
    data: &Tensor,
    cfg: &CdConfig,
    sched: &NoiseSchedule,
    n: usize,
    seed: u64,
) -> Result<f64> {
    ensure!(n >= 1, "need at least one evaluation row");
    let mut rng = SeededRng::with_stream(seed, 2);
    let mut total = 0.0;
    for t in 0..sched.steps() {
        let x0 = draw_batch(data, n, &mut rng);
        let eps = rng.normal_tensor(x0.shape());
        let xn = q_sample(&x0, t + 1, &eps, sched)?;
        total += cd_loss(model, model, &xn, t + 1, teacher, cfg, sched)?;
    }
    Ok(total / sched.steps() as f64)
}

/// Outcome of one distillation batch.
#[derive(Debug, Clone, PartialEq)]
pub struct CdStepReport {
    pub t: usize,
    pub loss: f64,
    pub losses: Vec<f64>,
    pub delta_norm: f64,
    pub updates: usize,
}

/// Distillation trainer: student with EMA target, optimizer and data RNG.
#[derive(Debug, Clone)]
pub struct CdTrainer {
    pub ema: EmaPair<ConsistencyModel>,
    opt: Optimizer,
    rng: SeededRng,
    updates: u64,
    batches: u64,
}

impl CdTrainer {
    pub fn new(model: ConsistencyModel, train: &TrainConfig, cd: &CdConfig) -> Result<Self> {
        train.validate()?;
        ensure!(
            train.timesteps == TimestepSampling::PerBatch,
            "distillation samples one step per batch"
        );
        let opt = Optimizer::new(train.optimizer, train.lr, &model.param_shapes());
        Ok(CdTrainer {
            ema: EmaPair::new(model, cd.ema_mu)?,
            opt,
            rng: SeededRng::with_stream(train.seed, 1),
            updates: 0,
            batches: 0,
        })
    }

    pub fn restore(
        ema: EmaPair<ConsistencyModel>,
        train: &TrainConfig,
        cd: &CdConfig,
        state: &TrainerState,
    ) -> Result<Self> {
        let mut t = Self::new(ema.online.clone(), train, cd)?;
        t.ema = EmaPair::from_parts(ema.online, ema.target, cd.ema_mu)?;
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

    pub fn model(&self) -> &ConsistencyModel {
        &self.ema.online
    }

    /// One batch: draw `t ~ U{0..T-1}`, form `x_{t+1}` and the teacher step,
    /// then alternate perturbation ascent (if `at` is set) with student
    /// updates and EMA target updates.
    #[allow(clippy::too_many_arguments)]
    pub fn cd_at_step(
        &mut self,
        x0: &Tensor,
        teacher: &dyn NoisePredictor,
        at: Option<&AtConfig>,
        cd: &CdConfig,
        sched: &NoiseSchedule,
        max_updates: usize,
    ) -> Result<CdStepReport> {
        ensure!(x0.ndim() == 2 && x0.rows() >= 1, "batch must be a non-empty [batch, dim] tensor");
        if let Some(at) = at {
            at.validate()?;
        }
        let t = self.rng.int_inclusive(0, sched.steps() - 1);
        let eps = self.rng.normal_tensor(x0.shape());
        let xn = q_sample(x0, t + 1, &eps, sched)?;
        let phi = phi_hat(&xn, t + 1, t, teacher, cd.solver, sched)?;
        let mut delta = Tensor::zeros(x0.shape());
        let inner = at.map_or(1, |a| a.k).min(max_updates.max(1));
        let mut losses = Vec::with_capacity(inner);
        let scope = at.map_or(PerturbScope::Batch, |a| a.scope);

        for _ in 0..inner {
            let step = self.inner_update(&xn, &phi, &mut delta, t + 1, at, cd);
            match step {
                Ok(l) => losses.push(l),
                Err(e) => {
                    return Err(Error::numeric(format!(
                        "{e} (update {}, t = {t}, |delta| = {:e}, last loss = {:?})",
                        self.updates,
                        delta_magnitude(&delta, scope),
                        losses.last()
                    )))
                }
            }
        }
        self.batches += 1;
        Ok(CdStepReport {
            t,
            loss: *losses.last().expect("at least one inner step"),
            losses,
            delta_norm: if at.is_some() { delta_magnitude(&delta, scope) } else { 0.0 },
            updates: inner,
        })
    }

    fn inner_update(
        &mut self,
        xn: &Tensor,
        phi: &Tensor,
        delta: &mut Tensor,
        t_next: usize,
        at: Option<&AtConfig>,
        cd: &CdConfig,
    ) -> Result<f64> {
        let (loss, grads, g_delta) = {
            let tape = Tape::new();
            let g = cd_graph(
                &tape,
                &self.ema.online,
                &self.ema.target,
                xn,
                phi,
                delta,
                at.is_some(),
                t_next,
                cd,
            )?;
            let mut grads = tape.backward(g.loss)?;
            let pg: Vec<Tensor> = g.student_params.iter().map(|&v| grads.take(v)).collect();
            let gd = at.is_some().then(|| grads.take(g.delta));
            (g.loss.value().item()?, pg, gd)
        };
        if let (Some(at), Some(gd)) = (at, g_delta) {
            *delta = at_inner_ascent(&gd, delta, at.adv_lr, at.scope)?;
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

    /// Run batches until at least `until` updates (capped at
    /// `train.iterations`); stops only at batch boundaries.
    #[allow(clippy::too_many_arguments)]
    pub fn run(
        &mut self,
        data: &Tensor,
        teacher: &dyn NoisePredictor,
        at: Option<&AtConfig>,
        train: &TrainConfig,
        cd: &CdConfig,
        sched: &NoiseSchedule,
        until: u64,
        mut on_batch: impl FnMut(&CdTrainer, &CdStepReport) -> Result<()>,
    ) -> Result<()> {
        ensure!(data.ndim() == 2 && data.rows() >= 1, "training data must be a non-empty [n, dim] tensor");
        let until = until.min(train.iterations);
        while self.updates < until {
            let x0 = draw_batch(data, train.batch_size, &mut self.rng);
            let remaining = (train.iterations - self.updates) as usize;
            let report = self.cd_at_step(&x0, teacher, at, cd, sched, remaining)?;
            on_batch(self, &report)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::FnPredictor;
    use crate::schedule::ScheduleKind;

    #[test]
    fn euler_zero_drift_is_identity() {
        let s = NoiseSchedule::build(ScheduleKind::Cosine, 10).unwrap();
        let x = Tensor::from_fn(&[2, 3], |i| i as f64);
        let e = Tensor::ones(&[2, 3]);
        assert_eq!(euler_update(&x, &e, 0.0, 4, &s).unwrap(), x);
    }

    #[test]
    fn phi_hat_rejects_bad_order() {
        let s = NoiseSchedule::build(ScheduleKind::Cosine, 10).unwrap();
        let zero = FnPredictor(|x: &Tensor, _t: usize| Ok(Tensor::zeros(x.shape())));
        let x = Tensor::ones(&[1, 1]);
        assert!(phi_hat(&x, 3, 3, &zero, OdeSolverKind::Ddim, &s).is_err());
        assert!(phi_hat(&x, 11, 10, &zero, OdeSolverKind::Euler, &s).is_err());
    }

    #[test]
    fn identity_models_measure_input_gap() {
        let s = NoiseSchedule::build(ScheduleKind::Cosine, 10).unwrap();
        let m = ConsistencyModel::from_mlp(
            crate::models::Mlp::init(&[3, 4, 1], &mut SeededRng::new(0), false).unwrap(),
            1,
            2,
            10,
            crate::models::Parameterization::Identity,
        )
        .unwrap();
        let x0 = Tensor::column(vec![0.5, -1.0]).unwrap();
        let eps = Tensor::column(vec![0.3, 0.7]).unwrap();
        let zero = Tensor::zeros(&[2, 1]);
        let cfg = CdConfig::default();
        for t in 0..10 {
            let got = ct_adv_loss(&m, &m, &x0, t, &eps, &zero, &cfg, &s).unwrap();
            let a = q_sample_at(&x0, t, &eps, &s).unwrap();
            let b = q_sample(&x0, t + 1, &eps, &s).unwrap();
            let want = a.sub(&b).unwrap().sq_norm() / 2.0;
            assert!((got - want).abs() < 1e-15);
        }
    }
}
