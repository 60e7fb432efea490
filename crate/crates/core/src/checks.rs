//! Self-check suites shared by the command-line tool and the test suites:
//! gradient checks against finite differences and sampler cross-checks.

use crate::autodiff::{finite_difference, max_relative_error, Tape};
use crate::consistency::{cd_graph, CdConfig};
use crate::error::Result;
use crate::models::{ConsistencyModel, EpsModel, ModelConfig, Parameterization, Parameterized};
use crate::rng::SeededRng;
use crate::samplers::{ddim_update, dpm_solver_update};
use crate::schedule::{NoiseSchedule, ScheduleKind};
use crate::tensor::Tensor;
use crate::training::at_loss_graph;

/// Step of the fourth-order stencil, and the magnitude below which gradient
/// entries are compared in absolute rather than relative terms. Near `t = 1`
/// the perturbed loss is scaled by `1 / (1 - abar_1)`, so a small step loses
/// precision to cancellation.
const FD_STEP: f64 = 1e-3;
const FD_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub instances: usize,
    pub max_rel_error: f64,
    /// Description of the instance with the largest error.
    pub worst: String,
}

fn small_config() -> ModelConfig {
    ModelConfig {
        hidden: 8,
        depth: 2,
        time_embed: 4,
    }
}

/// Which loss an instance differentiates.
#[derive(Debug, Clone, Copy)]
enum Instance {
    /// Perturbed noise-prediction loss, with respect to parameters and perturbation.
    Perturbed,
    /// Unperturbed noise-prediction loss, with respect to parameters.
    Plain,
    /// Distillation loss, with respect to student parameters and perturbation.
    Distill,
}

/// Compare reverse-mode gradients with central differences on `instances`
/// randomly drawn small models and loss inputs.
pub fn gradcheck_suite(instances: usize, seed: u64) -> Result<GradcheckReport> {
    let mut rng = SeededRng::new(seed);
    let sched = NoiseSchedule::build(ScheduleKind::Cosine, 20)?;
    let mut report = GradcheckReport {
        instances,
        max_rel_error: 0.0,
        worst: String::new(),
    };
    for i in 0..instances {
        let kind = [Instance::Perturbed, Instance::Plain, Instance::Distill][i % 3];
        let dim = 1 + rng.int_inclusive(0, 2);
        let batch = 2 + rng.int_inclusive(0, 3);
        let t = rng.int_inclusive(1, sched.steps());
        let x0 = rng.normal_tensor(&[batch, dim]);
        let eps = rng.normal_tensor(&[batch, dim]);
        let delta = rng.normal_tensor(&[batch, dim]).scale(0.1);
        let err = match kind {
            Instance::Perturbed | Instance::Plain => {
                let model = EpsModel::init_with(&small_config(), dim, sched.steps(), &mut rng, false)?;
                let with_delta = matches!(kind, Instance::Perturbed);
                let delta = if with_delta { delta } else { Tensor::zeros(&[batch, dim]) };
                check_eps_instance(&model, &x0, t, &eps, &delta, with_delta, &sched)?
            }
            Instance::Distill => {
                let param = Parameterization::Scaled {
                    sigma_data: 0.5,
                    s_max: 1.0,
                };
                let student = ConsistencyModel::init(&small_config(), dim, sched.steps(), param, &mut rng)?;
                let target = ConsistencyModel::init(&small_config(), dim, sched.steps(), param, &mut rng)?;
                let phi = rng.normal_tensor(&[batch, dim]);
                check_cd_instance(&student, &target, &x0, &phi, &delta, t)?
            }
        };
        if err > report.max_rel_error || report.worst.is_empty() {
            report.max_rel_error = report.max_rel_error.max(err);
            report.worst = format!("instance {i} ({kind:?}, dim {dim}, batch {batch}, t {t})");
        }
    }
    Ok(report)
}

fn check_eps_instance(
    model: &EpsModel,
    x0: &Tensor,
    t: usize,
    eps: &Tensor,
    delta: &Tensor,
    with_delta: bool,
    sched: &NoiseSchedule,
) -> Result<f64> {
    let steps = vec![t; x0.rows()];
    let w = Tensor::ones(&[x0.rows(), 1]);
    let eval = |m: &EpsModel, d: &Tensor| -> Result<f64> {
        let tape = Tape::new();
        let net = m.bind(&tape, false);
        at_loss_graph(&net, x0, &steps, eps, tape.constant(d.clone()), &w, sched)?
            .value()
            .item()
    };

    let tape = Tape::new();
    let net = model.bind(&tape, true);
    let dv = tape.leaf(delta.clone());
    let loss = at_loss_graph(&net, x0, &steps, eps, dv, &w, sched)?;
    let grads = tape.backward(loss)?;

    let mut worst = 0.0f64;
    for (k, var) in net.param_vars().into_iter().enumerate() {
        let fd = finite_difference(
            |p| {
                let mut m = model.clone();
                *m.params_mut()[k] = p.clone();
                eval(&m, delta)
            },
            model.params()[k],
            FD_STEP,
        )?;
        worst = worst.max(max_relative_error(grads.wrt(var), &fd, FD_FLOOR));
    }
    if with_delta {
        let fd = finite_difference(|d| eval(model, d), delta, FD_STEP)?;
        worst = worst.max(max_relative_error(grads.wrt(dv), &fd, FD_FLOOR));
    }
    Ok(worst)
}

fn check_cd_instance(
    student: &ConsistencyModel,
    target: &ConsistencyModel,
    x_next: &Tensor,
    phi: &Tensor,
    delta: &Tensor,
    t_next: usize,
) -> Result<f64> {
    let cfg = CdConfig::default();
    let eval = |s: &ConsistencyModel, d: &Tensor| -> Result<f64> {
        let tape = Tape::new();
        cd_graph(&tape, s, target, x_next, phi, d, false, t_next, &cfg)?
            .loss
            .value()
            .item()
    };
    let tape = Tape::new();
    let g = cd_graph(&tape, student, target, x_next, phi, delta, true, t_next, &cfg)?;
    let grads = tape.backward(g.loss)?;

    let mut worst = 0.0f64;
    for (k, &var) in g.student_params.iter().enumerate() {
        let fd = finite_difference(
            |p| {
                let mut m = student.clone();
                *m.params_mut()[k] = p.clone();
                eval(&m, delta)
            },
            student.params()[k],
            FD_STEP,
        )?;
        worst = worst.max(max_relative_error(grads.wrt(var), &fd, FD_FLOOR));
    }
    let fd = finite_difference(|d| eval(student, d), delta, FD_STEP)?;
    worst = worst.max(max_relative_error(grads.wrt(g.delta), &fd, FD_FLOOR));
    Ok(worst)
}

/// Largest absolute difference between first-order DPM-Solver and DDIM
/// updates over `instances` random states, noise predictions and step pairs.
pub fn sampler_equivalence_suite(instances: usize, seed: u64) -> Result<f64> {
    let mut rng = SeededRng::new(seed);
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let kind = if rng.uniform() < 0.5 {
            ScheduleKind::Cosine
        } else {
            ScheduleKind::Linear
        };
        let sched = NoiseSchedule::build(kind, 10 + rng.int_inclusive(0, 190))?;
        let t_next = rng.int_inclusive(1, sched.steps());
        let t = rng.int_inclusive(0, t_next - 1);
        let shape = [1 + rng.int_inclusive(0, 7), 1 + rng.int_inclusive(0, 2)];
        let x = rng.normal_tensor(&shape);
        let eps = rng.normal_tensor(&shape);
        let a = ddim_update(&x, &eps, t_next, t, &sched)?;
        let b = dpm_solver_update(&x, &eps, t_next, t, 1, None, &sched)?;
        worst = worst.max(a.sub(&b)?.max_abs());
    }
    Ok(worst)
}
