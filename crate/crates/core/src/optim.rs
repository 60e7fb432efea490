use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OptimizerKind {
    Sgd,
    Adam {
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_eps")]
        eps: f64,
    },
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

impl Default for OptimizerKind {
    fn default() -> Self {
        OptimizerKind::Adam {
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
        }
    }
}

/// First-order optimizer with explicit, serializable state.
#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, shapes: &[Vec<usize>]) -> Self {
        let zeros = |on: bool| {
            if on {
                shapes.iter().map(|s| Tensor::zeros(s)).collect()
            } else {
                Vec::new()
            }
        };
        let adam = matches!(kind, OptimizerKind::Adam { .. });
        Optimizer {
            kind,
            lr,
            step: 0,
            m: zeros(adam),
            v: zeros(adam),
        }
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    /// Number of updates applied so far.
    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn apply(&mut self, params: Vec<&mut Tensor>, grads: &[Tensor]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::contract(format!(
                "{} parameters but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        self.step += 1;
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.into_iter().zip(grads) {
                    p.axpy(-self.lr, g)?;
                }
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                let bc1 = 1.0 - beta1.powf(self.step as f64);
                let bc2 = 1.0 - beta2.powf(self.step as f64);
                for (i, (p, g)) in params.into_iter().zip(grads).enumerate() {
                    if p.shape() != g.shape() {
                        return Err(Error::dims("optimizer", p.shape(), g.shape()));
                    }
                    let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
                    for (j, (pv, &gv)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                        m[j] = beta1 * m[j] + (1.0 - beta1) * gv;
                        v[j] = beta2 * v[j] + (1.0 - beta2) * gv * gv;
                        let mhat = m[j] / bc1;
                        let vhat = v[j] / bc2;
                        *pv -= self.lr * mhat / (vhat.sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }

    /// Flattened moment buffers `(m, v)` for checkpointing.
    pub fn moments(&self) -> (Vec<f64>, Vec<f64>) {
        let flat = |ts: &[Tensor]| ts.iter().flat_map(|t| t.data().iter().copied()).collect();
        (flat(&self.m), flat(&self.v))
    }

    pub fn restore(&mut self, step: u64, m: &[f64], v: &[f64]) -> Result<()> {
        let fill = |dst: &mut [Tensor], src: &[f64]| -> Result<()> {
            let total: usize = dst.iter().map(|t| t.len()).sum();
            if total != src.len() {
                return Err(Error::dims("optimizer state", &[total], &[src.len()]));
            }
            let mut off = 0;
            for t in dst {
                let n = t.len();
                t.data_mut().copy_from_slice(&src[off..off + n]);
                off += n;
            }
            Ok(())
        };
        fill(&mut self.m, m)?;
        fill(&mut self.v, v)?;
        self.step = step;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_step() {
        let mut p = Tensor::scalar(1.0);
        let mut opt = Optimizer::new(OptimizerKind::Sgd, 0.1, &[vec![1]]);
        opt.apply(vec![&mut p], &[Tensor::scalar(2.0)]).unwrap();
        assert!((p.item().unwrap() - 0.8).abs() < 1e-15);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        // With bias correction the first Adam step is lr * g / (|g| + eps).
        let mut p = Tensor::new(vec![2], vec![0.0, 0.0]).unwrap();
        let mut opt = Optimizer::new(OptimizerKind::default(), 0.01, &[vec![2]]);
        opt.apply(vec![&mut p], &[Tensor::new(vec![2], vec![3.0, -0.5]).unwrap()])
            .unwrap();
        assert!((p.data()[0] + 0.01).abs() < 1e-9);
        assert!((p.data()[1] - 0.01).abs() < 1e-9);
    }

    #[test]
    fn restore_round_trips() {
        let shapes = vec![vec![2, 2], vec![2]];
        let mut a = Optimizer::new(OptimizerKind::default(), 0.1, &shapes);
        let mut ps = vec![Tensor::ones(&[2, 2]), Tensor::ones(&[2])];
        let gs = vec![Tensor::full(&[2, 2], 0.3), Tensor::full(&[2], -0.2)];
        a.apply(ps.iter_mut().collect(), &gs).unwrap();
        let (m, v) = a.moments();
        let mut b = Optimizer::new(OptimizerKind::default(), 0.1, &shapes);
        b.restore(a.steps_taken(), &m, &v).unwrap();
        assert_eq!(a, b);
    }
}
