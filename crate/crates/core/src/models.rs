//! Time-conditioned MLP denoisers: the noise predictor, the consistency
//! model, and EMA target maintenance.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{ensure, Error, Result};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

/// Architecture of a time-conditioned MLP.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub hidden: usize,
    /// Number of hidden layers.
    pub depth: usize,
    /// Sinusoidal time-embedding width; must be even.
    pub time_embed: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden: 128,
            depth: 3,
            time_embed: 16,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.hidden >= 1, "hidden width must be positive");
        ensure!(self.depth >= 1, "depth must be positive");
        ensure!(
            self.time_embed >= 2 && self.time_embed % 2 == 0,
            "time embedding width must be a positive even number, got {}",
            self.time_embed
        );
        Ok(())
    }
}

/// Sinusoidal embedding of integer steps, one row per step:
/// `[sin(t w_0), .., sin(t w_{h-1}), cos(t w_0), .., cos(t w_{h-1})]`
/// with `w_k = 10000^(-k/h)`.
pub fn time_embedding(steps: &[usize], dim: usize) -> Tensor {
    let half = dim / 2;
    let freqs: Vec<f64> = (0..half)
        .map(|k| (-(10000f64.ln()) * k as f64 / half as f64).exp())
        .collect();
    let mut data = Vec::with_capacity(steps.len() * dim);
    for &t in steps {
        let t = t as f64;
        data.extend(freqs.iter().map(|w| (t * w).sin()));
        data.extend(freqs.iter().map(|w| (t * w).cos()));
    }
    Tensor::new(vec![steps.len(), dim], data).expect("embedding shape")
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    /// `[fan_in, fan_out]`
    pub weight: Tensor,
    /// `[fan_out]`
    pub bias: Tensor,
}

/// Fully connected tanh network with a linear output layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layers: Vec<Dense>,
}

impl Mlp {
    /// Glorot-uniform weights and zero biases; optionally a zero output layer.
    pub fn init(dims: &[usize], rng: &mut SeededRng, zero_output: bool) -> Result<Self> {
        ensure!(dims.len() >= 2, "an MLP needs at least input and output widths");
        let last = dims.len() - 2;
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let weight = if zero_output && i == last {
                    Tensor::zeros(&[fan_in, fan_out])
                } else {
                    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                    rng.uniform_tensor(&[fan_in, fan_out], -limit, limit)
                };
                Dense {
                    weight,
                    bias: Tensor::zeros(&[fan_out]),
                }
            })
            .collect();
        Ok(Mlp { layers })
    }

    pub fn from_layers(layers: Vec<Dense>) -> Result<Self> {
        ensure!(!layers.is_empty(), "an MLP needs at least one layer");
        for (i, l) in layers.iter().enumerate() {
            ensure!(l.weight.ndim() == 2, "layer {i} weight must be 2-D");
            ensure!(
                l.bias.shape() == [l.weight.shape()[1]],
                "layer {i} bias {:?} does not match weight {:?}",
                l.bias.shape(),
                l.weight.shape()
            );
            if i > 0 {
                let prev = layers[i - 1].weight.shape()[1];
                if prev != l.weight.shape()[0] {
                    return Err(Error::dims("mlp", layers[i - 1].weight.shape(), l.weight.shape()));
                }
            }
        }
        Ok(Mlp { layers })
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].weight.shape()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].weight.shape()[1]
    }

    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> BoundMlp<'t> {
        let put = |t: &Tensor| {
            if trainable {
                tape.leaf(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        BoundMlp {
            layers: self.layers.iter().map(|l| (put(&l.weight), put(&l.bias))).collect(),
        }
    }
}

/// An [`Mlp`] whose parameters are recorded on a tape.
#[derive(Debug, Clone)]
pub struct BoundMlp<'t> {
    layers: Vec<(Var<'t>, Var<'t>)>,
}

impl<'t> BoundMlp<'t> {
    pub fn forward(&self, x: Var<'t>) -> Result<Var<'t>> {
        let last = self.layers.len() - 1;
        let mut h = x;
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            h = h.matmul(w)?.add(b)?;
            if i < last {
                h = h.tanh()?;
            }
        }
        Ok(h)
    }

    /// Parameter handles in the same order as [`Parameterized::params`].
    pub fn param_vars(&self) -> Vec<Var<'t>> {
        self.layers.iter().flat_map(|&(w, b)| [w, b]).collect()
    }
}

/// Anything with an ordered list of parameter tensors.
pub trait Parameterized {
    fn params(&self) -> Vec<&Tensor>;
    fn params_mut(&mut self) -> Vec<&mut Tensor>;

    fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    fn flat_params(&self) -> Vec<f64> {
        self.params().iter().flat_map(|p| p.data().iter().copied()).collect()
    }

    fn load_flat(&mut self, flat: &[f64]) -> Result<()> {
        let total = self.num_params();
        if flat.len() != total {
            return Err(Error::dims("load_flat", &[total], &[flat.len()]));
        }
        let mut offset = 0;
        for p in self.params_mut() {
            let n = p.len();
            p.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    fn param_shapes(&self) -> Vec<Vec<usize>> {
        self.params().iter().map(|p| p.shape().to_vec()).collect()
    }

    fn params_finite(&self) -> bool {
        self.params().iter().all(|p| p.is_finite())
    }
}

impl Parameterized for Mlp {
    fn params(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }
}

/// Euclidean distance between two parameter sets of identical layout.
pub fn param_distance<M: Parameterized>(a: &M, b: &M) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.params().iter().zip(b.params()) {
        for (u, v) in x.data().iter().zip(y.data()) {
            acc += (u - v) * (u - v);
        }
    }
    acc.sqrt()
}

/// MLP over `[x, embed(t)]`, shared by both model families.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeMlp {
    mlp: Mlp,
    data_dim: usize,
    time_embed: usize,
    max_step: usize,
}

impl TimeMlp {
    fn init(cfg: &ModelConfig, data_dim: usize, max_step: usize, rng: &mut SeededRng, zero_output: bool) -> Result<Self> {
        cfg.validate()?;
        ensure!(data_dim >= 1, "data dimension must be positive");
        let mut dims = vec![data_dim + cfg.time_embed];
        dims.extend(std::iter::repeat(cfg.hidden).take(cfg.depth));
        dims.push(data_dim);
        Ok(TimeMlp {
            mlp: Mlp::init(&dims, rng, zero_output)?,
            data_dim,
            time_embed: cfg.time_embed,
            max_step,
        })
    }

    fn from_mlp(mlp: Mlp, data_dim: usize, time_embed: usize, max_step: usize) -> Result<Self> {
        ensure!(
            mlp.in_dim() == data_dim + time_embed && mlp.out_dim() == data_dim,
            "MLP widths {}->{} do not fit data dim {data_dim} with embedding {time_embed}",
            mlp.in_dim(),
            mlp.out_dim()
        );
        Ok(TimeMlp {
            mlp,
            data_dim,
            time_embed,
            max_step,
        })
    }

    fn check_input(&self, shape: &[usize], steps: &[usize]) -> Result<()> {
        if shape.len() != 2 || shape[1] != self.data_dim {
            return Err(Error::dims("model input", shape, &[shape[0], self.data_dim]));
        }
        ensure!(
            steps.len() == shape[0],
            "{} step indices for a batch of {}",
            steps.len(),
            shape[0]
        );
        if let Some(&bad) = steps.iter().find(|&&t| t > self.max_step) {
            return Err(Error::contract(format!(
                "step {bad} outside 0..={}",
                self.max_step
            )));
        }
        Ok(())
    }

    fn forward<'t>(&self, bound: &BoundMlp<'t>, x: Var<'t>, steps: &[usize]) -> Result<Var<'t>> {
        self.check_input(&x.shape(), steps)?;
        let emb = x.tape().constant(time_embedding(steps, self.time_embed));
        bound.forward(Var::concat_cols(&[x, emb])?)
    }
}

/// Differentiable noise predictor evaluated on a tape.
pub trait EpsNet<'t> {
    fn eps(&self, x: Var<'t>, steps: &[usize]) -> Result<Var<'t>>;
}

/// Differentiable consistency function evaluated on a tape.
pub trait ConsistencyNet<'t> {
    fn denoise(&self, x: Var<'t>, steps: &[usize]) -> Result<Var<'t>>;
}

/// Tape-free noise prediction for samplers and teachers.
pub trait NoisePredictor {
    /// Predicted noise for a `[batch, dim]` input at step `t`.
    fn predict_eps(&self, x: &Tensor, t: usize) -> Result<Tensor>;
}

impl<P: NoisePredictor + ?Sized> NoisePredictor for &P {
    fn predict_eps(&self, x: &Tensor, t: usize) -> Result<Tensor> {
        (**self).predict_eps(x, t)
    }
}

/// Adapter turning a closure into a [`NoisePredictor`].
pub struct FnPredictor<F>(pub F);

impl<F> NoisePredictor for FnPredictor<F>
where
    F: Fn(&Tensor, usize) -> Result<Tensor>,
{
    fn predict_eps(&self, x: &Tensor, t: usize) -> Result<Tensor> {
        (self.0)(x, t)
    }
}

/// Noise-prediction network `eps_theta(x, t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct EpsModel {
    net: TimeMlp,
}

impl EpsModel {
    /// Fresh model with a zero output layer, so it initially predicts zero noise.
    pub fn init(cfg: &ModelConfig, data_dim: usize, max_step: usize, rng: &mut SeededRng) -> Result<Self> {
        Self::init_with(cfg, data_dim, max_step, rng, true)
    }

    pub fn init_with(
        cfg: &ModelConfig,
        data_dim: usize,
        max_step: usize,
        rng: &mut SeededRng,
        zero_output: bool,
    ) -> Result<Self> {
        Ok(EpsModel {
            net: TimeMlp::init(cfg, data_dim, max_step, rng, zero_output)?,
        })
    }

    pub fn from_mlp(mlp: Mlp, data_dim: usize, time_embed: usize, max_step: usize) -> Result<Self> {
        Ok(EpsModel {
            net: TimeMlp::from_mlp(mlp, data_dim, time_embed, max_step)?,
        })
    }

    pub fn mlp(&self) -> &Mlp {
        &self.net.mlp
    }

    pub fn data_dim(&self) -> usize {
        self.net.data_dim
    }

    pub fn time_embed(&self) -> usize {
        self.net.time_embed
    }

    pub fn max_step(&self) -> usize {
        self.net.max_step
    }

    pub fn bind<'t>(&'t self, tape: &'t Tape, trainable: bool) -> BoundEps<'t> {
        BoundEps {
            model: self,
            mlp: self.net.mlp.bind(tape, trainable),
        }
    }

    /// Noise prediction at a single step for every row of `x`.
    pub fn eps_forward(&self, x: &Tensor, t: usize) -> Result<Tensor> {
        let tape = Tape::new();
        let bound = self.bind(&tape, false);
        let xv = tape.constant(x.clone());
        Ok(bound.eps(xv, &vec![t; x.rows()])?.value())
    }
}

impl Parameterized for EpsModel {
    fn params(&self) -> Vec<&Tensor> {
        self.net.mlp.params()
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.net.mlp.params_mut()
    }
}

impl NoisePredictor for EpsModel {
    fn predict_eps(&self, x: &Tensor, t: usize) -> Result<Tensor> {
        self.eps_forward(x, t)
    }
}

#[derive(Debug, Clone)]
pub struct BoundEps<'t> {
    model: &'t EpsModel,
    mlp: BoundMlp<'t>,
}

impl<'t> BoundEps<'t> {
    pub fn param_vars(&self) -> Vec<Var<'t>> {
        self.mlp.param_vars()
    }
}

impl<'t> EpsNet<'t> for BoundEps<'t> {
    fn eps(&self, x: Var<'t>, steps: &[usize]) -> Result<Var<'t>> {
        self.model.net.forward(&self.mlp, x, steps)
    }
}

/// How the consistency output mixes the input with the network output.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Parameterization {
    /// `c_skip = sd^2 / (r^2 + sd^2)`, `c_out = r sd / sqrt(r^2 + sd^2)` with
    /// `r = (t / T) * s_max`.
    Scaled { sigma_data: f64, s_max: f64 },
    /// `c_skip = 1`, `c_out = 0` at every step.
    Identity,
}

impl Parameterization {
    /// `(c_skip(t), c_out(t))`; exactly `(1, 0)` at `t = 0`.
    pub fn coefficients(&self, t: usize, max_step: usize) -> (f64, f64) {
        match *self {
            Parameterization::Identity => (1.0, 0.0),
            Parameterization::Scaled { sigma_data, s_max } => {
                let r = t as f64 / max_step as f64 * s_max;
                let sd2 = sigma_data * sigma_data;
                (sd2 / (r * r + sd2), r * sigma_data / (r * r + sd2).sqrt())
            }
        }
    }
}

/// Consistency function `f_theta(x, t) = c_skip(t) x + c_out(t) F_theta(x, t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConsistencyModel {
    net: TimeMlp,
    param: Parameterization,
}

impl ConsistencyModel {
    pub fn init(
        cfg: &ModelConfig,
        data_dim: usize,
        max_step: usize,
        param: Parameterization,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        if let Parameterization::Scaled { sigma_data, s_max } = param {
            ensure!(sigma_data > 0.0 && s_max > 0.0, "sigma_data and s_max must be positive");
        }
        Ok(ConsistencyModel {
            net: TimeMlp::init(cfg, data_dim, max_step, rng, false)?,
            param,
        })
    }

    pub fn from_mlp(
        mlp: Mlp,
        data_dim: usize,
        time_embed: usize,
        max_step: usize,
        param: Parameterization,
    ) -> Result<Self> {
        Ok(ConsistencyModel {
            net: TimeMlp::from_mlp(mlp, data_dim, time_embed, max_step)?,
            param,
        })
    }

    pub fn mlp(&self) -> &Mlp {
        &self.net.mlp
    }

    pub fn parameterization(&self) -> Parameterization {
        self.param
    }

    pub fn data_dim(&self) -> usize {
        self.net.data_dim
    }

    pub fn time_embed(&self) -> usize {
        self.net.time_embed
    }

    pub fn max_step(&self) -> usize {
        self.net.max_step
    }

    pub fn bind<'t>(&'t self, tape: &'t Tape, trainable: bool) -> BoundConsistency<'t> {
        BoundConsistency {
            model: self,
            mlp: self.net.mlp.bind(tape, trainable),
        }
    }

    /// Clean-data estimate at a single step for every row of `x`.
    pub fn cm_forward(&self, x: &Tensor, t: usize) -> Result<Tensor> {
        let tape = Tape::new();
        let bound = self.bind(&tape, false);
        let xv = tape.constant(x.clone());
        Ok(bound.denoise(xv, &vec![t; x.rows()])?.value())
    }
}

impl Parameterized for ConsistencyModel {
    fn params(&self) -> Vec<&Tensor> {
        self.net.mlp.params()
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.net.mlp.params_mut()
    }
}

#[derive(Debug, Clone)]
pub struct BoundConsistency<'t> {
    model: &'t ConsistencyModel,
    mlp: BoundMlp<'t>,
}

impl<'t> BoundConsistency<'t> {
    pub fn param_vars(&self) -> Vec<Var<'t>> {
        self.mlp.param_vars()
    }
}

impl<'t> ConsistencyNet<'t> for BoundConsistency<'t> {
    fn denoise(&self, x: Var<'t>, steps: &[usize]) -> Result<Var<'t>> {
        let model = self.model;
        if model.param == Parameterization::Identity {
            model.net.check_input(&x.shape(), steps)?;
            return Ok(x);
        }
        let raw = model.net.forward(&self.mlp, x, steps)?;
        let (skip, out): (Vec<f64>, Vec<f64>) = steps
            .iter()
            .map(|&t| model.param.coefficients(t, model.net.max_step))
            .unzip();
        let tape = x.tape();
        let skip = tape.constant(Tensor::column(skip)?);
        let out = tape.constant(Tensor::column(out)?);
        x.mul(skip)?.add(raw.mul(out)?)
    }
}

/// Online parameters with their exponential-moving-average target.
#[derive(Debug, Clone, PartialEq)]
pub struct EmaPair<M> {
    pub online: M,
    pub target: M,
    mu: f64,
}

impl<M: Parameterized + Clone> EmaPair<M> {
    /// Target starts as a copy of the online model.
    pub fn new(online: M, mu: f64) -> Result<Self> {
        ensure!((0.0..=1.0).contains(&mu), "EMA rate {mu} outside [0, 1]");
        Ok(EmaPair {
            target: online.clone(),
            online,
            mu,
        })
    }

    pub fn from_parts(online: M, target: M, mu: f64) -> Result<Self> {
        ensure!((0.0..=1.0).contains(&mu), "EMA rate {mu} outside [0, 1]");
        if online.param_shapes() != target.param_shapes() {
            return Err(Error::contract("online and target parameter layouts differ"));
        }
        Ok(EmaPair { online, target, mu })
    }

    pub fn mu(&self) -> f64 {
        self.mu
    }

    /// `target <- mu * target + (1 - mu) * online`.
    pub fn update(&mut self) -> Result<()> {
        ema_update(&mut self.target, &self.online, self.mu)
    }
}

/// Elementwise `target <- mu * target + (1 - mu) * online`.
pub fn ema_update<M: Parameterized>(target: &mut M, online: &M, mu: f64) -> Result<()> {
    ensure!((0.0..=1.0).contains(&mu), "EMA rate {mu} outside [0, 1]");
    let src = online.params();
    let dst = target.params_mut();
    if src.len() != dst.len() {
        return Err(Error::contract("online and target parameter layouts differ"));
    }
    for (t, o) in dst.into_iter().zip(src) {
        if t.shape() != o.shape() {
            return Err(Error::dims("ema_update", t.shape(), o.shape()));
        }
        for (tv, &ov) in t.data_mut().iter_mut().zip(o.data()) {
            *tv = mu * *tv + (1.0 - mu) * ov;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelConfig {
        ModelConfig {
            hidden: 8,
            depth: 2,
            time_embed: 4,
        }
    }

    #[test]
    fn zero_output_layer_predicts_zero() {
        let mut rng = SeededRng::new(0);
        let m = EpsModel::init(&small(), 3, 10, &mut rng).unwrap();
        let x = rng.normal_tensor(&[5, 3]);
        let y = m.eps_forward(&x, 4).unwrap();
        assert_eq!(y.shape(), &[5, 3]);
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn step_out_of_range_is_rejected() {
        let mut rng = SeededRng::new(0);
        let m = EpsModel::init(&small(), 1, 10, &mut rng).unwrap();
        assert!(matches!(
            m.eps_forward(&Tensor::zeros(&[2, 1]), 11),
            Err(Error::Contract(_))
        ));
        assert!(m.eps_forward(&Tensor::zeros(&[2, 2]), 1).is_err());
    }

    #[test]
    fn seeded_init_is_deterministic() {
        let a = EpsModel::init_with(&small(), 2, 10, &mut SeededRng::new(5), false).unwrap();
        let b = EpsModel::init_with(&small(), 2, 10, &mut SeededRng::new(5), false).unwrap();
        let x = Tensor::from_fn(&[4, 2], |i| i as f64 * 0.3 - 1.0);
        let (ya, yb) = (a.eps_forward(&x, 3).unwrap(), b.eps_forward(&x, 3).unwrap());
        assert_eq!(ya.data(), yb.data());
    }

    #[test]
    fn consistency_boundary_and_identity() {
        let mut rng = SeededRng::new(1);
        let p = Parameterization::Scaled {
            sigma_data: 0.5,
            s_max: 1.0,
        };
        let m = ConsistencyModel::init(&small(), 2, 20, p, &mut rng).unwrap();
        let x = rng.normal_tensor(&[6, 2]);
        assert_eq!(m.cm_forward(&x, 0).unwrap(), x);
        assert_ne!(m.cm_forward(&x, 7).unwrap(), x);

        let id = ConsistencyModel::init(&small(), 2, 20, Parameterization::Identity, &mut rng).unwrap();
        for t in [0, 1, 13, 20] {
            assert_eq!(id.cm_forward(&x, t).unwrap(), x);
        }
    }

    #[test]
    fn ema_edge_cases() {
        let mut rng = SeededRng::new(2);
        let online = Mlp::init(&[2, 3, 1], &mut rng, false).unwrap();
        let target = Mlp::init(&[2, 3, 1], &mut rng, false).unwrap();

        let mut fixed = target.clone();
        ema_update(&mut fixed, &online, 1.0).unwrap();
        assert_eq!(fixed, target);

        let mut copy = target.clone();
        ema_update(&mut copy, &online, 0.0).unwrap();
        assert_eq!(copy, online);

        let one = Mlp::from_layers(vec![Dense {
            weight: Tensor::ones(&[1, 1]),
            bias: Tensor::ones(&[1]),
        }])
        .unwrap();
        let zero = Mlp::from_layers(vec![Dense {
            weight: Tensor::zeros(&[1, 1]),
            bias: Tensor::zeros(&[1]),
        }])
        .unwrap();
        let mut pair = EmaPair::from_parts(zero, one, 0.95).unwrap();
        pair.update().unwrap();
        assert_eq!(pair.target.flat_params(), vec![0.95, 0.95]);
        assert_eq!(pair.online.flat_params(), vec![0.0, 0.0]);

        assert!(EmaPair::new(online.clone(), 1.5).is_err());
        let wide = Mlp::init(&[2, 4, 1], &mut rng, false).unwrap();
        assert!(ema_update(&mut wide.clone(), &online, 0.5).is_err());
    }

    #[test]
    fn ema_contracts_geometrically() {
        let mut rng = SeededRng::new(3);
        let start = Mlp::init(&[1, 2, 1], &mut rng, false).unwrap();
        let mut zero = start.clone();
        for p in zero.params_mut() {
            p.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let mu = 0.9;
        let mut target = start.clone();
        let mut expected = start.flat_params();
        for n in 1..=25 {
            ema_update(&mut target, &zero, mu).unwrap();
            expected.iter_mut().for_each(|v| *v *= mu);
            assert_eq!(target.flat_params(), expected);
            for (t, s) in target.flat_params().iter().zip(start.flat_params()) {
                assert!((t.abs() - mu.powi(n) * s.abs()).abs() <= 1e-15 * s.abs().max(1.0));
            }
        }
    }

    #[test]
    fn embedding_distinguishes_steps() {
        let e = time_embedding(&(0..=1000).collect::<Vec<_>>(), 16);
        for i in 0..=1000 {
            for j in (i + 1)..=(i + 3).min(1000) {
                assert_ne!(e.row(i), e.row(j));
            }
        }
    }
}
