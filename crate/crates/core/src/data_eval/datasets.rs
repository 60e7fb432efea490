use std::f64::consts::{PI, TAU};

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

/// Seed and size of the draw that fixes the normalization of 2-D datasets.
/// Using one fixed draw keeps the normalization identical across sample
/// sizes and seeds.
const NORMALIZATION_SEED: u64 = 0x5eed_da7a;
const NORMALIZATION_DRAW: usize = 100_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetKind {
    /// `N(mu, sigma^2)` in one dimension, left unnormalized.
    #[serde(rename = "gaussian_1d")]
    Gaussian1d {
        #[serde(default)]
        mu: f64,
        #[serde(default = "one")]
        sigma: f64,
    },
    /// Isotropic Gaussians centred evenly on a circle.
    #[serde(rename = "mixture_2d")]
    Mixture2d {
        #[serde(default = "eight")]
        components: usize,
        #[serde(default = "one")]
        radius: f64,
        #[serde(default = "mixture_sigma")]
        sigma: f64,
    },
    #[serde(rename = "swiss_roll_2d")]
    SwissRoll2d {
        #[serde(default = "roll_noise")]
        noise: f64,
    },
    #[serde(rename = "checkerboard_2d")]
    Checkerboard2d,
}

fn one() -> f64 {
    1.0
}
fn eight() -> usize {
    8
}
fn mixture_sigma() -> f64 {
    0.05
}
fn roll_noise() -> f64 {
    0.25
}

impl DatasetKind {
    pub fn mixture_default() -> Self {
        DatasetKind::Mixture2d {
            components: eight(),
            radius: one(),
            sigma: mixture_sigma(),
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            DatasetKind::Gaussian1d { .. } => 1,
            _ => 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            DatasetKind::Gaussian1d { mu, sigma } => {
                ensure!(mu.is_finite() && sigma > 0.0 && sigma.is_finite(), "need finite mu and sigma > 0");
            }
            DatasetKind::Mixture2d { components, radius, sigma } => {
                ensure!(components >= 1, "mixture needs at least one component");
                ensure!(radius >= 0.0 && sigma > 0.0, "need radius >= 0 and sigma > 0");
            }
            DatasetKind::SwissRoll2d { noise } => ensure!(noise >= 0.0, "noise must be non-negative"),
            DatasetKind::Checkerboard2d => {}
        }
        Ok(())
    }

    /// Raw (unnormalized) draws, one row per sample.
    fn draw_raw(&self, n: usize, rng: &mut SeededRng) -> Tensor {
        match *self {
            DatasetKind::Gaussian1d { mu, sigma } => Tensor::from_fn(&[n, 1], |_| mu + sigma * rng.normal()),
            DatasetKind::Mixture2d { components, radius, sigma } => {
                let mut data = Vec::with_capacity(2 * n);
                for _ in 0..n {
                    let k = rng.int_inclusive(0, components - 1);
                    let angle = TAU * k as f64 / components as f64;
                    data.push(radius * angle.cos() + sigma * rng.normal());
                    data.push(radius * angle.sin() + sigma * rng.normal());
                }
                Tensor::new(vec![n, 2], data).expect("shape")
            }
            DatasetKind::SwissRoll2d { noise } => {
                let mut data = Vec::with_capacity(2 * n);
                for _ in 0..n {
                    let t = 1.5 * PI * (1.0 + 2.0 * rng.uniform());
                    data.push(t * t.cos() + noise * rng.normal());
                    data.push(t * t.sin() + noise * rng.normal());
                }
                Tensor::new(vec![n, 2], data).expect("shape")
            }
            DatasetKind::Checkerboard2d => {
                let mut data = Vec::with_capacity(2 * n);
                for _ in 0..n {
                    let x1 = 4.0 * rng.uniform() - 2.0;
                    let band = 2.0 * rng.int_inclusive(0, 1) as f64;
                    let x2 = rng.uniform() - band + x1.floor().rem_euclid(2.0);
                    data.push(2.0 * x1);
                    data.push(2.0 * x2);
                }
                Tensor::new(vec![n, 2], data).expect("shape")
            }
        }
    }

    /// Normalization map; 2-D kinds standardize against a fixed reference draw.
    pub fn affine(&self) -> Affine {
        match self {
            DatasetKind::Gaussian1d { .. } => Affine::identity(1),
            _ => {
                let raw = self.draw_raw(NORMALIZATION_DRAW, &mut SeededRng::new(NORMALIZATION_SEED));
                Affine::standardizing(&raw)
            }
        }
    }
}

/// Per-coordinate map `normalized = (raw - shift) / scale`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Affine {
    pub shift: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Affine {
    pub fn identity(dim: usize) -> Self {
        Affine {
            shift: vec![0.0; dim],
            scale: vec![1.0; dim],
        }
    }

    fn standardizing(raw: &Tensor) -> Self {
        let (n, d) = (raw.rows() as f64, raw.cols());
        let mut shift = Vec::with_capacity(d);
        let mut scale = Vec::with_capacity(d);
        for j in 0..d {
            let col = raw.column_values(j);
            let mean = col.iter().sum::<f64>() / n;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            shift.push(mean);
            scale.push(var.sqrt());
        }
        Affine { shift, scale }
    }

    pub fn normalize(&self, raw: &Tensor) -> Result<Tensor> {
        self.apply(raw, |v, s, c| (v - s) / c)
    }

    pub fn denormalize(&self, x: &Tensor) -> Result<Tensor> {
        self.apply(x, |v, s, c| v * c + s)
    }

    fn apply(&self, x: &Tensor, f: impl Fn(f64, f64, f64) -> f64) -> Result<Tensor> {
        if x.ndim() != 2 || x.cols() != self.shift.len() {
            return Err(Error::dims("affine", x.shape(), &[self.shift.len()]));
        }
        let d = self.shift.len();
        let mut out = x.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            let j = i % d;
            *v = f(*v, self.shift[j], self.scale[j]);
        }
        Ok(out)
    }
}

/// A finite sample from a synthetic distribution, in normalized coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    kind: DatasetKind,
    samples: Tensor,
    affine: Affine,
}

impl Dataset {
    pub fn generate(kind: &DatasetKind, n: usize, seed: u64) -> Result<Self> {
        kind.validate()?;
        ensure!(n >= 1, "dataset needs at least one sample");
        let mut rng = SeededRng::new(seed);
        let raw = kind.draw_raw(n, &mut rng);
        let affine = kind.affine();
        Ok(Dataset {
            kind: kind.clone(),
            samples: affine.normalize(&raw)?,
            affine,
        })
    }

    pub fn kind(&self) -> &DatasetKind {
        &self.kind
    }

    pub fn samples(&self) -> &Tensor {
        &self.samples
    }

    pub fn affine(&self) -> &Affine {
        &self.affine
    }

    pub fn len(&self) -> usize {
        self.samples.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.samples.cols()
    }
}
