use std::f64::consts::{FRAC_2_PI, SQRT_2};

use statrs::function::erf::erf;

use crate::error::{ensure, Error, Result};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

fn sorted_finite(xs: &[f64], name: &str) -> Result<Vec<f64>> {
    ensure!(!xs.is_empty(), "{name} sample is empty");
    if xs.iter().any(|v| !v.is_finite()) {
        return Err(Error::numeric(format!("{name} sample contains non-finite values")));
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    Ok(v)
}

/// Empirical 1-Wasserstein distance between two 1-D samples. Equal sizes use
/// the sorted coupling; unequal sizes integrate the CDF difference exactly.
pub fn w1_1d(a: &[f64], b: &[f64]) -> Result<f64> {
    let a = sorted_finite(a, "first")?;
    let b = sorted_finite(b, "second")?;
    if a.len() == b.len() {
        let total: f64 = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum();
        return Ok(total / a.len() as f64);
    }
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0usize, 0usize);
    let mut prev = a[0].min(b[0]);
    let mut total = 0.0;
    while i < a.len() || j < b.len() {
        let next = match (a.get(i), b.get(j)) {
            (Some(&x), Some(&y)) => x.min(y),
            (Some(&x), None) => x,
            (None, Some(&y)) => y,
            (None, None) => unreachable!(),
        };
        total += (i as f64 / na - j as f64 / nb).abs() * (next - prev);
        while i < a.len() && a[i] == next {
            i += 1;
        }
        while j < b.len() && b[j] == next {
            j += 1;
        }
        prev = next;
    }
    Ok(total)
}

fn check_samples(a: &Tensor, b: &Tensor) -> Result<usize> {
    ensure!(a.ndim() == 2 && b.ndim() == 2, "samples must be [n, dim] tensors");
    if a.cols() != b.cols() {
        return Err(Error::dims("sliced_wasserstein", a.shape(), b.shape()));
    }
    Ok(a.cols())
}

fn project(x: &Tensor, dir: &[f64]) -> Vec<f64> {
    (0..x.rows())
        .map(|i| x.row(i).iter().zip(dir).map(|(v, d)| v * d).sum())
        .collect()
}

/// Average 1-D Wasserstein distance over the given projection directions,
/// each normalized to unit length.
pub fn sliced_wasserstein_along(a: &Tensor, b: &Tensor, dirs: &[Vec<f64>]) -> Result<f64> {
    let d = check_samples(a, b)?;
    ensure!(!dirs.is_empty(), "need at least one projection direction");
    let mut total = 0.0;
    for dir in dirs {
        ensure!(dir.len() == d, "direction has {} entries, expected {d}", dir.len());
        let n = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
        ensure!(n > 0.0 && n.is_finite(), "projection direction must be non-zero");
        let unit: Vec<f64> = dir.iter().map(|v| v / n).collect();
        total += w1_1d(&project(a, &unit), &project(b, &unit))?;
    }
    Ok(total / dirs.len() as f64)
}

/// Sliced Wasserstein-1 distance with `n_proj` directions drawn uniformly
/// on the sphere from `seed`.
pub fn sliced_wasserstein(a: &Tensor, b: &Tensor, n_proj: usize, seed: u64) -> Result<f64> {
    let d = check_samples(a, b)?;
    ensure!(n_proj >= 1, "need at least one projection");
    let mut rng = SeededRng::new(seed);
    let dirs: Vec<Vec<f64>> = (0..n_proj)
        .map(|_| loop {
            let v: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
            if v.iter().any(|x| *x != 0.0) {
                break v;
            }
        })
        .collect();
    sliced_wasserstein_along(a, b, &dirs)
}

/// `KL(N(m1, s1^2) || N(m2, s2^2))`.
pub fn gaussian_kl(m1: f64, s1: f64, m2: f64, s2: f64) -> Result<f64> {
    ensure!(s1 > 0.0 && s2 > 0.0, "standard deviations must be positive");
    Ok((s2 / s1).ln() + (s1 * s1 + (m1 - m2).powi(2)) / (2.0 * s2 * s2) - 0.5)
}

/// Exact `W1(N(m1, s1^2), N(m2, s2^2))`: the monotone coupling gives
/// `E|a + b Z|` with `a = m2 - m1`, `b = s2 - s1`.
pub fn gaussian_w1(m1: f64, s1: f64, m2: f64, s2: f64) -> Result<f64> {
    ensure!(s1 >= 0.0 && s2 >= 0.0, "standard deviations must be non-negative");
    let (a, b) = (m2 - m1, (s2 - s1).abs());
    if b == 0.0 {
        return Ok(a.abs());
    }
    Ok(b * FRAC_2_PI.sqrt() * (-(a * a) / (2.0 * b * b)).exp() + a * erf(a / (b * SQRT_2)))
}
