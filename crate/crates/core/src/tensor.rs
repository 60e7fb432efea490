//! Dense row-major `f64` tensors and the handful of kernels the autodiff
//! engine needs.
//!
//! Reductions always walk the flat buffer front to back, so results are
//! bitwise reproducible for a given input.

use std::fmt;

use crate::error::{Error, Result};

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::contract(format!(
                "tensor dimensions must be positive, got {shape:?}"
            )));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Dimension {
                op: "tensor",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// A `[rows, cols]` matrix from row-major data.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    /// A `[n, 1]` column.
    pub fn column(data: Vec<f64>) -> Result<Self> {
        let n = data.len();
        Self::new(vec![n, 1], data)
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    /// Number of rows of a 2-D tensor (or the length of a 1-D one).
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Number of columns; 1 for a 1-D tensor.
    pub fn cols(&self) -> usize {
        if self.shape.len() >= 2 {
            self.shape[1..].iter().product()
        } else {
            1
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(Error::contract(format!(
                "item() needs a one-element tensor, got shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::dims("reshape", &self.shape, &shape));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::dims(op, &self.shape, &other.shape));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Self> {
        self.zip_map(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Self> {
        self.zip_map(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Self> {
        self.zip_map(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, c: f64) -> Self {
        self.map(|v| v * c)
    }

    /// In-place `self += c * other`.
    pub fn axpy(&mut self, c: f64, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::dims("axpy", &self.shape, &other.shape));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += c * b;
        }
        Ok(())
    }

    pub fn sum(&self) -> f64 {
        let mut acc = 0.0;
        for &v in &self.data {
            acc += v;
        }
        acc
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn sq_norm(&self) -> f64 {
        let mut acc = 0.0;
        for &v in &self.data {
            acc += v * v;
        }
        acc
    }

    pub fn norm(&self) -> f64 {
        self.sq_norm().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    /// Euclidean norm of each row.
    pub fn row_norms(&self) -> Vec<f64> {
        (0..self.rows())
            .map(|i| {
                let mut acc = 0.0;
                for &v in self.row(i) {
                    acc += v * v;
                }
                acc.sqrt()
            })
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn has_nan(&self) -> bool {
        self.data.iter().any(|v| v.is_nan())
    }

    /// Column `j` of a 2-D tensor as a vector.
    pub fn column_values(&self, j: usize) -> Vec<f64> {
        let c = self.cols();
        (0..self.rows()).map(|i| self.data[i * c + j]).collect()
    }

    pub fn transpose(&self) -> Result<Self> {
        if self.ndim() != 2 {
            return Err(Error::contract(format!(
                "transpose needs a 2-D tensor, got {:?}",
                self.shape
            )));
        }
        let (r, c) = (self.shape[0], self.shape[1]);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(Tensor {
            shape: vec![c, r],
            data: out,
        })
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Self> {
        if self.ndim() != 2 || other.ndim() != 2 || self.shape[1] != other.shape[0] {
            return Err(Error::dims("matmul", &self.shape, &other.shape));
        }
        let (m, k, n) = (self.shape[0], self.shape[1], other.shape[1]);
        let mut out = vec![0.0; m * n];
        kernels::gemm_nn(&self.data, &other.data, &mut out, m, k, n);
        Ok(Tensor {
            shape: vec![m, n],
            data: out,
        })
    }

    /// Broadcast to `shape` following right-aligned numpy rules.
    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Self> {
        if self.shape == shape {
            return Ok(self.clone());
        }
        let map = BroadcastMap::new(&self.shape, shape)?;
        let n: usize = shape.iter().product();
        let data = match map.period() {
            Some(_) => self.data.iter().copied().cycle().take(n).collect(),
            None => (0..n).map(|i| self.data[map.source_index(i)]).collect(),
        };
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Concatenate 2-D tensors along columns.
    pub fn concat_cols(parts: &[&Tensor]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::contract("concat of zero tensors"))?;
        let rows = first.rows();
        for p in parts {
            if p.ndim() != 2 || p.rows() != rows {
                return Err(Error::dims("concat", first.shape(), p.shape()));
            }
        }
        let total: usize = parts.iter().map(|p| p.cols()).sum();
        let mut data = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for p in parts {
                data.extend_from_slice(p.row(i));
            }
        }
        Ok(Tensor {
            shape: vec![rows, total],
            data,
        })
    }

    /// Columns `start..end` of a 2-D tensor.
    pub fn slice_cols(&self, start: usize, end: usize) -> Result<Self> {
        if self.ndim() != 2 || start >= end || end > self.shape[1] {
            return Err(Error::contract(format!(
                "invalid column slice {start}..{end} of {:?}",
                self.shape
            )));
        }
        let rows = self.rows();
        let mut data = Vec::with_capacity(rows * (end - start));
        for i in 0..rows {
            data.extend_from_slice(&self.row(i)[start..end]);
        }
        Ok(Tensor {
            shape: vec![rows, end - start],
            data,
        })
    }

    /// Select rows by index (with repetition allowed).
    pub fn gather_rows(&self, idx: &[usize]) -> Result<Self> {
        let c = self.cols();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= self.rows() {
                return Err(Error::contract(format!(
                    "row index {i} out of range for {:?}",
                    self.shape
                )));
            }
            data.extend_from_slice(self.row(i));
        }
        let mut shape = self.shape.clone();
        shape[0] = idx.len();
        Tensor::new(shape, data)
    }
}

/// Index map from a broadcast output back to its source buffer.
#[derive(Debug, Clone)]
pub(crate) struct BroadcastMap {
    out_shape: Vec<usize>,
    /// Source stride for each output axis (0 on broadcast axes).
    src_strides: Vec<usize>,
}

impl BroadcastMap {
    pub(crate) fn new(src: &[usize], out: &[usize]) -> Result<Self> {
        if src.len() > out.len() {
            return Err(Error::dims("broadcast", src, out));
        }
        let offset = out.len() - src.len();
        let mut src_strides = vec![0; out.len()];
        let mut stride = 1;
        for axis in (0..src.len()).rev() {
            let (s, o) = (src[axis], out[axis + offset]);
            if s == o {
                src_strides[axis + offset] = stride;
            } else if s != 1 {
                return Err(Error::dims("broadcast", src, out));
            }
            stride *= s;
        }
        Ok(BroadcastMap {
            out_shape: out.to_vec(),
            src_strides,
        })
    }

    /// `Some(p)` when the source index is simply `flat % p`, i.e. the source
    /// is tiled along leading axes.
    pub(crate) fn period(&self) -> Option<usize> {
        let mut axis = self.out_shape.len();
        let mut period = 1;
        while axis > 0 && self.src_strides[axis - 1] == period {
            period *= self.out_shape[axis - 1];
            axis -= 1;
        }
        self.src_strides[..axis].iter().all(|&s| s == 0).then_some(period)
    }

    pub(crate) fn source_index(&self, mut flat: usize) -> usize {
        let mut src = 0;
        for axis in (0..self.out_shape.len()).rev() {
            let d = self.out_shape[axis];
            src += (flat % d) * self.src_strides[axis];
            flat /= d;
        }
        src
    }
}

pub(crate) mod kernels {
    const MR: usize = 4;
    const NR: usize = 8;

    /// `out += a[m,k] * b[k,n]`. Each output element accumulates over `k` in
    /// ascending order regardless of blocking or instruction set, so results
    /// are bit-identical across machines (no fused multiply-add).
    pub fn gemm_nn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
        assert!(a.len() >= m * k && b.len() >= k * n && out.len() >= m * n);
        #[cfg(target_arch = "x86_64")]
        {
            if std::arch::is_x86_feature_detected!("avx") {
                // SAFETY: AVX support was just detected.
                unsafe { gemm_nn_avx(a, b, out, m, k, n) };
                return;
            }
        }
        gemm_nn_portable(a, b, out, m, k, n);
    }

    #[cfg(target_arch = "x86_64")]
    #[target_feature(enable = "avx")]
    unsafe fn gemm_nn_avx(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
        gemm_nn_portable(a, b, out, m, k, n);
    }

    #[inline(always)]
    fn gemm_nn_portable(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
        let mut i = 0;
        while i + MR <= m {
            let mut j = 0;
            while j + NR <= n {
                block(a, b, out, i, j, k, n);
                j += NR;
            }
            if j < n {
                for r in i..i + MR {
                    edge(a, b, out, r, j, k, n);
                }
            }
            i += MR;
        }
        for r in i..m {
            edge(a, b, out, r, 0, k, n);
        }
    }

    #[inline(always)]
    fn block(a: &[f64], b: &[f64], out: &mut [f64], i: usize, j: usize, k: usize, n: usize) {
        let rows: [&[f64]; MR] = std::array::from_fn(|r| &a[(i + r) * k..(i + r + 1) * k]);
        let mut acc = [[0.0f64; NR]; MR];
        for (r, row) in acc.iter_mut().enumerate() {
            row.copy_from_slice(&out[(i + r) * n + j..(i + r) * n + j + NR]);
        }
        for p in 0..k {
            let bv: [f64; NR] = b[p * n + j..p * n + j + NR].try_into().expect("block width");
            for (row, arow) in acc.iter_mut().zip(&rows) {
                let av = arow[p];
                for c in 0..NR {
                    row[c] += av * bv[c];
                }
            }
        }
        for (r, row) in acc.iter().enumerate() {
            out[(i + r) * n + j..(i + r) * n + j + NR].copy_from_slice(row);
        }
    }

    #[inline(always)]
    fn edge(a: &[f64], b: &[f64], out: &mut [f64], r: usize, j0: usize, k: usize, n: usize) {
        let orow = &mut out[r * n + j0..(r + 1) * n];
        for p in 0..k {
            let av = a[r * k + p];
            for (o, &bv) in orow.iter_mut().zip(&b[p * n + j0..(p + 1) * n]) {
                *o += av * bv;
            }
        }
    }

    /// `out += a[m,k] * b[n,k]^T`, giving `[m,n]`. `b` is transposed once so
    /// the inner loop runs over contiguous rows.
    pub fn gemm_nt(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
        let mut bt = vec![0.0; k * n];
        for j in 0..n {
            for p in 0..k {
                bt[p * n + j] = b[j * k + p];
            }
        }
        gemm_nn(a, &bt, out, m, k, n);
    }

    /// `out += a[m,k]^T * b[m,n]`, giving `[k,n]`, summing over `m` in order.
    pub fn gemm_tn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
        let mut at = vec![0.0; m * k];
        for i in 0..m {
            for p in 0..k {
                at[p * m + i] = a[i * k + p];
            }
        }
        gemm_nn(&at, b, out, k, m, n);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_mismatched_buffer() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![0], vec![]).is_err());
    }

    #[test]
    fn matmul_small() {
        let a = Tensor::matrix(2, 3, vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let b = Tensor::matrix(3, 2, vec![7., 8., 9., 10., 11., 12.]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.data(), &[58., 64., 139., 154.]);
        assert!(a.matmul(&a).is_err());
    }

    #[test]
    fn transposed_kernels_agree_with_explicit_transpose() {
        let a = Tensor::from_fn(&[4, 3], |i| (i as f64 * 0.37).sin());
        let b = Tensor::from_fn(&[5, 3], |i| (i as f64 * 0.11).cos());
        let mut nt = vec![0.0; 20];
        kernels::gemm_nt(a.data(), b.data(), &mut nt, 4, 3, 5);
        let expected = a.matmul(&b.transpose().unwrap()).unwrap();
        for (x, y) in nt.iter().zip(expected.data()) {
            assert!((x - y).abs() < 1e-14);
        }
        let c = Tensor::from_fn(&[4, 5], |i| i as f64 - 7.0);
        let mut tn = vec![0.0; 15];
        kernels::gemm_tn(a.data(), c.data(), &mut tn, 4, 3, 5);
        let expected = a.transpose().unwrap().matmul(&c).unwrap();
        for (x, y) in tn.iter().zip(expected.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn broadcast_rows_and_columns() {
        let bias = Tensor::new(vec![3], vec![1., 2., 3.]).unwrap();
        let b = bias.broadcast_to(&[2, 3]).unwrap();
        assert_eq!(b.data(), &[1., 2., 3., 1., 2., 3.]);
        let col = Tensor::column(vec![10., 20.]).unwrap();
        let c = col.broadcast_to(&[2, 3]).unwrap();
        assert_eq!(c.data(), &[10., 10., 10., 20., 20., 20.]);
        let s = Tensor::scalar(4.0).broadcast_to(&[2, 2]).unwrap();
        assert_eq!(s.data(), &[4.0; 4]);
        assert!(bias.broadcast_to(&[2, 4]).is_err());
    }

    #[test]
    fn concat_and_slice_are_inverse() {
        let a = Tensor::from_fn(&[3, 2], |i| i as f64);
        let b = Tensor::from_fn(&[3, 1], |i| 100.0 + i as f64);
        let c = Tensor::concat_cols(&[&a, &b]).unwrap();
        assert_eq!(c.shape(), &[3, 3]);
        assert_eq!(c.slice_cols(0, 2).unwrap(), a);
        assert_eq!(c.slice_cols(2, 3).unwrap(), b);
    }
}
