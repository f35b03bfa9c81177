//! Dense row-major `f32` tensors and the handful of kernels a ViT forward
//! pass needs.
//!
//! Every kernel is a pure function of its inputs. Matmul accumulates in
//! `f32` in ascending `k` order, so results are bit-identical to a naive
//! triple loop; a wider accumulator would be permitted but is not used.

use std::fmt;

use crate::error::{Error, Result};

/// GELU tanh-approximation constant `sqrt(2 / pi)`.
pub const GELU_SQRT_2_OVER_PI: f32 = 0.797_884_560_8;
/// GELU tanh-approximation cubic coefficient.
pub const GELU_CUBIC: f32 = 0.044_715;

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
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
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f32>) -> Result<Self> {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::ShapeMismatch {
                op: "Tensor::new",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let numel = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; numel],
        }
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f32) -> Self {
        let mut t = Self::zeros(shape);
        t.data.fill(value);
        t
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> f32) -> Self {
        let mut t = Self::zeros(shape);
        for (i, v) in t.data.iter_mut().enumerate() {
            *v = f(i);
        }
        t
    }

    pub fn eye(n: usize) -> Self {
        Self::from_fn([n, n], |i| if i / n == i % n { 1.0 } else { 0.0 })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Extent of the last axis (1 for a scalar).
    pub fn last_dim(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    /// Number of rows when viewed as `[numel / last_dim, last_dim]`.
    pub fn rows(&self) -> usize {
        match self.last_dim() {
            0 => 0,
            d => self.data.len() / d,
        }
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let d = self.last_dim();
        &self.data[i * d..(i + 1) * d]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        let d = self.last_dim();
        &mut self.data[i * d..(i + 1) * d]
    }

    pub fn reshape(mut self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape,
                rhs: shape,
            });
        }
        self.shape = shape;
        Ok(self)
    }

    /// Builds a `[rows.len(), C]` matrix by gathering rows of a 2-D view.
    pub fn gather_rows(&self, rows: &[usize]) -> Tensor {
        let d = self.last_dim();
        let mut data = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            data.extend_from_slice(self.row(r));
        }
        Tensor {
            shape: vec![rows.len(), d],
            data,
        }
    }

    /// Copies columns `[start, start + len)` of a 2-D view.
    pub fn columns(&self, start: usize, len: usize) -> Tensor {
        let rows = self.rows();
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&self.row(r)[start..start + len]);
        }
        Tensor {
            shape: vec![rows, len],
            data,
        }
    }

    pub fn transpose2d(&self) -> Result<Tensor> {
        let (m, n) = self.dims2("transpose2d")?;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Ok(Tensor {
            shape: vec![n, m],
            data: out,
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        let mut out = self.clone();
        out.add_assign(other)?;
        Ok(out)
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                op: "add",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    /// Adds `bias` to every row.
    pub fn add_row_bias(&mut self, bias: &[f32]) -> Result<()> {
        if bias.len() != self.last_dim() {
            return Err(Error::ShapeMismatch {
                op: "add_row_bias",
                lhs: self.shape.clone(),
                rhs: vec![bias.len()],
            });
        }
        let d = bias.len();
        for row in self.data.chunks_exact_mut(d.max(1)) {
            for (x, b) in row.iter_mut().zip(bias) {
                *x += b;
            }
        }
        Ok(())
    }

    pub fn scale(&mut self, s: f32) {
        for x in &mut self.data {
            *x *= s;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape[..] {
            [m, n] => Ok((m, n)),
            _ => Err(Error::ShapeMismatch {
                op,
                lhs: self.shape.clone(),
                rhs: vec![],
            }),
        }
    }
}

/// `c = a · b` for `a: [M, K]`, `b: [K, N]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2("matmul")?;
    let (k2, n) = b.dims2("matmul")?;
    if k != k2 {
        return Err(Error::ShapeMismatch {
            op: "matmul",
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    let mut out = vec![0.0f32; m * n];
    matmul_into(&a.data, &b.data, &mut out, m, k, n);
    Ok(Tensor {
        shape: vec![m, n],
        data: out,
    })
}

/// Raw row-major kernel; `out` must be zeroed. Accumulation over `k` is in
/// ascending order for every output element.
pub(crate) fn matmul_into(a: &[f32], b: &[f32], out: &mut [f32], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut out[i * n..(i + 1) * n];
        for (kk, &av) in a_row.iter().enumerate() {
            let b_row = &b[kk * n..(kk + 1) * n];
            for (c, &bv) in c_row.iter_mut().zip(b_row) {
                *c += av * bv;
            }
        }
    }
}

/// Batched `c[b] = a[b] · b[b]` for `a: [B, M, K]`, `b: [B, K, N]`.
pub fn bmm(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let mismatch = || Error::ShapeMismatch {
        op: "bmm",
        lhs: a.shape.clone(),
        rhs: b.shape.clone(),
    };
    let (batch, m, k) = match a.shape[..] {
        [bb, m, k] => (bb, m, k),
        _ => return Err(mismatch()),
    };
    let n = match b.shape[..] {
        [bb, k2, n] if bb == batch && k2 == k => n,
        _ => return Err(mismatch()),
    };
    let mut out = vec![0.0f32; batch * m * n];
    for i in 0..batch {
        matmul_into(
            &a.data[i * m * k..(i + 1) * m * k],
            &b.data[i * k * n..(i + 1) * k * n],
            &mut out[i * m * n..(i + 1) * m * n],
            m,
            k,
            n,
        );
    }
    Ok(Tensor {
        shape: vec![batch, m, n],
        data: out,
    })
}

/// Affine map `x · w + bias` with `w` stored input-major as `[in, out]`.
pub fn linear(x: &Tensor, w: &Tensor, bias: &[f32]) -> Result<Tensor> {
    let mut y = matmul(x, w)?;
    y.add_row_bias(bias)?;
    Ok(y)
}

/// Numerically stable softmax over the last axis.
pub fn softmax_lastdim(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    softmax_rows_in_place(&mut out.data, x.last_dim());
    out
}

pub(crate) fn softmax_rows_in_place(data: &mut [f32], n: usize) {
    if n == 0 {
        return;
    }
    for row in data.chunks_exact_mut(n) {
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let mut sum = 0.0f32;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        let inv = 1.0 / sum;
        for v in row.iter_mut() {
            *v *= inv;
        }
    }
}

/// Per-row normalization over the last axis followed by `gamma ⊙ x̂ + beta`.
pub fn layer_norm(x: &Tensor, gamma: &[f32], beta: &[f32], eps: f32) -> Result<Tensor> {
    let c = x.last_dim();
    if gamma.len() != c || beta.len() != c {
        return Err(Error::ShapeMismatch {
            op: "layer_norm",
            lhs: x.shape.clone(),
            rhs: vec![gamma.len(), beta.len()],
        });
    }
    let mut out = x.clone();
    if c == 0 {
        return Ok(out);
    }
    for row in out.data.chunks_exact_mut(c) {
        let mean = row.iter().sum::<f32>() / c as f32;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / c as f32;
        let inv = 1.0 / (var + eps).sqrt();
        for ((v, g), b) in row.iter_mut().zip(gamma).zip(beta) {
            *v = (*v - mean) * inv * g + b;
        }
    }
    Ok(out)
}

/// GELU, tanh approximation:
/// `0.5 x (1 + tanh(0.7978845608 (x + 0.044715 x³)))`.
pub fn gelu(x: f32) -> f32 {
    0.5 * x * (1.0 + (GELU_SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x)).tanh())
}

pub fn gelu_in_place(t: &mut Tensor) {
    for v in &mut t.data {
        *v = gelu(*v);
    }
}

pub(crate) fn dot(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = 0.0f32;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

pub(crate) fn l2_norm(a: &[f32]) -> f32 {
    dot(a, a).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;

    fn naive_matmul(a: &Tensor, b: &Tensor) -> Vec<f64> {
        let (m, k) = (a.shape()[0], a.shape()[1]);
        let n = b.shape()[1];
        let mut out = vec![0.0f64; m * n];
        for i in 0..m {
            for j in 0..n {
                for kk in 0..k {
                    out[i * n + j] += a.data()[i * k + kk] as f64 * b.data()[kk * n + j] as f64;
                }
            }
        }
        out
    }

    #[test]
    fn matmul_identity() {
        let mut rng = RngStream::new(1).split("a");
        let a = rng.gaussian_tensor([5, 5], 1.0);
        assert_eq!(matmul(&a, &Tensor::eye(5)).unwrap(), a);
        assert_eq!(matmul(&Tensor::eye(5), &a).unwrap(), a);
    }

    #[test]
    fn matmul_hand_example() {
        let a = Tensor::new([2, 2], vec![1., 2., 3., 4.]).unwrap();
        let b = Tensor::new([2, 1], vec![1., 1.]).unwrap();
        assert_eq!(matmul(&a, &b).unwrap().data(), &[3., 7.]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = RngStream::new(17).split("mm");
        let a = rng.gaussian_tensor([17, 13], 1.0);
        let b = rng.gaussian_tensor([13, 11], 1.0);
        let c = matmul(&a, &b).unwrap();
        for (got, want) in c.data().iter().zip(naive_matmul(&a, &b)) {
            let denom = want.abs().max(1.0);
            assert!(((*got as f64) - want).abs() / denom <= 1e-5, "{got} vs {want}");
        }
    }

    #[test]
    fn matmul_zero_is_exact() {
        let mut rng = RngStream::new(2).split("z");
        let a = rng.gaussian_tensor([4, 6], 1.0);
        let z = Tensor::zeros([6, 3]);
        assert!(matmul(&a, &z).unwrap().data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor::zeros([2, 3]);
        let b = Tensor::zeros([2, 3]);
        let msg = matmul(&a, &b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3] vs [2, 3]"), "{msg}");
    }

    #[test]
    fn softmax_closed_forms() {
        let t = Tensor::full([1, 4], 3.5);
        assert_eq!(softmax_lastdim(&t).data(), &[0.25; 4]);
        let t = Tensor::new([2], vec![0.0, 2f32.ln()]).unwrap();
        let s = softmax_lastdim(&t);
        assert!((s.data()[0] - 1.0 / 3.0).abs() < 1e-7);
        assert!((s.data()[1] - 2.0 / 3.0).abs() < 1e-7);
    }

    #[test]
    fn softmax_matches_f64_oracle_on_wide_range() {
        let mut rng = RngStream::new(9).split("sm");
        for _ in 0..50 {
            let row = rng.uniform_vec(32, -1e4, 1e4);
            let got = softmax_lastdim(&Tensor::new([32], row.clone()).unwrap());
            let max = row.iter().map(|v| *v as f64).fold(f64::MIN, f64::max);
            let exps: Vec<f64> = row.iter().map(|v| (*v as f64 - max).exp()).collect();
            let sum: f64 = exps.iter().sum();
            for (g, e) in got.data().iter().zip(&exps) {
                assert!((*g as f64 - e / sum).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn layer_norm_cases() {
        let t = Tensor::full([1, 5], 2.0);
        let ln = layer_norm(&t, &[1.0; 5], &[0.0; 5], 1e-6).unwrap();
        assert!(ln.data().iter().all(|v| *v == 0.0));

        let t = Tensor::new([2], vec![1.0, -1.0]).unwrap();
        let ln = layer_norm(&t, &[1.0; 2], &[0.0; 2], 1e-12).unwrap();
        assert!((ln.data()[0] - 1.0).abs() < 1e-6 && (ln.data()[1] + 1.0).abs() < 1e-6);
    }

    #[test]
    fn layer_norm_matches_direct_formula() {
        let mut rng = RngStream::new(4).split("ln");
        let x = rng.gaussian_tensor([3, 16], 1.0);
        let g = rng.gaussian_vec(16, 1.0);
        let b = rng.gaussian_vec(16, 1.0);
        let y = layer_norm(&x, &g, &b, 1e-6).unwrap();
        for r in 0..3 {
            let row: Vec<f64> = x.row(r).iter().map(|v| *v as f64).collect();
            let mean = row.iter().sum::<f64>() / 16.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
            for c in 0..16 {
                let want = (row[c] - mean) / (var + 1e-6).sqrt() * g[c] as f64 + b[c] as f64;
                assert!((y.row(r)[c] as f64 - want).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn gelu_reference_points() {
        assert_eq!(gelu(0.0), 0.0);
        assert!((gelu(1.0) - 0.841_192).abs() < 1e-5);
        assert!((gelu(-1.0) + 0.158_808).abs() < 1e-5);
    }
}
