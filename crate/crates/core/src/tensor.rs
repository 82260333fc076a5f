//! Minimal dense tensor engine.
//!
//! Storage is a flat row-major `Vec<f64>` with explicit dims. There are no
//! views or strides: every operation returns a fresh tensor. Each primitive
//! that appears in a model forward pass has a matching `*_backward` function
//! taking the upstream gradient and returning the gradient(s) of its inputs.
//!
//! Reductions run sequentially left to right so reruns are bit-identical.

use std::fmt;

use crate::{Error, Result};

#[derive(Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("dims", &self.dims)
            .field("data", &self.data)
            .finish()
    }
}

fn check_dims(dims: &[usize]) -> Result<usize> {
    if dims.is_empty() {
        return Err(Error::shape("tensor must have rank >= 1"));
    }
    if dims.iter().any(|&d| d == 0) {
        return Err(Error::shape(format!(
            "all dims must be positive, got {dims:?}"
        )));
    }
    Ok(dims.iter().product())
}

impl Tensor {
    /// Builds a tensor, validating `data.len() == prod(dims)` and finiteness.
    pub fn new(dims: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n = check_dims(&dims)?;
        if n != data.len() {
            return Err(Error::shape(format!(
                "dims {dims:?} need {n} values, got {}",
                data.len()
            )));
        }
        Tensor { dims, data }.finite("Tensor::new")
    }

    pub fn zeros(dims: &[usize]) -> Self {
        Self::filled(dims, 0.0)
    }

    pub fn filled(dims: &[usize], value: f64) -> Self {
        let n = check_dims(dims).expect("invalid dims");
        Tensor {
            dims: dims.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn vector(values: &[f64]) -> Result<Self> {
        Self::new(vec![values.len()], values.to_vec())
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::shape("ragged rows"));
        }
        Self::new(vec![r, c], rows.concat())
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Builds a tensor by evaluating `f` at every flat index.
    pub fn from_fn(dims: &[usize], f: impl FnMut(usize) -> f64) -> Result<Self> {
        let n = check_dims(dims)?;
        Self::new(dims.to_vec(), (0..n).map(f).collect())
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Mutable access for parameter updates and finite-difference probes.
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn rows(&self) -> usize {
        self.dims[0]
    }

    pub fn cols(&self) -> usize {
        self.dims[1..].iter().product()
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn same_dims(&self, other: &Tensor) -> bool {
        self.dims == other.dims
    }

    pub(crate) fn finite(self, op: &str) -> Result<Self> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(self)
        } else {
            Err(Error::NonFinite(op.to_string()))
        }
    }

    fn expect_rank2(&self, op: &str) -> Result<(usize, usize)> {
        if self.rank() != 2 {
            return Err(Error::shape(format!(
                "{op}: expected rank-2 tensor, got dims {:?}",
                self.dims
            )));
        }
        Ok((self.dims[0], self.dims[1]))
    }

    fn expect_same(&self, other: &Tensor, op: &str) -> Result<()> {
        if self.dims != other.dims {
            return Err(Error::shape(format!(
                "{op}: dims {:?} vs {:?}",
                self.dims, other.dims
            )));
        }
        Ok(())
    }

    pub fn reshape(&self, dims: &[usize]) -> Result<Tensor> {
        let n = check_dims(dims)?;
        if n != self.len() {
            return Err(Error::shape(format!(
                "cannot reshape {:?} into {dims:?}",
                self.dims
            )));
        }
        Ok(Tensor {
            dims: dims.to_vec(),
            data: self.data.clone(),
        })
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (r, c) = self.expect_rank2("transpose")?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(Tensor {
            dims: vec![c, r],
            data: out,
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Tensor> {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
        .finite("map")
    }

    pub fn zip_with(
        &self,
        other: &Tensor,
        op: &str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        self.expect_same(other, op)?;
        Tensor {
            dims: self.dims.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
        .finite(op)
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, s: f64) -> Result<Tensor> {
        self.map(|v| v * s)
    }

    /// In-place `self += other`, used for gradient accumulation.
    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        self.expect_same(other, "add_assign")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    /// In-place `self += s * other`.
    pub fn axpy(&mut self, s: f64, other: &Tensor) -> Result<()> {
        self.expect_same(other, "axpy")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
        Ok(())
    }

    pub fn fill(&mut self, value: f64) {
        self.data.iter_mut().for_each(|v| *v = value);
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().fold(0.0, |acc, &v| acc + v)
    }

    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        self.expect_same(other, "dot")?;
        Ok(dot(&self.data, &other.data))
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m: f64, v| m.max(v.abs()))
    }

    /// Adds `bias[j]` to every row of a rank-2 `[n, c]` tensor.
    pub fn add_row_bias(&self, bias: &Tensor) -> Result<Tensor> {
        let (_, c) = self.expect_rank2("add_row_bias")?;
        if bias.dims != [c] {
            return Err(Error::shape(format!(
                "add_row_bias: bias dims {:?} for {c} columns",
                bias.dims
            )));
        }
        let mut out = self.clone();
        for row in out.data.chunks_mut(c) {
            for (v, b) in row.iter_mut().zip(&bias.data) {
                *v += b;
            }
        }
        out.finite("add_row_bias")
    }

    /// Column sums of a rank-2 tensor (backward of [`Tensor::add_row_bias`]).
    pub fn sum_rows(&self) -> Result<Tensor> {
        let (_, c) = self.expect_rank2("sum_rows")?;
        let mut out = vec![0.0; c];
        for row in self.data.chunks(c) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        Ok(Tensor {
            dims: vec![c],
            data: out,
        })
    }

    /// Mean over rows of a rank-2 tensor, giving a `[c]` vector.
    pub fn mean_rows(&self) -> Result<Tensor> {
        let n = self.rows() as f64;
        self.sum_rows()?.scale(1.0 / n)
    }

    /// Gathers the given rows of a rank-2 tensor.
    pub fn gather_rows(&self, idx: &[usize]) -> Result<Tensor> {
        let (r, c) = self.expect_rank2("gather_rows")?;
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= r {
                return Err(Error::shape(format!("row {i} out of range {r}")));
            }
            data.extend_from_slice(&self.data[i * c..(i + 1) * c]);
        }
        Tensor::new(vec![idx.len(), c], data)
    }

    /// Writes `src` rows into `self` at `idx`, the inverse of `gather_rows`.
    pub fn scatter_rows(&mut self, idx: &[usize], src: &Tensor) -> Result<()> {
        let c = self.cols();
        if src.rows() != idx.len() || src.cols() != c {
            return Err(Error::shape("scatter_rows: source shape mismatch"));
        }
        for (k, &i) in idx.iter().enumerate() {
            self.data[i * c..(i + 1) * c].copy_from_slice(&src.data[k * c..(k + 1) * c]);
        }
        Ok(())
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |acc, (x, y)| acc + x * y)
}

/// Gradient of a scalar loss with respect to a value of the same shape.
#[derive(Clone, Debug, PartialEq)]
pub struct GradPair {
    pub value: Tensor,
    pub grad: Tensor,
}

impl GradPair {
    pub fn new(value: Tensor, grad: Tensor) -> Result<Self> {
        value.expect_same(&grad, "GradPair")?;
        Ok(GradPair { value, grad })
    }
}

/// `[m, k] · [k, n] -> [m, n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.expect_rank2("matmul lhs")?;
    let (k2, n) = b.expect_rank2("matmul rhs")?;
    if k != k2 {
        return Err(Error::shape(format!(
            "matmul: inner dims {k} vs {k2} ({:?} x {:?})",
            a.dims, b.dims
        )));
    }
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a.data[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b.data[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor {
        dims: vec![m, n],
        data: out,
    }
    .finite("matmul")
}

/// Given upstream `g = dL/d(a·b)`, returns `(g·bᵀ, aᵀ·g)`.
pub fn matmul_backward(a: &Tensor, b: &Tensor, g: &Tensor) -> Result<(Tensor, Tensor)> {
    let ga = matmul(g, &b.transpose()?)?;
    let gb = matmul(&a.transpose()?, g)?;
    Ok((ga, gb))
}

fn axis_layout(dims: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= dims.len() {
        return Err(Error::shape(format!(
            "axis {axis} out of range for rank {}",
            dims.len()
        )));
    }
    let outer = dims[..axis].iter().product();
    let inner = dims[axis + 1..].iter().product();
    Ok((outer, dims[axis], inner))
}

/// Numerically stable softmax along `axis`.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    let (outer, n, inner) = axis_layout(&x.dims, axis)?;
    let mut out = vec![0.0; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |k: usize| (o * n + k) * inner + i;
            let max = (0..n).fold(f64::NEG_INFINITY, |m, k| m.max(x.data[idx(k)]));
            let mut total = 0.0;
            for k in 0..n {
                let e = (x.data[idx(k)] - max).exp();
                out[idx(k)] = e;
                total += e;
            }
            for k in 0..n {
                out[idx(k)] /= total;
            }
        }
    }
    Tensor {
        dims: x.dims.clone(),
        data: out,
    }
    .finite("softmax")
}

/// Backward of softmax given its output `y`: `y ∘ (g − Σ_k g_k y_k)` per slice.
pub fn softmax_backward(y: &Tensor, g: &Tensor, axis: usize) -> Result<Tensor> {
    y.expect_same(g, "softmax_backward")?;
    let (outer, n, inner) = axis_layout(&y.dims, axis)?;
    let mut out = vec![0.0; y.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |k: usize| (o * n + k) * inner + i;
            let s = (0..n).fold(0.0, |acc, k| acc + g.data[idx(k)] * y.data[idx(k)]);
            for k in 0..n {
                out[idx(k)] = y.data[idx(k)] * (g.data[idx(k)] - s);
            }
        }
    }
    Tensor {
        dims: y.dims.clone(),
        data: out,
    }
    .finite("softmax_backward")
}

pub fn tanh(x: &Tensor) -> Result<Tensor> {
    x.map(f64::tanh)
}

/// Backward of tanh given its output `y`.
pub fn tanh_backward(y: &Tensor, g: &Tensor) -> Result<Tensor> {
    y.zip_with(g, "tanh_backward", |y, g| g * (1.0 - y * y))
}

const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2))
}

fn gelu_grad_scalar(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2));
    let pdf = FRAC_1_SQRT_2PI * (-0.5 * x * x).exp();
    cdf + x * pdf
}

/// Exact GELU, `x · Φ(x)`.
pub fn gelu(x: &Tensor) -> Result<Tensor> {
    x.map(gelu_scalar)
}

/// Backward of GELU given its *input* `x`.
pub fn gelu_backward(x: &Tensor, g: &Tensor) -> Result<Tensor> {
    x.zip_with(g, "gelu_backward", |x, g| g * gelu_grad_scalar(x))
}

/// Layer normalization over the last axis.
///
/// Every slice along the last axis is normalized independently:
/// `(x − mean) / sqrt(var + eps) · gamma + beta` with the biased variance.
pub fn layernorm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    Ok(layernorm_stats(x, gamma, beta, eps)?.0)
}

fn check_layernorm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<usize> {
    let c = *x.dims.last().expect("rank >= 1");
    if gamma.dims != [c] || beta.dims != [c] {
        return Err(Error::shape(format!(
            "layernorm: gamma {:?} / beta {:?} for last dim {c}",
            gamma.dims, beta.dims
        )));
    }
    if eps.is_nan() || eps < 0.0 {
        return Err(Error::param(format!(
            "layernorm eps must be >= 0, got {eps}"
        )));
    }
    Ok(c)
}

/// Returns the output and the per-slice normalized values `x̂` and `1/σ`.
fn layernorm_stats(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f64,
) -> Result<(Tensor, Vec<f64>, Vec<f64>)> {
    let c = check_layernorm(x, gamma, beta, eps)?;
    let mut out = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    let mut inv_std = Vec::with_capacity(x.len() / c);
    for (s, slice) in x.data.chunks(c).enumerate() {
        let mean = slice.iter().fold(0.0, |a, v| a + v) / c as f64;
        let var = slice.iter().fold(0.0, |a, v| a + (v - mean) * (v - mean)) / c as f64;
        let denom = (var + eps).sqrt();
        let inv = if denom > 0.0 { 1.0 / denom } else { 0.0 };
        inv_std.push(inv);
        for j in 0..c {
            let h = (slice[j] - mean) * inv;
            xhat[s * c + j] = h;
            out[s * c + j] = h * gamma.data[j] + beta.data[j];
        }
    }
    let out = Tensor {
        dims: x.dims.clone(),
        data: out,
    }
    .finite("layernorm")?;
    Ok((out, xhat, inv_std))
}

#[derive(Clone, Debug)]
pub struct LayerNormGrads {
    pub x: Tensor,
    pub gamma: Tensor,
    pub beta: Tensor,
}

/// Backward of [`layernorm`] for upstream gradient `g`.
pub fn layernorm_backward(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f64,
    g: &Tensor,
) -> Result<LayerNormGrads> {
    x.expect_same(g, "layernorm_backward")?;
    let (_, xhat, inv_std) = layernorm_stats(x, gamma, beta, eps)?;
    let c = gamma.len();
    let n = c as f64;
    let mut gx = vec![0.0; x.len()];
    let mut ggamma = vec![0.0; c];
    let mut gbeta = vec![0.0; c];
    for (s, &inv) in inv_std.iter().enumerate() {
        let base = s * c;
        let mut sum_dh = 0.0;
        let mut sum_dh_h = 0.0;
        for j in 0..c {
            let gj = g.data[base + j];
            let h = xhat[base + j];
            ggamma[j] += gj * h;
            gbeta[j] += gj;
            let dh = gj * gamma.data[j];
            sum_dh += dh;
            sum_dh_h += dh * h;
        }
        for j in 0..c {
            let dh = g.data[base + j] * gamma.data[j];
            gx[base + j] = inv * (dh - sum_dh / n - xhat[base + j] * sum_dh_h / n);
        }
    }
    Ok(LayerNormGrads {
        x: Tensor::new(x.dims.clone(), gx)?,
        gamma: Tensor::new(vec![c], ggamma)?,
        beta: Tensor::new(vec![c], gbeta)?,
    })
}
