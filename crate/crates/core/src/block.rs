//! Building blocks shared by the fusion block and the backbones: token-wise
//! layer normalization and the two-layer GELU feed-forward network.
//!
//! Token matrices are `[n, c]`: one row per spatial position.

use rand::Rng;

use crate::params::Parameters;
use crate::tensor::{self, Tensor};
use crate::Result;

pub const LAYERNORM_EPS: f64 = 1e-5;

/// Uniform `(-1/√c, 1/√c)` initialization.
pub(crate) fn init_uniform(dims: &[usize], c: usize, rng: &mut impl Rng) -> Tensor {
    let bound = 1.0 / (c as f64).sqrt();
    let mut t = Tensor::zeros(dims);
    for v in t.data_mut() {
        *v = rng.random_range(-bound..bound);
    }
    t
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
}

impl LayerNorm {
    pub fn new(c: usize) -> Self {
        LayerNorm {
            gamma: Tensor::filled(&[c], 1.0),
            beta: Tensor::zeros(&[c]),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        tensor::layernorm(x, &self.gamma, &self.beta, LAYERNORM_EPS)
    }

    /// Returns (parameter grads, input grad).
    pub fn backward(&self, x: &Tensor, g: &Tensor) -> Result<(LayerNorm, Tensor)> {
        let grads = tensor::layernorm_backward(x, &self.gamma, &self.beta, LAYERNORM_EPS, g)?;
        Ok((
            LayerNorm {
                gamma: grads.gamma,
                beta: grads.beta,
            },
            grads.x,
        ))
    }
}

impl Parameters for LayerNorm {
    fn named(&self) -> Vec<(String, &Tensor)> {
        vec![("gamma".into(), &self.gamma), ("beta".into(), &self.beta)]
    }

    fn named_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        vec![
            ("gamma".into(), &mut self.gamma),
            ("beta".into(), &mut self.beta),
        ]
    }
}

/// `y ↦ gelu(y·W1 + b1)·W2 + b2`, applied row by row.
#[derive(Clone, Debug, PartialEq)]
pub struct FeedForward {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

#[derive(Clone, Debug)]
pub struct FeedForwardCache {
    x: Tensor,
    pre: Tensor,
    act: Tensor,
}

impl FeedForward {
    pub fn init(c: usize, c_ff: usize, rng: &mut impl Rng) -> Self {
        FeedForward {
            w1: init_uniform(&[c, c_ff], c, rng),
            b1: Tensor::zeros(&[c_ff]),
            w2: init_uniform(&[c_ff, c], c, rng),
            b2: Tensor::zeros(&[c]),
        }
    }

    pub fn hidden(&self) -> usize {
        self.b1.len()
    }

    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, FeedForwardCache)> {
        let pre = tensor::matmul(x, &self.w1)?.add_row_bias(&self.b1)?;
        let act = tensor::gelu(&pre)?;
        let out = tensor::matmul(&act, &self.w2)?.add_row_bias(&self.b2)?;
        Ok((
            out,
            FeedForwardCache {
                x: x.clone(),
                pre,
                act,
            },
        ))
    }

    pub fn backward(&self, cache: &FeedForwardCache, g: &Tensor) -> Result<(FeedForward, Tensor)> {
        let (g_act, g_w2) = tensor::matmul_backward(&cache.act, &self.w2, g)?;
        let g_b2 = g.sum_rows()?;
        let g_pre = tensor::gelu_backward(&cache.pre, &g_act)?;
        let (g_x, g_w1) = tensor::matmul_backward(&cache.x, &self.w1, &g_pre)?;
        let g_b1 = g_pre.sum_rows()?;
        Ok((
            FeedForward {
                w1: g_w1,
                b1: g_b1,
                w2: g_w2,
                b2: g_b2,
            },
            g_x,
        ))
    }
}

impl Parameters for FeedForward {
    fn named(&self) -> Vec<(String, &Tensor)> {
        vec![
            ("w1".into(), &self.w1),
            ("b1".into(), &self.b1),
            ("w2".into(), &self.w2),
            ("b2".into(), &self.b2),
        ]
    }

    fn named_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        vec![
            ("w1".into(), &mut self.w1),
            ("b1".into(), &mut self.b1),
            ("w2".into(), &mut self.w2),
            ("b2".into(), &mut self.b2),
        ]
    }
}

/// Post-norm residual feed-forward sublayer: `norm(x + ffn(x))`.
#[derive(Clone, Debug)]
pub struct ResidualFfnCache {
    ffn: FeedForwardCache,
    sum: Tensor,
}

pub fn residual_ffn_forward(
    ffn: &FeedForward,
    norm: &LayerNorm,
    x: &Tensor,
) -> Result<(Tensor, ResidualFfnCache)> {
    let (f, ffn_cache) = ffn.forward(x)?;
    let sum = x.add(&f)?;
    let out = norm.forward(&sum)?;
    Ok((
        out,
        ResidualFfnCache {
            ffn: ffn_cache,
            sum,
        },
    ))
}

pub fn residual_ffn_backward(
    ffn: &FeedForward,
    norm: &LayerNorm,
    cache: &ResidualFfnCache,
    g: &Tensor,
) -> Result<(FeedForward, LayerNorm, Tensor)> {
    let (g_norm, g_sum) = norm.backward(&cache.sum, g)?;
    let (g_ffn, mut g_x) = ffn.backward(&cache.ffn, &g_sum)?;
    g_x.add_assign(&g_sum)?;
    Ok((g_ffn, g_norm, g_x))
}
