//! Semantic consistency cross-attention fusion.
//!
//! Two feature maps of identical shape `C×H×W` are fused: `xs` (from the
//! windowed, contrastively trained backbone) receives information from `xv`
//! (the global, reconstruction-trained backbone).
//!
//! ```text
//! Q  = W_q·xs   K  = W_k·xv   V = W_v·xv        (1×1 convs, channel tokens of length d = H·W)
//! A  = softmax_j(⟨Q_i, K_j⟩ / √d)               C×C, rows sum to 1
//! Q' = W'_q·xs  K' = W'_k·xv
//! A' = tanh(mean_c (Q' − K')²)                  H×W, in [0, 1)
//! X' = A' ∘ (A·V)                               A' broadcast over channels
//! Y  = norm1(xs + X')                           per position, over channels
//! Z  = norm2(Y + FFN(Y))
//! ```
//!
//! A' follows the literal squared-difference-then-tanh form: positions where
//! the two projections disagree more receive a larger share of `A·V`.

use rand::Rng;

use crate::block::{self, FeedForward, LayerNorm, ResidualFfnCache};
use crate::params::{prefixed, prefixed_mut, Parameters};
use crate::tensor::{self, Tensor};
use crate::{Error, Result};

/// A `C×H×W` feature volume.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    values: Tensor,
}

impl FeatureMap {
    pub fn new(values: Tensor) -> Result<Self> {
        if values.rank() != 3 {
            return Err(Error::shape(format!(
                "feature map must be C×H×W, got {:?}",
                values.dims()
            )));
        }
        Ok(FeatureMap { values })
    }

    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        FeatureMap {
            values: Tensor::zeros(&[c, h, w]),
        }
    }

    /// From a `[H·W, C]` token matrix laid out row-major over positions.
    pub fn from_tokens(tokens: &Tensor, h: usize, w: usize) -> Result<Self> {
        if tokens.rank() != 2 || tokens.rows() != h * w {
            return Err(Error::shape(format!(
                "token matrix {:?} does not cover a {h}×{w} grid",
                tokens.dims()
            )));
        }
        let c = tokens.cols();
        FeatureMap::new(tokens.transpose()?.reshape(&[c, h, w])?)
    }

    pub fn channels(&self) -> usize {
        self.values.dims()[0]
    }

    pub fn height(&self) -> usize {
        self.values.dims()[1]
    }

    pub fn width(&self) -> usize {
        self.values.dims()[2]
    }

    pub fn positions(&self) -> usize {
        self.height() * self.width()
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn into_values(self) -> Tensor {
        self.values
    }

    /// `C×(H·W)`: one row per channel token.
    pub fn flatten(&self) -> Tensor {
        self.values
            .reshape(&[self.channels(), self.positions()])
            .expect("C×H×W always flattens")
    }

    /// `(H·W)×C`: one row per spatial position.
    pub fn tokens(&self) -> Tensor {
        self.flatten().transpose().expect("rank 2")
    }

    fn same_shape(&self, other: &FeatureMap, op: &str) -> Result<()> {
        if self.values.dims() != other.values.dims() {
            return Err(Error::shape(format!(
                "{op}: feature maps {:?} vs {:?}",
                self.values.dims(),
                other.values.dims()
            )));
        }
        Ok(())
    }
}

/// Outputs of the five 1×1 projections.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionSet {
    pub q_s: Tensor,
    pub k_v: Tensor,
    pub v_v: Tensor,
    pub qp_s: Tensor,
    pub kp_v: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChannelAttentionMap {
    pub a: Tensor,
    pub scale_dim: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpatialConsistencyMap {
    pub ap: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusionParams {
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub wp_q: Tensor,
    pub wp_k: Tensor,
    pub norm1: LayerNorm,
    pub norm2: LayerNorm,
    pub ffn: FeedForward,
}

impl FusionParams {
    pub fn init(c: usize, c_ff: usize, rng: &mut impl Rng) -> Self {
        let mut mat = || block::init_uniform(&[c, c], c, rng);
        let (w_q, w_k, w_v, wp_q, wp_k) = (mat(), mat(), mat(), mat(), mat());
        FusionParams {
            w_q,
            w_k,
            w_v,
            wp_q,
            wp_k,
            norm1: LayerNorm::new(c),
            norm2: LayerNorm::new(c),
            ffn: FeedForward::init(c, c_ff, rng),
        }
    }

    pub fn channels(&self) -> usize {
        self.w_q.rows()
    }

    pub fn hidden(&self) -> usize {
        self.ffn.hidden()
    }

    fn validate(&self, c: usize) -> Result<()> {
        let c_ff = self.hidden();
        let ok = [&self.w_q, &self.w_k, &self.w_v, &self.wp_q, &self.wp_k]
            .iter()
            .all(|w| w.dims() == [c, c])
            && [
                &self.norm1.gamma,
                &self.norm1.beta,
                &self.norm2.gamma,
                &self.norm2.beta,
                &self.ffn.b2,
            ]
            .iter()
            .all(|v| v.dims() == [c])
            && self.ffn.w1.dims() == [c, c_ff]
            && self.ffn.w2.dims() == [c_ff, c];
        if ok {
            Ok(())
        } else {
            Err(Error::shape(format!(
                "fusion params are not consistent with C={c}, C_ff={c_ff}"
            )))
        }
    }
}

impl Parameters for FusionParams {
    fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = vec![
            ("w_q".into(), &self.w_q),
            ("w_k".into(), &self.w_k),
            ("w_v".into(), &self.w_v),
            ("wp_q".into(), &self.wp_q),
            ("wp_k".into(), &self.wp_k),
        ];
        out.extend(prefixed("norm1", self.norm1.named()));
        out.extend(prefixed("norm2", self.norm2.named()));
        out.extend(prefixed("ffn", self.ffn.named()));
        out
    }

    fn named_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = vec![
            ("w_q".into(), &mut self.w_q),
            ("w_k".into(), &mut self.w_k),
            ("w_v".into(), &mut self.w_v),
            ("wp_q".into(), &mut self.wp_q),
            ("wp_k".into(), &mut self.wp_k),
        ];
        out.extend(prefixed_mut("norm1", self.norm1.named_mut()));
        out.extend(prefixed_mut("norm2", self.norm2.named_mut()));
        out.extend(prefixed_mut("ffn", self.ffn.named_mut()));
        out
    }
}

pub fn project(params: &FusionParams, xs: &FeatureMap, xv: &FeatureMap) -> Result<ProjectionSet> {
    xs.same_shape(xv, "project")?;
    params.validate(xs.channels())?;
    let dims = xs.values().dims().to_vec();
    let fs = xs.flatten();
    let fv = xv.flatten();
    Ok(ProjectionSet {
        q_s: tensor::matmul(&params.w_q, &fs)?,
        k_v: tensor::matmul(&params.w_k, &fv)?,
        v_v: tensor::matmul(&params.w_v, &fv)?,
        qp_s: tensor::matmul(&params.wp_q, &fs)?.reshape(&dims)?,
        kp_v: tensor::matmul(&params.wp_k, &fv)?.reshape(&dims)?,
    })
}

fn scaled_scores(q_s: &Tensor, k_v: &Tensor) -> Result<(Tensor, usize)> {
    if q_s.rank() != 2 || q_s.dims() != k_v.dims() {
        return Err(Error::shape(format!(
            "channel_attention: Q {:?} vs K {:?}",
            q_s.dims(),
            k_v.dims()
        )));
    }
    let d = q_s.cols();
    let scores = tensor::matmul(q_s, &k_v.transpose()?)?.scale(1.0 / (d as f64).sqrt())?;
    Ok((scores, d))
}

/// Row `i` of `A` is a distribution over the `xv` channel tokens for `xs` channel `i`.
pub fn channel_attention(q_s: &Tensor, k_v: &Tensor) -> Result<ChannelAttentionMap> {
    let (scores, d) = scaled_scores(q_s, k_v)?;
    Ok(ChannelAttentionMap {
        a: tensor::softmax(&scores, 1)?,
        scale_dim: d,
    })
}

fn mean_sq_diff(qp_s: &Tensor, kp_v: &Tensor) -> Result<(Tensor, Tensor)> {
    if qp_s.rank() != 3 || qp_s.dims() != kp_v.dims() {
        return Err(Error::shape(format!(
            "spatial_consistency: Q' {:?} vs K' {:?}",
            qp_s.dims(),
            kp_v.dims()
        )));
    }
    let (c, h, w) = (qp_s.dims()[0], qp_s.dims()[1], qp_s.dims()[2]);
    let diff = qp_s.sub(kp_v)?;
    let d = h * w;
    let mut m = vec![0.0; d];
    for ch in 0..c {
        for (p, mp) in m.iter_mut().enumerate() {
            let v = diff.data()[ch * d + p];
            *mp += v * v;
        }
    }
    m.iter_mut().for_each(|v| *v /= c as f64);
    Ok((Tensor::new(vec![h, w], m)?, diff))
}

/// Largest `f64` strictly below 1.
const BELOW_ONE: f64 = 1.0 - f64::EPSILON / 2.0;

/// `tanh` of a non-negative statistic, kept strictly below 1.
///
/// `tanh` rounds to exactly 1.0 for inputs above ~19; the map is clamped to
/// the preceding float so its range stays `[0, 1)`. The derivative there is
/// zero either way.
fn consistency_gate(m: &Tensor) -> Result<Tensor> {
    m.map(|v| v.tanh().min(BELOW_ONE))
}

fn consistency_gate_grad(m: f64) -> f64 {
    let t = m.tanh();
    if t >= 1.0 {
        0.0
    } else {
        1.0 - t * t
    }
}

pub fn spatial_consistency(qp_s: &Tensor, kp_v: &Tensor) -> Result<SpatialConsistencyMap> {
    let (m, _) = mean_sq_diff(qp_s, kp_v)?;
    Ok(SpatialConsistencyMap {
        ap: consistency_gate(&m)?,
    })
}

/// Broadcasts an `H×W` map over the `C` rows of a `C×(H·W)` matrix.
fn gate_rows(m: &Tensor, ap: &Tensor) -> Result<Tensor> {
    let d = ap.len();
    let mut out = m.clone();
    for row in out.data_mut().chunks_mut(d) {
        for (v, g) in row.iter_mut().zip(ap.data()) {
            *v *= g;
        }
    }
    Ok(out)
}

pub fn fuse(
    a: &ChannelAttentionMap,
    ap: &SpatialConsistencyMap,
    v_v: &Tensor,
) -> Result<FeatureMap> {
    let (h, w) = match ap.ap.dims() {
        [h, w] => (*h, *w),
        other => return Err(Error::shape(format!("A' must be H×W, got {other:?}"))),
    };
    if v_v.rank() != 2 || v_v.cols() != h * w {
        return Err(Error::shape(format!(
            "fuse: V {:?} does not match A' {h}×{w}",
            v_v.dims()
        )));
    }
    let c = v_v.rows();
    if a.a.dims() != [c, c] {
        return Err(Error::shape(format!("fuse: A {:?} for C={c}", a.a.dims())));
    }
    let m = tensor::matmul(&a.a, v_v)?;
    FeatureMap::new(gate_rows(&m, &ap.ap)?.reshape(&[c, h, w])?)
}

/// Intermediate values needed by the backward pass.
#[derive(Clone, Debug)]
pub struct FusionCache {
    xs: Tensor,
    xv: Tensor,
    proj: ProjectionSet,
    attention: Tensor,
    diff: Tensor,
    msd: Tensor,
    ap: Tensor,
    mixed: Tensor,
    res1: Tensor,
    ffn: ResidualFfnCache,
    h: usize,
    w: usize,
}

impl FusionCache {
    pub fn channel_attention(&self) -> &Tensor {
        &self.attention
    }

    pub fn spatial_consistency(&self) -> &Tensor {
        &self.ap
    }
}

pub fn fusion_block_forward(
    params: &FusionParams,
    xs: &FeatureMap,
    xv: &FeatureMap,
) -> Result<FeatureMap> {
    Ok(fusion_block_forward_cached(params, xs, xv)?.0)
}

pub fn fusion_block_forward_cached(
    params: &FusionParams,
    xs: &FeatureMap,
    xv: &FeatureMap,
) -> Result<(FeatureMap, FusionCache)> {
    let proj = project(params, xs, xv)?;
    let attention = channel_attention(&proj.q_s, &proj.k_v)?;
    let (m, diff) = mean_sq_diff(&proj.qp_s, &proj.kp_v)?;
    let ap = consistency_gate(&m)?;
    let mixed = tensor::matmul(&attention.a, &proj.v_v)?;
    let injected = gate_rows(&mixed, &ap)?;

    let (h, w) = (xs.height(), xs.width());
    let fs = xs.flatten();
    // Per-position token layout for norm and FFN.
    let res1 = fs.add(&injected)?.transpose()?;
    let y = params.norm1.forward(&res1)?;
    let (z, ffn) = block::residual_ffn_forward(&params.ffn, &params.norm2, &y)?;
    let out = FeatureMap::from_tokens(&z, h, w)?;
    Ok((
        out,
        FusionCache {
            xs: fs,
            xv: xv.flatten(),
            proj,
            attention: attention.a,
            diff,
            msd: m,
            ap,
            mixed,
            res1,
            ffn,
            h,
            w,
        },
    ))
}

#[derive(Clone, Debug)]
pub struct FusionGrads {
    pub params: FusionParams,
    pub xs: FeatureMap,
    pub xv: FeatureMap,
}

pub fn fusion_block_backward(
    params: &FusionParams,
    xs: &FeatureMap,
    xv: &FeatureMap,
    upstream: &FeatureMap,
) -> Result<FusionGrads> {
    let (_, cache) = fusion_block_forward_cached(params, xs, xv)?;
    fusion_block_backward_cached(params, &cache, upstream)
}

pub fn fusion_block_backward_cached(
    params: &FusionParams,
    cache: &FusionCache,
    upstream: &FeatureMap,
) -> Result<FusionGrads> {
    let c = cache.xs.rows();
    let (h, w) = (cache.h, cache.w);
    if upstream.values().dims() != [c, h, w] {
        return Err(Error::shape(format!(
            "upstream gradient {:?} does not match output {:?}",
            upstream.values().dims(),
            [c, h, w]
        )));
    }
    let d = h * w;

    // Residual FFN + norm2, then norm1.
    let g_z = upstream.tokens();
    let (g_ffn, g_norm2, g_y) =
        block::residual_ffn_backward(&params.ffn, &params.norm2, &cache.ffn, &g_z)?;
    let (g_norm1, g_res1) = params.norm1.backward(&cache.res1, &g_y)?;
    let g_res1 = g_res1.transpose()?;

    let mut g_xs = g_res1.clone();
    let g_injected = g_res1;

    // X' = A' ∘ M
    let g_mixed = gate_rows(&g_injected, &cache.ap)?;
    let mut g_ap = vec![0.0; d];
    for ch in 0..c {
        for (p, g) in g_ap.iter_mut().enumerate() {
            *g += g_injected.data()[ch * d + p] * cache.mixed.data()[ch * d + p];
        }
    }

    // M = A·V
    let (g_attn, g_v) = tensor::matmul_backward(&cache.attention, &cache.proj.v_v, &g_mixed)?;

    // A = softmax(Q Kᵀ / √d)
    let g_scores = tensor::softmax_backward(&cache.attention, &g_attn, 1)?;
    let inv_sqrt_d = 1.0 / (d as f64).sqrt();
    let g_q = tensor::matmul(&g_scores, &cache.proj.k_v)?.scale(inv_sqrt_d)?;
    let g_k = tensor::matmul(&g_scores.transpose()?, &cache.proj.q_s)?.scale(inv_sqrt_d)?;

    // A' = tanh(mean_c (Q' − K')²)
    let mut g_diff = vec![0.0; c * d];
    for p in 0..d {
        let g_m = g_ap[p] * consistency_gate_grad(cache.msd.data()[p]);
        for ch in 0..c {
            g_diff[ch * d + p] = g_m * 2.0 * cache.diff.data()[ch * d + p] / c as f64;
        }
    }
    let g_qp = Tensor::new(vec![c, d], g_diff)?;
    let g_kp = g_qp.scale(-1.0)?;

    // 1×1 projections.
    let (g_wq, g_xs_q) = tensor::matmul_backward(&params.w_q, &cache.xs, &g_q)?;
    let (g_wk, g_xv_k) = tensor::matmul_backward(&params.w_k, &cache.xv, &g_k)?;
    let (g_wv, g_xv_v) = tensor::matmul_backward(&params.w_v, &cache.xv, &g_v)?;
    let (g_wpq, g_xs_p) = tensor::matmul_backward(&params.wp_q, &cache.xs, &g_qp)?;
    let (g_wpk, g_xv_p) = tensor::matmul_backward(&params.wp_k, &cache.xv, &g_kp)?;

    g_xs.add_assign(&g_xs_q)?;
    g_xs.add_assign(&g_xs_p)?;
    let mut g_xv = g_xv_k;
    g_xv.add_assign(&g_xv_v)?;
    g_xv.add_assign(&g_xv_p)?;

    Ok(FusionGrads {
        params: FusionParams {
            w_q: g_wq,
            w_k: g_wk,
            w_v: g_wv,
            wp_q: g_wpq,
            wp_k: g_wpk,
            norm1: g_norm1,
            norm2: g_norm2,
            ffn: g_ffn,
        },
        xs: FeatureMap::new(g_xs.reshape(&[c, h, w])?)?,
        xv: FeatureMap::new(g_xv.reshape(&[c, h, w])?)?,
    })
}
