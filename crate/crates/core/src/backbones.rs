//! Two tiny single-head transformer encoders producing `C×H'×W'` feature maps.
//!
//! Both share one layer type (post-norm attention + feed-forward). They differ
//! only in the attention pattern:
//!
//! - `window_size == 0`: global attention over all patch tokens, optional
//!   token masking via a learned mask token (masked-reconstruction branch);
//! - `window_size > 0`: attention restricted to non-overlapping
//!   `window_size × window_size` windows of the token grid (contrastive branch).
//!
//! A one-layer global decoder with a linear pixel head maps encoder features
//! back to per-token pixel predictions.

use rand::Rng;

use crate::block::{self, FeedForward, LayerNorm, ResidualFfnCache};
use crate::mscff::FeatureMap;
use crate::params::{prefixed, prefixed_mut, Parameters};
use crate::ssl::MaskSpec;
use crate::tensor::{self, Tensor};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EncoderConfig {
    pub in_channels: usize,
    pub image_size: usize,
    pub patch: usize,
    pub channels: usize,
    pub layers: usize,
    pub hidden: usize,
    /// 0 selects global attention.
    pub window_size: usize,
    pub mask_token: bool,
}

impl EncoderConfig {
    pub fn grid(&self) -> usize {
        self.image_size / self.patch
    }

    pub fn tokens(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * self.in_channels
    }

    pub fn validate(&self) -> Result<()> {
        if [
            self.in_channels,
            self.image_size,
            self.patch,
            self.channels,
            self.layers,
            self.hidden,
        ]
        .contains(&0)
        {
            return Err(Error::param("encoder sizes must be positive"));
        }
        if self.image_size % self.patch != 0 {
            return Err(Error::shape(format!(
                "image size {} not divisible by patch {}",
                self.image_size, self.patch
            )));
        }
        if self.window_size > 0 && self.grid() % self.window_size != 0 {
            return Err(Error::shape(format!(
                "window {} does not divide token grid {}",
                self.window_size,
                self.grid()
            )));
        }
        if self.window_size > 0 && self.mask_token {
            return Err(Error::param(
                "mask token is only supported with global attention",
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderLayer {
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub w_o: Tensor,
    pub norm1: LayerNorm,
    pub ffn: FeedForward,
    pub norm2: LayerNorm,
}

impl EncoderLayer {
    pub fn init(c: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let mut mat = || block::init_uniform(&[c, c], c, rng);
        let (w_q, w_k, w_v, w_o) = (mat(), mat(), mat(), mat());
        EncoderLayer {
            w_q,
            w_k,
            w_v,
            w_o,
            norm1: LayerNorm::new(c),
            ffn: FeedForward::init(c, hidden, rng),
            norm2: LayerNorm::new(c),
        }
    }
}

impl Parameters for EncoderLayer {
    fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = vec![
            ("w_q".into(), &self.w_q),
            ("w_k".into(), &self.w_k),
            ("w_v".into(), &self.w_v),
            ("w_o".into(), &self.w_o),
        ];
        out.extend(prefixed("norm1", self.norm1.named()));
        out.extend(prefixed("ffn", self.ffn.named()));
        out.extend(prefixed("norm2", self.norm2.named()));
        out
    }

    fn named_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = vec![
            ("w_q".into(), &mut self.w_q),
            ("w_k".into(), &mut self.w_k),
            ("w_v".into(), &mut self.w_v),
            ("w_o".into(), &mut self.w_o),
        ];
        out.extend(prefixed_mut("norm1", self.norm1.named_mut()));
        out.extend(prefixed_mut("ffn", self.ffn.named_mut()));
        out.extend(prefixed_mut("norm2", self.norm2.named_mut()));
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    pub config: EncoderConfig,
    pub patch_embed: Tensor,
    pub pos_embed: Tensor,
    pub layers: Vec<EncoderLayer>,
    pub mask_token: Option<Tensor>,
}

impl EncoderParams {
    pub fn init(config: EncoderConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let c = config.channels;
        let patch_embed = block::init_uniform(&[config.patch_dim(), c], c, rng);
        let pos_embed = block::init_uniform(&[config.tokens(), c], c, rng);
        let layers = (0..config.layers)
            .map(|_| EncoderLayer::init(c, config.hidden, rng))
            .collect();
        let mask_token = config.mask_token.then(|| block::init_uniform(&[c], c, rng));
        Ok(EncoderParams {
            config,
            patch_embed,
            pos_embed,
            layers,
            mask_token,
        })
    }

    pub fn window_size(&self) -> usize {
        self.config.window_size
    }
}

impl Parameters for EncoderParams {
    fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = vec![
            ("patch_embed".into(), &self.patch_embed),
            ("pos_embed".into(), &self.pos_embed),
        ];
        for (i, layer) in self.layers.iter().enumerate() {
            out.extend(prefixed(&format!("layers.{i}"), layer.named()));
        }
        if let Some(m) = &self.mask_token {
            out.push(("mask_token".into(), m));
        }
        out
    }

    fn named_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = vec![
            ("patch_embed".into(), &mut self.patch_embed),
            ("pos_embed".into(), &mut self.pos_embed),
        ];
        for (i, layer) in self.layers.iter_mut().enumerate() {
            out.extend(prefixed_mut(&format!("layers.{i}"), layer.named_mut()));
        }
        if let Some(m) = &mut self.mask_token {
            out.push(("mask_token".into(), m));
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderParams {
    pub layer: EncoderLayer,
    pub head_w: Tensor,
    pub head_b: Tensor,
}

impl DecoderParams {
    pub fn init(encoder: &EncoderConfig, rng: &mut impl Rng) -> Self {
        let c = encoder.channels;
        DecoderParams {
            layer: EncoderLayer::init(c, encoder.hidden, rng),
            head_w: block::init_uniform(&[c, encoder.patch_dim()], c, rng),
            head_b: Tensor::zeros(&[encoder.patch_dim()]),
        }
    }
}

impl Parameters for DecoderParams {
    fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = prefixed("layer", self.layer.named()).collect();
        out.push(("head_w".into(), &self.head_w));
        out.push(("head_b".into(), &self.head_b));
        out
    }

    fn named_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> =
            prefixed_mut("layer", self.layer.named_mut()).collect();
        out.push(("head_w".into(), &mut self.head_w));
        out.push(("head_b".into(), &mut self.head_b));
        out
    }
}

/// Splits a `C×H×W` image into `(H/p)·(W/p)` row-major tokens of `p²·C` pixels.
///
/// Within a token pixels are ordered channel, then row, then column.
pub fn patchify(image: &Tensor, patch: usize) -> Result<Tensor> {
    let [c, h, w] = *image.dims() else {
        return Err(Error::shape(format!(
            "image must be C×H×W, got {:?}",
            image.dims()
        )));
    };
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::shape(format!(
            "image {h}×{w} not divisible by patch {patch}"
        )));
    }
    let (gh, gw) = (h / patch, w / patch);
    let pd = patch * patch * c;
    let mut out = vec![0.0; gh * gw * pd];
    let src = image.data();
    for ty in 0..gh {
        for tx in 0..gw {
            let t = ty * gw + tx;
            for k in 0..c {
                for dy in 0..patch {
                    for dx in 0..patch {
                        let y = ty * patch + dy;
                        let x = tx * patch + dx;
                        out[t * pd + (k * patch + dy) * patch + dx] = src[(k * h + y) * w + x];
                    }
                }
            }
        }
    }
    Tensor::new(vec![gh * gw, pd], out)
}

/// Token index groups that attend to each other.
pub fn attention_windows(grid_h: usize, grid_w: usize, window: usize) -> Result<Vec<Vec<usize>>> {
    if window == 0 {
        return Ok(vec![(0..grid_h * grid_w).collect()]);
    }
    if grid_h % window != 0 || grid_w % window != 0 {
        return Err(Error::shape(format!(
            "window {window} does not tile a {grid_h}×{grid_w} grid"
        )));
    }
    let mut groups = Vec::new();
    for wy in 0..grid_h / window {
        for wx in 0..grid_w / window {
            let mut g = Vec::with_capacity(window * window);
            for dy in 0..window {
                for dx in 0..window {
                    g.push((wy * window + dy) * grid_w + wx * window + dx);
                }
            }
            groups.push(g);
        }
    }
    Ok(groups)
}

#[derive(Clone, Debug)]
struct LayerCache {
    x: Tensor,
    q: Tensor,
    k: Tensor,
    v: Tensor,
    probs: Vec<Tensor>,
    attended: Tensor,
    res1: Tensor,
    ffn: ResidualFfnCache,
}

fn layer_forward(
    layer: &EncoderLayer,
    x: &Tensor,
    windows: &[Vec<usize>],
) -> Result<(Tensor, LayerCache)> {
    let c = x.cols();
    let scale = 1.0 / (c as f64).sqrt();
    let q = tensor::matmul(x, &layer.w_q)?;
    let k = tensor::matmul(x, &layer.w_k)?;
    let v = tensor::matmul(x, &layer.w_v)?;
    let mut attended = Tensor::zeros(x.dims());
    let mut probs = Vec::with_capacity(windows.len());
    for idx in windows {
        let (qw, kw, vw) = (
            q.gather_rows(idx)?,
            k.gather_rows(idx)?,
            v.gather_rows(idx)?,
        );
        let scores = tensor::matmul(&qw, &kw.transpose()?)?.scale(scale)?;
        let p = tensor::softmax(&scores, 1)?;
        attended.scatter_rows(idx, &tensor::matmul(&p, &vw)?)?;
        probs.push(p);
    }
    let res1 = x.add(&tensor::matmul(&attended, &layer.w_o)?)?;
    let y = layer.norm1.forward(&res1)?;
    let (z, ffn) = block::residual_ffn_forward(&layer.ffn, &layer.norm2, &y)?;
    Ok((
        z,
        LayerCache {
            x: x.clone(),
            q,
            k,
            v,
            probs,
            attended,
            res1,
            ffn,
        },
    ))
}

fn layer_backward(
    layer: &EncoderLayer,
    cache: &LayerCache,
    windows: &[Vec<usize>],
    g: &Tensor,
) -> Result<(EncoderLayer, Tensor)> {
    let c = cache.x.cols();
    let scale = 1.0 / (c as f64).sqrt();
    let (g_ffn, g_norm2, g_y) =
        block::residual_ffn_backward(&layer.ffn, &layer.norm2, &cache.ffn, g)?;
    let (g_norm1, g_res1) = layer.norm1.backward(&cache.res1, &g_y)?;

    let (g_att, g_wo) = tensor::matmul_backward(&cache.attended, &layer.w_o, &g_res1)?;
    let mut g_q = Tensor::zeros(cache.q.dims());
    let mut g_k = Tensor::zeros(cache.k.dims());
    let mut g_v = Tensor::zeros(cache.v.dims());
    for (idx, p) in windows.iter().zip(&cache.probs) {
        let (qw, kw, vw) = (
            cache.q.gather_rows(idx)?,
            cache.k.gather_rows(idx)?,
            cache.v.gather_rows(idx)?,
        );
        let g_out = g_att.gather_rows(idx)?;
        let (g_p, g_vw) = tensor::matmul_backward(p, &vw, &g_out)?;
        let g_s = tensor::softmax_backward(p, &g_p, 1)?.scale(scale)?;
        let (g_qw, g_kt) = tensor::matmul_backward(&qw, &kw.transpose()?, &g_s)?;
        g_q.scatter_rows(idx, &g_qw)?;
        g_k.scatter_rows(idx, &g_kt.transpose()?)?;
        g_v.scatter_rows(idx, &g_vw)?;
    }
    let (g_xq, g_wq) = tensor::matmul_backward(&cache.x, &layer.w_q, &g_q)?;
    let (g_xk, g_wk) = tensor::matmul_backward(&cache.x, &layer.w_k, &g_k)?;
    let (g_xv, g_wv) = tensor::matmul_backward(&cache.x, &layer.w_v, &g_v)?;
    let mut g_x = g_res1;
    g_x.add_assign(&g_xq)?;
    g_x.add_assign(&g_xk)?;
    g_x.add_assign(&g_xv)?;
    Ok((
        EncoderLayer {
            w_q: g_wq,
            w_k: g_wk,
            w_v: g_wv,
            w_o: g_wo,
            norm1: g_norm1,
            ffn: g_ffn,
            norm2: g_norm2,
        },
        g_x,
    ))
}

#[derive(Clone, Debug)]
pub struct EncodeCache {
    patches: Tensor,
    mask: Option<MaskSpec>,
    windows: Vec<Vec<usize>>,
    layers: Vec<LayerCache>,
    grid: usize,
}

pub fn encode(
    params: &EncoderParams,
    image: &Tensor,
    mask: Option<&MaskSpec>,
) -> Result<FeatureMap> {
    Ok(encode_cached(params, image, mask)?.0)
}

pub fn encode_cached(
    params: &EncoderParams,
    image: &Tensor,
    mask: Option<&MaskSpec>,
) -> Result<(FeatureMap, EncodeCache)> {
    let cfg = &params.config;
    let dims = image.dims();
    if dims != [cfg.in_channels, cfg.image_size, cfg.image_size] {
        return Err(Error::shape(format!(
            "encoder expects {}×{}×{} images, got {dims:?}",
            cfg.in_channels, cfg.image_size, cfg.image_size
        )));
    }
    let patches = patchify(image, cfg.patch)?;
    let mut x = tensor::matmul(&patches, &params.patch_embed)?;
    if let Some(mask) = mask {
        let token = params
            .mask_token
            .as_ref()
            .ok_or_else(|| Error::param("masking requires a global encoder with a mask token"))?;
        if mask.num_tokens() != cfg.tokens() {
            return Err(Error::shape(format!(
                "mask over {} tokens for {} patch tokens",
                mask.num_tokens(),
                cfg.tokens()
            )));
        }
        let c = cfg.channels;
        for &t in mask.masked() {
            x.data_mut()[t * c..(t + 1) * c].copy_from_slice(token.data());
        }
    }
    x = x.add(&params.pos_embed)?;

    let grid = cfg.grid();
    let windows = attention_windows(grid, grid, cfg.window_size)?;
    let mut layers = Vec::with_capacity(params.layers.len());
    for layer in &params.layers {
        let (next, cache) = layer_forward(layer, &x, &windows)?;
        layers.push(cache);
        x = next;
    }
    Ok((
        FeatureMap::from_tokens(&x, grid, grid)?,
        EncodeCache {
            patches,
            mask: mask.cloned(),
            windows,
            layers,
            grid,
        },
    ))
}

/// Parameter gradients of the encoder for upstream gradient `g` on its features.
pub fn encode_backward(
    params: &EncoderParams,
    cache: &EncodeCache,
    g: &FeatureMap,
) -> Result<EncoderParams> {
    let c = params.config.channels;
    if g.values().dims() != [c, cache.grid, cache.grid] {
        return Err(Error::shape(format!(
            "feature gradient {:?} for a {c}×{g}×{g} encoder",
            g.values().dims(),
            g = cache.grid
        )));
    }
    let mut g_x = g.tokens();
    let mut layer_grads = Vec::with_capacity(params.layers.len());
    for (layer, lc) in params.layers.iter().zip(&cache.layers).rev() {
        let (gl, gx) = layer_backward(layer, lc, &cache.windows, &g_x)?;
        layer_grads.push(gl);
        g_x = gx;
    }
    layer_grads.reverse();

    let g_pos = g_x.clone();
    let mut g_mask = params.mask_token.as_ref().map(|m| Tensor::zeros(m.dims()));
    let mut g_embedded = g_x;
    if let Some(mask) = &cache.mask {
        let gm = g_mask.as_mut().expect("mask implies mask token");
        for &t in mask.masked() {
            for j in 0..c {
                gm.data_mut()[j] += g_embedded.data()[t * c + j];
                g_embedded.data_mut()[t * c + j] = 0.0;
            }
        }
    }
    let (_, g_patch) = tensor::matmul_backward(&cache.patches, &params.patch_embed, &g_embedded)?;
    Ok(EncoderParams {
        config: params.config,
        patch_embed: g_patch,
        pos_embed: g_pos,
        layers: layer_grads,
        mask_token: g_mask,
    })
}

#[derive(Clone, Debug)]
pub struct DecodeCache {
    layer: LayerCache,
    windows: Vec<Vec<usize>>,
    hidden: Tensor,
    h: usize,
    w: usize,
}

/// Per-token pixel predictions, `[tokens, patch²·C_in]`.
pub fn reconstruct(dec: &DecoderParams, features: &FeatureMap) -> Result<Tensor> {
    Ok(reconstruct_cached(dec, features)?.0)
}

pub fn reconstruct_cached(
    dec: &DecoderParams,
    features: &FeatureMap,
) -> Result<(Tensor, DecodeCache)> {
    if features.channels() != dec.head_w.rows() {
        return Err(Error::shape(format!(
            "decoder expects {} channels, got {}",
            dec.head_w.rows(),
            features.channels()
        )));
    }
    let (h, w) = (features.height(), features.width());
    let windows = attention_windows(h, w, 0)?;
    let (hidden, layer) = layer_forward(&dec.layer, &features.tokens(), &windows)?;
    let out = tensor::matmul(&hidden, &dec.head_w)?.add_row_bias(&dec.head_b)?;
    Ok((
        out,
        DecodeCache {
            layer,
            windows,
            hidden,
            h,
            w,
        },
    ))
}

/// Returns decoder parameter gradients and the gradient on the input features.
pub fn reconstruct_backward(
    dec: &DecoderParams,
    cache: &DecodeCache,
    g: &Tensor,
) -> Result<(DecoderParams, FeatureMap)> {
    if g.dims() != [cache.h * cache.w, dec.head_w.cols()] {
        return Err(Error::shape(format!(
            "pixel gradient {:?} does not match decoder output",
            g.dims()
        )));
    }
    let (g_hidden, g_head_w) = tensor::matmul_backward(&cache.hidden, &dec.head_w, g)?;
    let g_head_b = g.sum_rows()?;
    let (g_layer, g_tokens) = layer_backward(&dec.layer, &cache.layer, &cache.windows, &g_hidden)?;
    Ok((
        DecoderParams {
            layer: g_layer,
            head_w: g_head_w,
            head_b: g_head_b,
        },
        FeatureMap::from_tokens(&g_tokens, cache.h, cache.w)?,
    ))
}

#[derive(Clone, Debug)]
pub struct EmbedCache {
    encode: EncodeCache,
    pooled: Tensor,
    norm: f64,
    h: usize,
    w: usize,
}

/// Mean-pooled, L2-normalized image embedding.
pub fn embed_global(params: &EncoderParams, image: &Tensor) -> Result<Tensor> {
    Ok(embed_global_cached(params, image)?.0)
}

pub fn embed_global_cached(params: &EncoderParams, image: &Tensor) -> Result<(Tensor, EmbedCache)> {
    let (features, encode) = encode_cached(params, image, None)?;
    let pooled = features.tokens().mean_rows()?;
    let norm = pooled.dot(&pooled)?.sqrt();
    if !(norm > 0.0) {
        return Err(Error::NonFinite("embedding has zero norm".into()));
    }
    let z = pooled.scale(1.0 / norm)?;
    Ok((
        z,
        EmbedCache {
            encode,
            pooled,
            norm,
            h: features.height(),
            w: features.width(),
        },
    ))
}

pub fn embed_global_backward(
    params: &EncoderParams,
    cache: &EmbedCache,
    g: &Tensor,
) -> Result<EncoderParams> {
    let z = cache.pooled.scale(1.0 / cache.norm)?;
    let proj = z.dot(g)?;
    // d(x/|x|) = (g − z(z·g)) / |x|
    let g_pooled = g.zip_with(&z, "embed_backward", |gi, zi| (gi - zi * proj) / cache.norm)?;
    let n = (cache.h * cache.w) as f64;
    let c = g_pooled.len();
    let mut tokens = Tensor::zeros(&[cache.h * cache.w, c]);
    for row in tokens.data_mut().chunks_mut(c) {
        for (v, gp) in row.iter_mut().zip(g_pooled.data()) {
            *v = gp / n;
        }
    }
    let g_features = FeatureMap::from_tokens(&tokens, cache.h, cache.w)?;
    encode_backward(params, &cache.encode, &g_features)
}
