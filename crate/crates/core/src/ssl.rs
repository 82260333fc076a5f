//! Self-supervised objectives for the pre-fine-tune step.
//!
//! - masked token reconstruction: squared pixel error summed over masked tokens only;
//! - InfoNCE: `−log(exp(q·k₊/τ) / Σᵢ exp(q·kᵢ/τ))` with the positive included in the sum.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::{dot, Tensor};
use crate::{Error, Result};

pub const DEFAULT_MASK_RATIO: f64 = 0.75;
pub const DEFAULT_TEMPERATURE: f64 = 0.2;

#[derive(Clone, Debug, PartialEq)]
pub struct MaskSpec {
    num_tokens: usize,
    masked: Vec<usize>,
    mask_ratio: f64,
}

impl MaskSpec {
    /// Builds a mask from explicit indices (sorted and deduplicated).
    pub fn from_indices(num_tokens: usize, indices: &[usize]) -> Result<Self> {
        let mut masked = indices.to_vec();
        masked.sort_unstable();
        masked.dedup();
        if masked.len() != indices.len() {
            return Err(Error::param("mask indices must be unique"));
        }
        if masked.iter().any(|&i| i >= num_tokens) {
            return Err(Error::param(format!(
                "mask index out of range {num_tokens}"
            )));
        }
        Ok(MaskSpec {
            num_tokens,
            mask_ratio: masked.len() as f64 / num_tokens as f64,
            masked,
        })
    }

    pub fn num_tokens(&self) -> usize {
        self.num_tokens
    }

    /// Masked token indices in ascending order.
    pub fn masked(&self) -> &[usize] {
        &self.masked
    }

    pub fn mask_ratio(&self) -> f64 {
        self.mask_ratio
    }

    pub fn is_masked(&self, token: usize) -> bool {
        self.masked.binary_search(&token).is_ok()
    }
}

/// Uniformly random subset of `round(mask_ratio · num_tokens)` tokens.
pub fn mask_tokens(num_tokens: usize, mask_ratio: f64, rng_seed: u64) -> Result<MaskSpec> {
    if !(mask_ratio > 0.0 && mask_ratio < 1.0) {
        return Err(Error::param(format!(
            "mask ratio must be in (0, 1), got {mask_ratio}"
        )));
    }
    if num_tokens < 2 {
        return Err(Error::param("need at least two tokens to mask"));
    }
    let count = (mask_ratio * num_tokens as f64).round() as usize;
    if count == 0 || count == num_tokens {
        return Err(Error::param(format!(
            "ratio {mask_ratio} masks {count} of {num_tokens} tokens"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut masked = index::sample(&mut rng, num_tokens, count).into_vec();
    masked.sort_unstable();
    Ok(MaskSpec {
        num_tokens,
        masked,
        mask_ratio,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReconstructionTarget {
    pub p_rec: Tensor,
    pub p_origin: Tensor,
}

impl ReconstructionTarget {
    pub fn new(p_rec: Tensor, p_origin: Tensor) -> Result<Self> {
        if p_rec.rank() != 2 || p_rec.dims() != p_origin.dims() {
            return Err(Error::shape(format!(
                "reconstruction target: {:?} vs {:?}",
                p_rec.dims(),
                p_origin.dims()
            )));
        }
        Ok(ReconstructionTarget { p_rec, p_origin })
    }
}

/// Returns the masked-token squared error and its gradient w.r.t. `p_rec`.
pub fn reconstruction_loss(
    target: &ReconstructionTarget,
    mask: &MaskSpec,
) -> Result<(f64, Tensor)> {
    let (rec, orig) = (&target.p_rec, &target.p_origin);
    if rec.dims() != orig.dims() || rec.rank() != 2 {
        return Err(Error::shape("reconstruction target shapes differ"));
    }
    if rec.rows() != mask.num_tokens {
        return Err(Error::shape(format!(
            "{} token rows vs mask over {} tokens",
            rec.rows(),
            mask.num_tokens
        )));
    }
    let p = rec.cols();
    let mut grad = Tensor::zeros(rec.dims());
    let mut loss = 0.0;
    for &t in &mask.masked {
        for j in 0..p {
            let diff = rec.at(t, j) - orig.at(t, j);
            loss += diff * diff;
            grad.data_mut()[t * p + j] = 2.0 * diff;
        }
    }
    Ok((loss, grad))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ContrastiveBatch {
    q: Tensor,
    k_all: Vec<Tensor>,
    positive: usize,
    tau: f64,
}

impl ContrastiveBatch {
    /// `k_all[positive]` is the positive key; every other entry is a negative.
    pub fn new(q: Tensor, k_all: Vec<Tensor>, positive: usize, tau: f64) -> Result<Self> {
        if !(tau > 0.0) || !tau.is_finite() {
            return Err(Error::param(format!(
                "temperature must be positive, got {tau}"
            )));
        }
        if k_all.len() < 2 {
            return Err(Error::param("need the positive and at least one negative"));
        }
        if positive >= k_all.len() {
            return Err(Error::param("positive index out of range"));
        }
        if q.rank() != 1 || k_all.iter().any(|k| k.dims() != q.dims()) {
            return Err(Error::shape(
                "query and keys must be vectors of equal length",
            ));
        }
        Ok(ContrastiveBatch {
            q,
            k_all,
            positive,
            tau,
        })
    }

    pub fn q(&self) -> &Tensor {
        &self.q
    }

    pub fn k_pos(&self) -> &Tensor {
        &self.k_all[self.positive]
    }

    pub fn k_all(&self) -> &[Tensor] {
        &self.k_all
    }

    pub fn positive(&self) -> usize {
        self.positive
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }
}

/// InfoNCE from raw similarities: `logsumexp(s/τ) − s₊/τ`.
pub fn info_nce(similarities: &[f64], positive: usize, tau: f64) -> Result<f64> {
    Ok(info_nce_probs(similarities, positive, tau)?.0)
}

fn info_nce_probs(similarities: &[f64], positive: usize, tau: f64) -> Result<(f64, Vec<f64>)> {
    if !(tau > 0.0) {
        return Err(Error::param(format!(
            "temperature must be positive, got {tau}"
        )));
    }
    if positive >= similarities.len() {
        return Err(Error::param("positive index out of range"));
    }
    let logits: Vec<f64> = similarities.iter().map(|s| s / tau).collect();
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total = exps.iter().fold(0.0, |a, e| a + e);
    let loss = max + total.ln() - logits[positive];
    if !loss.is_finite() {
        return Err(Error::NonFinite("info_nce".into()));
    }
    Ok((loss, exps.iter().map(|e| e / total).collect()))
}

#[derive(Clone, Debug)]
pub struct ContrastiveGrads {
    pub q: Tensor,
    pub k_all: Vec<Tensor>,
}

pub fn contrastive_loss(batch: &ContrastiveBatch) -> Result<(f64, Tensor)> {
    let (loss, grads) = contrastive_loss_with_key_grads(batch)?;
    Ok((loss, grads.q))
}

/// Loss plus gradients for the query and every key.
pub fn contrastive_loss_with_key_grads(
    batch: &ContrastiveBatch,
) -> Result<(f64, ContrastiveGrads)> {
    let sims: Vec<f64> = batch
        .k_all
        .iter()
        .map(|k| dot(batch.q.data(), k.data()))
        .collect();
    let (loss, probs) = info_nce_probs(&sims, batch.positive, batch.tau)?;
    let d = batch.q.len();
    let mut g_q = vec![0.0; d];
    let mut g_keys = Vec::with_capacity(batch.k_all.len());
    for (i, (k, &p)) in batch.k_all.iter().zip(&probs).enumerate() {
        let coeff = (p - if i == batch.positive { 1.0 } else { 0.0 }) / batch.tau;
        for (g, kv) in g_q.iter_mut().zip(k.data()) {
            *g += coeff * kv;
        }
        g_keys.push(batch.q.scale(coeff)?);
    }
    Ok((
        loss,
        ContrastiveGrads {
            q: Tensor::new(vec![d], g_q)?,
            k_all: g_keys,
        },
    ))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentConfig {
    /// Crop side length as a fraction of the image side, sampled uniformly.
    pub min_scale: f64,
    pub max_scale: f64,
    pub flip_prob: f64,
    pub noise_sigma: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            min_scale: 0.5,
            max_scale: 1.0,
            flip_prob: 0.5,
            noise_sigma: 0.05,
        }
    }
}

impl AugmentConfig {
    pub fn identity() -> Self {
        AugmentConfig {
            min_scale: 1.0,
            max_scale: 1.0,
            flip_prob: 0.0,
            noise_sigma: 0.0,
        }
    }
}

pub fn two_view_augment(image: &Tensor, rng_seed: u64) -> Result<(Tensor, Tensor)> {
    two_view_augment_with(image, &AugmentConfig::default(), rng_seed)
}

/// Two independently augmented views: random crop-and-resize, horizontal
/// flip, additive Gaussian noise.
pub fn two_view_augment_with(
    image: &Tensor,
    cfg: &AugmentConfig,
    rng_seed: u64,
) -> Result<(Tensor, Tensor)> {
    let [_, h, w] = image.dims() else {
        return Err(Error::shape(format!(
            "image must be C×H×W, got {:?}",
            image.dims()
        )));
    };
    if *h < 4 || *w < 4 {
        return Err(Error::shape("image sides must be at least 4"));
    }
    if !(0.0 < cfg.min_scale && cfg.min_scale <= cfg.max_scale && cfg.max_scale <= 1.0) {
        return Err(Error::param("crop scales must satisfy 0 < min <= max <= 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let v1 = augment_once(image, cfg, &mut rng)?;
    let v2 = augment_once(image, cfg, &mut rng)?;
    Ok((v1, v2))
}

fn augment_once(image: &Tensor, cfg: &AugmentConfig, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    let (c, h, w) = (image.dims()[0], image.dims()[1], image.dims()[2]);
    let scale = if cfg.max_scale > cfg.min_scale {
        rng.random_range(cfg.min_scale..=cfg.max_scale)
    } else {
        cfg.min_scale
    };
    let ch = ((scale * h as f64).round() as usize).clamp(1, h);
    let cw = ((scale * w as f64).round() as usize).clamp(1, w);
    let top = rng.random_range(0..=h - ch);
    let left = rng.random_range(0..=w - cw);
    let flip = cfg.flip_prob > 0.0 && rng.random_bool(cfg.flip_prob.min(1.0));

    let src = image.data();
    let mut out = vec![0.0; c * h * w];
    // Half-pixel-centred bilinear sampling: a full-size crop maps each
    // output pixel exactly onto its source pixel.
    let coord = |i: usize, n_out: usize, n_in: usize| -> (usize, usize, f64) {
        let pos =
            ((i as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
        let lo = pos.floor() as usize;
        let hi = (lo + 1).min(n_in - 1);
        (lo, hi, pos - lo as f64)
    };
    for y in 0..h {
        let (y0, y1, fy) = coord(y, h, ch);
        for x in 0..w {
            let (x0, x1, fx) = coord(x, w, cw);
            let ox = if flip { w - 1 - x } else { x };
            for k in 0..c {
                let at = |yy: usize, xx: usize| src[(k * h + top + yy) * w + left + xx];
                let top_row = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
                let bottom_row = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
                let v = if fy == 0.0 && fx == 0.0 {
                    at(y0, x0)
                } else {
                    top_row * (1.0 - fy) + bottom_row * fy
                };
                out[(k * h + y) * w + ox] = v;
            }
        }
    }
    if cfg.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, cfg.noise_sigma)
            .map_err(|e| Error::param(format!("noise sigma: {e}")))?;
        for v in &mut out {
            *v += normal.sample(rng);
        }
    }
    Tensor::new(vec![c, h, w], out)
}
