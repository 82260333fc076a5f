//! Step 1: self-supervised pre-fine-tune of both backbones.
//!
//! The global encoder and its decoder learn to reconstruct masked patch
//! tokens; the windowed encoder learns with InfoNCE on two augmented views
//! per image, using the other images' second views as negatives.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::checkpoint::Checkpoint;
use super::config::{derive_seed, item_seed, ExperimentConfig, PrefinetuneDomain, Stream};
use super::data::{gen_dataset, Domain, SyntheticDataset};
use crate::backbones::{
    embed_global_backward, embed_global_cached, encode_backward, encode_cached, patchify,
    reconstruct_backward, reconstruct_cached, DecoderParams, EncoderParams,
};
use crate::params::{prefixed, prefixed_mut, Parameters};
use crate::ssl::{
    contrastive_loss_with_key_grads, mask_tokens, reconstruction_loss, two_view_augment,
    ContrastiveBatch, ReconstructionTarget,
};
use crate::{Error, Result, Tensor};

/// Global encoder together with its reconstruction decoder.
#[derive(Clone, Debug, PartialEq)]
pub struct GlobalBackbone {
    pub encoder: EncoderParams,
    pub decoder: DecoderParams,
}

impl Parameters for GlobalBackbone {
    fn named(&self) -> Vec<(String, &Tensor)> {
        prefixed("encoder", self.encoder.named())
            .chain(prefixed("decoder", self.decoder.named()))
            .collect()
    }

    fn named_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        prefixed_mut("encoder", self.encoder.named_mut())
            .chain(prefixed_mut("decoder", self.decoder.named_mut()))
            .collect()
    }
}

/// Freshly initialized backbones for a config; identical across ablation cells
/// that share a seed.
pub fn init_backbones(cfg: &ExperimentConfig) -> Result<(GlobalBackbone, EncoderParams)> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, Stream::GlobalInit));
    let gcfg = cfg.global_encoder();
    let encoder = EncoderParams::init(gcfg, &mut rng)?;
    let decoder = DecoderParams::init(&gcfg, &mut rng);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, Stream::WindowedInit));
    let windowed = EncoderParams::init(cfg.windowed_encoder(), &mut rng)?;
    Ok((GlobalBackbone { encoder, decoder }, windowed))
}

#[derive(Clone, Debug)]
pub struct Step1Output {
    pub global: Checkpoint,
    pub windowed: Checkpoint,
    /// Mean squared error per masked pixel at each step, before the update.
    pub reconstruction_curve: Vec<f64>,
    /// Mean InfoNCE loss at each step, before the update.
    pub contrastive_curve: Vec<f64>,
}

impl Step1Output {
    /// `step,reconstruction_mse,contrastive_loss`.
    pub fn loss_csv(&self) -> String {
        let mut out = String::from("step,reconstruction_mse,contrastive_loss\n");
        for (i, (r, c)) in self
            .reconstruction_curve
            .iter()
            .zip(&self.contrastive_curve)
            .enumerate()
        {
            out.push_str(&format!("{},{r:.9},{c:.9}\n", i + 1));
        }
        out
    }
}

pub fn pretrain_domain(domain: PrefinetuneDomain) -> Option<Domain> {
    match domain {
        PrefinetuneDomain::None => None,
        PrefinetuneDomain::Matched => Some(Domain::TaskB),
        PrefinetuneDomain::Mismatched => Some(Domain::Mismatched),
    }
}

pub fn run_step1(cfg: &ExperimentConfig) -> Result<Step1Output> {
    cfg.validate()?;
    let (mut global, mut windowed) = init_backbones(cfg)?;
    let mut reconstruction_curve = Vec::new();
    let mut contrastive_curve = Vec::new();

    if let Some(domain) = pretrain_domain(cfg.prefinetune) {
        let data = gen_dataset(
            domain,
            cfg.pretrain_size,
            derive_seed(cfg.seed, Stream::PretrainData),
        )?;
        let mut batch_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, Stream::Step1Batches));
        let mask_base = derive_seed(cfg.seed, Stream::Masks);
        let aug_base = derive_seed(cfg.seed, Stream::Augment);
        for step in 0..cfg.step1_steps {
            let rec_batch: Vec<usize> = (0..cfg.batch_size)
                .map(|_| batch_rng.random_range(0..data.len()))
                .collect();
            let con_batch: Vec<usize> = (0..cfg.batch_size)
                .map(|_| batch_rng.random_range(0..data.len()))
                .collect();
            let first_item = (step * cfg.batch_size) as u64;

            let (loss, grads) =
                reconstruction_step(cfg, &global, &data, &rec_batch, mask_base, first_item)?;
            global.sgd_step(&grads, cfg.step1_lr)?;
            reconstruction_curve.push(loss);

            let (loss, grads) =
                contrastive_step(cfg, &windowed, &data, &con_batch, aug_base, first_item)?;
            windowed.sgd_step(&grads, cfg.step1_lr)?;
            contrastive_curve.push(loss);
        }
    }

    let hash = cfg.hash();
    Ok(Step1Output {
        global: Checkpoint::from_params(&global, hash),
        windowed: Checkpoint::from_params(&windowed, hash),
        reconstruction_curve,
        contrastive_curve,
    })
}

fn check_loss(loss: f64, what: &str) -> Result<f64> {
    if loss.is_finite() {
        Ok(loss)
    } else {
        Err(Error::Diverged(format!("{what} loss is {loss}")))
    }
}

/// Masked reconstruction loss per masked pixel, averaged over the batch, and
/// its parameter gradient.
pub fn reconstruction_step(
    cfg: &ExperimentConfig,
    global: &GlobalBackbone,
    data: &SyntheticDataset,
    batch: &[usize],
    mask_base: u64,
    first_item: u64,
) -> Result<(f64, GlobalBackbone)> {
    let tokens = cfg.global_encoder().tokens();
    let rec_cols = cfg.global_encoder().patch_dim();
    let per_item: Vec<Result<(f64, GlobalBackbone)>> = batch
        .par_iter()
        .enumerate()
        .map(|(i, &idx)| {
            let image = &data.images[idx];
            let mask = mask_tokens(
                tokens,
                cfg.mask_ratio,
                item_seed(mask_base, first_item + i as u64),
            )?;
            let (features, ecache) = encode_cached(&global.encoder, image, Some(&mask))?;
            let (rec, dcache) = reconstruct_cached(&global.decoder, &features)?;
            let target = ReconstructionTarget::new(rec, patchify(image, cfg.patch)?)?;
            let (loss, g_rec) = reconstruction_loss(&target, &mask)?;
            // Per masked pixel, so the step size does not grow with patch area.
            let per_pixel = 1.0 / (mask.masked().len() * rec_cols) as f64;
            let (loss, g_rec) = (loss * per_pixel, g_rec.scale(per_pixel)?);
            let (g_dec, g_feat) = reconstruct_backward(&global.decoder, &dcache, &g_rec)?;
            let g_enc = encode_backward(&global.encoder, &ecache, &g_feat)?;
            Ok((
                loss,
                GlobalBackbone {
                    encoder: g_enc,
                    decoder: g_dec,
                },
            ))
        })
        .collect();
    let mut total = 0.0;
    let mut grads = global.zeros_like();
    for item in per_item {
        let (loss, g) = item?;
        total += loss;
        grads.accumulate(&g)?;
    }
    let n = batch.len() as f64;
    grads.scale_all(1.0 / n);
    Ok((check_loss(total / n, "reconstruction")?, grads))
}

/// Mean InfoNCE loss over the batch (query: first view, keys: all second views).
pub fn contrastive_step(
    cfg: &ExperimentConfig,
    windowed: &EncoderParams,
    data: &SyntheticDataset,
    batch: &[usize],
    aug_base: u64,
    first_item: u64,
) -> Result<(f64, EncoderParams)> {
    let embedded: Vec<Result<_>> = batch
        .par_iter()
        .enumerate()
        .map(|(i, &idx)| {
            let (v1, v2) = two_view_augment(
                &data.images[idx],
                item_seed(aug_base, first_item + i as u64),
            )?;
            Ok((
                embed_global_cached(windowed, &v1)?,
                embed_global_cached(windowed, &v2)?,
            ))
        })
        .collect();
    let embedded = embedded.into_iter().collect::<Result<Vec<_>>>()?;
    let keys: Vec<Tensor> = embedded.iter().map(|(_, (z2, _))| z2.clone()).collect();

    let n = batch.len();
    let inv_n = 1.0 / n as f64;
    let mut total = 0.0;
    let mut g_q = Vec::with_capacity(n);
    let mut g_k: Vec<Tensor> = keys.iter().map(|k| Tensor::zeros(k.dims())).collect();
    for (i, ((z1, _), _)) in embedded.iter().enumerate() {
        let b = ContrastiveBatch::new(z1.clone(), keys.clone(), i, cfg.tau)?;
        let (loss, grads) = contrastive_loss_with_key_grads(&b)?;
        total += loss;
        g_q.push(grads.q.scale(inv_n)?);
        for (acc, g) in g_k.iter_mut().zip(&grads.k_all) {
            acc.axpy(inv_n, g)?;
        }
    }

    let per_item: Vec<Result<EncoderParams>> = embedded
        .par_iter()
        .zip(g_q.par_iter().zip(g_k.par_iter()))
        .map(|(((_, c1), (_, c2)), (gq, gk))| {
            let mut g = embed_global_backward(windowed, c1, gq)?;
            g.accumulate(&embed_global_backward(windowed, c2, gk)?)?;
            Ok(g)
        })
        .collect();
    let mut grads = windowed.zeros_like();
    for g in per_item {
        grads.accumulate(&g?)?;
    }
    Ok((check_loss(total * inv_n, "contrastive")?, grads))
}
