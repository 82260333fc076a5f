//! Randomized finite-difference sweep over every analytic backward pass.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backbones::{
    embed_global, embed_global_backward, embed_global_cached, encode, encode_backward,
    encode_cached, patchify, reconstruct, reconstruct_backward, reconstruct_cached, DecoderParams,
    EncoderConfig, EncoderParams,
};
use crate::gradcheck::{
    check, check_parameters, finite_diff, GradReport, DEFAULT_ABS_FLOOR, DEFAULT_EPS,
    DEFAULT_REL_TOL,
};
use crate::mscff::{fusion_block_backward, fusion_block_forward, FeatureMap, FusionParams};
use crate::params::Parameters;
use crate::ssl::{
    contrastive_loss_with_key_grads, info_nce, mask_tokens, reconstruction_loss, ContrastiveBatch,
    ReconstructionTarget,
};
use crate::{Result, Tensor};

fn uniform(dims: &[usize], bound: f64, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    Tensor::from_fn(dims, |_| rng.random_range(-bound..bound))
}

fn unit_vector(d: usize, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    let v = uniform(&[d], 1.0, rng)?;
    let norm = v.dot(&v)?.sqrt();
    v.scale(1.0 / norm)
}

/// Redraws every parameter at unit scale, gammas around 1.
fn unit_scale(params: &mut impl Parameters, rng: &mut ChaCha8Rng) -> Result<()> {
    for (name, t) in params.named_mut() {
        let mut fresh = uniform(t.dims(), 1.0, rng)?;
        if name.ends_with("gamma") {
            fresh.data_mut().iter_mut().for_each(|v| *v += 1.0);
        }
        *t = fresh;
    }
    Ok(())
}

/// 8×8 toy encoders: global with 4×4 patches, windowed with 2×2 patches in
/// 2×2 windows.
fn encoder_config(window_size: usize) -> EncoderConfig {
    EncoderConfig {
        in_channels: 1,
        image_size: 8,
        patch: if window_size == 0 { 4 } else { 2 },
        channels: 4,
        layers: 1,
        hidden: 8,
        window_size,
        mask_token: window_size == 0,
    }
}

fn tagged(mut reports: Vec<GradReport>, instance: usize) -> Vec<GradReport> {
    for r in &mut reports {
        r.name = format!("{}#{instance}", r.name);
    }
    reports
}

/// `instances` random cases for the fusion block, both self-supervised losses
/// and both backbones.
pub fn gradient_suite(instances: usize, seed: u64) -> Result<Vec<GradReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (eps, tol, floor) = (DEFAULT_EPS, DEFAULT_REL_TOL, DEFAULT_ABS_FLOOR);
    let mut out = Vec::new();
    for n in 0..instances {
        // Fusion block with upstream gradient `up`.
        let (c, h, w) = (3, 2, 2);
        let mut p = FusionParams::init(c, 4 * c, &mut rng);
        unit_scale(&mut p, &mut rng)?;
        let xs = FeatureMap::new(uniform(&[c, h, w], 2.0, &mut rng)?)?;
        let xv = FeatureMap::new(uniform(&[c, h, w], 2.0, &mut rng)?)?;
        let up = FeatureMap::new(uniform(&[c, h, w], 1.0, &mut rng)?)?;
        let g = fusion_block_backward(&p, &xs, &xv, &up)?;
        let loss = |p: &FusionParams, xs: &FeatureMap, xv: &FeatureMap| {
            fusion_block_forward(p, xs, xv)
                .and_then(|z| z.values().dot(up.values()))
                .unwrap_or(f64::NAN)
        };
        out.extend(tagged(
            check_parameters(
                "fusion",
                &p,
                &g.params,
                |q| loss(q, &xs, &xv),
                eps,
                tol,
                floor,
            )?,
            n,
        ));
        let num = finite_diff(
            |t| FeatureMap::new(t.clone()).map_or(f64::NAN, |m| loss(&p, &m, &xv)),
            xs.values(),
            eps,
        )?;
        out.push(check(
            &format!("fusion.xs#{n}"),
            g.xs.values(),
            &num,
            tol,
            floor,
        )?);
        let num = finite_diff(
            |t| FeatureMap::new(t.clone()).map_or(f64::NAN, |m| loss(&p, &xs, &m)),
            xv.values(),
            eps,
        )?;
        out.push(check(
            &format!("fusion.xv#{n}"),
            g.xv.values(),
            &num,
            tol,
            floor,
        )?);

        // Masked reconstruction loss with respect to the reconstruction.
        let tokens = 8;
        let mask = mask_tokens(tokens, 0.5, rng.random())?;
        let target = uniform(&[tokens, 4], 1.0, &mut rng)?;
        let rec = uniform(&[tokens, 4], 1.0, &mut rng)?;
        let rl = |r: &Tensor| {
            ReconstructionTarget::new(r.clone(), target.clone())
                .and_then(|t| reconstruction_loss(&t, &mask))
                .map_or(f64::NAN, |(l, _)| l)
        };
        let (_, g_rec) = reconstruction_loss(
            &ReconstructionTarget::new(rec.clone(), target.clone())?,
            &mask,
        )?;
        out.push(check(
            &format!("reconstruction#{n}"),
            &g_rec,
            &finite_diff(rl, &rec, eps)?,
            tol,
            floor,
        )?);

        // InfoNCE with respect to the query and every key, on unit vectors as
        // produced by the embedding head.
        let d = 5;
        let keys: Vec<Tensor> = (0..4)
            .map(|_| unit_vector(d, &mut rng))
            .collect::<Result<_>>()?;
        let q = unit_vector(d, &mut rng)?;
        let pos = rng.random_range(0..keys.len());
        let tau = 0.2;
        let nce = |q: &Tensor, keys: &[Tensor]| {
            let sims: Vec<f64> = keys.iter().map(|k| q.dot(k).unwrap_or(f64::NAN)).collect();
            info_nce(&sims, pos, tau).unwrap_or(f64::NAN)
        };
        let (_, cg) = contrastive_loss_with_key_grads(&ContrastiveBatch::new(
            q.clone(),
            keys.clone(),
            pos,
            tau,
        )?)?;
        out.push(check(
            &format!("contrastive.q#{n}"),
            &cg.q,
            &finite_diff(|t| nce(t, &keys), &q, eps)?,
            tol,
            floor,
        )?);
        for (j, gk) in cg.k_all.iter().enumerate() {
            let num = finite_diff(
                |t| {
                    let mut k = keys.clone();
                    k[j] = t.clone();
                    nce(&q, &k)
                },
                &keys[j],
                eps,
            )?;
            out.push(check(
                &format!("contrastive.k{j}#{n}"),
                gk,
                &num,
                tol,
                floor,
            )?);
        }

        // Global encoder and decoder through the masked reconstruction loss.
        let gcfg = encoder_config(0);
        let enc = EncoderParams::init(gcfg, &mut rng)?;
        let dec = DecoderParams::init(&gcfg, &mut rng);
        let img = Tensor::from_fn(&[1, 8, 8], |_| rng.random_range(0.0..1.0))?;
        let patches = patchify(&img, gcfg.patch)?;
        let mask = mask_tokens(gcfg.tokens(), 0.75, rng.random())?;
        let rec_loss = |e: &EncoderParams, dd: &DecoderParams| {
            encode(e, &img, Some(&mask))
                .and_then(|f| reconstruct(dd, &f))
                .and_then(|r| ReconstructionTarget::new(r, patches.clone()))
                .and_then(|t| reconstruction_loss(&t, &mask))
                .map_or(f64::NAN, |(l, _)| l)
        };
        let (f, ecache) = encode_cached(&enc, &img, Some(&mask))?;
        let (rec, dcache) = reconstruct_cached(&dec, &f)?;
        let (_, g_rec) =
            reconstruction_loss(&ReconstructionTarget::new(rec, patches.clone())?, &mask)?;
        let (g_dec, g_f) = reconstruct_backward(&dec, &dcache, &g_rec)?;
        let g_enc = encode_backward(&enc, &ecache, &g_f)?;
        out.extend(tagged(
            check_parameters(
                "global.encoder",
                &enc,
                &g_enc,
                |e| rec_loss(e, &dec),
                eps,
                tol,
                floor,
            )?,
            n,
        ));
        out.extend(tagged(
            check_parameters(
                "global.decoder",
                &dec,
                &g_dec,
                |dd| rec_loss(&enc, dd),
                eps,
                tol,
                floor,
            )?,
            n,
        ));

        // Windowed encoder through the normalized embedding.
        let win = EncoderParams::init(encoder_config(2), &mut rng)?;
        let up = uniform(&[4], 1.0, &mut rng)?;
        let (_, cache) = embed_global_cached(&win, &img)?;
        let g = embed_global_backward(&win, &cache, &up)?;
        out.extend(tagged(
            check_parameters(
                "windowed.encoder",
                &win,
                &g,
                |e| {
                    embed_global(e, &img)
                        .and_then(|z| z.dot(&up))
                        .unwrap_or(f64::NAN)
                },
                eps,
                tol,
                floor,
            )?,
            n,
        ));
    }
    Ok(out)
}
