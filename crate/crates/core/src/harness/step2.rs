//! Step 2: supervised fine-tune of the fused classifier on the target task.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::checkpoint::Checkpoint;
use super::config::{derive_seed, ExperimentConfig, Stream};
use super::data::{gen_dataset, Domain, SyntheticDataset};
use super::step1::{init_backbones, run_step1, Step1Output};
use crate::backbones::{encode_backward, encode_cached, EncodeCache, EncoderParams};
use crate::block::init_uniform;
use crate::mscff::{
    fusion_block_backward_cached, fusion_block_forward_cached, FeatureMap, FusionCache,
    FusionParams,
};
use crate::params::{prefixed, prefixed_mut, Parameters};
use crate::tensor::{self, Tensor};
use crate::{Error, Result};

/// Windowed and global encoders, the fusion block and a linear head.
#[derive(Clone, Debug, PartialEq)]
pub struct FusedClassifier {
    pub windowed: EncoderParams,
    pub global: EncoderParams,
    pub fusion: FusionParams,
    /// `[C, num_classes]`
    pub head_w: Tensor,
    pub head_b: Tensor,
}

impl Parameters for FusedClassifier {
    fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<_> = prefixed("windowed", self.windowed.named())
            .chain(prefixed("global", self.global.named()))
            .chain(prefixed("fusion", self.fusion.named()))
            .collect();
        out.push(("head.w".into(), &self.head_w));
        out.push(("head.b".into(), &self.head_b));
        out
    }

    fn named_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<_> = prefixed_mut("windowed", self.windowed.named_mut())
            .chain(prefixed_mut("global", self.global.named_mut()))
            .chain(prefixed_mut("fusion", self.fusion.named_mut()))
            .collect();
        out.push(("head.w".into(), &mut self.head_w));
        out.push(("head.b".into(), &mut self.head_b));
        out
    }
}

impl FusedClassifier {
    /// Backbones from step 1, fresh fusion block and head.
    pub fn from_step1(cfg: &ExperimentConfig, step1: &Step1Output) -> Result<Self> {
        let (global, mut windowed) = init_backbones(cfg)?;
        let mut global = global.encoder;
        global.load_named(&step1.global.section("encoder"))?;
        step1.windowed.load_into(&mut windowed)?;
        let c = cfg.channels;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, Stream::FusionInit));
        let fusion = FusionParams::init(c, 4 * c, &mut rng);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, Stream::HeadInit));
        let head_w = init_uniform(&[c, cfg.num_classes], c, &mut rng);
        Ok(FusedClassifier {
            windowed,
            global,
            fusion,
            head_w,
            head_b: Tensor::zeros(&[cfg.num_classes]),
        })
    }
}

/// Forward state for one image.
#[derive(Clone, Debug)]
pub struct ClassifierCache {
    windowed: EncodeCache,
    global: Option<(EncodeCache, FusionCache)>,
    pooled: Tensor,
    tokens: usize,
    grid: usize,
    probs: Vec<f64>,
}

impl ClassifierCache {
    pub fn probabilities(&self) -> &[f64] {
        &self.probs
    }

    pub fn prediction(&self) -> usize {
        argmax(&self.probs)
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

pub fn classify_cached(
    model: &FusedClassifier,
    image: &Tensor,
    fusion_on: bool,
) -> Result<(Tensor, ClassifierCache)> {
    let (xs, windowed) = encode_cached(&model.windowed, image, None)?;
    let grid = xs.height();
    let (z, global) = if fusion_on {
        let (xv, gcache) = encode_cached(&model.global, image, None)?;
        let (z, fcache) = fusion_block_forward_cached(&model.fusion, &xs, &xv)?;
        (z, Some((gcache, fcache)))
    } else {
        (xs, None)
    };
    let tokens = z.tokens();
    let pooled = tokens.mean_rows()?;
    let row = pooled.reshape(&[1, pooled.len()])?;
    let logits = tensor::matmul(&row, &model.head_w)?
        .add_row_bias(&model.head_b)?
        .reshape(&[model.head_b.len()])?;
    let probs = tensor::softmax(&logits, 0)?.into_data();
    Ok((
        logits,
        ClassifierCache {
            windowed,
            global,
            pooled,
            tokens: tokens.rows(),
            grid,
            probs,
        },
    ))
}

/// Class logits for one image.
pub fn classify(model: &FusedClassifier, image: &Tensor, fusion_on: bool) -> Result<Tensor> {
    classify_cached(model, image, fusion_on).map(|(l, _)| l)
}

/// Cross-entropy of the cached prediction against `label`.
pub fn cross_entropy(cache: &ClassifierCache, label: usize) -> Result<f64> {
    let p = *cache
        .probs
        .get(label)
        .ok_or_else(|| Error::param(format!("label {label} out of range")))?;
    Ok(-p.max(f64::MIN_POSITIVE).ln())
}

/// Parameter gradient of `cross_entropy(cache, label)`. Fusion parameters get a
/// zero gradient when the cache came from a run without fusion.
pub fn classifier_backward(
    model: &FusedClassifier,
    cache: &ClassifierCache,
    label: usize,
) -> Result<FusedClassifier> {
    let k = model.head_b.len();
    if label >= k {
        return Err(Error::param(format!("label {label} out of range")));
    }
    let mut g_logits = cache.probs.clone();
    g_logits[label] -= 1.0;
    let g_logits = Tensor::vector(&g_logits)?;
    let c = cache.pooled.len();
    let g_head_w = tensor::matmul(&cache.pooled.reshape(&[c, 1])?, &g_logits.reshape(&[1, k])?)?;
    let g_pooled = tensor::matmul(&model.head_w, &g_logits.reshape(&[k, 1])?)?;
    let inv_t = 1.0 / cache.tokens as f64;
    let g_tokens = Tensor::from_fn(&[cache.tokens, c], |i| g_pooled.data()[i % c] * inv_t)?;
    let g_z = FeatureMap::from_tokens(&g_tokens, cache.grid, cache.grid)?;

    let mut grads = model.zeros_like();
    match &cache.global {
        Some((gcache, fcache)) => {
            let fg = fusion_block_backward_cached(&model.fusion, fcache, &g_z)?;
            grads.windowed = encode_backward(&model.windowed, &cache.windowed, &fg.xs)?;
            grads.global = encode_backward(&model.global, gcache, &fg.xv)?;
            grads.fusion = fg.params;
        }
        None => {
            grads.windowed = encode_backward(&model.windowed, &cache.windowed, &g_z)?;
        }
    }
    grads.head_w = g_head_w;
    grads.head_b = g_logits;
    Ok(grads)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub step: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub epochs: Vec<EpochMetrics>,
    /// `confusion[true][predicted]` on the validation split after training.
    pub confusion: Vec<Vec<usize>>,
    /// Forward passes through the fusion block (training and evaluation).
    pub fusion_evaluations: u64,
}

impl MetricsReport {
    pub fn final_val_accuracy(&self) -> f64 {
        self.epochs.last().map_or(0.0, |e| e.val_accuracy)
    }

    pub fn final_train_accuracy(&self) -> f64 {
        self.epochs.last().map_or(0.0, |e| e.train_accuracy)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,step,train_loss,train_accuracy,val_accuracy\n");
        for e in &self.epochs {
            let _ = writeln!(
                out,
                "{},{},{:.9},{:.6},{:.6}",
                e.epoch, e.step, e.train_loss, e.train_accuracy, e.val_accuracy
            );
        }
        out
    }

    pub fn confusion_csv(&self) -> String {
        let k = self.confusion.len();
        let mut out = String::from("true");
        for j in 0..k {
            let _ = write!(out, ",pred_{j}");
        }
        out.push('\n');
        for (i, row) in self.confusion.iter().enumerate() {
            let _ = write!(out, "{i}");
            for v in row {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
        out
    }
}

#[derive(Clone, Debug)]
pub struct Step2Output {
    pub report: MetricsReport,
    pub model: FusedClassifier,
    pub checkpoint: Checkpoint,
}

/// Runs step 1 and then step 2 with the same config.
pub fn run_pipeline(cfg: &ExperimentConfig) -> Result<(Step1Output, Step2Output)> {
    let s1 = run_step1(cfg)?;
    let s2 = run_step2(cfg, &s1)?;
    Ok((s1, s2))
}

pub fn target_data(cfg: &ExperimentConfig) -> Result<(SyntheticDataset, SyntheticDataset)> {
    Ok((
        gen_dataset(
            Domain::TaskA,
            cfg.train_size,
            derive_seed(cfg.seed, Stream::TrainData),
        )?,
        gen_dataset(
            Domain::TaskA,
            cfg.val_size,
            derive_seed(cfg.seed, Stream::ValData),
        )?,
    ))
}

pub fn run_step2(cfg: &ExperimentConfig, step1: &Step1Output) -> Result<Step2Output> {
    cfg.validate()?;
    let mut model = FusedClassifier::from_step1(cfg, step1)?;
    let (train, val) = target_data(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, Stream::Step2Batches));
    let per_fusion = u64::from(cfg.fusion_on);
    let mut fusion_evaluations = 0u64;
    let mut epochs = Vec::new();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut step = 0;
    let mut epoch = 0;
    while step < cfg.step2_steps {
        epoch += 1;
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct, mut seen) = (0.0, 0usize, 0usize);
        for batch in order.chunks(cfg.batch_size) {
            if step == cfg.step2_steps {
                break;
            }
            let per_item: Vec<Result<(f64, bool, FusedClassifier)>> = batch
                .par_iter()
                .map(|&i| {
                    let label = train.labels[i];
                    let (_, cache) = classify_cached(&model, &train.images[i], cfg.fusion_on)?;
                    let loss = cross_entropy(&cache, label)?;
                    let g = classifier_backward(&model, &cache, label)?;
                    Ok((loss, cache.prediction() == label, g))
                })
                .collect();
            let mut grads = model.zeros_like();
            let mut batch_loss = 0.0;
            for item in per_item {
                let (loss, ok, g) = item?;
                batch_loss += loss;
                correct += usize::from(ok);
                grads.accumulate(&g)?;
            }
            if !batch_loss.is_finite() {
                return Err(Error::Diverged(format!(
                    "step-2 loss is {batch_loss} at step {step}"
                )));
            }
            loss_sum += batch_loss;
            seen += batch.len();
            fusion_evaluations += per_fusion * batch.len() as u64;
            grads.scale_all(1.0 / batch.len() as f64);
            model.sgd_step(&grads, cfg.step2_lr)?;
            step += 1;
        }
        let predictions = predict_all(&model, &val, cfg.fusion_on)?;
        fusion_evaluations += per_fusion * val.len() as u64;
        let val_correct = predictions
            .iter()
            .zip(&val.labels)
            .filter(|(p, l)| p == l)
            .count();
        epochs.push(EpochMetrics {
            epoch,
            step,
            train_loss: loss_sum / seen as f64,
            train_accuracy: correct as f64 / seen as f64,
            val_accuracy: val_correct as f64 / val.len() as f64,
        });
    }

    let predictions = predict_all(&model, &val, cfg.fusion_on)?;
    fusion_evaluations += per_fusion * val.len() as u64;
    let mut confusion = vec![vec![0; cfg.num_classes]; cfg.num_classes];
    for (&p, &l) in predictions.iter().zip(&val.labels) {
        confusion[l][p] += 1;
    }
    let checkpoint = Checkpoint::from_params(&model, cfg.hash());
    Ok(Step2Output {
        report: MetricsReport {
            epochs,
            confusion,
            fusion_evaluations,
        },
        model,
        checkpoint,
    })
}

pub fn predict_all(
    model: &FusedClassifier,
    data: &SyntheticDataset,
    fusion_on: bool,
) -> Result<Vec<usize>> {
    data.images
        .par_iter()
        .map(|img| classify_cached(model, img, fusion_on).map(|(_, c)| c.prediction()))
        .collect()
}
