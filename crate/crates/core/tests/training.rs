//! Training-harness behaviour at the default config.

use std::sync::OnceLock;

use mscff::backbones::embed_global;
use mscff::harness::step1::init_backbones;
use mscff::harness::step2::classify;
use mscff::harness::{
    derive_seed, gen_dataset, item_seed, run_step1, run_step2, Checkpoint, Domain,
    ExperimentConfig, FusedClassifier, Step1Output, Stream,
};
use mscff::ssl::{mask_tokens, two_view_augment};
use mscff::Parameters;

fn pretrained() -> &'static Step1Output {
    static OUT: OnceLock<Step1Output> = OnceLock::new();
    OUT.get_or_init(|| run_step1(&ExperimentConfig::default()).unwrap())
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

#[test]
fn reconstruction_loss_falls_during_step1() {
    let curve = &pretrained().reconstruction_curve;
    assert_eq!(curve.len(), 200);
    let head = mean(&curve[..20]);
    let tail = mean(&curve[curve.len() - 20..]);
    assert!(
        tail < 0.5 * head,
        "first 20 steps {head:.4}, last 20 {tail:.4}"
    );
}

#[test]
fn contrastive_loss_starts_near_ln_batch() {
    let cfg = ExperimentConfig::default();
    let first = pretrained().contrastive_curve[0];
    let ln_b = (cfg.batch_size as f64).ln();
    assert!(
        (first - ln_b).abs() <= 0.2 * ln_b,
        "{first} vs ln B = {ln_b}"
    );
}

#[test]
fn zero_learning_rate_leaves_backbones_untouched() {
    let cfg = ExperimentConfig {
        step1_lr: 0.0,
        step1_steps: 3,
        ..ExperimentConfig::default()
    };
    let out = run_step1(&cfg).unwrap();
    let (global, windowed) = init_backbones(&cfg).unwrap();
    assert_eq!(out.global, Checkpoint::from_params(&global, cfg.hash()));
    assert_eq!(out.windowed, Checkpoint::from_params(&windowed, cfg.hash()));
}

#[test]
fn views_of_one_image_embed_closer_than_different_images() {
    let cfg = ExperimentConfig::default();
    let (_, mut windowed) = init_backbones(&cfg).unwrap();
    pretrained().windowed.load_into(&mut windowed).unwrap();

    let data = gen_dataset(Domain::TaskB, 40, 77).unwrap();
    let base = derive_seed(99, Stream::Augment);
    let mut same = Vec::new();
    let mut different = Vec::new();
    for i in 0..20 {
        let (a1, a2) = two_view_augment(&data.images[i], item_seed(base, i as u64)).unwrap();
        let (b1, _) =
            two_view_augment(&data.images[i + 20], item_seed(base, 100 + i as u64)).unwrap();
        let e1 = embed_global(&windowed, &a1).unwrap();
        let e2 = embed_global(&windowed, &a2).unwrap();
        let eb = embed_global(&windowed, &b1).unwrap();
        same.push(e1.dot(&e2).unwrap());
        different.push(e1.dot(&eb).unwrap());
    }
    let median = |v: &mut Vec<f64>| {
        v.sort_by(f64::total_cmp);
        (v[9] + v[10]) / 2.0
    };
    let (s, d) = (median(&mut same), median(&mut different));
    assert!(s > d, "same-image cosine {s:.4} vs different-image {d:.4}");
}

#[test]
fn checkpoint_round_trip_reproduces_predictions() {
    let cfg = ExperimentConfig {
        step2_steps: 20,
        train_size: 32,
        val_size: 16,
        ..ExperimentConfig::default()
    };
    let out = run_step2(&cfg, pretrained()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    out.checkpoint.save(&path).unwrap();

    let mut fresh = FusedClassifier::from_step1(
        &cfg,
        &run_step1(&ExperimentConfig {
            prefinetune: mscff::harness::PrefinetuneDomain::None,
            ..cfg.clone()
        })
        .unwrap(),
    )
    .unwrap();
    assert_ne!(fresh, out.model);
    Checkpoint::load(&path)
        .unwrap()
        .load_into(&mut fresh)
        .unwrap();
    assert_eq!(fresh.named().len(), out.model.named().len());

    let images = gen_dataset(Domain::TaskA, 8, 5).unwrap().images;
    for img in &images {
        let a = classify(&out.model, img, true).unwrap();
        let b = classify(&fresh, img, true).unwrap();
        assert_eq!(a.data(), b.data());
    }
}

#[test]
fn each_token_is_masked_at_the_configured_rate() {
    let trials = 2000;
    let tokens = 16;
    let mut hits = vec![0usize; tokens];
    let base = derive_seed(0, Stream::Masks);
    for i in 0..trials {
        let mask = mask_tokens(tokens, 0.75, item_seed(base, i)).unwrap();
        assert_eq!(mask.masked().len(), 12);
        for &t in mask.masked() {
            hits[t] += 1;
        }
    }
    let sigma = (0.75f64 * 0.25 / trials as f64).sqrt();
    for (t, &h) in hits.iter().enumerate() {
        let rate = h as f64 / trials as f64;
        assert!(
            (rate - 0.75).abs() < 4.0 * sigma,
            "token {t} masked at {rate}"
        );
    }
}
