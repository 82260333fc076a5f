use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbones::EncoderConfig;
use crate::{Error, Result};

/// Which data the backbones see during the self-supervised step.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PrefinetuneDomain {
    /// Skip step 1: backbones keep their initialization.
    None,
    /// Rotated glyphs: related to, but distinct from, the target task.
    Matched,
    /// Unrelated random blobs.
    Mismatched,
}

impl PrefinetuneDomain {
    pub const ALL: [PrefinetuneDomain; 3] = [
        PrefinetuneDomain::None,
        PrefinetuneDomain::Matched,
        PrefinetuneDomain::Mismatched,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PrefinetuneDomain::None => "none",
            PrefinetuneDomain::Matched => "matched",
            PrefinetuneDomain::Mismatched => "mismatched",
        }
    }
}

impl fmt::Display for PrefinetuneDomain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PrefinetuneDomain {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(PrefinetuneDomain::None),
            "matched" => Ok(PrefinetuneDomain::Matched),
            "mismatched" => Ok(PrefinetuneDomain::Mismatched),
            other => Err(Error::Config(format!(
                "unknown pre-fine-tune domain {other:?}"
            ))),
        }
    }
}

/// Flat, JSON-serializable description of a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub image_size: usize,
    pub in_channels: usize,
    pub patch: usize,
    pub channels: usize,
    pub layers: usize,
    pub window_size: usize,
    pub hidden: usize,
    pub num_classes: usize,

    pub mask_ratio: f64,
    pub tau: f64,

    pub step1_lr: f64,
    pub step2_lr: f64,
    pub step1_steps: usize,
    pub step2_steps: usize,
    pub batch_size: usize,

    pub pretrain_size: usize,
    pub train_size: usize,
    pub val_size: usize,

    pub seed: u64,
    pub ablation_seeds: Vec<u64>,

    pub fusion_on: bool,
    pub prefinetune: PrefinetuneDomain,

    pub out_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            image_size: 16,
            in_channels: 1,
            patch: 4,
            channels: 8,
            layers: 2,
            window_size: 2,
            hidden: 32,
            num_classes: 2,
            mask_ratio: 0.75,
            tau: 0.2,
            step1_lr: 0.05,
            step2_lr: 0.02,
            step1_steps: 200,
            step2_steps: 1500,
            batch_size: 16,
            pretrain_size: 256,
            train_size: 512,
            val_size: 512,
            seed: 0,
            ablation_seeds: (0..5).collect(),
            fusion_on: true,
            prefinetune: PrefinetuneDomain::Matched,
            out_dir: PathBuf::from("runs"),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config always serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let sizes = [
            ("image_size", self.image_size),
            ("in_channels", self.in_channels),
            ("patch", self.patch),
            ("channels", self.channels),
            ("layers", self.layers),
            ("hidden", self.hidden),
            ("batch_size", self.batch_size),
            ("step2_steps", self.step2_steps),
        ];
        for (name, v) in sizes {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.image_size != crate::harness::data::IMAGE_SIZE || self.in_channels != 1 {
            return Err(Error::Config(
                "the synthetic tasks are single-channel 16×16 images".into(),
            ));
        }
        if self.num_classes != 2 {
            return Err(Error::Config(
                "the synthetic tasks have exactly 2 classes".into(),
            ));
        }
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            return Err(Error::Config("mask_ratio must be in (0, 1)".into()));
        }
        if !(self.tau > 0.0) {
            return Err(Error::Config("tau must be positive".into()));
        }
        if !(self.step1_lr >= 0.0 && self.step2_lr >= 0.0) {
            return Err(Error::Config("learning rates must be non-negative".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config(
                "contrastive batches need at least 2 images".into(),
            ));
        }
        for (name, n) in [
            ("pretrain_size", self.pretrain_size),
            ("train_size", self.train_size),
            ("val_size", self.val_size),
        ] {
            if n < 2 * self.num_classes {
                return Err(Error::Config(format!("{name} must be >= 2·num_classes")));
            }
        }
        if self.ablation_seeds.is_empty() {
            return Err(Error::Config("ablation_seeds must not be empty".into()));
        }
        self.global_encoder()
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        self.windowed_encoder()
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }

    pub fn global_encoder(&self) -> EncoderConfig {
        EncoderConfig {
            in_channels: self.in_channels,
            image_size: self.image_size,
            patch: self.patch,
            channels: self.channels,
            layers: self.layers,
            hidden: self.hidden,
            window_size: 0,
            mask_token: true,
        }
    }

    pub fn windowed_encoder(&self) -> EncoderConfig {
        EncoderConfig {
            window_size: self.window_size,
            mask_token: false,
            ..self.global_encoder()
        }
    }

    /// First 8 bytes (little endian) of the SHA-256 of the compact JSON form.
    pub fn hash(&self) -> u64 {
        let json = serde_json::to_string(self).expect("config always serializes");
        let digest = Sha256::digest(json.as_bytes());
        u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
    }
}

/// Independent RNG streams derived from the master seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    GlobalInit = 1,
    WindowedInit = 2,
    FusionInit = 3,
    HeadInit = 4,
    PretrainData = 5,
    TrainData = 6,
    ValData = 7,
    Masks = 8,
    Augment = 9,
    Step1Batches = 10,
    Step2Batches = 11,
}

pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// `splitmix64(master ^ (stream_id · 0x9E3779B97F4A7C15))`.
pub fn derive_seed(master: u64, stream: Stream) -> u64 {
    splitmix64(master ^ (stream as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Per-item seed within a stream: `splitmix64(base + index)`.
pub fn item_seed(base: u64, index: u64) -> u64 {
    splitmix64(base.wrapping_add(index))
}
