//! Synthetic single-channel image tasks.
//!
//! - `TaskA` (target task): an axis-aligned filled rectangle (class 0) or a
//!   plus-shaped cross (class 1) at a random position and size.
//! - `TaskB` (related pre-fine-tune domain): the same glyph family rotated by
//!   20°–70°.
//! - `Mismatched` (unrelated pre-fine-tune domain): one (class 0) or two
//!   (class 1) Gaussian blobs.
//!
//! All images carry additive Gaussian pixel noise. Labels alternate so every
//! dataset is exactly class balanced.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::{Error, Result, Tensor};

pub const IMAGE_SIZE: usize = 16;
pub const NUM_CLASSES: usize = 2;
const PIXEL_NOISE: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Domain {
    TaskA,
    TaskB,
    Mismatched,
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Domain::TaskA => "task_a",
            Domain::TaskB => "task_b",
            Domain::Mismatched => "mismatched",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDataset {
    pub images: Vec<Tensor>,
    pub labels: Vec<usize>,
    pub domain: Domain,
    pub seed: u64,
}

impl SyntheticDataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn class_counts(&self) -> [usize; NUM_CLASSES] {
        let mut counts = [0; NUM_CLASSES];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// `label,p0,...,p255` rows with a header line.
    pub fn to_csv(&self) -> String {
        let n = self.images.first().map_or(0, |t| t.len());
        let mut out = String::from("label");
        for i in 0..n {
            out.push_str(&format!(",p{i}"));
        }
        out.push('\n');
        for (img, label) in self.images.iter().zip(&self.labels) {
            out.push_str(&label.to_string());
            for v in img.data() {
                out.push_str(&format!(",{v:.6}"));
            }
            out.push('\n');
        }
        out
    }
}

pub fn gen_dataset(domain: Domain, size: usize, seed: u64) -> Result<SyntheticDataset> {
    if size < 2 * NUM_CLASSES {
        return Err(Error::param(format!(
            "dataset size {size} is below 2·num_classes"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, PIXEL_NOISE).expect("valid sigma");
    let mut images = Vec::with_capacity(size);
    let mut labels = Vec::with_capacity(size);
    for i in 0..size {
        let label = i % NUM_CLASSES;
        let mut pixels = match domain {
            Domain::TaskA => glyph(label, false, &mut rng),
            Domain::TaskB => glyph(label, true, &mut rng),
            Domain::Mismatched => blobs(label + 1, &mut rng),
        };
        for p in &mut pixels {
            *p += noise.sample(&mut rng);
        }
        images.push(Tensor::new(vec![1, IMAGE_SIZE, IMAGE_SIZE], pixels)?);
        labels.push(label);
    }
    Ok(SyntheticDataset {
        images,
        labels,
        domain,
        seed,
    })
}

fn glyph(label: usize, rotate: bool, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let amp = rng.random_range(0.7..1.0);
    let theta = if rotate {
        let deg: f64 = rng.random_range(20.0..70.0);
        deg.to_radians()
    } else {
        0.0
    };
    // Half extents in glyph coordinates; `reach` bounds the glyph under any rotation.
    let (inside, reach): (Box<dyn Fn(f64, f64) -> bool>, f64) = if label == 0 {
        let hw = rng.random_range(4..=7) as f64 / 2.0;
        let hh = rng.random_range(4..=7) as f64 / 2.0;
        let reach = if rotate { hw.hypot(hh) } else { hw.max(hh) };
        (
            Box::new(move |u: f64, v: f64| u.abs() <= hw && v.abs() <= hh),
            reach,
        )
    } else {
        let arm = rng.random_range(3..=6) as f64 + 0.5;
        let half_t = 0.5;
        let inside = move |u: f64, v: f64| {
            (u.abs() <= half_t && v.abs() <= arm) || (v.abs() <= half_t && u.abs() <= arm)
        };
        (Box::new(inside), arm)
    };
    let s = IMAGE_SIZE as f64;
    let margin = reach.min(s / 2.0 - 0.5);
    let cx = rng.random_range(margin..=s - margin);
    let cy = rng.random_range(margin..=s - margin);
    let (sin, cos) = theta.sin_cos();
    let mut out = vec![0.0; IMAGE_SIZE * IMAGE_SIZE];
    for y in 0..IMAGE_SIZE {
        for x in 0..IMAGE_SIZE {
            let dx = x as f64 + 0.5 - cx;
            let dy = y as f64 + 0.5 - cy;
            let u = cos * dx + sin * dy;
            let v = -sin * dx + cos * dy;
            if inside(u, v) {
                out[y * IMAGE_SIZE + x] = amp;
            }
        }
    }
    out
}

fn blobs(count: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut out = vec![0.0; IMAGE_SIZE * IMAGE_SIZE];
    let s = IMAGE_SIZE as f64;
    for _ in 0..count {
        let amp = rng.random_range(0.7..1.0);
        let sigma: f64 = rng.random_range(1.0..2.5);
        let cx = rng.random_range(2.0..s - 2.0);
        let cy = rng.random_range(2.0..s - 2.0);
        for y in 0..IMAGE_SIZE {
            for x in 0..IMAGE_SIZE {
                let dx = x as f64 + 0.5 - cx;
                let dy = y as f64 + 0.5 - cy;
                out[y * IMAGE_SIZE + x] +=
                    amp * (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
            }
        }
    }
    out
}
