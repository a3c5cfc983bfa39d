//! Synthetic mammogram-like phantoms.
//!
//! Benign: smooth background plus a small round blob with a soft Gaussian
//! profile. Malignant: the same background plus a bright, hard-edged blob
//! whose boundary carries star-like spicules.

use std::f64::consts::TAU;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::data::{DatasetManifest, Label, ManifestRow, Source};
use crate::error::{Error, Result};
use crate::preprocess::{write_pgm, Image};
use crate::rng::{self, SeededRng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n: usize,
    pub size: usize,
    pub noise_sigma: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig { n: 64, size: 32, noise_sigma: 0.05 }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n < 2 {
            return Err(Error::config("synthetic set needs at least 2 samples"));
        }
        if self.size < 16 {
            return Err(Error::config("synthetic images must be at least 16x16"));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::config("noise sigma must be nonnegative"));
        }
        Ok(())
    }
}

pub struct SynthSample {
    pub image: Image,
    pub label: Label,
    /// Pixels inside the blob's nominal core radius.
    pub blob_mask: Vec<bool>,
}

fn background(r: &mut SeededRng, size: usize) -> impl Fn(f64, f64) -> f64 {
    let (fx, fy) = (rng::uniform(r, 0.5, 1.5), rng::uniform(r, 0.5, 1.5));
    let (px, py) = (rng::uniform(r, 0.0, TAU), rng::uniform(r, 0.0, TAU));
    let level = rng::uniform(r, 0.2, 0.3);
    let n = size as f64;
    move |y, x| level + 0.06 * (TAU * fx * x / n + px).sin() * (TAU * fy * y / n + py).cos()
}

/// One phantom; draws from `r` in a fixed order.
pub fn synth_sample(r: &mut SeededRng, size: usize, label: Label, noise_sigma: f64) -> Result<SynthSample> {
    let bg = background(r, size);
    let n = size as f64;
    let cy = rng::uniform(r, 0.35, 0.65) * n;
    let cx = rng::uniform(r, 0.35, 0.65) * n;
    let (core, profile): (f64, Box<dyn Fn(f64, f64) -> f64>) = match label {
        Label::Benign => {
            let radius = rng::uniform(r, 0.10, 0.16) * n;
            let amp = rng::uniform(r, 0.15, 0.22);
            (radius, Box::new(move |d, _| amp * (-0.5 * (d / radius).powi(2)).exp()))
        }
        Label::Malignant => {
            let radius = rng::uniform(r, 0.12, 0.18) * n;
            let amp = rng::uniform(r, 0.45, 0.6);
            let spikes = 5.0 + (rng::uniform(r, 0.0, 4.0)).floor();
            let phase = rng::uniform(r, 0.0, TAU);
            (
                radius,
                Box::new(move |d, theta| {
                    let reach = radius * (1.0 + 0.8 * (spikes * theta + phase).cos().max(0.0).powi(6));
                    amp / (1.0 + ((d - reach) / 0.35).exp())
                }),
            )
        }
    };
    let mut mask = Vec::with_capacity(size * size);
    let clean = Image::from_fn(size, size, "", |y, x| {
        let (dy, dx) = (y as f64 - cy, x as f64 - cx);
        let d = (dy * dy + dx * dx).sqrt();
        mask.push(d <= core);
        bg(y as f64, x as f64) + profile(d, dy.atan2(dx))
    })?;
    let noisy: Vec<f64> =
        clean.pixels().data().iter().map(|&v| (v + noise_sigma * rng::normal(r)).clamp(0.0, 1.0)).collect();
    let image = Image::new(crate::tensor::Tensor::new(&[size, size], noisy)?, "")?;
    Ok(SynthSample { image, label, blob_mask: mask })
}

/// `n` phantoms, alternating benign (even index) and malignant (odd).
pub fn synth_samples(cfg: &SynthConfig, seed: u64) -> Result<Vec<SynthSample>> {
    cfg.validate()?;
    let mut r = rng::stream(seed, "synth");
    (0..cfg.n)
        .map(|i| {
            let label = if i % 2 == 0 { Label::Benign } else { Label::Malignant };
            let mut s = synth_sample(&mut r, cfg.size, label, cfg.noise_sigma)?;
            s.image.source_id = sample_name(i, label);
            Ok(s)
        })
        .collect()
}

fn sample_name(i: usize, label: Label) -> String {
    match label {
        Label::Benign => format!("benign_{i:04}"),
        Label::Malignant => format!("malignant_{i:04}"),
    }
}

/// Write phantoms as 8-bit PGMs plus `manifest.csv` into `dir`.
pub fn synth_dataset(cfg: &SynthConfig, seed: u64, dir: &Path) -> Result<DatasetManifest> {
    let samples = synth_samples(cfg, seed)?;
    std::fs::create_dir_all(dir.join("images"))?;
    let mut rows = Vec::with_capacity(samples.len());
    for s in &samples {
        let rel = format!("images/{}.pgm", s.image.source_id);
        write_pgm(&s.image, &dir.join(&rel), 255)?;
        rows.push(ManifestRow { path: rel, label: s.label, source: Source::Synth });
    }
    let manifest = DatasetManifest::new(dir, rows)?;
    manifest.write(&dir.join("manifest.csv"))?;
    Ok(manifest)
}
