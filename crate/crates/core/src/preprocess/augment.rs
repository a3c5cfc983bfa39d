use serde::{Deserialize, Serialize};

use super::image::{resize_bilinear, sample, Image};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Flip {
    None,
    H,
    V,
}

impl Flip {
    fn tag(&self) -> &'static str {
        match self {
            Flip::None => "",
            Flip::H => "_fliph",
            Flip::V => "_flipv",
        }
    }
}

/// Every rotation is combined with every flip; crop, zoom and brightness are
/// then applied to each combination.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentSpec {
    /// Degrees, multiples of 90.
    pub rotations: Vec<u32>,
    pub flips: Vec<Flip>,
    /// Side fraction of a random crop; 1 disables cropping.
    pub crop_fraction: f64,
    /// Zoom about the image center; 1 disables zooming.
    pub scale: f64,
    pub brightness_delta: f64,
    /// Output extent; defaults to the input extent.
    pub output: Option<(usize, usize)>,
}

impl Default for AugmentSpec {
    fn default() -> Self {
        AugmentSpec {
            rotations: vec![0, 90, 180, 270],
            flips: vec![Flip::None, Flip::H],
            crop_fraction: 1.0,
            scale: 1.0,
            brightness_delta: 0.0,
            output: None,
        }
    }
}

impl AugmentSpec {
    pub fn validate(&self) -> Result<()> {
        if self.rotations.is_empty() || self.flips.is_empty() {
            return Err(Error::config("augment needs at least one rotation and one flip entry (use 0 / none)"));
        }
        if let Some(r) = self.rotations.iter().find(|&&r| r % 90 != 0 || r >= 360) {
            return Err(Error::config(format!("rotation {r} is not one of 0, 90, 180, 270")));
        }
        if !(self.crop_fraction > 0.0 && self.crop_fraction <= 1.0) {
            return Err(Error::config("crop fraction must lie in (0, 1]"));
        }
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(Error::config("scale must be positive"));
        }
        if !self.brightness_delta.is_finite() {
            return Err(Error::config("brightness delta must be finite"));
        }
        if matches!(self.output, Some((0, _)) | Some((_, 0))) {
            return Err(Error::config("augment output extent must be positive"));
        }
        let enabled = self.rotations.iter().any(|&r| r != 0)
            || self.flips.iter().any(|&f| f != Flip::None)
            || self.crop_fraction < 1.0
            || self.scale != 1.0
            || self.brightness_delta != 0.0;
        if !enabled {
            return Err(Error::config("augment spec enables no transform"));
        }
        Ok(())
    }

    pub fn cardinality(&self) -> usize {
        self.rotations.len() * self.flips.len()
    }
}

/// Quarter turn counter-clockwise.
pub fn rotate90(img: &Image) -> Image {
    let (h, w) = (img.height(), img.width());
    Image::from_fn(w, h, img.source_id.clone(), |y, x| img.at(x, w - 1 - y)).expect("nonzero extent")
}

pub fn rotate(img: &Image, degrees: u32) -> Image {
    (0..(degrees / 90) % 4).fold(img.clone(), |acc, _| rotate90(&acc))
}

pub fn flip(img: &Image, f: Flip) -> Image {
    let (h, w) = (img.height(), img.width());
    match f {
        Flip::None => img.clone(),
        Flip::H => Image::from_fn(h, w, img.source_id.clone(), |y, x| img.at(y, w - 1 - x)).expect("nonzero extent"),
        Flip::V => Image::from_fn(h, w, img.source_id.clone(), |y, x| img.at(h - 1 - y, x)).expect("nonzero extent"),
    }
}

pub fn crop(img: &Image, top: usize, left: usize, h: usize, w: usize) -> Result<Image> {
    if h == 0 || w == 0 || top + h > img.height() || left + w > img.width() {
        return Err(Error::shape(format!("crop {h}x{w}+{top}+{left} outside {}x{}", img.height(), img.width())));
    }
    Image::from_fn(h, w, img.source_id.clone(), |y, x| img.at(top + y, left + x))
}

/// Zoom by `factor` about the center, keeping the extent; edges clamp.
pub fn zoom(img: &Image, factor: f64) -> Image {
    let cy = (img.height() as f64 - 1.0) / 2.0;
    let cx = (img.width() as f64 - 1.0) / 2.0;
    Image::from_fn(img.height(), img.width(), img.source_id.clone(), |y, x| {
        sample(img, cy + (y as f64 - cy) / factor, cx + (x as f64 - cx) / factor)
    })
    .expect("nonzero extent")
}

pub fn adjust_brightness(img: &Image, delta: f64) -> Image {
    img.map(|v| (v + delta).clamp(0.0, 1.0))
}

/// Deterministic given `seed`; outputs ordered rotation-major, then flip.
pub fn augment(img: &Image, spec: &AugmentSpec, seed: u64) -> Result<Vec<Image>> {
    spec.validate()?;
    let (oh, ow) = spec.output.unwrap_or((img.height(), img.width()));
    let mut r = rng::stream(seed, &format!("augment/{}", img.source_id));
    let mut out = Vec::with_capacity(spec.cardinality());
    for &deg in &spec.rotations {
        for &f in &spec.flips {
            let mut a = flip(&rotate(img, deg), f);
            if spec.crop_fraction < 1.0 {
                let ch = ((a.height() as f64 * spec.crop_fraction).round() as usize).max(1);
                let cw = ((a.width() as f64 * spec.crop_fraction).round() as usize).max(1);
                let top = (rng::uniform(&mut r, 0.0, 1.0) * (a.height() - ch + 1) as f64) as usize;
                let left = (rng::uniform(&mut r, 0.0, 1.0) * (a.width() - cw + 1) as f64) as usize;
                a = crop(&a, top.min(a.height() - ch), left.min(a.width() - cw), ch, cw)?;
            }
            if spec.scale != 1.0 {
                a = zoom(&a, spec.scale);
            }
            if spec.brightness_delta != 0.0 {
                a = adjust_brightness(&a, spec.brightness_delta);
            }
            let mut a = resize_bilinear(&a, oh, ow)?;
            a.source_id = format!("{}#rot{deg}{}", img.source_id, f.tag());
            out.push(a);
        }
    }
    Ok(out)
}

/// Stack images of equal extent into `[N, 1, H, W]`.
pub fn stack(images: &[Image]) -> Result<Tensor> {
    let first = images.first().ok_or_else(|| Error::data("no images to stack"))?;
    let (h, w) = (first.height(), first.width());
    let mut data = Vec::with_capacity(images.len() * h * w);
    for img in images {
        if (img.height(), img.width()) != (h, w) {
            return Err(Error::shape(format!("cannot stack {}x{} with {h}x{w}", img.height(), img.width())));
        }
        data.extend_from_slice(img.pixels().data());
    }
    Tensor::new(&[images.len(), 1, h, w], data)
}
