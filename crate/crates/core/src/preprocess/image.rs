use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const NORMALIZE_EPS: f64 = 1e-8;

/// Single-channel image, pixels `[H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pixels: Tensor,
    pub source_id: String,
}

impl Image {
    pub fn new(pixels: Tensor, source_id: impl Into<String>) -> Result<Self> {
        if pixels.dims().len() != 2 {
            return Err(Error::shape(format!("image pixels must be [H, W], got {}", pixels.shape())));
        }
        Ok(Image { pixels, source_id: source_id.into() })
    }

    pub fn from_fn(
        h: usize,
        w: usize,
        source_id: impl Into<String>,
        mut f: impl FnMut(usize, usize) -> f64,
    ) -> Result<Self> {
        let pixels = Tensor::from_fn(&[h, w], |i| f(i / w, i % w))?;
        Image::new(pixels, source_id)
    }

    pub fn height(&self) -> usize {
        self.pixels.dims()[0]
    }

    pub fn width(&self) -> usize {
        self.pixels.dims()[1]
    }

    pub fn pixels(&self) -> &Tensor {
        &self.pixels
    }

    pub fn into_pixels(self) -> Tensor {
        self.pixels
    }

    pub fn at(&self, y: usize, x: usize) -> f64 {
        self.pixels.data()[y * self.width() + x]
    }

    pub(crate) fn map(&self, f: impl Fn(f64) -> f64) -> Image {
        Image { pixels: self.pixels.map(f), source_id: self.source_id.clone() }
    }
}

/// Linear interpolation weights along one axis for a pixel-center sample.
fn axis_sample(src: f64, n: usize) -> (usize, usize, f64) {
    let s = src.clamp(0.0, (n - 1) as f64);
    let i0 = s.floor() as usize;
    let i1 = (i0 + 1).min(n - 1);
    (i0, i1, s - i0 as f64)
}

/// Bilinear read at fractional `(y, x)` with edge clamping.
pub(crate) fn sample(img: &Image, y: f64, x: f64) -> f64 {
    let (y0, y1, fy) = axis_sample(y, img.height());
    let (x0, x1, fx) = axis_sample(x, img.width());
    let top = img.at(y0, x0) * (1.0 - fx) + img.at(y0, x1) * fx;
    let bottom = img.at(y1, x0) * (1.0 - fx) + img.at(y1, x1) * fx;
    top * (1.0 - fy) + bottom * fy
}

/// Pixel-center bilinear resampling: output pixel `(i, j)` reads the input at
/// `((i + 0.5) * H / out_h - 0.5, (j + 0.5) * W / out_w - 0.5)`.
pub fn resize_bilinear(img: &Image, out_h: usize, out_w: usize) -> Result<Image> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::config("resize target must be at least 1x1"));
    }
    if (out_h, out_w) == (img.height(), img.width()) {
        return Ok(img.clone());
    }
    let sy = img.height() as f64 / out_h as f64;
    let sx = img.width() as f64 / out_w as f64;
    Image::from_fn(out_h, out_w, img.source_id.clone(), |i, j| {
        sample(img, (i as f64 + 0.5) * sy - 0.5, (j as f64 + 0.5) * sx - 0.5)
    })
}

/// `(I - mean) / max(std, eps)` with the population standard deviation.
pub fn normalize_zscore(img: &Image, eps: f64) -> Tensor {
    let p = img.pixels();
    let mean = p.mean();
    let var = p.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / p.numel() as f64;
    let denom = var.sqrt().max(eps);
    p.map(|v| (v - mean) / denom)
}

/// Affine rescale so the image spans `[0, 1]`; constant images map to 0.
pub fn minmax_scale(img: &Image) -> Image {
    let (lo, hi) = (img.pixels().min(), img.pixels().max());
    if hi - lo <= 0.0 {
        return img.map(|_| 0.0);
    }
    img.map(|v| (v - lo) / (hi - lo))
}
