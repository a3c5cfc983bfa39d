//! Separable orthonormal 2-D discrete wavelet transform with periodic
//! boundary handling, plus coefficient thresholding and denoising.

use serde::{Deserialize, Serialize};

use super::image::Image;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const DB4: [f64; 8] = [
    0.230_377_813_308_896_4,
    0.714_846_570_552_915_4,
    0.630_880_767_929_858_7,
    -0.027_983_769_416_859_9,
    -0.187_034_811_719_093_1,
    0.030_841_381_835_560_7,
    0.032_883_011_666_885_2,
    -0.010_597_401_785_069_0,
];

/// MAD-to-sigma factor for Gaussian noise.
const MAD_SCALE: f64 = 0.6745;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Filter {
    #[default]
    Haar,
    /// Daubechies with 8 taps (4 vanishing moments).
    Db4,
}

impl Filter {
    pub fn lowpass(&self) -> Vec<f64> {
        match self {
            Filter::Haar => vec![std::f64::consts::FRAC_1_SQRT_2; 2],
            Filter::Db4 => DB4.to_vec(),
        }
    }

    /// Quadrature mirror of the lowpass: `g[n] = (-1)^n h[L - 1 - n]`.
    pub fn highpass(&self) -> Vec<f64> {
        let h = self.lowpass();
        let l = h.len();
        (0..l).map(|n| if n % 2 == 0 { h[l - 1 - n] } else { -h[l - 1 - n] }).collect()
    }
}

impl std::str::FromStr for Filter {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "haar" => Ok(Filter::Haar),
            "db4" => Ok(Filter::Db4),
            other => Err(Error::config(format!("unknown wavelet filter `{other}`"))),
        }
    }
}

/// Horizontal, vertical and diagonal detail bands of one level.
#[derive(Clone, Debug, PartialEq)]
pub struct DetailBands {
    pub horizontal: Tensor,
    pub vertical: Tensor,
    pub diagonal: Tensor,
}

impl DetailBands {
    fn bands(&self) -> [&Tensor; 3] {
        [&self.horizontal, &self.vertical, &self.diagonal]
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> DetailBands {
        DetailBands {
            horizontal: self.horizontal.map(&f),
            vertical: self.vertical.map(&f),
            diagonal: self.diagonal.map(&f),
        }
    }
}

/// Multi-level decomposition. `details[0]` is the finest level; `approx` is
/// the coarsest approximation.
#[derive(Clone, Debug, PartialEq)]
pub struct WaveletCoeffs {
    pub approx: Tensor,
    pub details: Vec<DetailBands>,
    pub filter: Filter,
    /// Image extent before reflection padding to a multiple of `2^levels`.
    pub original: (usize, usize),
    pub source_id: String,
}

impl WaveletCoeffs {
    pub fn levels(&self) -> usize {
        self.details.len()
    }

    pub fn energy(&self) -> f64 {
        let sq = |t: &Tensor| t.data().iter().map(|v| v * v).sum::<f64>();
        sq(&self.approx) + self.details.iter().flat_map(|d| d.bands()).map(sq).sum::<f64>()
    }

    /// Total coefficient count, equal to the padded pixel count.
    pub fn len(&self) -> usize {
        self.approx.numel() + self.details.iter().map(|d| 3 * d.diagonal.numel()).sum::<usize>()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn analyze_1d(x: &[f64], h: &[f64], g: &[f64], lo: &mut [f64], hi: &mut [f64]) {
    let n = x.len();
    for k in 0..n / 2 {
        let (mut a, mut d) = (0.0, 0.0);
        for (j, (hj, gj)) in h.iter().zip(g).enumerate() {
            let v = x[(2 * k + j) % n];
            a += hj * v;
            d += gj * v;
        }
        lo[k] = a;
        hi[k] = d;
    }
}

fn synthesize_1d(lo: &[f64], hi: &[f64], h: &[f64], g: &[f64], out: &mut [f64]) {
    let n = out.len();
    out.fill(0.0);
    for k in 0..n / 2 {
        for (j, (hj, gj)) in h.iter().zip(g).enumerate() {
            out[(2 * k + j) % n] += hj * lo[k] + gj * hi[k];
        }
    }
}

/// One level on an `h x w` row-major buffer (both even). Returns
/// `(approx, horizontal, vertical, diagonal)` each `h/2 x w/2`.
fn analyze_2d(x: &[f64], rows: usize, cols: usize, f: Filter) -> [Vec<f64>; 4] {
    let (h, g) = (f.lowpass(), f.highpass());
    let (hr, hc) = (rows / 2, cols / 2);
    // row pass: each row splits into lowpass (left) and highpass (right) halves
    let mut lo_w = vec![0.0; rows * hc];
    let mut hi_w = vec![0.0; rows * hc];
    for r in 0..rows {
        analyze_1d(
            &x[r * cols..(r + 1) * cols],
            &h,
            &g,
            &mut lo_w[r * hc..(r + 1) * hc],
            &mut hi_w[r * hc..(r + 1) * hc],
        );
    }
    let columns = |src: &[f64]| {
        let mut lo = vec![0.0; hr * hc];
        let mut hi = vec![0.0; hr * hc];
        let mut col = vec![0.0; rows];
        let (mut a, mut d) = (vec![0.0; hr], vec![0.0; hr]);
        for c in 0..hc {
            for r in 0..rows {
                col[r] = src[r * hc + c];
            }
            analyze_1d(&col, &h, &g, &mut a, &mut d);
            for r in 0..hr {
                lo[r * hc + c] = a[r];
                hi[r * hc + c] = d[r];
            }
        }
        (lo, hi)
    };
    let (ll, lh) = columns(&lo_w);
    let (hl, hh) = columns(&hi_w);
    [ll, lh, hl, hh]
}

fn synthesize_2d(bands: [&[f64]; 4], hr: usize, hc: usize, f: Filter) -> Vec<f64> {
    let (h, g) = (f.lowpass(), f.highpass());
    let (rows, cols) = (2 * hr, 2 * hc);
    let columns = |lo: &[f64], hi: &[f64]| {
        let mut out = vec![0.0; rows * hc];
        let (mut a, mut d) = (vec![0.0; hr], vec![0.0; hr]);
        let mut col = vec![0.0; rows];
        for c in 0..hc {
            for r in 0..hr {
                a[r] = lo[r * hc + c];
                d[r] = hi[r * hc + c];
            }
            synthesize_1d(&a, &d, &h, &g, &mut col);
            for r in 0..rows {
                out[r * hc + c] = col[r];
            }
        }
        out
    };
    let lo_w = columns(bands[0], bands[1]);
    let hi_w = columns(bands[2], bands[3]);
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        synthesize_1d(
            &lo_w[r * hc..(r + 1) * hc],
            &hi_w[r * hc..(r + 1) * hc],
            &h,
            &g,
            &mut out[r * cols..(r + 1) * cols],
        );
    }
    out
}

/// Symmetric (half-sample) reflection of index `i` into `0..n`.
fn reflect(i: usize, n: usize) -> usize {
    let period = 2 * n;
    let m = i % period;
    if m < n {
        m
    } else {
        period - 1 - m
    }
}

pub fn dwt2(img: &Image, filter: Filter, levels: usize) -> Result<WaveletCoeffs> {
    if levels < 1 {
        return Err(Error::config("wavelet levels must be at least 1"));
    }
    if levels >= usize::BITS as usize {
        return Err(Error::config(format!("{levels} wavelet levels is too many")));
    }
    let (h, w) = (img.height(), img.width());
    let block = 1usize << levels;
    let (ph, pw) = (h.div_ceil(block) * block, w.div_ceil(block) * block);
    let mut current: Vec<f64> = (0..ph * pw).map(|i| img.at(reflect(i / pw, h), reflect(i % pw, w))).collect();
    let (mut rows, mut cols) = (ph, pw);
    let mut details = Vec::with_capacity(levels);
    for _ in 0..levels {
        let [ll, lh, hl, hh] = analyze_2d(&current, rows, cols, filter);
        rows /= 2;
        cols /= 2;
        let dims = [rows, cols];
        details.push(DetailBands {
            horizontal: Tensor::new(&dims, lh)?,
            vertical: Tensor::new(&dims, hl)?,
            diagonal: Tensor::new(&dims, hh)?,
        });
        current = ll;
    }
    Ok(WaveletCoeffs {
        approx: Tensor::new(&[rows, cols], current)?,
        details,
        filter,
        original: (h, w),
        source_id: img.source_id.clone(),
    })
}

pub fn idwt2(c: &WaveletCoeffs) -> Result<Image> {
    let mut current = c.approx.data().to_vec();
    let (mut rows, mut cols) = (c.approx.dims()[0], c.approx.dims()[1]);
    for level in c.details.iter().rev() {
        for band in level.bands() {
            if band.dims() != [rows, cols] {
                return Err(Error::shape(format!(
                    "detail band {} does not match approximation {rows}x{cols}",
                    band.shape()
                )));
            }
        }
        current = synthesize_2d(
            [&current, level.horizontal.data(), level.vertical.data(), level.diagonal.data()],
            rows,
            cols,
            c.filter,
        );
        rows *= 2;
        cols *= 2;
    }
    let (h, w) = c.original;
    if h > rows || w > cols {
        return Err(Error::shape(format!("original extent {h}x{w} exceeds reconstruction {rows}x{cols}")));
    }
    Image::from_fn(h, w, c.source_id.clone(), |y, x| current[y * cols + x])
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdMode {
    #[default]
    Soft,
    Hard,
}

impl std::str::FromStr for ThresholdMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "soft" => Ok(ThresholdMode::Soft),
            "hard" => Ok(ThresholdMode::Hard),
            other => Err(Error::config(format!("unknown threshold mode `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Threshold {
    /// `sigma * sqrt(2 ln N)` with `sigma = median(|finest diagonal|) / 0.6745`.
    #[default]
    Universal,
    Value(f64),
}

impl std::str::FromStr for Threshold {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "universal" {
            return Ok(Threshold::Universal);
        }
        s.parse::<f64>()
            .map(Threshold::Value)
            .map_err(|_| Error::config(format!("threshold must be a number or `universal`, got `{s}`")))
    }
}

pub fn soft(x: f64, t: f64) -> f64 {
    x.signum() * (x.abs() - t).max(0.0)
}

pub fn hard(x: f64, t: f64) -> f64 {
    if x.abs() > t {
        x
    } else {
        0.0
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Noise level estimated from the finest diagonal band.
pub fn noise_sigma(c: &WaveletCoeffs) -> f64 {
    let finest = &c.details[0].diagonal;
    median(finest.data().iter().map(|v| v.abs()).collect()) / MAD_SCALE
}

pub fn universal_threshold(c: &WaveletCoeffs) -> f64 {
    noise_sigma(c) * (2.0 * (c.len() as f64).ln()).sqrt()
}

/// Shrinks every detail band; the approximation is untouched. Also returns
/// the threshold applied.
pub fn threshold_coeffs(c: &WaveletCoeffs, mode: ThresholdMode, t: Threshold) -> Result<(WaveletCoeffs, f64)> {
    let t = match t {
        Threshold::Universal => universal_threshold(c),
        Threshold::Value(v) if v >= 0.0 && v.is_finite() => v,
        Threshold::Value(v) => return Err(Error::config(format!("threshold must be nonnegative, got {v}"))),
    };
    let shrink = move |x: f64| match mode {
        ThresholdMode::Soft => soft(x, t),
        ThresholdMode::Hard => hard(x, t),
    };
    let details = c.details.iter().map(|d| d.map(shrink)).collect();
    Ok((WaveletCoeffs { details, ..c.clone() }, t))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DenoiseSpec {
    pub filter: Filter,
    pub levels: usize,
    pub mode: ThresholdMode,
    pub threshold: Threshold,
}

impl Default for DenoiseSpec {
    fn default() -> Self {
        DenoiseSpec { filter: Filter::Haar, levels: 3, mode: ThresholdMode::Soft, threshold: Threshold::Universal }
    }
}

/// Decompose, shrink details, reconstruct, clamp to `[0, 1]`. Returns the
/// threshold used alongside the image.
pub fn denoise_qwt(img: &Image, spec: &DenoiseSpec) -> Result<(Image, f64)> {
    let c = dwt2(img, spec.filter, spec.levels)?;
    let (shrunk, t) = threshold_coeffs(&c, spec.mode, spec.threshold)?;
    let out = idwt2(&shrunk)?;
    Ok((out.map(|v| v.clamp(0.0, 1.0)), t))
}
