//! Image preparation: resampling, normalization, wavelet denoising,
//! augmentation and PGM I/O.

mod augment;
mod image;
mod pgm;
mod wavelet;

pub use augment::{adjust_brightness, augment, crop, flip, rotate, rotate90, stack, zoom, AugmentSpec, Flip};
pub use image::{minmax_scale, normalize_zscore, resize_bilinear, Image, NORMALIZE_EPS};
pub use pgm::{decode_pgm, encode_pgm, read_pgm, write_pgm};
pub use wavelet::{
    denoise_qwt, dwt2, hard, idwt2, noise_sigma, soft, threshold_coeffs, universal_threshold, DenoiseSpec, DetailBands,
    Filter, Threshold, ThresholdMode, WaveletCoeffs,
};
