//! Convolution, pooling, and normalization kernels over `[B, C, H, W]`.

use super::tape::Var;
use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

fn shape_of(dims: &[usize]) -> Shape {
    Shape::new(dims).expect("kernel shapes are nonzero")
}

fn nchw(op: &str, t: &Tensor) -> Result<[usize; 4]> {
    match *t.dims() {
        [b, c, h, w] => Ok([b, c, h, w]),
        _ => Err(Error::shape(format!("{op} expects [B, C, H, W], got {}", t.shape()))),
    }
}

/// Stride, dilation, and zero padding of a 2-D cross-correlation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: usize,
    pub dilation: usize,
    pub pad_h: usize,
    pub pad_w: usize,
}

impl ConvGeometry {
    pub fn output_extent(&self, input: usize, kernel: usize, pad: usize) -> Option<usize> {
        let span = self.dilation * (kernel - 1) + 1;
        let padded = input + 2 * pad;
        if padded < span || self.stride == 0 {
            return None;
        }
        Some((padded - span) / self.stride + 1)
    }
}

/// Output positions `o` in `0..out` for which `o * stride + offset` lands in `0..len`.
fn valid_range(offset: isize, stride: usize, len: usize, out: usize) -> (usize, usize) {
    let s = stride as isize;
    let lo = if offset >= 0 { 0 } else { (-offset + s - 1) / s };
    let room = len as isize - offset;
    let hi = if room <= 0 { 0 } else { (room + s - 1) / s };
    let hi = (hi as usize).min(out);
    let lo = (lo as usize).min(hi);
    (lo, hi)
}

struct ConvDims {
    b: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    g: ConvGeometry,
}

impl ConvDims {
    /// Visit every (input, weight, output) flat-index triple that contributes.
    /// Order: batch, out-channel, in-channel, kernel row, kernel col, output
    /// row, output col.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let ConvDims { b, cin, h, w, cout, kh, kw, ho, wo, g } = *self;
        for bi in 0..b {
            for co in 0..cout {
                let obase = (bi * cout + co) * ho * wo;
                for ci in 0..cin {
                    let ibase = (bi * cin + ci) * h * w;
                    for ki in 0..kh {
                        let yoff = (ki * g.dilation) as isize - g.pad_h as isize;
                        let (oy_lo, oy_hi) = valid_range(yoff, g.stride, h, ho);
                        for kj in 0..kw {
                            let widx = ((co * cin + ci) * kh + ki) * kw + kj;
                            let xoff = (kj * g.dilation) as isize - g.pad_w as isize;
                            let (ox_lo, ox_hi) = valid_range(xoff, g.stride, w, wo);
                            for oy in oy_lo..oy_hi {
                                let iy = (oy * g.stride) as isize + yoff;
                                let irow = ibase + iy as usize * w;
                                let orow = obase + oy * wo;
                                for ox in ox_lo..ox_hi {
                                    let ix = ((ox * g.stride) as isize + xoff) as usize;
                                    f(irow + ix, widx, orow + ox);
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

impl<'t> Var<'t> {
    /// Dilated cross-correlation of `x[B,Cin,H,W]` with `w[Cout,Cin,kh,kw]`.
    pub fn conv2d(self, weight: Var<'t>, geometry: ConvGeometry) -> Result<Var<'t>> {
        let (x, wt) = (self.value(), weight.value());
        let [b, cin, h, w] = nchw("conv2d", &x)?;
        let (cout, wcin, kh, kw) = match *wt.dims() {
            [a, b2, c, d] => (a, b2, c, d),
            _ => return Err(Error::shape(format!("conv2d weight must be 4-D, got {}", wt.shape()))),
        };
        if wcin != cin {
            return Err(Error::shape(format!("conv2d: input has {cin} channels, weight expects {wcin}")));
        }
        if geometry.dilation == 0 || geometry.stride == 0 {
            return Err(Error::config("conv2d stride and dilation must be positive"));
        }
        let ho = geometry.output_extent(h, kh, geometry.pad_h);
        let wo = geometry.output_extent(w, kw, geometry.pad_w);
        let (Some(ho), Some(wo)) = (ho, wo) else {
            return Err(Error::shape(format!(
                "conv2d: dilated kernel {kh}x{kw} (r={}) exceeds padded input {h}x{w}",
                geometry.dilation
            )));
        };
        let dims = ConvDims { b, cin, h, w, cout, kh, kw, ho, wo, g: geometry };
        let mut out = vec![0.0; b * cout * ho * wo];
        {
            let (xd, wd) = (x.data(), wt.data());
            dims.for_each_tap(|i, k, o| out[o] += wd[k] * xd[i]);
        }
        let out = Tensor::from_raw(shape_of(&[b, cout, ho, wo]), out);
        self.tape.record("conv2d", &[self, weight], out, move |g| {
            let mut gx = vec![0.0; x.numel()];
            let mut gw = vec![0.0; wt.numel()];
            let (xd, wd, gd) = (x.data(), wt.data(), g.data());
            dims.for_each_tap(|i, k, o| {
                gx[i] += wd[k] * gd[o];
                gw[k] += gd[o] * xd[i];
            });
            vec![Some(Tensor::from_raw(x.shape().clone(), gx)), Some(Tensor::from_raw(wt.shape().clone(), gw))]
        })
    }

    /// Windowed maximum; the gradient goes to the first maximal element of
    /// each window in row-major order.
    pub fn max_pool2d(self, window: usize, stride: usize) -> Result<Var<'t>> {
        let x = self.value();
        let [b, c, h, w] = nchw("max_pool2d", &x)?;
        let (ho, wo) = pool_extent(h, w, window, stride)?;
        let xd = x.data();
        let mut out = Vec::with_capacity(b * c * ho * wo);
        let mut argmax = Vec::with_capacity(b * c * ho * wo);
        for plane in 0..b * c {
            let base = plane * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = base + oy * stride * w + ox * stride;
                    for dy in 0..window {
                        for dx in 0..window {
                            let idx = base + (oy * stride + dy) * w + ox * stride + dx;
                            if xd[idx] > xd[best] {
                                best = idx;
                            }
                        }
                    }
                    out.push(xd[best]);
                    argmax.push(best);
                }
            }
        }
        let out = Tensor::from_raw(shape_of(&[b, c, ho, wo]), out);
        let in_shape = x.shape().clone();
        self.tape.record("max_pool2d", &[self], out, move |g| {
            let mut gx = vec![0.0; in_shape.numel()];
            for (&src, &gv) in argmax.iter().zip(g.data()) {
                gx[src] += gv;
            }
            vec![Some(Tensor::from_raw(in_shape.clone(), gx))]
        })
    }

    /// Windowed mean.
    pub fn avg_pool2d(self, window: usize, stride: usize) -> Result<Var<'t>> {
        let x = self.value();
        let [b, c, h, w] = nchw("avg_pool2d", &x)?;
        let (ho, wo) = pool_extent(h, w, window, stride)?;
        let norm = 1.0 / (window * window) as f64;
        let xd = x.data();
        let mut out = Vec::with_capacity(b * c * ho * wo);
        for plane in 0..b * c {
            let base = plane * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = 0.0;
                    for dy in 0..window {
                        let row = base + (oy * stride + dy) * w + ox * stride;
                        acc += xd[row..row + window].iter().sum::<f64>();
                    }
                    out.push(acc * norm);
                }
            }
        }
        let out = Tensor::from_raw(shape_of(&[b, c, ho, wo]), out);
        let in_shape = x.shape().clone();
        self.tape.record("avg_pool2d", &[self], out, move |g| {
            let mut gx = vec![0.0; in_shape.numel()];
            let gd = g.data();
            for plane in 0..b * c {
                let base = plane * h * w;
                for oy in 0..ho {
                    for ox in 0..wo {
                        let gv = gd[(plane * ho + oy) * wo + ox] * norm;
                        for dy in 0..window {
                            let row = base + (oy * stride + dy) * w + ox * stride;
                            for v in &mut gx[row..row + window] {
                                *v += gv;
                            }
                        }
                    }
                }
            }
            vec![Some(Tensor::from_raw(in_shape.clone(), gx))]
        })
    }

    /// Per-plane spatial mean, `[B,C,H,W] -> [B,C]`.
    pub fn global_avg_pool(self) -> Result<Var<'t>> {
        let x = self.value();
        let [b, c, h, w] = nchw("global_avg_pool", &x)?;
        let hw = h * w;
        let out: Vec<f64> = x.data().chunks(hw).map(|p| p.iter().sum::<f64>() / hw as f64).collect();
        let out = Tensor::from_raw(shape_of(&[b, c]), out);
        let in_shape = x.shape().clone();
        self.tape.record("global_avg_pool", &[self], out, move |g| {
            let gx: Vec<f64> = g.data().iter().flat_map(|&gv| std::iter::repeat_n(gv / hw as f64, hw)).collect();
            vec![Some(Tensor::from_raw(in_shape.clone(), gx))]
        })
    }

    /// Per-plane spatial maximum, `[B,C,H,W] -> [B,C]`; ties route to the
    /// first maximal element.
    pub fn global_max_pool(self) -> Result<Var<'t>> {
        let x = self.value();
        let [b, c, h, w] = nchw("global_max_pool", &x)?;
        let hw = h * w;
        let mut out = Vec::with_capacity(b * c);
        let mut argmax = Vec::with_capacity(b * c);
        for (p, plane) in x.data().chunks(hw).enumerate() {
            let mut best = 0;
            for (i, &v) in plane.iter().enumerate() {
                if v > plane[best] {
                    best = i;
                }
            }
            out.push(plane[best]);
            argmax.push(p * hw + best);
        }
        let out = Tensor::from_raw(shape_of(&[b, c]), out);
        let in_shape = x.shape().clone();
        self.tape.record("global_max_pool", &[self], out, move |g| {
            let mut gx = vec![0.0; in_shape.numel()];
            for (&src, &gv) in argmax.iter().zip(g.data()) {
                gx[src] += gv;
            }
            vec![Some(Tensor::from_raw(in_shape.clone(), gx))]
        })
    }

    /// Batch normalization with batch statistics over every axis except 1.
    /// Returns the output plus the per-channel batch mean and biased variance.
    pub fn batch_norm_train(self, gamma: Var<'t>, beta: Var<'t>, eps: f64) -> Result<(Var<'t>, Vec<f64>, Vec<f64>)> {
        let (x, gm, bt) = (self.value(), gamma.value(), beta.value());
        let (outer, c, inner) = bn_layout(&x, gm.numel(), bt.numel())?;
        let n = outer * inner;
        if n < 2 {
            return Err(Error::domain("batch norm in train mode needs at least 2 values per channel"));
        }
        let xd = x.data();
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for ch in 0..c {
            let mut acc = 0.0;
            for o in 0..outer {
                let base = (o * c + ch) * inner;
                acc += xd[base..base + inner].iter().sum::<f64>();
            }
            mean[ch] = acc / n as f64;
            let mut sq = 0.0;
            for o in 0..outer {
                let base = (o * c + ch) * inner;
                sq += xd[base..base + inner].iter().map(|v| (v - mean[ch]).powi(2)).sum::<f64>();
            }
            var[ch] = sq / n as f64;
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = vec![0.0; x.numel()];
        let mut out = vec![0.0; x.numel()];
        for o in 0..outer {
            for ch in 0..c {
                let base = (o * c + ch) * inner;
                for i in base..base + inner {
                    xhat[i] = (xd[i] - mean[ch]) * inv_std[ch];
                    out[i] = gm.data()[ch] * xhat[i] + bt.data()[ch];
                }
            }
        }
        let out = Tensor::from_raw(x.shape().clone(), out);
        let in_shape = x.shape().clone();
        let (gshape, bshape) = (gm.shape().clone(), bt.shape().clone());
        let y = self.tape.record("batch_norm_train", &[self, gamma, beta], out, move |g| {
            let gd = g.data();
            let mut dgamma = vec![0.0; c];
            let mut dbeta = vec![0.0; c];
            for o in 0..outer {
                for ch in 0..c {
                    let base = (o * c + ch) * inner;
                    for i in base..base + inner {
                        dbeta[ch] += gd[i];
                        dgamma[ch] += gd[i] * xhat[i];
                    }
                }
            }
            let mut dx = vec![0.0; in_shape.numel()];
            let nf = n as f64;
            for o in 0..outer {
                for ch in 0..c {
                    let scale = gm.data()[ch] * inv_std[ch] / nf;
                    let base = (o * c + ch) * inner;
                    for i in base..base + inner {
                        dx[i] = scale * (nf * gd[i] - dbeta[ch] - xhat[i] * dgamma[ch]);
                    }
                }
            }
            vec![
                Some(Tensor::from_raw(in_shape.clone(), dx)),
                Some(Tensor::from_raw(gshape.clone(), dgamma)),
                Some(Tensor::from_raw(bshape.clone(), dbeta)),
            ]
        })?;
        Ok((y, mean, var))
    }

    /// Batch normalization with fixed (running) statistics.
    pub fn batch_norm_infer(
        self,
        gamma: Var<'t>,
        beta: Var<'t>,
        mean: &[f64],
        var: &[f64],
        eps: f64,
    ) -> Result<Var<'t>> {
        let (x, gm, bt) = (self.value(), gamma.value(), beta.value());
        let (outer, c, inner) = bn_layout(&x, gm.numel(), bt.numel())?;
        if mean.len() != c || var.len() != c {
            return Err(Error::shape("running statistics length mismatch"));
        }
        let mean = mean.to_vec();
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let xd = x.data();
        let mut out = vec![0.0; x.numel()];
        for o in 0..outer {
            for ch in 0..c {
                let base = (o * c + ch) * inner;
                for i in base..base + inner {
                    out[i] = gm.data()[ch] * (xd[i] - mean[ch]) * inv_std[ch] + bt.data()[ch];
                }
            }
        }
        let out = Tensor::from_raw(x.shape().clone(), out);
        self.tape.record("batch_norm_infer", &[self, gamma, beta], out, move |g| {
            let gd = g.data();
            let xd = x.data();
            let mut dx = vec![0.0; x.numel()];
            let mut dgamma = vec![0.0; c];
            let mut dbeta = vec![0.0; c];
            for o in 0..outer {
                for ch in 0..c {
                    let base = (o * c + ch) * inner;
                    for i in base..base + inner {
                        dx[i] = gd[i] * gm.data()[ch] * inv_std[ch];
                        dgamma[ch] += gd[i] * (xd[i] - mean[ch]) * inv_std[ch];
                        dbeta[ch] += gd[i];
                    }
                }
            }
            vec![
                Some(Tensor::from_raw(x.shape().clone(), dx)),
                Some(Tensor::from_raw(gm.shape().clone(), dgamma)),
                Some(Tensor::from_raw(bt.shape().clone(), dbeta)),
            ]
        })
    }
}

fn pool_extent(h: usize, w: usize, window: usize, stride: usize) -> Result<(usize, usize)> {
    if window == 0 || stride == 0 {
        return Err(Error::config("pool window and stride must be positive"));
    }
    if h < window || w < window {
        return Err(Error::shape(format!("pool window {window} larger than input {h}x{w}")));
    }
    Ok(((h - window) / stride + 1, (w - window) / stride + 1))
}

fn bn_layout(x: &Tensor, gamma_len: usize, beta_len: usize) -> Result<(usize, usize, usize)> {
    let d = x.dims();
    if d.len() < 2 || d[1] != gamma_len || d[1] != beta_len {
        return Err(Error::shape(format!(
            "batch norm over {} with {gamma_len} scale / {beta_len} shift parameters",
            x.shape()
        )));
    }
    Ok((d[0], d[1], d[2..].iter().product()))
}
