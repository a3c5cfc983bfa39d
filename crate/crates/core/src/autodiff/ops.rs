//! Elementwise, reduction, and matrix operations on [`Var`].

use std::rc::Rc;

use super::tape::Var;
use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

fn check_same(op: &str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!("{op}: {} vs {}", a.shape(), b.shape())));
    }
    Ok(())
}

fn zip_with(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_raw(a.shape().clone(), data)
}

fn shape_of(dims: &[usize]) -> Shape {
    Shape::new(dims).expect("kernel shapes are nonzero")
}

/// `c[m,n] = a[m,k] * b[k,n]`, accumulating over k in increasing order.
pub(crate) fn matmul_kernel(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in row.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
    c
}

/// `c[m,n] = a[m,k] * b[n,k]^T`.
pub(crate) fn matmul_bt_kernel(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            c[i * n + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    c
}

/// `c[k,n] = a[m,k]^T * b[m,n]`.
pub(crate) fn matmul_at_kernel(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; k * n];
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let crow = &mut c[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
    c
}

fn transpose_kernel(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

/// Row-wise softmax over the last axis of `x`, shifted by the row max.
pub fn softmax_last_axis(x: &Tensor) -> Tensor {
    let n = *x.dims().last().unwrap();
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(n) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    Tensor::from_raw(x.shape().clone(), out)
}

#[allow(clippy::should_implement_trait)]
impl<'t> Var<'t> {
    fn unary(self, op: &str, value: Tensor, backward: impl Fn(&Tensor) -> Tensor + 'static) -> Result<Var<'t>> {
        self.tape.record(op, &[self], value, move |g| vec![Some(backward(g))])
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        check_same("add", &a, &b)?;
        let out = zip_with(&a, &b, |x, y| x + y);
        self.tape.record("add", &[self, other], out, |g| vec![Some(g.clone()), Some(g.clone())])
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        check_same("sub", &a, &b)?;
        let out = zip_with(&a, &b, |x, y| x - y);
        self.tape.record("sub", &[self, other], out, |g| vec![Some(g.clone()), Some(g.map(|v| -v))])
    }

    /// Elementwise product.
    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        check_same("mul", &a, &b)?;
        let out = zip_with(&a, &b, |x, y| x * y);
        self.tape.record("mul", &[self, other], out, move |g| {
            vec![Some(zip_with(g, &b, |gv, bv| gv * bv)), Some(zip_with(g, &a, |gv, av| gv * av))]
        })
    }

    pub fn scale(self, c: f64) -> Result<Var<'t>> {
        let out = self.value().map(|v| v * c);
        self.unary("scale", out, move |g| g.map(|v| v * c))
    }

    pub fn neg(self) -> Result<Var<'t>> {
        self.scale(-1.0)
    }

    pub fn add_scalar(self, c: f64) -> Result<Var<'t>> {
        let out = self.value().map(|v| v + c);
        self.unary("add_scalar", out, |g| g.clone())
    }

    /// `self * s` where `s` is a one-element variable.
    pub fn mul_scalar(self, s: Var<'t>) -> Result<Var<'t>> {
        let (x, sv) = (self.value(), s.value());
        if sv.numel() != 1 {
            return Err(Error::shape(format!("mul_scalar by tensor of shape {}", sv.shape())));
        }
        let sc = sv.data()[0];
        let out = x.map(|v| v * sc);
        self.tape.record("mul_scalar", &[self, s], out, move |g| {
            let gs: f64 = g.data().iter().zip(x.data()).map(|(a, b)| a * b).sum();
            vec![Some(g.map(|v| v * sc)), Some(Tensor::from_raw(shape_of(&[1]), vec![gs]))]
        })
    }

    pub fn relu(self) -> Result<Var<'t>> {
        let x = self.value();
        let out = x.map(|v| v.max(0.0));
        self.unary("relu", out, move |g| zip_with(g, &x, |gv, xv| if xv > 0.0 { gv } else { 0.0 }))
    }

    pub fn sigmoid(self) -> Result<Var<'t>> {
        let y = Rc::new(self.value().map(sigmoid));
        let yc = Rc::clone(&y);
        self.unary("sigmoid", (*y).clone(), move |g| zip_with(g, &yc, |gv, yv| gv * yv * (1.0 - yv)))
    }

    pub fn exp(self) -> Result<Var<'t>> {
        let y = Rc::new(self.value().map(f64::exp));
        let yc = Rc::clone(&y);
        self.unary("exp", (*y).clone(), move |g| zip_with(g, &yc, |gv, yv| gv * yv))
    }

    /// Natural logarithm; every entry must be positive.
    pub fn ln(self) -> Result<Var<'t>> {
        let x = self.value();
        if x.data().iter().any(|&v| v <= 0.0) {
            return Err(Error::domain("ln of a non-positive value"));
        }
        let out = x.map(f64::ln);
        self.unary("ln", out, move |g| zip_with(g, &x, |gv, xv| gv / xv))
    }

    /// `x^e` for a constant exponent.
    pub fn powf(self, e: f64) -> Result<Var<'t>> {
        let x = self.value();
        if e.fract() != 0.0 && x.data().iter().any(|&v| v < 0.0) {
            return Err(Error::domain("fractional power of a negative value"));
        }
        let out = x.map(|v| v.powf(e));
        self.unary("powf", out, move |g| {
            if e == 0.0 {
                return g.zeros_like();
            }
            zip_with(g, &x, |gv, xv| gv * e * xv.powf(e - 1.0))
        })
    }

    /// Clamp into `[lo, hi]`; the gradient is zero outside the interval.
    pub fn clamp(self, lo: f64, hi: f64) -> Result<Var<'t>> {
        let x = self.value();
        let out = x.map(|v| v.clamp(lo, hi));
        self.unary("clamp", out, move |g| zip_with(g, &x, |gv, xv| if xv >= lo && xv <= hi { gv } else { 0.0 }))
    }

    pub fn sum(self) -> Result<Var<'t>> {
        let x = self.value();
        let shape = x.shape().clone();
        let out = Tensor::from_raw(shape_of(&[1]), vec![x.sum()]);
        self.unary("sum", out, move |g| {
            let gv = g.data()[0];
            Tensor::from_raw(shape.clone(), vec![gv; shape.numel()])
        })
    }

    pub fn mean(self) -> Result<Var<'t>> {
        let n = self.value().numel() as f64;
        self.sum()?.scale(1.0 / n)
    }

    pub fn reshape(self, dims: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        let out = x.reshape(dims)?;
        let orig = x.dims().to_vec();
        self.unary("reshape", out, move |g| g.reshape(&orig).expect("same element count"))
    }

    /// Matrix product of `[m,k]` and `[k,n]`.
    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        let (ad, bd) = (a.dims(), b.dims());
        if ad.len() != 2 || bd.len() != 2 || ad[1] != bd[0] {
            return Err(Error::shape(format!("matmul {} x {}", a.shape(), b.shape())));
        }
        let (m, k, n) = (ad[0], ad[1], bd[1]);
        let out = Tensor::from_raw(shape_of(&[m, n]), matmul_kernel(a.data(), b.data(), m, k, n));
        self.tape.record("matmul", &[self, other], out, move |g| {
            let ga = matmul_bt_kernel(g.data(), b.data(), m, n, k);
            let gb = matmul_at_kernel(a.data(), g.data(), m, k, n);
            vec![Some(Tensor::from_raw(a.shape().clone(), ga)), Some(Tensor::from_raw(b.shape().clone(), gb))]
        })
    }

    /// Batched matrix product of `[B,m,k]` and `[B,k,n]`.
    pub fn bmm(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        let (ad, bd) = (a.dims(), b.dims());
        if ad.len() != 3 || bd.len() != 3 || ad[0] != bd[0] || ad[2] != bd[1] {
            return Err(Error::shape(format!("bmm {} x {}", a.shape(), b.shape())));
        }
        let (bs, m, k, n) = (ad[0], ad[1], ad[2], bd[2]);
        let mut out = Vec::with_capacity(bs * m * n);
        for i in 0..bs {
            out.extend(matmul_kernel(
                &a.data()[i * m * k..(i + 1) * m * k],
                &b.data()[i * k * n..(i + 1) * k * n],
                m,
                k,
                n,
            ));
        }
        let out = Tensor::from_raw(shape_of(&[bs, m, n]), out);
        self.tape.record("bmm", &[self, other], out, move |g| {
            let mut ga = Vec::with_capacity(a.numel());
            let mut gb = Vec::with_capacity(b.numel());
            for i in 0..bs {
                let gi = &g.data()[i * m * n..(i + 1) * m * n];
                ga.extend(matmul_bt_kernel(gi, &b.data()[i * k * n..(i + 1) * k * n], m, n, k));
                gb.extend(matmul_at_kernel(&a.data()[i * m * k..(i + 1) * m * k], gi, m, k, n));
            }
            vec![Some(Tensor::from_raw(a.shape().clone(), ga)), Some(Tensor::from_raw(b.shape().clone(), gb))]
        })
    }

    /// Swap the last two axes of a rank-2 or rank-3 tensor.
    pub fn transpose(self) -> Result<Var<'t>> {
        let x = self.value();
        let d = x.dims().to_vec();
        let (batch, rows, cols) = match d.len() {
            2 => (1, d[0], d[1]),
            3 => (d[0], d[1], d[2]),
            _ => return Err(Error::shape(format!("transpose of rank-{} tensor", d.len()))),
        };
        let mut out_dims = d.clone();
        let r = out_dims.len();
        out_dims.swap(r - 1, r - 2);
        let per = rows * cols;
        let mut out = Vec::with_capacity(x.numel());
        for b in 0..batch {
            out.extend(transpose_kernel(&x.data()[b * per..(b + 1) * per], rows, cols));
        }
        let out = Tensor::from_raw(shape_of(&out_dims), out);
        self.unary("transpose", out, move |g| {
            let mut back = Vec::with_capacity(per * batch);
            for b in 0..batch {
                back.extend(transpose_kernel(&g.data()[b * per..(b + 1) * per], cols, rows));
            }
            Tensor::from_raw(shape_of(&d), back)
        })
    }

    /// Softmax over the last axis (each row sums to one).
    pub fn softmax_rows(self) -> Result<Var<'t>> {
        let x = self.value();
        let y = Rc::new(softmax_last_axis(&x));
        let n = *x.dims().last().unwrap();
        let yc = Rc::clone(&y);
        self.unary("softmax_rows", (*y).clone(), move |g| {
            let mut out = vec![0.0; g.numel()];
            for ((orow, grow), yrow) in out.chunks_mut(n).zip(g.data().chunks(n)).zip(yc.data().chunks(n)) {
                let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                for ((o, &gv), &yv) in orow.iter_mut().zip(grow).zip(yrow) {
                    *o = yv * (gv - dot);
                }
            }
            Tensor::from_raw(g.shape().clone(), out)
        })
    }

    /// Add `b[C]` along axis 1 of `x[B,C,...]` (or along axis 0 of `x[C]`).
    pub fn add_bias(self, bias: Var<'t>) -> Result<Var<'t>> {
        let (x, b) = (self.value(), bias.value());
        let (outer, c, inner) = channel_layout(x.dims(), b.numel())
            .ok_or_else(|| Error::shape(format!("bias {} for input {}", b.shape(), x.shape())))?;
        let mut out = x.data().to_vec();
        for o in 0..outer {
            for ch in 0..c {
                let bv = b.data()[ch];
                let base = (o * c + ch) * inner;
                for v in &mut out[base..base + inner] {
                    *v += bv;
                }
            }
        }
        let out = Tensor::from_raw(x.shape().clone(), out);
        let bshape = b.shape().clone();
        self.tape.record("add_bias", &[self, bias], out, move |g| {
            let mut gb = vec![0.0; c];
            for o in 0..outer {
                for (ch, acc) in gb.iter_mut().enumerate() {
                    let base = (o * c + ch) * inner;
                    *acc += g.data()[base..base + inner].iter().sum::<f64>();
                }
            }
            vec![Some(g.clone()), Some(Tensor::from_raw(bshape.clone(), gb))]
        })
    }

    /// Scale each `(b, c)` slice of `x[B,C,...]` by `gate[B,C]`.
    pub fn mul_channels(self, gate: Var<'t>) -> Result<Var<'t>> {
        let (x, gt) = (self.value(), gate.value());
        let xd = x.dims();
        if xd.len() < 2 || gt.dims() != &xd[..2] {
            return Err(Error::shape(format!("gate {} for input {}", gt.shape(), x.shape())));
        }
        let inner: usize = xd[2..].iter().product();
        let mut out = x.data().to_vec();
        for (slice, &gv) in out.chunks_mut(inner).zip(gt.data()) {
            for v in slice {
                *v *= gv;
            }
        }
        let out = Tensor::from_raw(x.shape().clone(), out);
        self.tape.record("mul_channels", &[self, gate], out, move |g| {
            let mut gx = g.data().to_vec();
            let mut gg = vec![0.0; gt.numel()];
            for (i, (slice, &gv)) in gx.chunks_mut(inner).zip(gt.data()).enumerate() {
                let xs = &x.data()[i * inner..(i + 1) * inner];
                gg[i] = slice.iter().zip(xs).map(|(a, b)| a * b).sum();
                for v in slice {
                    *v *= gv;
                }
            }
            vec![Some(Tensor::from_raw(x.shape().clone(), gx)), Some(Tensor::from_raw(gt.shape().clone(), gg))]
        })
    }

    /// Pick `x[b, index[b]]` from a `[B,K]` tensor, giving `[B]`.
    pub fn gather_cols(self, index: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        let d = x.dims().to_vec();
        if d.len() != 2 || d[0] != index.len() {
            return Err(Error::shape(format!("gather {} indices from {}", index.len(), x.shape())));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= d[1]) {
            return Err(Error::domain(format!("column index {bad} out of range for {} columns", d[1])));
        }
        let index = index.to_vec();
        let out: Vec<f64> = index.iter().enumerate().map(|(b, &i)| x.data()[b * d[1] + i]).collect();
        let out = Tensor::from_raw(shape_of(&[d[0]]), out);
        self.unary("gather_cols", out, move |g| {
            let mut gx = vec![0.0; d[0] * d[1]];
            for (b, &i) in index.iter().enumerate() {
                gx[b * d[1] + i] = g.data()[b];
            }
            Tensor::from_raw(shape_of(&d), gx)
        })
    }
}

/// Concatenate along axis 1 (channels); all other extents must agree.
pub fn concat_channels<'t>(parts: &[Var<'t>]) -> Result<Var<'t>> {
    let first = parts.first().ok_or_else(|| Error::shape("concat of zero tensors"))?;
    let values: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
    let d0 = values[0].dims().to_vec();
    if d0.len() < 2 {
        return Err(Error::shape("concat needs rank >= 2"));
    }
    for v in &values[1..] {
        let d = v.dims();
        if d.len() != d0.len() || d[0] != d0[0] || d[2..] != d0[2..] {
            return Err(Error::shape(format!("concat {} with {}", values[0].shape(), v.shape())));
        }
    }
    let outer = d0[0];
    let inner: usize = d0[2..].iter().product();
    let chans: Vec<usize> = values.iter().map(|v| v.dims()[1]).collect();
    let total: usize = chans.iter().sum();
    let mut out = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for (v, &c) in values.iter().zip(&chans) {
            out.extend_from_slice(&v.data()[o * c * inner..(o + 1) * c * inner]);
        }
    }
    let mut dims = d0.clone();
    dims[1] = total;
    let out = Tensor::from_raw(shape_of(&dims), out);
    let shapes: Vec<Shape> = values.iter().map(|v| v.shape().clone()).collect();
    first.tape.record("concat_channels", parts, out, move |g| {
        let mut grads: Vec<Vec<f64>> = chans.iter().map(|&c| Vec::with_capacity(outer * c * inner)).collect();
        let mut offset = 0;
        for _ in 0..outer {
            for (gp, &c) in grads.iter_mut().zip(&chans) {
                gp.extend_from_slice(&g.data()[offset..offset + c * inner]);
                offset += c * inner;
            }
        }
        grads.into_iter().zip(&shapes).map(|(gp, s)| Some(Tensor::from_raw(s.clone(), gp))).collect()
    })
}

/// `(outer, channels, inner)` view when `channels` sits on axis 1, or on
/// axis 0 of a rank-1 tensor.
fn channel_layout(dims: &[usize], c: usize) -> Option<(usize, usize, usize)> {
    match dims.len() {
        1 if dims[0] == c => Some((1, c, 1)),
        n if n >= 2 && dims[1] == c => Some((dims[0], c, dims[2..].iter().product())),
        _ => None,
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
