//! Differentiable layers: dilated convolution, the adaptive atrous pyramid,
//! batch normalization, pooling, and dense layers.
//!
//! Layers hold [`ParamId`]s into a shared [`Params`] store; a [`Session`]
//! binds the store onto a tape for one forward pass.

mod conv;
mod dense;
mod norm;
mod params;

pub use conv::{AdaptiveAtrousBlock, AtrousConv2d, Padding, PyramidMode};
pub use dense::{Activation, Dense};
pub use norm::{BatchNorm, DEFAULT_EPS as BN_EPS, DEFAULT_MOMENTUM as BN_MOMENTUM};
pub use params::{kaiming_uniform, BnUpdate, Mode, ParamEntry, ParamId, Params, Session};

use crate::autodiff::Var;
use crate::error::{Error, Result};

/// Lift `[C,H,W]` to `[1,C,H,W]`; the flag records whether that happened.
pub(crate) fn batched(x: Var<'_>) -> Result<(Var<'_>, bool)> {
    let d = x.dims();
    match d.len() {
        3 => Ok((x.reshape(&[1, d[0], d[1], d[2]])?, true)),
        4 => Ok((x, false)),
        _ => Err(Error::shape(format!("expected [C,H,W] or [B,C,H,W], got {d:?}"))),
    }
}

pub(crate) fn unbatched(y: Var<'_>, was3: bool) -> Result<Var<'_>> {
    if was3 {
        let d = y.dims();
        y.reshape(&d[1..])
    } else {
        Ok(y)
    }
}

/// Max pooling over `[C,H,W]` or `[B,C,H,W]`; output extent is
/// `floor((H - window) / stride) + 1`.
pub fn max_pool2d(x: Var<'_>, window: usize, stride: usize) -> Result<Var<'_>> {
    let (xb, was3) = batched(x)?;
    unbatched(xb.max_pool2d(window, stride)?, was3)
}

pub fn avg_pool2d(x: Var<'_>, window: usize, stride: usize) -> Result<Var<'_>> {
    let (xb, was3) = batched(x)?;
    unbatched(xb.avg_pool2d(window, stride)?, was3)
}

pub fn pool_extent(input: usize, window: usize, stride: usize) -> usize {
    (input - window) / stride + 1
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{grad_check_many, Tape};
    use crate::rng;
    use crate::tensor::Tensor;

    fn random(dims: &[usize], seed: u64) -> Tensor {
        let mut r = rng::seeded(seed);
        Tensor::from_fn(dims, |_| rng::uniform(&mut r, -1.0, 1.0)).unwrap()
    }

    fn conv_with(weight: Tensor, bias: Tensor, dilation: usize, padding: Padding) -> (Params, AtrousConv2d) {
        let mut params = Params::new();
        let d = weight.dims().to_vec();
        let conv =
            AtrousConv2d::new(&mut params, &mut rng::seeded(0), "c", d[1], d[0], d[2], dilation, padding).unwrap();
        params.set(conv.weight, weight).unwrap();
        params.set(conv.bias, bias).unwrap();
        (params, conv)
    }

    fn run_conv(params: &Params, conv: &AtrousConv2d, x: &Tensor) -> Tensor {
        let tape = Tape::new();
        let s = Session::new(&tape, params, Mode::Infer);
        let y = conv.forward(&s, tape.constant(x.clone())).unwrap();
        (*y.value()).clone()
    }

    /// Plain stride-1 dilation-1 convolution, written out per output pixel.
    fn dense_conv_oracle(x: &Tensor, w: &Tensor, b: &Tensor, pad: usize) -> Tensor {
        let (cin, h, wd) = (x.dims()[0], x.dims()[1], x.dims()[2]);
        let (cout, k) = (w.dims()[0], w.dims()[2]);
        let ho = h + 2 * pad - k + 1;
        let wo = wd + 2 * pad - k + 1;
        let mut out = vec![0.0; cout * ho * wo];
        for o in 0..cout {
            for i in 0..ho {
                for j in 0..wo {
                    let mut acc = 0.0;
                    for c in 0..cin {
                        for u in 0..k {
                            for v in 0..k {
                                let (yy, xx) = ((i + u) as isize - pad as isize, (j + v) as isize - pad as isize);
                                if yy < 0 || xx < 0 || yy >= h as isize || xx >= wd as isize {
                                    continue;
                                }
                                acc += w.get(&[o, c, u, v]).unwrap() * x.get(&[c, yy as usize, xx as usize]).unwrap();
                            }
                        }
                    }
                    out[(o * ho + i) * wo + j] = acc + b.data()[o];
                }
            }
        }
        Tensor::new(&[cout, ho, wo], out).unwrap()
    }

    fn zero_inflate(w: &Tensor, r: usize) -> Tensor {
        let d = w.dims();
        let k = d[2];
        let ke = (k - 1) * r + 1;
        let mut out = Tensor::zeros(&[d[0], d[1], ke, ke]).unwrap();
        for o in 0..d[0] {
            for c in 0..d[1] {
                for u in 0..k {
                    for v in 0..k {
                        let idx = ((o * d[1] + c) * ke + u * r) * ke + v * r;
                        out.data_mut()[idx] = w.get(&[o, c, u, v]).unwrap();
                    }
                }
            }
        }
        out
    }

    #[test]
    fn all_ones_kernel_on_constant_input() {
        let (p, c) =
            conv_with(Tensor::ones(&[1, 1, 3, 3]).unwrap(), Tensor::zeros(&[1]).unwrap(), 1, Padding::Explicit(0));
        let y = run_conv(&p, &c, &Tensor::ones(&[1, 5, 5]).unwrap());
        assert_eq!(y.dims(), &[1, 3, 3]);
        assert!(y.data().iter().all(|&v| v == 9.0));
    }

    #[test]
    fn dilation_two_center_tap_sum() {
        let (p, c) = conv_with(Tensor::ones(&[1, 1, 3, 3]).unwrap(), Tensor::zeros(&[1]).unwrap(), 2, Padding::Same);
        let x = Tensor::from_fn(&[1, 5, 5], |f| ((f / 5) + (f % 5)) as f64).unwrap();
        let y = run_conv(&p, &c, &x);
        assert_eq!(y.dims(), &[1, 5, 5]);
        assert_eq!(y.get(&[0, 2, 2]).unwrap(), 36.0);
    }

    #[test]
    fn atrous_matches_zero_inflated_oracle() {
        for r in 1..=3 {
            for seed in 0..5 {
                let x = random(&[2, 16, 16], seed);
                let w = random(&[3, 2, 3, 3], seed + 10);
                let b = random(&[3], seed + 20);
                let (p, c) = conv_with(w.clone(), b.clone(), r, Padding::Same);
                let y = run_conv(&p, &c, &x);
                let oracle = dense_conv_oracle(&x, &zero_inflate(&w, r), &b, r);
                assert!(y.max_abs_diff(&oracle).unwrap() <= 1e-12, "r={r} seed={seed}");
            }
        }
    }

    #[test]
    fn channel_mismatch_is_shape_error() {
        let (p, c) = conv_with(Tensor::ones(&[1, 2, 3, 3]).unwrap(), Tensor::zeros(&[1]).unwrap(), 1, Padding::Same);
        let tape = Tape::new();
        let s = Session::new(&tape, &p, Mode::Infer);
        let x = tape.constant(Tensor::ones(&[3, 5, 5]).unwrap());
        assert!(matches!(c.forward(&s, x), Err(Error::Shape(_))));
    }

    #[test]
    fn oversized_dilated_kernel_rejected() {
        let (p, c) =
            conv_with(Tensor::ones(&[1, 1, 3, 3]).unwrap(), Tensor::zeros(&[1]).unwrap(), 3, Padding::Explicit(0));
        let tape = Tape::new();
        let s = Session::new(&tape, &p, Mode::Infer);
        assert!(c.forward(&s, tape.constant(Tensor::ones(&[1, 6, 6]).unwrap())).is_err());
    }

    #[test]
    fn receptive_field_is_two_r_plus_one() {
        for r in 1..=3 {
            let w = random(&[1, 1, 3, 3], 7);
            let (p, c) = conv_with(w, Tensor::zeros(&[1]).unwrap(), r, Padding::Same);
            let x = random(&[1, 15, 15], 8);
            let y = run_conv(&p, &c, &x);
            let (ci, cj) = (7usize, 7usize);
            for i in 0..15usize {
                for j in 0..15usize {
                    let outside = i.abs_diff(ci) > r || j.abs_diff(cj) > r;
                    if !outside {
                        continue;
                    }
                    let mut xp = x.clone();
                    xp.data_mut()[i * 15 + j] += 10.0;
                    let yp = run_conv(&p, &c, &xp);
                    assert_eq!(yp.get(&[0, ci, cj]).unwrap(), y.get(&[0, ci, cj]).unwrap());
                }
            }
        }
    }

    fn block(seed: u64, cin: usize, cout: usize) -> (Params, AdaptiveAtrousBlock) {
        let mut params = Params::new();
        let b = AdaptiveAtrousBlock::new(
            &mut params,
            &mut rng::seeded(seed),
            "pyr",
            cin,
            cout,
            &[1, 2, 3],
            PyramidMode::Parallel,
        )
        .unwrap();
        (params, b)
    }

    fn pre_norm(params: &Params, b: &AdaptiveAtrousBlock, x: &Tensor) -> Tensor {
        let tape = Tape::new();
        let s = Session::new(&tape, params, Mode::Train);
        (*b.forward_pre_norm(&s, tape.constant(x.clone())).unwrap().value()).clone()
    }

    #[test]
    fn identical_branches_triple_output() {
        // identical weights and identical rates: the gated sum is 3x one branch
        let (mut params, b) = block(1, 1, 2);
        let w = params.get(b.branches[0].weight).clone();
        let bias = random(&[2], 3);
        for br in &b.branches {
            params.set(br.weight, w.clone()).unwrap();
            params.set(br.bias, bias.clone()).unwrap();
        }
        let same_rate = AdaptiveAtrousBlock {
            branches: b.branches.iter().map(|br| AtrousConv2d { dilation: 1, ..br.clone() }).collect(),
            ..b.clone()
        };
        let one =
            AdaptiveAtrousBlock { branches: vec![same_rate.branches[0].clone()], gates: vec![b.gates[0]], ..b.clone() };
        let x = random(&[1, 6, 6], 4);
        let tripled = pre_norm(&params, &same_rate, &x);
        let single = pre_norm(&params, &one, &x);
        assert_eq!(tripled.dims(), &[2, 6, 6]);
        for (t, o) in tripled.data().iter().zip(single.data()) {
            assert!((t - 3.0 * o).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_weights_give_zero_pre_norm() {
        let (mut params, b) = block(2, 1, 3);
        for br in &b.branches {
            params.set(br.weight, Tensor::zeros(&[3, 1, 3, 3]).unwrap()).unwrap();
        }
        let y = pre_norm(&params, &b, &random(&[1, 7, 7], 5));
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn pre_norm_is_homogeneous_without_bias() {
        let (mut params, b) = block(3, 2, 2);
        for br in &b.branches {
            params.set(br.bias, random(&[2], 0).map(|_| 0.0)).unwrap();
        }
        let x = random(&[2, 8, 8], 6);
        let fx = pre_norm(&params, &b, &x);
        let f2x = pre_norm(&params, &b, &x.map(|v| 2.5 * v));
        for (a, c) in fx.data().iter().zip(f2x.data()) {
            assert!((2.5 * a - c).abs() < 1e-12);
        }
    }

    #[test]
    fn sequential_pyramid_shapes() {
        let mut params = Params::new();
        let b = AdaptiveAtrousBlock::new(
            &mut params,
            &mut rng::seeded(1),
            "seq",
            1,
            4,
            &[1, 2, 3],
            PyramidMode::Sequential,
        )
        .unwrap();
        let tape = Tape::new();
        let s = Session::new(&tape, &params, Mode::Train);
        let y = b.forward(&s, tape.constant(random(&[2, 1, 9, 9], 2))).unwrap();
        assert_eq!(y.dims(), vec![2, 4, 9, 9]);
    }

    fn bn_run(gamma: f64, beta: f64, x: &Tensor, mode: Mode) -> (Tensor, Params, BatchNorm) {
        let mut params = Params::new();
        let c = x.dims()[1];
        let bn = BatchNorm::new(&mut params, "bn", c).unwrap();
        params.set(bn.gamma, Tensor::full(&[c], gamma).unwrap()).unwrap();
        params.set(bn.beta, Tensor::full(&[c], beta).unwrap()).unwrap();
        let tape = Tape::new();
        let s = Session::new(&tape, &params, mode);
        let y = (*bn.forward(&s, tape.constant(x.clone())).unwrap().value()).clone();
        let updates = s.take_bn_updates();
        drop(s);
        params.apply_bn_updates(updates);
        (y, params, bn)
    }

    fn channel_stats(y: &Tensor, ch: usize) -> (f64, f64) {
        let d = y.dims();
        let inner = d[2] * d[3];
        let vals: Vec<f64> =
            (0..d[0]).flat_map(|b| y.data()[(b * d[1] + ch) * inner..(b * d[1] + ch + 1) * inner].to_vec()).collect();
        let m = vals.iter().sum::<f64>() / vals.len() as f64;
        let v = vals.iter().map(|x| (x - m).powi(2)).sum::<f64>() / vals.len() as f64;
        (m, v)
    }

    #[test]
    fn batch_norm_standardizes_in_train_mode() {
        let x = random(&[3, 4, 5, 5], 9).map(|v| 3.0 * v + 1.0);
        let (y, params, bn) = bn_run(1.0, 0.0, &x, Mode::Train);
        for ch in 0..4 {
            let (m, v) = channel_stats(&y, ch);
            assert!(m.abs() < 1e-9);
            // eps = 1e-5 shrinks the variance by var/(var+eps)
            assert!((v - 1.0).abs() < 1e-4, "var {v}");
        }
        let rm = params.get(bn.running_mean);
        assert!(rm.data().iter().all(|&m| m.abs() > 0.0));
    }

    #[test]
    fn batch_norm_exact_unit_variance_with_tiny_eps() {
        let x = random(&[2, 3, 4, 4], 10);
        let mut params = Params::new();
        let bn = BatchNorm::with_options(&mut params, "bn", 3, 0.1, 1e-300).unwrap();
        let tape = Tape::new();
        let s = Session::new(&tape, &params, Mode::Train);
        let y = bn.forward(&s, tape.constant(x)).unwrap().value();
        for ch in 0..3 {
            let (m, v) = channel_stats(&y, ch);
            assert!(m.abs() < 1e-9 && (v - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn batch_norm_affine_and_infer_identity() {
        let x = random(&[2, 2, 3, 3], 11);
        let (y1, _, _) = bn_run(1.0, 0.0, &x, Mode::Train);
        let (y2, _, _) = bn_run(2.0, 5.0, &x, Mode::Train);
        for (a, b) in y1.data().iter().zip(y2.data()) {
            assert!((2.0 * a + 5.0 - b).abs() < 1e-12);
        }
        let (yi, _, _) = bn_run(1.0, 0.0, &x, Mode::Infer);
        let scale = 1.0 / (1.0 + BN_EPS).sqrt();
        for (a, b) in yi.data().iter().zip(x.data()) {
            assert!((a - b * scale).abs() < 1e-15);
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn max_pool_examples() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::new(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        assert_eq!(max_pool2d(x, 2, 2).unwrap().value().data(), &[4.0]);
        let c = tape.constant(Tensor::full(&[2, 6, 6], 0.7).unwrap());
        let y = max_pool2d(c, 2, 2).unwrap().value();
        assert!(y.data().iter().all(|&v| v == 0.7));
        assert_eq!(pool_extent(227, 2, 2), 113);
        let big = tape.constant(Tensor::zeros(&[1, 227, 227]).unwrap());
        assert_eq!(max_pool2d(big, 2, 2).unwrap().dims(), vec![1, 113, 113]);
    }

    #[test]
    fn max_pool_ties_route_to_first() {
        let tape = Tape::new();
        let x = tape.param(Tensor::new(&[1, 1, 2, 2], vec![5.0, 5.0, 1.0, 5.0]).unwrap());
        let loss = x.max_pool2d(2, 2).unwrap().sum().unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn max_pool_dominates_mean() {
        for seed in 0..10 {
            let tape = Tape::new();
            let x = tape.constant(random(&[3, 9, 9], seed));
            let mx = max_pool2d(x, 3, 2).unwrap().value();
            let av = avg_pool2d(x, 3, 2).unwrap().value();
            assert!(mx.data().iter().zip(av.data()).all(|(m, a)| m >= a));
        }
    }

    #[test]
    fn dense_examples() {
        let mut params = Params::new();
        let d = Dense::new(&mut params, &mut rng::seeded(0), "fc", 2, 2, Activation::None).unwrap();
        params.set(d.weight, Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap()).unwrap();
        let tape = Tape::new();
        let s = Session::new(&tape, &params, Mode::Infer);
        let y = d.forward(&s, tape.constant(Tensor::new(&[2], vec![0.3, -4.0]).unwrap())).unwrap();
        assert_eq!(y.value().data(), &[0.3, -4.0]);

        let mut params = Params::new();
        let d = Dense::new(&mut params, &mut rng::seeded(0), "fc", 2, 1, Activation::Relu).unwrap();
        params.set(d.weight, Tensor::new(&[1, 2], vec![1.0, 1.0]).unwrap()).unwrap();
        params.set(d.bias, Tensor::new(&[1], vec![0.5]).unwrap()).unwrap();
        let tape = Tape::new();
        let s = Session::new(&tape, &params, Mode::Infer);
        let y = d.forward(&s, tape.constant(Tensor::new(&[2], vec![1.0, 2.0]).unwrap())).unwrap();
        assert_eq!(y.value().data(), &[3.5]);

        let tape = Tape::new();
        assert_eq!(tape.constant(Tensor::scalar(0.0).unwrap()).sigmoid().unwrap().item().unwrap(), 0.5);
    }

    #[test]
    fn dense_length_mismatch() {
        let mut params = Params::new();
        let d = Dense::new(&mut params, &mut rng::seeded(0), "fc", 3, 2, Activation::None).unwrap();
        let tape = Tape::new();
        let s = Session::new(&tape, &params, Mode::Infer);
        assert!(matches!(d.forward(&s, tape.constant(Tensor::zeros(&[4]).unwrap())), Err(Error::Shape(_))));
    }

    /// Finite-difference check over every trainable entry of `params` plus the input.
    fn check_layer<F>(params: &Params, x: &Tensor, mode: Mode, tol: f64, f: F)
    where
        F: for<'a, 't> Fn(&Session<'a, 't>, Var<'t>) -> Result<Var<'t>>,
    {
        let mut inputs = params.tensors();
        inputs.push(x.clone());
        let n = params.len();
        let coords: Vec<(usize, usize)> = inputs
            .iter()
            .enumerate()
            .filter(|(i, _)| *i == n || params.entries()[*i].trainable)
            .flat_map(|(i, t)| (0..t.numel()).map(move |j| (i, j)))
            .collect();
        let rep = grad_check_many(
            |tape, vars| {
                let s = Session::with_vars(tape, params, vars[..n].to_vec(), mode)?;
                // weight the output so the loss is not invariant to BN shifts
                let y = f(&s, vars[n])?;
                let w = Tensor::from_fn(&y.dims(), |i| ((i * 7919) % 13) as f64 / 13.0 - 0.4)?;
                y.mul(tape.constant(w))?.sum()
            },
            &inputs,
            Some(&coords),
            1e-5,
            tol,
        )
        .unwrap();
        assert!(rep.passed, "{rep:?}");
    }

    #[test]
    fn atrous_conv_gradients() {
        for r in 1..=3 {
            for seed in 0..3 {
                let mut params = Params::new();
                let c = AtrousConv2d::new(&mut params, &mut rng::seeded(seed), "c", 2, 3, 3, r, Padding::Same).unwrap();
                let x = random(&[2, 2, 7, 7], seed + 40);
                check_layer(&params, &x, Mode::Infer, 1e-5, |s, x| c.forward(s, x));
            }
        }
    }

    #[test]
    fn adaptive_block_gradients() {
        for seed in 0..3 {
            let (params, b) = block(seed, 1, 2);
            let x = random(&[1, 1, 8, 8], seed + 50);
            check_layer(&params, &x, Mode::Train, 1e-5, |s, x| b.forward(s, x));
        }
    }

    #[test]
    fn batch_norm_gradients_both_modes() {
        for (seed, mode) in [(0, Mode::Train), (1, Mode::Infer), (2, Mode::Train)] {
            let mut params = Params::new();
            let bn = BatchNorm::new(&mut params, "bn", 3).unwrap();
            params.set(bn.gamma, random(&[3], seed + 60).map(|v| v + 1.5)).unwrap();
            params.set(bn.beta, random(&[3], seed + 61)).unwrap();
            let x = random(&[2, 3, 3, 3], seed + 62);
            check_layer(&params, &x, mode, 1e-5, |s, x| bn.forward(s, x));
        }
    }

    #[test]
    fn pooling_and_dense_gradients() {
        for seed in 0..3 {
            let mut params = Params::new();
            let d = Dense::new(&mut params, &mut rng::seeded(seed), "fc", 18, 4, Activation::Sigmoid).unwrap();
            let x = random(&[2, 2, 6, 6], seed + 70);
            check_layer(&params, &x, Mode::Infer, 1e-5, |s, x| {
                let a = max_pool2d(x, 2, 2)?;
                let b = avg_pool2d(x, 2, 2)?;
                let h = a.add(b)?.reshape(&[2, 18])?;
                d.forward(s, h)
            });
        }
    }
}
