//! Channel attention from pooled global descriptors.
//!
//! The average- and max-pooled channel descriptors each pass through a shared
//! reduce/expand MLP; the two results are summed, squashed by a sigmoid, and
//! the resulting per-channel gate rescales the input feature map.

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::nn::{batched, unbatched, Activation, Dense, Params, Session};
use crate::rng::SeededRng;

pub const DEFAULT_RATIO: usize = 8;

/// Per-channel spatial mean of `[C,H,W]` (giving `[C]`) or `[B,C,H,W]` (giving `[B,C]`).
pub fn global_avg_pool(x: Var<'_>) -> Result<Var<'_>> {
    let (xb, was3) = batched(x)?;
    let y = xb.global_avg_pool()?;
    if was3 {
        y.reshape(&[y.dims()[1]])
    } else {
        Ok(y)
    }
}

/// Per-channel spatial maximum; shapes as [`global_avg_pool`].
pub fn global_max_pool(x: Var<'_>) -> Result<Var<'_>> {
    let (xb, was3) = batched(x)?;
    let y = xb.global_max_pool()?;
    if was3 {
        y.reshape(&[y.dims()[1]])
    } else {
        Ok(y)
    }
}

#[derive(Clone, Debug)]
pub struct ChannelAttention {
    pub reduce: Dense,
    pub expand: Dense,
    pub channels: usize,
    pub ratio: usize,
}

/// Largest double below 1; saturated sigmoids round to exactly 1.0 otherwise.
const GATE_MAX: f64 = 1.0 - f64::EPSILON / 2.0;

impl ChannelAttention {
    pub fn new(params: &mut Params, rng: &mut SeededRng, name: &str, channels: usize, ratio: usize) -> Result<Self> {
        Self::with_hidden_activation(params, rng, name, channels, ratio, Activation::Relu)
    }

    pub fn with_hidden_activation(
        params: &mut Params,
        rng: &mut SeededRng,
        name: &str,
        channels: usize,
        ratio: usize,
        hidden: Activation,
    ) -> Result<Self> {
        if ratio == 0 || !channels.is_multiple_of(ratio) {
            return Err(Error::config(format!("attention ratio {ratio} does not divide {channels} channels")));
        }
        let hidden_units = channels / ratio;
        let reduce = Dense::new(params, rng, &format!("{name}.reduce"), channels, hidden_units, hidden)?;
        let expand = Dense::new(params, rng, &format!("{name}.expand"), hidden_units, channels, Activation::None)?;
        Ok(ChannelAttention { reduce, expand, channels, ratio })
    }

    fn mlp<'t>(&self, s: &Session<'_, 't>, d: Var<'t>) -> Result<Var<'t>> {
        self.expand.forward(s, self.reduce.forward(s, d)?)
    }

    /// Gate `sigmoid(MLP(max) + MLP(avg))`, shape `[B, C]`, kept strictly inside (0, 1).
    pub fn gate<'t>(&self, s: &Session<'_, 't>, x: Var<'t>) -> Result<Var<'t>> {
        let (xb, _) = batched(x)?;
        if xb.dims()[1] != self.channels {
            return Err(Error::shape(format!("attention over {} channels, got {:?}", self.channels, xb.dims())));
        }
        let pooled_max = self.mlp(s, xb.global_max_pool()?)?;
        let pooled_avg = self.mlp(s, xb.global_avg_pool()?)?;
        pooled_max.add(pooled_avg)?.sigmoid()?.clamp(f64::MIN_POSITIVE, GATE_MAX)
    }

    pub fn forward<'t>(&self, s: &Session<'_, 't>, x: Var<'t>) -> Result<Var<'t>> {
        let (xb, was3) = batched(x)?;
        let g = self.gate(s, xb)?;
        unbatched(xb.mul_channels(g)?, was3)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{grad_check_many, Tape};
    use crate::nn::Mode;
    use crate::rng;
    use crate::tensor::Tensor;
    use proptest::prelude::*;

    fn random(dims: &[usize], seed: u64, scale: f64) -> Tensor {
        let mut r = rng::seeded(seed);
        Tensor::from_fn(dims, |_| scale * rng::uniform(&mut r, -1.0, 1.0)).unwrap()
    }

    #[test]
    fn pooled_descriptors() {
        let tape = Tape::new();
        let c = tape.constant(Tensor::full(&[1, 3, 3], 0.25).unwrap());
        assert_eq!(global_avg_pool(c).unwrap().value().data(), &[0.25]);
        assert_eq!(global_max_pool(c).unwrap().value().data(), &[0.25]);
        let x = tape.constant(Tensor::new(&[1, 2, 2], vec![0.0, 2.0, 4.0, 6.0]).unwrap());
        assert_eq!(global_avg_pool(x).unwrap().value().data(), &[3.0]);
        let y = tape.constant(Tensor::new(&[1, 2, 2], vec![1.0, 5.0, 3.0, 2.0]).unwrap());
        assert_eq!(global_max_pool(y).unwrap().value().data(), &[5.0]);
    }

    #[test]
    fn pooling_ignores_spatial_order_and_max_dominates() {
        let x = random(&[3, 4, 4], 1, 1.0);
        let perm = rng::permutation(&mut rng::seeded(2), 16);
        let mut xp = x.clone();
        for c in 0..3 {
            for (dst, &src) in perm.iter().enumerate() {
                xp.data_mut()[c * 16 + dst] = x.data()[c * 16 + src];
            }
        }
        let tape = Tape::new();
        let (a, b) = (tape.constant(x), tape.constant(xp));
        let (avg, avgp) = (global_avg_pool(a).unwrap().value(), global_avg_pool(b).unwrap().value());
        let (mx, mxp) = (global_max_pool(a).unwrap().value(), global_max_pool(b).unwrap().value());
        assert!(avg.max_abs_diff(&avgp).unwrap() < 1e-15);
        assert_eq!(mx.data(), mxp.data());
        assert!(mx.data().iter().zip(avg.data()).all(|(m, a)| m >= a));
    }

    fn attention(channels: usize, ratio: usize, seed: u64) -> (Params, ChannelAttention) {
        let mut params = Params::new();
        let a = ChannelAttention::new(&mut params, &mut rng::seeded(seed), "att", channels, ratio).unwrap();
        (params, a)
    }

    fn run(params: &Params, a: &ChannelAttention, x: &Tensor) -> (Tensor, Tensor) {
        let tape = Tape::new();
        let s = Session::new(&tape, params, Mode::Infer);
        let xv = tape.constant(x.clone());
        let g = a.gate(&s, xv).unwrap().value();
        let y = a.forward(&s, xv).unwrap().value();
        ((*g).clone(), (*y).clone())
    }

    #[test]
    fn zero_mlp_halves_input() {
        let (mut params, a) = attention(4, 2, 0);
        for id in [a.reduce.weight, a.expand.weight] {
            let z = params.get(id).map(|_| 0.0);
            params.set(id, z).unwrap();
        }
        let x = random(&[4, 3, 3], 3, 2.0);
        let (g, y) = run(&params, &a, &x);
        assert!(g.data().iter().all(|&v| v == 0.5));
        for (yv, xv) in y.data().iter().zip(x.data()) {
            assert_eq!(*yv, 0.5 * xv);
        }
    }

    #[test]
    fn saturated_gates_pass_or_suppress() {
        let (mut params, a) = attention(2, 1, 0);
        for id in [a.reduce.weight, a.expand.weight] {
            let z = params.get(id).map(|_| 0.0);
            params.set(id, z).unwrap();
        }
        params.set(a.expand.bias, Tensor::new(&[2], vec![20.0, -20.0]).unwrap()).unwrap();
        let x = random(&[2, 3, 3], 4, 1.0);
        let (_, y) = run(&params, &a, &x);
        for i in 0..9 {
            assert!((y.data()[i] - x.data()[i]).abs() < 1e-8);
            assert!(y.data()[9 + i].abs() < 1e-8);
        }
    }

    #[test]
    fn ratio_must_divide_channels() {
        let mut params = Params::new();
        let r = ChannelAttention::new(&mut params, &mut rng::seeded(0), "att", 6, 4);
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn gradients_through_both_pooled_paths() {
        for seed in 0..3 {
            let (params, a) = attention(4, 2, seed);
            let x = random(&[4, 6, 6], seed + 9, 1.0);
            let mut inputs = params.tensors();
            inputs.push(x);
            let n = params.len();
            let rep = grad_check_many(
                |tape, v| {
                    let s = Session::with_vars(tape, &params, v[..n].to_vec(), Mode::Infer)?;
                    let y = a.forward(&s, v[n])?;
                    y.mul(y)?.sum()
                },
                &inputs,
                None,
                1e-5,
                1e-5,
            )
            .unwrap();
            assert!(rep.passed, "{rep:?}");
        }
    }

    #[test]
    fn linear_gate_argmax_is_scale_invariant() {
        let mut params = Params::new();
        let a =
            ChannelAttention::with_hidden_activation(&mut params, &mut rng::seeded(5), "att", 8, 2, Activation::None)
                .unwrap();
        let x = random(&[8, 5, 5], 6, 1.0);
        let argmax = |g: &Tensor| {
            g.data().iter().enumerate().fold((0, f64::NEG_INFINITY), |b, (i, &v)| if v > b.1 { (i, v) } else { b }).0
        };
        let (g1, _) = run(&params, &a, &x);
        for scale in [0.1, 0.5, 3.0, 7.0] {
            let (g2, _) = run(&params, &a, &x.map(|v| v * scale));
            assert_eq!(argmax(&g1), argmax(&g2));
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(50))]
        #[test]
        fn gate_is_open_unit_interval_and_contracts(seed in any::<u64>(), scale in 0.1f64..10.0) {
            let (params, a) = attention(8, 4, seed);
            let x = random(&[8, 4, 4], seed ^ 0xabc, scale);
            let (g, y) = run(&params, &a, &x);
            prop_assert!(g.data().iter().all(|&v| v > 0.0 && v < 1.0));
            prop_assert!(y.data().iter().zip(x.data()).all(|(yv, xv)| yv.abs() <= xv.abs()));
        }

        #[test]
        fn spatial_permutation_commutes(seed in any::<u64>()) {
            let (params, a) = attention(4, 2, seed);
            let x = random(&[4, 3, 3], seed.wrapping_add(1), 1.0);
            let perm = rng::permutation(&mut rng::seeded(seed), 9);
            let permute = |t: &Tensor| {
                let mut out = t.clone();
                for c in 0..4 {
                    for (dst, &src) in perm.iter().enumerate() {
                        out.data_mut()[c * 9 + dst] = t.data()[c * 9 + src];
                    }
                }
                out
            };
            let (_, y) = run(&params, &a, &x);
            let (_, yp) = run(&params, &a, &permute(&x));
            prop_assert!(permute(&y).max_abs_diff(&yp).unwrap() < 1e-12);
        }
    }
}
