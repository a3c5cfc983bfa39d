//! Spatial tokenization and single-head scaled dot-product self-attention.

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::nn::{batched, ParamId, Params, Session};
use crate::rng::{self, SeededRng};
use crate::tensor::Tensor;

pub const DEFAULT_TOKEN_BUDGET: usize = 256;

/// Tokens `[B, T, D]` plus the grid they were read from.
#[derive(Clone, Copy, Debug)]
pub struct TokenSequence<'t> {
    pub tokens: Var<'t>,
    /// `(H', W')` of the token grid; `T = H' * W'`.
    pub grid: (usize, usize),
    /// `(C, H, W)` of the feature map before pooling.
    pub origin: (usize, usize, usize),
    pub pool_factor: usize,
    /// Whether the source map carried a batch axis.
    pub batched: bool,
}

impl TokenSequence<'_> {
    pub fn len(&self) -> usize {
        self.grid.0 * self.grid.1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.origin.0
    }
}

/// Smallest integer pooling factor `f` with `floor(H/f) * floor(W/f) <= budget`.
pub fn pool_factor(h: usize, w: usize, budget: usize) -> Result<usize> {
    if budget == 0 {
        return Err(Error::config("token budget must be at least 1"));
    }
    (1..=h.min(w))
        .find(|&f| (h / f) * (w / f) <= budget)
        .ok_or_else(|| Error::config(format!("a {h}x{w} grid cannot be pooled to {budget} tokens")))
}

/// Every spatial position of `x` (`[C,H,W]` or `[B,C,H,W]`) becomes a
/// `C`-dimensional token, after average pooling when the grid exceeds the budget.
pub fn tokens_from_featuremap(x: Var<'_>, budget: usize) -> Result<TokenSequence<'_>> {
    let (xb, was3) = batched(x)?;
    let d = xb.dims();
    let (b, c, h, w) = (d[0], d[1], d[2], d[3]);
    let f = pool_factor(h, w, budget)?;
    let pooled = if f > 1 { xb.avg_pool2d(f, f)? } else { xb };
    let (gh, gw) = (h / f, w / f);
    let tokens = pooled.reshape(&[b, c, gh * gw])?.transpose()?;
    Ok(TokenSequence { tokens, grid: (gh, gw), origin: (c, h, w), pool_factor: f, batched: !was3 })
}

/// Inverse reshape of the token layout: `[B, C, H', W']` (or `[C, H', W']`).
pub fn featuremap_from_tokens<'t>(seq: &TokenSequence<'t>) -> Result<Var<'t>> {
    let d = seq.tokens.dims();
    let (gh, gw) = seq.grid;
    if d.len() != 3 || d[1] != gh * gw || d[2] != seq.origin.0 {
        return Err(Error::shape(format!("tokens {d:?} do not match recorded grid {gh}x{gw}")));
    }
    let map = seq.tokens.transpose()?.reshape(&[d[0], d[2], gh, gw])?;
    if seq.batched {
        Ok(map)
    } else {
        map.reshape(&[d[2], gh, gw])
    }
}

/// `softmax(Q K^T / sqrt(d_k)) V` over `[B, T, d]` operands.
/// Returns the attended values and the attention matrix `[B, T, T]`.
pub fn scaled_dot_product_attention<'t>(q: Var<'t>, k: Var<'t>, v: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
    let dk = *q.dims().last().ok_or_else(|| Error::shape("empty query"))?;
    if k.dims() != q.dims() {
        return Err(Error::shape(format!("query {:?} vs key {:?}", q.dims(), k.dims())));
    }
    let scores = q.bmm(k.transpose()?)?.scale(1.0 / (dk as f64).sqrt())?;
    let attn = scores.softmax_rows()?;
    Ok((attn.bmm(v)?, attn))
}

#[derive(Clone, Debug)]
pub struct SelfAttention {
    pub w_query: ParamId,
    pub w_key: ParamId,
    pub w_value: ParamId,
    /// `[d_k, D]` projection back to the token width.
    pub w_out: Option<ParamId>,
    pub residual: bool,
    pub dim: usize,
    pub key_dim: usize,
}

fn xavier(rng: &mut SeededRng, rows: usize, cols: usize) -> Result<Tensor> {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    Tensor::from_fn(&[rows, cols], |_| rng::uniform(rng, -bound, bound))
}

impl SelfAttention {
    pub fn new(
        params: &mut Params,
        rng: &mut SeededRng,
        name: &str,
        dim: usize,
        key_dim: usize,
        output_projection: bool,
        residual: bool,
    ) -> Result<Self> {
        if dim == 0 || key_dim == 0 {
            return Err(Error::config("attention widths must be positive"));
        }
        if !output_projection && residual && key_dim != dim {
            return Err(Error::config("a residual without output projection needs d_k == D"));
        }
        let w_query = params.add(format!("{name}.w_query"), xavier(rng, dim, key_dim)?, true);
        let w_key = params.add(format!("{name}.w_key"), xavier(rng, dim, key_dim)?, true);
        let w_value = params.add(format!("{name}.w_value"), xavier(rng, dim, key_dim)?, true);
        let w_out = if output_projection {
            Some(params.add(format!("{name}.w_out"), xavier(rng, key_dim, dim)?, true))
        } else {
            None
        };
        Ok(SelfAttention { w_query, w_key, w_value, w_out, residual, dim, key_dim })
    }

    fn project<'t>(x: Var<'t>, w: Var<'t>) -> Result<Var<'t>> {
        let d = x.dims();
        let cols = w.dims()[1];
        x.reshape(&[d[0] * d[1], d[2]])?.matmul(w)?.reshape(&[d[0], d[1], cols])
    }

    /// Returns the updated sequence and the attention matrix `[B, T, T]`.
    pub fn forward<'t>(&self, s: &Session<'_, 't>, seq: &TokenSequence<'t>) -> Result<(TokenSequence<'t>, Var<'t>)> {
        let x = seq.tokens;
        if x.dims().len() != 3 || x.dims()[2] != self.dim {
            return Err(Error::shape(format!("attention width {} for tokens {:?}", self.dim, x.dims())));
        }
        let q = Self::project(x, s.var(self.w_query))?;
        let k = Self::project(x, s.var(self.w_key))?;
        let v = Self::project(x, s.var(self.w_value))?;
        let (mut out, attn) = scaled_dot_product_attention(q, k, v)?;
        if let Some(w) = self.w_out {
            out = Self::project(out, s.var(w))?;
        }
        if self.residual {
            out = out.add(x)?;
        }
        Ok((TokenSequence { tokens: out, ..*seq }, attn))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{grad_check_many, Tape};
    use crate::nn::Mode;
    use proptest::prelude::*;

    fn random(dims: &[usize], seed: u64) -> Tensor {
        let mut r = rng::seeded(seed);
        Tensor::from_fn(dims, |_| rng::uniform(&mut r, -1.0, 1.0)).unwrap()
    }

    #[test]
    fn tokenization_budget() {
        let tape = Tape::new();
        let x = tape.constant(random(&[192, 4, 4], 0));
        let seq = tokens_from_featuremap(x, 16).unwrap();
        assert_eq!(seq.tokens.dims(), vec![1, 16, 192]);
        assert_eq!(seq.pool_factor, 1);
        let x = tape.constant(random(&[192, 8, 8], 1));
        let seq = tokens_from_featuremap(x, 16).unwrap();
        assert_eq!(seq.pool_factor, 2);
        assert_eq!(seq.tokens.dims(), vec![1, 16, 192]);
        assert_eq!(pool_factor(113, 113, 256).unwrap(), 7);
        assert!(pool_factor(4, 4, 0).is_err());
    }

    #[test]
    fn token_round_trip_is_exact() {
        let tape = Tape::new();
        let t = random(&[2, 5, 3, 4], 2);
        let seq = tokens_from_featuremap(tape.constant(t.clone()), 100).unwrap();
        let back = featuremap_from_tokens(&seq).unwrap().value();
        assert_eq!(*back, t);
        let t3 = random(&[5, 3, 4], 3);
        let seq = tokens_from_featuremap(tape.constant(t3.clone()), 100).unwrap();
        let back = featuremap_from_tokens(&seq).unwrap();
        assert_eq!(back.dims(), vec![5, 3, 4]);
        assert_eq!(*back.value(), t3);
        let zeros = tokens_from_featuremap(tape.constant(Tensor::zeros(&[3, 2, 2]).unwrap()), 4).unwrap();
        assert!(featuremap_from_tokens(&zeros).unwrap().value().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn grid_mismatch_is_shape_error() {
        let tape = Tape::new();
        let seq = tokens_from_featuremap(tape.constant(random(&[2, 2, 2], 4)), 4).unwrap();
        let bad = TokenSequence { grid: (3, 3), ..seq };
        assert!(matches!(featuremap_from_tokens(&bad), Err(Error::Shape(_))));
    }

    #[test]
    fn hand_evaluated_attention() {
        let tape = Tape::new();
        let q = tape.constant(Tensor::new(&[1, 2, 1], vec![1.0, 0.0]).unwrap());
        let v = tape.constant(Tensor::new(&[1, 2, 1], vec![10.0, 20.0]).unwrap());
        let (out, attn) = scaled_dot_product_attention(q, q, v).unwrap();
        let e = std::f64::consts::E;
        let a = attn.value();
        assert!((a.data()[0] - e / (e + 1.0)).abs() < 1e-15);
        assert!((a.data()[1] - 1.0 / (e + 1.0)).abs() < 1e-15);
        assert_eq!(&a.data()[2..], &[0.5, 0.5]);
        let o = out.value();
        assert!((o.data()[0] - 12.689414213699951).abs() < 1e-12);
        assert!((o.data()[0] - 12.689).abs() < 1e-3);
        assert_eq!(o.data()[1], 15.0);
    }

    fn layer(dim: usize, dk: usize, seed: u64) -> (Params, SelfAttention) {
        let mut params = Params::new();
        let l = SelfAttention::new(&mut params, &mut rng::seeded(seed), "sa", dim, dk, true, true).unwrap();
        (params, l)
    }

    fn run(params: &Params, l: &SelfAttention, tokens: &Tensor) -> (Tensor, Tensor) {
        let tape = Tape::new();
        let s = Session::new(&tape, params, Mode::Infer);
        let d = tokens.dims();
        let seq = TokenSequence {
            tokens: tape.constant(tokens.clone()),
            grid: (d[1], 1),
            origin: (d[2], d[1], 1),
            pool_factor: 1,
            batched: true,
        };
        let (out, attn) = l.forward(&s, &seq).unwrap();
        ((*out.tokens.value()).clone(), (*attn.value()).clone())
    }

    #[test]
    fn single_token_attends_to_itself() {
        let (params, l) = layer(4, 3, 1);
        let x = random(&[1, 1, 4], 5);
        let (out, attn) = run(&params, &l, &x);
        assert_eq!(attn.data(), &[1.0]);
        // v W_out + x
        let wv = params.get(l.w_value);
        let wo = params.get(l.w_out.unwrap());
        for j in 0..4 {
            let mut acc = 0.0;
            for m in 0..3 {
                let v: f64 = (0..4).map(|i| x.data()[i] * wv.data()[i * 3 + m]).sum();
                acc += v * wo.data()[m * 4 + j];
            }
            assert!((out.data()[j] - (acc + x.data()[j])).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_keys_average_values() {
        let tape = Tape::new();
        let q = tape.constant(random(&[1, 4, 2], 6));
        let k = tape.constant(Tensor::new(&[1, 4, 2], [0.3, -0.7].repeat(4)).unwrap());
        let v = tape.constant(random(&[1, 4, 3], 7));
        let (out, attn) = scaled_dot_product_attention(q, k, v).unwrap();
        assert!(attn.value().data().iter().all(|&a| (a - 0.25).abs() < 1e-15));
        let vv = v.value();
        for col in 0..3 {
            let mean = (0..4).map(|r| vv.data()[r * 3 + col]).sum::<f64>() / 4.0;
            for row in 0..4 {
                assert!((out.value().data()[row * 3 + col] - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn self_attention_gradients() {
        for seed in 0..3 {
            let (params, l) = layer(6, 4, seed);
            let x = random(&[2, 5, 6], seed + 11);
            let mut inputs = params.tensors();
            inputs.push(x);
            let n = params.len();
            let rep = grad_check_many(
                |tape, v| {
                    let s = Session::with_vars(tape, &params, v[..n].to_vec(), Mode::Infer)?;
                    let seq =
                        TokenSequence { tokens: v[n], grid: (5, 1), origin: (6, 5, 1), pool_factor: 1, batched: true };
                    let (out, _) = l.forward(&s, &seq)?;
                    out.tokens.mul(out.tokens)?.sum()
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

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn rows_sum_to_one_and_permutation_equivariant(seed in any::<u64>(), t in 1usize..8) {
            let (params, l) = layer(5, 3, seed);
            let x = random(&[1, t, 5], seed.wrapping_mul(31));
            let (out, attn) = run(&params, &l, &x);
            for row in attn.data().chunks(t) {
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                prop_assert!(row.iter().all(|&a| a > 0.0 && a <= 1.0));
            }
            let perm = rng::permutation(&mut rng::seeded(seed), t);
            let mut xp = x.clone();
            for (dst, &src) in perm.iter().enumerate() {
                xp.data_mut()[dst * 5..(dst + 1) * 5].copy_from_slice(&x.data()[src * 5..(src + 1) * 5]);
            }
            let (outp, _) = run(&params, &l, &xp);
            for (dst, &src) in perm.iter().enumerate() {
                for j in 0..5 {
                    prop_assert!((outp.data()[dst * 5 + j] - out.data()[src * 5 + j]).abs() < 1e-12);
                }
            }
        }
    }
}
