//! Central finite-difference checks over every differentiable building block.

use serde::Serialize;

use crate::attention::ChannelAttention;
use crate::autodiff::{grad_check_many, Tape, Var};
use crate::error::Result;
use crate::losses::{dice_loss, focal_loss, total_loss, DiceVariant, LossWeights};
use crate::model::{build_paacn, ModelConfig};
use crate::nn::{
    avg_pool2d, max_pool2d, Activation, AdaptiveAtrousBlock, AtrousConv2d, BatchNorm, Dense, Mode, Padding, Params,
    PyramidMode, Session,
};
use crate::rng;
use crate::tensor::Tensor;
use crate::transformer::{tokens_from_featuremap, SelfAttention};

pub const LAYER_TOL: f64 = 1e-5;
pub const MODEL_TOL: f64 = 1e-4;
/// Fraction of model parameters sampled in the end-to-end check.
pub const MODEL_FRACTION: f64 = 0.01;

#[derive(Clone, Debug, Serialize)]
pub struct GradCase {
    pub name: String,
    pub seeds: usize,
    pub tol: f64,
    pub coords: usize,
    /// Largest relative error over all seeds.
    pub worst: f64,
    pub max_abs_diff: f64,
    pub passed: bool,
}

fn random(dims: &[usize], seed: u64, lo: f64, hi: f64) -> Result<Tensor> {
    let mut r = rng::seeded(seed);
    Tensor::from_fn(dims, |_| rng::uniform(&mut r, lo, hi))
}

/// Fixed pseudo-random readout so the objective is not invariant to shifts
/// that batch normalization removes.
fn readout<'t>(tape: &'t Tape, y: Var<'t>) -> Result<Var<'t>> {
    let w = Tensor::from_fn(&y.dims(), |i| ((i * 7919) % 13) as f64 / 13.0 - 0.4)?;
    y.mul(tape.constant(w))?.sum()
}

struct Tally {
    worst: f64,
    abs: f64,
    coords: usize,
    passed: bool,
}

impl Tally {
    fn new() -> Self {
        Tally { worst: 0.0, abs: 0.0, coords: 0, passed: true }
    }

    fn add(&mut self, rep: crate::autodiff::GradCheckReport) {
        self.worst = self.worst.max(rep.max_rel_error);
        self.abs = self.abs.max(rep.max_abs_diff);
        self.coords += rep.checked;
        self.passed &= rep.passed;
    }

    fn finish(self, name: &str, seeds: usize, tol: f64) -> GradCase {
        GradCase {
            name: name.to_string(),
            seeds,
            tol,
            coords: self.coords,
            worst: self.worst,
            max_abs_diff: self.abs,
            passed: self.passed,
        }
    }
}

/// Check every trainable entry plus the input of a layer.
fn check_layer<F>(params: &Params, x: &Tensor, mode: Mode, h: f64, f: F) -> Result<crate::autodiff::GradCheckReport>
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
    grad_check_many(
        |tape, vars| {
            let s = Session::with_vars(tape, params, vars[..n].to_vec(), mode)?;
            readout(tape, f(&s, vars[n])?)
        },
        &inputs,
        Some(&coords),
        h,
        LAYER_TOL,
    )
}

fn layer_cases(seeds: u64) -> Result<Vec<GradCase>> {
    let mut cases = Vec::new();
    let n = seeds as usize;
    for r in 1..=3 {
        let mut t = Tally::new();
        for seed in 0..seeds {
            let mut params = Params::new();
            let c = AtrousConv2d::new(&mut params, &mut rng::seeded(seed), "c", 2, 3, 3, r, Padding::Same)?;
            let x = random(&[2, 2, 8, 8], seed + 100, -1.0, 1.0)?;
            t.add(check_layer(&params, &x, Mode::Infer, 1e-5, |s, x| c.forward(s, x))?);
        }
        cases.push(t.finish(&format!("atrous_conv_r{r}"), n, LAYER_TOL));
    }

    for (name, mode) in
        [("adaptive_block", PyramidMode::Parallel), ("adaptive_block_sequential", PyramidMode::Sequential)]
    {
        let mut t = Tally::new();
        for seed in 0..seeds {
            let mut params = Params::new();
            let b = AdaptiveAtrousBlock::new(&mut params, &mut rng::seeded(seed), "b", 1, 2, &[1, 2, 3], mode)?;
            let x = random(&[2, 1, 8, 8], seed + 200, -1.0, 1.0)?;
            t.add(check_layer(&params, &x, Mode::Train, 1e-6, |s, x| b.forward(s, x))?);
        }
        cases.push(t.finish(name, n, LAYER_TOL));
    }

    for (name, mode) in [("batch_norm_train", Mode::Train), ("batch_norm_infer", Mode::Infer)] {
        let mut t = Tally::new();
        for seed in 0..seeds {
            let mut params = Params::new();
            let bn = BatchNorm::new(&mut params, "bn", 3)?;
            params.set(bn.gamma, random(&[3], seed + 300, 0.5, 2.0)?)?;
            params.set(bn.beta, random(&[3], seed + 301, -1.0, 1.0)?)?;
            params.set(bn.running_mean, random(&[3], seed + 302, -0.5, 0.5)?)?;
            params.set(bn.running_var, random(&[3], seed + 303, 0.5, 2.0)?)?;
            let x = random(&[2, 3, 4, 4], seed + 304, -1.0, 1.0)?;
            t.add(check_layer(&params, &x, mode, 1e-5, |s, x| bn.forward(s, x))?);
        }
        cases.push(t.finish(name, n, LAYER_TOL));
    }

    for (name, max) in [("max_pool", true), ("avg_pool", false)] {
        let mut t = Tally::new();
        for seed in 0..seeds {
            let params = Params::new();
            let x = random(&[2, 2, 6, 6], seed + 400, -1.0, 1.0)?;
            t.add(check_layer(&params, &x, Mode::Infer, 1e-6, |_, x| {
                if max {
                    max_pool2d(x, 2, 2)
                } else {
                    avg_pool2d(x, 2, 2)
                }
            })?);
        }
        cases.push(t.finish(name, n, LAYER_TOL));
    }

    for (name, act) in [
        ("dense_relu", Activation::Relu),
        ("dense_sigmoid", Activation::Sigmoid),
        ("dense_softmax", Activation::Softmax),
    ] {
        let mut t = Tally::new();
        for seed in 0..seeds {
            let mut params = Params::new();
            let d = Dense::new(&mut params, &mut rng::seeded(seed), "fc", 6, 4, act)?;
            let x = random(&[3, 6], seed + 500, -1.0, 1.0)?;
            t.add(check_layer(&params, &x, Mode::Infer, 1e-6, |s, x| d.forward(s, x))?);
        }
        cases.push(t.finish(name, n, LAYER_TOL));
    }

    let mut t = Tally::new();
    for seed in 0..seeds {
        let mut params = Params::new();
        let a = ChannelAttention::new(&mut params, &mut rng::seeded(seed), "ca", 4, 2)?;
        let x = random(&[2, 4, 5, 5], seed + 600, -1.0, 1.0)?;
        t.add(check_layer(&params, &x, Mode::Infer, 1e-6, |s, x| a.forward(s, x))?);
    }
    cases.push(t.finish("channel_attention", n, LAYER_TOL));

    let mut t = Tally::new();
    for seed in 0..seeds {
        let mut params = Params::new();
        let a = SelfAttention::new(&mut params, &mut rng::seeded(seed), "sa", 6, 4, true, true)?;
        let x = random(&[2, 6, 4, 4], seed + 700, -1.0, 1.0)?;
        t.add(check_layer(&params, &x, Mode::Infer, 1e-5, |s, x| {
            let seq = tokens_from_featuremap(x, 4)?;
            Ok(a.forward(s, &seq)?.0.tokens)
        })?);
    }
    cases.push(t.finish("self_attention", n, LAYER_TOL));
    Ok(cases)
}

fn loss_cases(seeds: u64) -> Result<Vec<GradCase>> {
    let n = seeds as usize;
    let w = LossWeights::default();
    let (mut dice, mut focal, mut total) = (Tally::new(), Tally::new(), Tally::new());
    for seed in 0..seeds {
        let mut r = rng::seeded(seed + 800);
        let target = Tensor::from_fn(&[8], |i| ((i + seed as usize) % 2) as f64)?;
        let p = Tensor::from_fn(&[8], |_| rng::uniform(&mut r, 0.05, 0.95))?;
        let rep = grad_check_many(
            |_, v| dice_loss(v[0], &target, w.dice_eps, DiceVariant::Standard),
            std::slice::from_ref(&p),
            None,
            1e-5,
            LAYER_TOL,
        )?;
        dice.add(rep);
        let logits = Tensor::from_fn(&[6, 2], |_| rng::normal(&mut r))?;
        let labels: Vec<usize> = (0..6).map(|i| (i + seed as usize) % 2).collect();
        let rep = grad_check_many(
            |_, v| focal_loss(v[0].softmax_rows()?, &labels, &w),
            std::slice::from_ref(&logits),
            None,
            1e-5,
            LAYER_TOL,
        )?;
        focal.add(rep);
        let rep = grad_check_many(
            |_, v| Ok(total_loss(v[0].softmax_rows()?, &labels, &w)?.total),
            std::slice::from_ref(&logits),
            None,
            1e-5,
            LAYER_TOL,
        )?;
        total.add(rep);
    }
    Ok(vec![
        dice.finish("dice_loss", n, LAYER_TOL),
        focal.finish("focal_loss", n, LAYER_TOL),
        total.finish("total_loss", n, LAYER_TOL),
    ])
}

/// Total loss of the desk model on a two-sample batch, differentiated with
/// respect to a seeded sample of its trainable parameters.
pub fn model_case(seeds: u64, fraction: f64) -> Result<GradCase> {
    let mut t = Tally::new();
    for seed in 0..seeds {
        t.add(model_case_one(seed, fraction)?);
    }
    Ok(t.finish("paacn_model", seeds as usize, MODEL_TOL))
}

/// One seed of the model check. Trainable entries are jittered off their
/// initial values first: zero biases behind dead features sit exactly on a
/// ReLU kink, where central differences do not estimate the derivative.
pub fn model_case_one(seed: u64, fraction: f64) -> Result<crate::autodiff::GradCheckReport> {
    let cfg = ModelConfig::desk();
    let w = LossWeights::default();
    let mut model = build_paacn(&cfg, seed)?;
    let mut jr = rng::stream(seed, "gradsuite/jitter");
    let ids: Vec<_> = model.params.ids().filter(|id| model.params.entries()[id.index()].trainable).collect();
    for id in ids {
        for v in model.params.get_mut(id).data_mut() {
            *v += rng::uniform(&mut jr, -0.02, 0.02);
        }
    }
    let s = cfg.input_size;
    let x = random(&[2, 1, s, s], seed + 900, 0.0, 1.0)?;
    let labels = [0usize, 1];
    let mut inputs = model.params.tensors();
    let n = inputs.len();
    inputs.push(x);
    let mut r = rng::stream(seed, "gradsuite/sample");
    let mut coords = Vec::new();
    for (i, e) in model.params.entries().iter().enumerate() {
        if e.trainable {
            coords.extend((0..e.tensor.numel()).filter(|_| rng::uniform(&mut r, 0.0, 1.0) < fraction).map(|c| (i, c)));
        }
    }
    grad_check_many(
        |tape, v| {
            let sess = Session::with_vars(tape, &model.params, v[..n].to_vec(), Mode::Train)?;
            Ok(total_loss(model.forward(&sess, v[n])?, &labels, &w)?.total)
        },
        &inputs,
        Some(&coords),
        1e-6,
        MODEL_TOL,
    )
}

/// Every case with `seeds` seeds each.
pub fn run_grad_suite(seeds: u64) -> Result<Vec<GradCase>> {
    let mut cases = layer_cases(seeds)?;
    cases.extend(loss_cases(seeds)?);
    cases.push(model_case(seeds, MODEL_FRACTION)?);
    Ok(cases)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn short_suite_passes() {
        let mut cases = layer_cases(2).unwrap();
        cases.extend(loss_cases(2).unwrap());
        cases.push(model_case(1, 0.002).unwrap());
        for c in &cases {
            assert!(c.passed, "{c:?}");
            assert!(c.coords > 0, "{c:?}");
        }
    }
}
