//! Soft Dice, focal, and their weighted sum.

use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Lower clamp on the true-class probability inside the focal logarithm.
pub const PT_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiceVariant {
    /// `1 - (2 |A∩B| + eps) / (|A| + |B| + eps)`.
    #[default]
    Standard,
    /// `1 - (|A∩B|^2 + eps) / (|A| + |B| + eps)`, kept for comparison runs.
    SquaredIntersection,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub alpha: f64,
    pub gamma: f64,
    pub dice_eps: f64,
    pub dice_variant: DiceVariant,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda1: 0.5,
            lambda2: 0.5,
            alpha: 0.25,
            gamma: 2.0,
            dice_eps: 1e-6,
            dice_variant: DiceVariant::Standard,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.lambda1 < 0.0 || self.lambda2 < 0.0 || self.lambda1 + self.lambda2 <= 0.0 {
            return Err(Error::config("loss weights must be nonnegative with a positive sum"));
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::config("focal alpha must lie in (0, 1]"));
        }
        if self.gamma < 0.0 {
            return Err(Error::config("focal gamma must be nonnegative"));
        }
        if self.dice_eps <= 0.0 {
            return Err(Error::config("dice eps must be positive"));
        }
        Ok(())
    }
}

/// Soft Dice loss between probabilities and a binary target of the same shape.
pub fn dice_loss<'t>(pred: Var<'t>, target: &Tensor, eps: f64, variant: DiceVariant) -> Result<Var<'t>> {
    let p = pred.value();
    if p.shape() != target.shape() {
        return Err(Error::shape(format!("dice: prediction {} vs target {}", p.shape(), target.shape())));
    }
    if p.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
        return Err(Error::domain("dice prediction outside [0, 1]"));
    }
    if target.data().iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::domain("dice target must be binary"));
    }
    let tape = pred.tape();
    let t = tape.constant(target.clone());
    let intersection = pred.mul(t)?.sum()?;
    let denom = pred.sum()?.add_scalar(target.sum() + eps)?;
    let numer = match variant {
        DiceVariant::Standard => intersection.scale(2.0)?,
        DiceVariant::SquaredIntersection => intersection.mul(intersection)?,
    }
    .add_scalar(eps)?;
    // 1 - numer / denom
    numer.mul(denom.powf(-1.0)?)?.neg()?.add_scalar(1.0)
}

/// Mean over the batch of `-alpha (1 - p_t)^gamma ln p_t`, with `p_t` the
/// probability assigned to the true class of each row of `probs[B, K]`.
pub fn focal_loss<'t>(probs: Var<'t>, targets: &[usize], w: &LossWeights) -> Result<Var<'t>> {
    let pt = probs.gather_cols(targets)?.clamp(PT_FLOOR, 1.0)?;
    let log_pt = pt.ln()?;
    let weighted = if w.gamma == 0.0 { log_pt } else { pt.neg()?.add_scalar(1.0)?.powf(w.gamma)?.mul(log_pt)? };
    weighted.mean()?.scale(-w.alpha)
}

/// The two components alongside their weighted sum.
#[derive(Clone, Copy, Debug)]
pub struct LossParts<'t> {
    pub total: Var<'t>,
    pub dice: Var<'t>,
    pub focal: Var<'t>,
}

/// `lambda1 * dice + lambda2 * focal` for a two-class softmax output. Dice
/// compares the malignant-class column against the binary labels.
pub fn total_loss<'t>(probs: Var<'t>, labels: &[usize], w: &LossWeights) -> Result<LossParts<'t>> {
    let d = probs.dims();
    if d.len() != 2 || d[1] != 2 {
        return Err(Error::shape(format!("total loss expects [B, 2] probabilities, got {d:?}")));
    }
    if labels.iter().any(|&l| l > 1) {
        return Err(Error::domain("labels must be 0 (benign) or 1 (malignant)"));
    }
    let malignant = probs.gather_cols(&vec![1; d[0]])?;
    let target = Tensor::new(&[d[0]], labels.iter().map(|&l| l as f64).collect())?;
    let dice = dice_loss(malignant, &target, w.dice_eps, w.dice_variant)?;
    let focal = focal_loss(probs, labels, w)?;
    let total = dice.scale(w.lambda1)?.add(focal.scale(w.lambda2)?)?;
    Ok(LossParts { total, dice, focal })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{grad_check, Tape};
    use crate::rng;

    fn vec1(v: &[f64]) -> Tensor {
        Tensor::new(&[v.len()], v.to_vec()).unwrap()
    }

    fn dice(p: &[f64], t: &[f64], eps: f64) -> f64 {
        let tape = Tape::new();
        dice_loss(tape.constant(vec1(p)), &vec1(t), eps, DiceVariant::Standard).unwrap().item().unwrap()
    }

    fn probs2(p1: &[f64]) -> Tensor {
        Tensor::new(&[p1.len(), 2], p1.iter().flat_map(|&p| [1.0 - p, p]).collect()).unwrap()
    }

    #[test]
    fn dice_examples() {
        assert!(dice(&[1.0, 0.0, 1.0], &[1.0, 0.0, 1.0], 1e-6).abs() <= 1e-6);
        assert!((dice(&[1.0, 1.0, 0.0, 0.0], &[0.0, 0.0, 1.0, 1.0], 1e-15) - 1.0).abs() < 1e-12);
        assert!((dice(&[1.0, 1.0, 0.0, 0.0], &[1.0, 0.0, 1.0, 0.0], 1e-15) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn dice_bounded_and_symmetric_for_binary_pred() {
        let mut r = rng::seeded(3);
        for _ in 0..50 {
            let a: Vec<f64> = (0..8).map(|_| (rng::uniform(&mut r, 0.0, 1.0) < 0.5) as u8 as f64).collect();
            let b: Vec<f64> = (0..8).map(|_| (rng::uniform(&mut r, 0.0, 1.0) < 0.5) as u8 as f64).collect();
            let (ab, ba) = (dice(&a, &b, 1e-6), dice(&b, &a, 1e-6));
            assert_eq!(ab, ba);
            assert!((0.0..=1.0).contains(&ab));
            let soft: Vec<f64> = (0..8).map(|_| rng::uniform(&mut r, 0.0, 1.0)).collect();
            assert!((0.0..=1.0).contains(&dice(&soft, &b, 1e-6)));
        }
    }

    #[test]
    fn dice_errors() {
        let tape = Tape::new();
        let p = tape.constant(vec1(&[0.5, 1.2]));
        assert!(matches!(dice_loss(p, &vec1(&[0.0, 1.0]), 1e-6, DiceVariant::Standard), Err(Error::Domain(_))));
        let p = tape.constant(vec1(&[0.5, 0.2, 0.1]));
        assert!(matches!(dice_loss(p, &vec1(&[0.0, 1.0]), 1e-6, DiceVariant::Standard), Err(Error::Shape(_))));
    }

    #[test]
    fn squared_variant_differs() {
        let tape = Tape::new();
        let p = tape.constant(vec1(&[1.0, 1.0, 0.0, 0.0]));
        let l = dice_loss(p, &vec1(&[1.0, 0.0, 1.0, 0.0]), 1e-15, DiceVariant::SquaredIntersection).unwrap();
        assert!((l.item().unwrap() - 0.75).abs() < 1e-12);
    }

    fn focal(p1: &[f64], labels: &[usize], w: &LossWeights) -> f64 {
        let tape = Tape::new();
        focal_loss(tape.constant(probs2(p1)), labels, w).unwrap().item().unwrap()
    }

    #[test]
    fn focal_examples() {
        let w = LossWeights { alpha: 1.0, gamma: 2.0, ..Default::default() };
        assert_eq!(focal(&[1.0], &[1], &w), 0.0);
        assert!((focal(&[0.5], &[1], &w) - 0.25 * std::f64::consts::LN_2).abs() < 1e-15);
        assert!((focal(&[0.5], &[1], &w) - 0.173287).abs() < 1e-6);
        let ce = LossWeights { alpha: 1.0, gamma: 0.0, ..Default::default() };
        assert!((focal(&[0.3, 0.8], &[1, 0], &ce) - (-(0.3f64.ln()) - (0.2f64.ln())) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn focal_rejects_bad_class() {
        let tape = Tape::new();
        let r = focal_loss(tape.constant(probs2(&[0.4])), &[2], &LossWeights::default());
        assert!(matches!(r, Err(Error::Domain(_))));
    }

    #[test]
    fn focal_monotone_and_downweights_easy() {
        let w = LossWeights::default();
        let grid: Vec<f64> = (1..=99).map(|i| i as f64 / 100.0).collect();
        let vals: Vec<f64> = grid.iter().map(|&p| focal(&[p], &[1], &w)).collect();
        assert!(vals.iter().all(|&v| v >= 0.0));
        assert!(vals.windows(2).all(|w| w[1] < w[0]));
        let flat = LossWeights { gamma: 0.0, ..w };
        assert!(focal(&[0.9], &[1], &w) < focal(&[0.9], &[1], &flat));
    }

    #[test]
    fn total_combines_hand_values() {
        let w = LossWeights { alpha: 1.0, gamma: 2.0, lambda1: 0.5, lambda2: 0.5, ..Default::default() };
        let tape = Tape::new();
        let parts = total_loss(tape.constant(probs2(&[0.5, 0.5])), &[1, 0], &w).unwrap();
        assert!((parts.dice.item().unwrap() - 0.5).abs() < 1e-6);
        assert!((parts.focal.item().unwrap() - 0.173287).abs() < 1e-6);
        assert!((parts.total.item().unwrap() - 0.336644).abs() < 1e-6);
    }

    #[test]
    fn lambda_extremes_and_linearity() {
        let probs = probs2(&[0.2, 0.7, 0.9, 0.4]);
        let labels = [0, 1, 1, 0];
        let eval = |l1: f64, l2: f64| {
            let tape = Tape::new();
            let w = LossWeights { lambda1: l1, lambda2: l2, ..Default::default() };
            let p = total_loss(tape.constant(probs.clone()), &labels, &w).unwrap();
            (p.total.item().unwrap(), p.dice.item().unwrap(), p.focal.item().unwrap())
        };
        let (t, _, f) = eval(0.0, 1.0);
        assert!((t - f).abs() <= 1e-15);
        let (t, d, _) = eval(1.0, 0.0);
        assert_eq!(t, d);
        let (t, d, f) = eval(0.3, 1.7);
        assert!((t - (0.3 * d + 1.7 * f)).abs() < 1e-15);
    }

    #[test]
    fn weight_validation() {
        assert!(LossWeights::default().validate().is_ok());
        assert!(LossWeights { lambda1: 0.0, lambda2: 0.0, ..Default::default() }.validate().is_err());
        assert!(LossWeights { alpha: 0.0, ..Default::default() }.validate().is_err());
        assert!(LossWeights { gamma: -1.0, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn loss_gradients() {
        for seed in 0..10 {
            let mut r = rng::seeded(seed);
            let target =
                Tensor::from_fn(&[6], |_| if rng::uniform(&mut r, 0.0, 1.0) < 0.5 { 0.0 } else { 1.0 }).unwrap();
            let x = Tensor::from_fn(&[6], |_| rng::uniform(&mut r, 0.05, 0.95)).unwrap();
            let rep = grad_check(|_, v| dice_loss(v, &target, 1e-6, DiceVariant::Standard), &x, 1e-5, 1e-5).unwrap();
            assert!(rep.passed, "dice {rep:?}");

            let logits = Tensor::from_fn(&[4, 2], |_| rng::normal(&mut r)).unwrap();
            let labels = [1, 0, 0, 1];
            let w = LossWeights::default();
            let rep = grad_check(|_, v| focal_loss(v.softmax_rows()?, &labels, &w), &logits, 1e-5, 1e-5).unwrap();
            assert!(rep.passed, "focal {rep:?}");
            let rep =
                grad_check(|_, v| Ok(total_loss(v.softmax_rows()?, &labels, &w)?.total), &logits, 1e-5, 1e-5).unwrap();
            assert!(rep.passed, "total {rep:?}");
        }
    }
}
