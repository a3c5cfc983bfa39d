use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Params;
use crate::tensor::Tensor;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    #[default]
    Adam,
}

impl std::str::FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adam" => Ok(OptimizerKind::Adam),
            other => Err(Error::config(format!("unknown optimizer `{other}`"))),
        }
    }
}

/// Optimizer state: one first/second moment slot per parameter entry.
#[derive(Clone, Debug)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub lr: f64,
    step: u64,
    m: Vec<Option<Vec<f64>>>,
    v: Vec<Option<Vec<f64>>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64) -> Result<Self> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::config(format!("learning rate must be positive, got {lr}")));
        }
        Ok(Optimizer { kind, lr, step: 0, m: Vec::new(), v: Vec::new() })
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Apply one update; `grads[i]` belongs to entry `i`, `None` leaves it untouched.
    pub fn step(&mut self, params: &mut Params, grads: &[Option<Tensor>]) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::shape(format!("{} gradients for {} parameters", grads.len(), params.len())));
        }
        for (id, g) in params.ids().zip(grads) {
            if let Some(g) = g {
                if g.shape() != params.get(id).shape() {
                    return Err(Error::shape(format!(
                        "gradient {} for parameter {} of shape {}",
                        g.shape(),
                        params.entries()[id.index()].name,
                        params.get(id).shape()
                    )));
                }
            }
        }
        self.step += 1;
        if self.m.len() != params.len() {
            self.m = vec![None; params.len()];
            self.v = vec![None; params.len()];
        }
        let t = self.step as i32;
        let (c1, c2) = (1.0 - ADAM_BETA1.powi(t), 1.0 - ADAM_BETA2.powi(t));
        let ids: Vec<_> = params.ids().collect();
        for (i, (id, g)) in ids.into_iter().zip(grads).enumerate() {
            let Some(g) = g else { continue };
            let w = params.get_mut(id).data_mut();
            match self.kind {
                OptimizerKind::Sgd => {
                    for (wj, gj) in w.iter_mut().zip(g.data()) {
                        *wj -= self.lr * gj;
                    }
                }
                OptimizerKind::Adam => {
                    let m = self.m[i].get_or_insert_with(|| vec![0.0; g.numel()]);
                    let v = self.v[i].get_or_insert_with(|| vec![0.0; g.numel()]);
                    for (j, &gj) in g.data().iter().enumerate() {
                        m[j] = ADAM_BETA1 * m[j] + (1.0 - ADAM_BETA1) * gj;
                        v[j] = ADAM_BETA2 * v[j] + (1.0 - ADAM_BETA2) * gj * gj;
                        let m_hat = m[j] / c1;
                        let v_hat = v[j] / c2;
                        w[j] -= self.lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
                    }
                }
            }
        }
        Ok(())
    }
}
