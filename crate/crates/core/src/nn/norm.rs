use super::params::{BnUpdate, Mode, ParamId, Params, Session};
use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_MOMENTUM: f64 = 0.1;
pub const DEFAULT_EPS: f64 = 1e-5;

/// Per-channel batch normalization over axis 1.
///
/// Running variance is tracked with the unbiased batch variance; the
/// normalization itself uses the biased one.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub channels: usize,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm {
    pub fn new(params: &mut Params, name: &str, channels: usize) -> Result<Self> {
        Self::with_options(params, name, channels, DEFAULT_MOMENTUM, DEFAULT_EPS)
    }

    pub fn with_options(params: &mut Params, name: &str, channels: usize, momentum: f64, eps: f64) -> Result<Self> {
        if !(momentum > 0.0 && momentum < 1.0) || eps <= 0.0 {
            return Err(Error::config(format!("{name}: momentum must be in (0,1) and eps positive")));
        }
        Ok(BatchNorm {
            gamma: params.add(format!("{name}.gamma"), Tensor::ones(&[channels])?, true),
            beta: params.add(format!("{name}.beta"), Tensor::zeros(&[channels])?, true),
            running_mean: params.add(format!("{name}.running_mean"), Tensor::zeros(&[channels])?, false),
            running_var: params.add(format!("{name}.running_var"), Tensor::ones(&[channels])?, false),
            channels,
            momentum,
            eps,
        })
    }

    /// `x` is `[B, C, ...]`. Train mode records a running-statistics update
    /// on the session.
    pub fn forward<'t>(&self, s: &Session<'_, 't>, x: Var<'t>) -> Result<Var<'t>> {
        let (gamma, beta) = (s.var(self.gamma), s.var(self.beta));
        match s.mode() {
            Mode::Train => {
                let count = {
                    let d = x.dims();
                    d[0] * d[2..].iter().product::<usize>()
                };
                let (y, batch_mean, batch_var) = x.batch_norm_train(gamma, beta, self.eps)?;
                s.push_bn_update(BnUpdate {
                    running_mean: self.running_mean,
                    running_var: self.running_var,
                    batch_mean,
                    batch_var,
                    count,
                    momentum: self.momentum,
                });
                Ok(y)
            }
            Mode::Infer => {
                let p = s.params();
                x.batch_norm_infer(
                    gamma,
                    beta,
                    p.get(self.running_mean).data(),
                    p.get(self.running_var).data(),
                    self.eps,
                )
            }
        }
    }
}
