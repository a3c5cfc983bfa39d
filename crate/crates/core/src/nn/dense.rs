use serde::{Deserialize, Serialize};

use super::params::{kaiming_uniform, ParamId, Params, Session};
use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    None,
    Relu,
    Sigmoid,
    Softmax,
}

impl Activation {
    pub fn apply<'t>(self, x: Var<'t>) -> Result<Var<'t>> {
        match self {
            Activation::None => Ok(x),
            Activation::Relu => x.relu(),
            Activation::Sigmoid => x.sigmoid(),
            Activation::Softmax => x.softmax_rows(),
        }
    }
}

/// Fully connected layer `act(W x + b)` with `W: [out, in]`.
#[derive(Clone, Debug)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
    pub inputs: usize,
    pub outputs: usize,
    pub activation: Activation,
}

impl Dense {
    pub fn new(
        params: &mut Params,
        rng: &mut SeededRng,
        name: &str,
        inputs: usize,
        outputs: usize,
        activation: Activation,
    ) -> Result<Self> {
        if inputs == 0 || outputs == 0 {
            return Err(Error::config(format!("{name}: dense layer sizes must be positive")));
        }
        let weight = params.add(format!("{name}.weight"), kaiming_uniform(rng, &[outputs, inputs], inputs)?, true);
        let bias = params.add(format!("{name}.bias"), Tensor::zeros(&[outputs])?, true);
        Ok(Dense { weight, bias, inputs, outputs, activation })
    }

    /// `x` is `[in]` or `[B, in]`.
    pub fn forward<'t>(&self, s: &Session<'_, 't>, x: Var<'t>) -> Result<Var<'t>> {
        let d = x.dims();
        let (xb, vector) = match d.as_slice() {
            [n] if *n == self.inputs => (x.reshape(&[1, *n])?, true),
            [_, n] if *n == self.inputs => (x, false),
            _ => {
                return Err(Error::shape(format!("dense layer expects {} inputs, got {:?}", self.inputs, d)));
            }
        };
        let wt = s.var(self.weight).transpose()?;
        let y = self.activation.apply(xb.matmul(wt)?.add_bias(s.var(self.bias))?)?;
        if vector {
            y.reshape(&[self.outputs])
        } else {
            Ok(y)
        }
    }
}
