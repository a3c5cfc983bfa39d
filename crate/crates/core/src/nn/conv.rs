use serde::{Deserialize, Serialize};

use super::norm::BatchNorm;
use super::params::{kaiming_uniform, ParamId, Params, Session};
use super::{batched, unbatched};
use crate::autodiff::{ConvGeometry, Var};
use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Padding {
    /// Zero padding of `dilation * (k - 1) / 2` so stride-1 output matches the input.
    Same,
    Explicit(usize),
}

/// 2-D cross-correlation with dilated taps:
/// `y[o, i, j] = b[o] + sum_{c, u, v} w[o, c, u, v] * x[c, i*s + r*u - p, j*s + r*v - p]`.
#[derive(Clone, Debug)]
pub struct AtrousConv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub dilation: usize,
    pub stride: usize,
    pub padding: Padding,
}

impl AtrousConv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        params: &mut Params,
        rng: &mut SeededRng,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        dilation: usize,
        padding: Padding,
    ) -> Result<Self> {
        if in_channels == 0 || out_channels == 0 || kernel == 0 || dilation == 0 {
            return Err(Error::config(format!("{name}: channels, kernel and dilation must be positive")));
        }
        if padding == Padding::Same && kernel.is_multiple_of(2) {
            return Err(Error::config(format!("{name}: same padding needs an odd kernel")));
        }
        let fan_in = in_channels * kernel * kernel;
        let w = kaiming_uniform(rng, &[out_channels, in_channels, kernel, kernel], fan_in)?;
        let weight = params.add(format!("{name}.weight"), w, true);
        let bias = params.add(format!("{name}.bias"), Tensor::zeros(&[out_channels])?, true);
        Ok(AtrousConv2d { weight, bias, in_channels, out_channels, kernel, dilation, stride: 1, padding })
    }

    pub fn pad(&self) -> usize {
        match self.padding {
            Padding::Same => self.dilation * (self.kernel - 1) / 2,
            Padding::Explicit(p) => p,
        }
    }

    pub fn geometry(&self) -> ConvGeometry {
        let p = self.pad();
        ConvGeometry { stride: self.stride, dilation: self.dilation, pad_h: p, pad_w: p }
    }

    /// Spatial output extent for an input extent.
    pub fn output_extent(&self, input: usize) -> Option<usize> {
        self.geometry().output_extent(input, self.kernel, self.pad())
    }

    /// `x` is `[C_in, H, W]` or `[B, C_in, H, W]`.
    pub fn forward<'t>(&self, s: &Session<'_, 't>, x: Var<'t>) -> Result<Var<'t>> {
        let (xb, was3) = batched(x)?;
        if xb.dims()[1] != self.in_channels {
            return Err(Error::shape(format!(
                "conv expects {} input channels, got {}",
                self.in_channels,
                xb.dims()[1]
            )));
        }
        let y = xb.conv2d(s.var(self.weight), self.geometry())?.add_bias(s.var(self.bias))?;
        unbatched(y, was3)
    }
}

/// How the dilation pyramid's branches are wired.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PyramidMode {
    /// All branches see the block input; gated outputs are summed.
    Parallel,
    /// Branches are chained; the last branch's output is the block output.
    Sequential,
}

/// Three (or more) dilated 3x3 convolutions combined by gated summation,
/// then batch normalization and ReLU.
///
/// Each branch `d` carries a learnable scalar gate `g_d` (initialised to 1)
/// so the pre-normalization output is `sum_d g_d * conv_d(x)`.
#[derive(Clone, Debug)]
pub struct AdaptiveAtrousBlock {
    pub branches: Vec<AtrousConv2d>,
    pub gates: Vec<ParamId>,
    pub norm: BatchNorm,
    pub mode: PyramidMode,
}

impl AdaptiveAtrousBlock {
    pub fn new(
        params: &mut Params,
        rng: &mut SeededRng,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        rates: &[usize],
        mode: PyramidMode,
    ) -> Result<Self> {
        if rates.is_empty() {
            return Err(Error::config(format!("{name}: at least one dilation rate required")));
        }
        let mut branches = Vec::with_capacity(rates.len());
        let mut gates = Vec::with_capacity(rates.len());
        for (i, &r) in rates.iter().enumerate() {
            let cin = match mode {
                PyramidMode::Sequential if i > 0 => out_channels,
                _ => in_channels,
            };
            branches.push(AtrousConv2d::new(
                params,
                rng,
                &format!("{name}.branch_r{r}"),
                cin,
                out_channels,
                3,
                r,
                Padding::Same,
            )?);
            gates.push(params.add(format!("{name}.gate_r{r}"), Tensor::scalar(1.0)?, true));
        }
        let norm = BatchNorm::new(params, &format!("{name}.bn"), out_channels)?;
        Ok(AdaptiveAtrousBlock { branches, gates, norm, mode })
    }

    pub fn rates(&self) -> Vec<usize> {
        self.branches.iter().map(|b| b.dilation).collect()
    }

    /// Per-branch gated outputs (parallel) or successive stage outputs (sequential).
    pub fn branch_outputs<'t>(&self, s: &Session<'_, 't>, x: Var<'t>) -> Result<Vec<Var<'t>>> {
        let mut outs = Vec::with_capacity(self.branches.len());
        let mut h = x;
        for (conv, &gate) in self.branches.iter().zip(&self.gates) {
            let input = match self.mode {
                PyramidMode::Parallel => x,
                PyramidMode::Sequential => h,
            };
            h = conv.forward(s, input)?.mul_scalar(s.var(gate))?;
            outs.push(h);
        }
        Ok(outs)
    }

    /// Combined features before normalization.
    pub fn forward_pre_norm<'t>(&self, s: &Session<'_, 't>, x: Var<'t>) -> Result<Var<'t>> {
        let outs = self.branch_outputs(s, x)?;
        combine(self.mode, &outs)
    }

    pub fn forward<'t>(&self, s: &Session<'_, 't>, x: Var<'t>) -> Result<Var<'t>> {
        let pre = self.forward_pre_norm(s, x)?;
        self.norm.forward(s, pre)?.relu()
    }
}

pub(crate) fn combine<'t>(mode: PyramidMode, outs: &[Var<'t>]) -> Result<Var<'t>> {
    match mode {
        PyramidMode::Parallel => {
            let mut acc = outs[0];
            for &o in &outs[1..] {
                acc = acc.add(o)?;
            }
            Ok(acc)
        }
        PyramidMode::Sequential => Ok(*outs.last().expect("non-empty pyramid")),
    }
}
