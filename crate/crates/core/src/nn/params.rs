use std::cell::RefCell;

use crate::autodiff::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::rng::{self, SeededRng};
use crate::tensor::Tensor;

/// Index of a tensor in a [`Params`] store.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub tensor: Tensor,
    /// `false` for buffers such as batch-norm running statistics.
    pub trainable: bool,
}

/// Owns every parameter and buffer of a network, in registration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Params {
    entries: Vec<ParamEntry>,
}

impl Params {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor, trainable: bool) -> ParamId {
        self.entries.push(ParamEntry { name: name.into(), tensor, trainable });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].tensor
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    /// Number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.entries.iter().filter(|e| e.trainable).map(|e| e.tensor.numel()).sum()
    }

    /// Tensors in registration order (trainable and buffers alike).
    pub fn tensors(&self) -> Vec<Tensor> {
        self.entries.iter().map(|e| e.tensor.clone()).collect()
    }

    /// Replace the tensor behind `id`, keeping its shape.
    pub fn set(&mut self, id: ParamId, tensor: Tensor) -> Result<()> {
        let slot = &mut self.entries[id.0];
        if slot.tensor.shape() != tensor.shape() {
            return Err(Error::shape(format!(
                "parameter `{}` has shape {}, got {}",
                slot.name,
                slot.tensor.shape(),
                tensor.shape()
            )));
        }
        slot.tensor = tensor;
        Ok(())
    }

    pub(crate) fn apply_bn_updates(&mut self, updates: Vec<BnUpdate>) {
        for u in updates {
            let m = u.momentum;
            let unbias = u.count as f64 / (u.count as f64 - 1.0);
            for (r, &bm) in self.get_mut(u.running_mean).data_mut().iter_mut().zip(&u.batch_mean) {
                *r = (1.0 - m) * *r + m * bm;
            }
            for (r, &bv) in self.get_mut(u.running_var).data_mut().iter_mut().zip(&u.batch_var) {
                *r = (1.0 - m) * *r + m * bv * unbias;
            }
        }
    }
}

/// Whether batch normalization uses batch statistics (and updates its
/// running estimates) or the stored running statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Running-statistic update produced by one train-mode batch norm call.
#[derive(Clone, Debug)]
pub struct BnUpdate {
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub batch_mean: Vec<f64>,
    pub batch_var: Vec<f64>,
    pub count: usize,
    pub momentum: f64,
}

/// One forward pass: the tape, the parameters bound onto it, and the mode.
pub struct Session<'a, 't> {
    tape: &'t Tape,
    params: &'a Params,
    vars: Vec<Var<'t>>,
    mode: Mode,
    bn_updates: RefCell<Vec<BnUpdate>>,
}

impl<'a, 't> Session<'a, 't> {
    /// Bind trainable tensors as differentiable leaves and buffers as constants.
    pub fn new(tape: &'t Tape, params: &'a Params, mode: Mode) -> Self {
        let vars = params
            .entries
            .iter()
            .map(|e| if e.trainable { tape.param(e.tensor.clone()) } else { tape.constant(e.tensor.clone()) })
            .collect();
        Session { tape, params, vars, mode, bn_updates: RefCell::new(Vec::new()) }
    }

    /// Use caller-provided variables (one per entry, in order) instead of
    /// binding fresh leaves. Lets finite-difference checks perturb parameters.
    pub fn with_vars(tape: &'t Tape, params: &'a Params, vars: Vec<Var<'t>>, mode: Mode) -> Result<Self> {
        if vars.len() != params.len() {
            return Err(Error::shape(format!("{} variables for {} parameters", vars.len(), params.len())));
        }
        Ok(Session { tape, params, vars, mode, bn_updates: RefCell::new(Vec::new()) })
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn params(&self) -> &'a Params {
        self.params
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn var(&self, id: ParamId) -> Var<'t> {
        self.vars[id.0]
    }

    pub fn constant(&self, t: Tensor) -> Var<'t> {
        self.tape.constant(t)
    }

    pub(crate) fn push_bn_update(&self, u: BnUpdate) {
        self.bn_updates.borrow_mut().push(u);
    }

    pub fn take_bn_updates(&self) -> Vec<BnUpdate> {
        std::mem::take(&mut self.bn_updates.borrow_mut())
    }

    /// Gradient for every entry; `None` for buffers.
    pub fn collect_grads(&self, grads: &mut Gradients) -> Vec<Option<Tensor>> {
        self.params
            .entries
            .iter()
            .zip(&self.vars)
            .map(|(e, v)| if e.trainable { grads.take(*v) } else { None })
            .collect()
    }
}

/// Kaiming-uniform fan-in initialization: `U(-sqrt(6/fan_in), sqrt(6/fan_in))`.
pub fn kaiming_uniform(rng: &mut SeededRng, dims: &[usize], fan_in: usize) -> Result<Tensor> {
    let bound = (6.0 / fan_in as f64).sqrt();
    Tensor::from_fn(dims, |_| rng::uniform(rng, -bound, bound))
}
