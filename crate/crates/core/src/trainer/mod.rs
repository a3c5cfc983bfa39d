//! Optimization loop, datasets, synthetic data and experiment pipelines.

mod data;
mod optim;
mod pipeline;
mod synth;

pub use data::{batch_tensor, load_samples, split_indices, DatasetManifest, Label, ManifestRow, Sample, Source};
pub use optim::{Optimizer, OptimizerKind, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
pub use pipeline::{
    read_epochs_csv, run_eval, run_preprocess, run_synth, run_train, write_epochs_csv, ExperimentConfig,
    PreprocessConfig, EPOCHS_HEADER,
};
pub use synth::{synth_dataset, synth_sample, synth_samples, SynthConfig, SynthSample};

use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::losses::{total_loss, LossWeights};
use crate::metrics::{
    confusion_from_scores, metrics_from_confusion, roc_points, ConfusionMatrix, MetricReport, RocCurve,
};
use crate::model::{build_paacn, ModelConfig, PaacnModel};
use crate::nn::{Mode, Session};
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub loss: LossWeights,
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Training fraction of the seeded split.
    pub split: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::desk(),
            loss: LossWeights::default(),
            optimizer: OptimizerKind::Adam,
            lr: 1e-3,
            batch_size: 16,
            epochs: 200,
            seed: 0,
            split: 0.8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("lr must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        if self.epochs == 0 {
            return Err(Error::config("epochs must be at least 1"));
        }
        if !(self.split > 0.0 && self.split < 1.0) {
            return Err(Error::config("split must lie in (0, 1)"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Train-mode loss and accuracy on the training split after the epoch,
    /// in fixed batches with no updates.
    pub train_loss: f64,
    pub train_acc: f64,
    /// Infer-mode loss and accuracy on the held-out split after the epoch.
    pub test_loss: f64,
    pub test_acc: f64,
}

pub struct TrainOutcome {
    pub model: PaacnModel,
    pub history: Vec<EpochRecord>,
    pub train_indices: Vec<usize>,
    pub test_indices: Vec<usize>,
}

fn correct(probs: &[f64], labels: &[usize]) -> usize {
    probs.chunks(2).zip(labels).filter(|(p, &l)| usize::from(p[1] >= 0.5) == l).count()
}

/// Consecutive batches of `size`; a short remainder joins the last full batch.
pub fn batches(order: &[usize], size: usize) -> Vec<&[usize]> {
    let full = (order.len() / size).max(1);
    (0..full).map(|b| if b + 1 == full { &order[b * size..] } else { &order[b * size..(b + 1) * size] }).collect()
}

/// Train on a seeded split of `samples`; `on_epoch` sees each record as it is produced.
pub fn train(cfg: &TrainConfig, samples: &[Sample], mut on_epoch: impl FnMut(&EpochRecord)) -> Result<TrainOutcome> {
    cfg.validate()?;
    let (train_idx, test_idx) = split_indices(samples.len(), cfg.split, cfg.seed)?;
    let s = cfg.model.input_size;
    if let Some(bad) = samples.iter().find(|x| x.input.dims() != [1, s, s]) {
        return Err(Error::shape(format!("sample {} is {}, model expects [1, {s}, {s}]", bad.id, bad.input.shape())));
    }
    let mut model = build_paacn(&cfg.model, cfg.seed)?;
    let mut opt = Optimizer::new(cfg.optimizer, cfg.lr)?;
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let order = rng::permutation(&mut rng::stream(cfg.seed, &format!("shuffle/{epoch}")), train_idx.len());
        for chunk in batches(&order, cfg.batch_size) {
            let idx: Vec<usize> = chunk.iter().map(|&i| train_idx[i]).collect();
            let labels: Vec<usize> = idx.iter().map(|&i| samples[i].label).collect();
            let x = batch_tensor(samples, &idx)?;
            let tape = Tape::new();
            let sess = Session::new(&tape, &model.params, Mode::Train);
            let probs = model.forward(&sess, tape.constant(x))?;
            let loss = total_loss(probs, &labels, &cfg.loss)?.total;
            let mut grads = tape.backward(loss)?;
            let grads = sess.collect_grads(&mut grads);
            let updates = sess.take_bn_updates();
            drop(sess);
            opt.step(&mut model.params, &grads)?;
            model.params.apply_bn_updates(updates);
        }
        let fitted = split_loss(&model, samples, &train_idx, cfg, Mode::Train)?;
        let held_out = split_loss(&model, samples, &test_idx, cfg, Mode::Infer)?;
        let rec = EpochRecord {
            epoch,
            train_loss: fitted.0,
            train_acc: fitted.1,
            test_loss: held_out.0,
            test_acc: held_out.1,
        };
        on_epoch(&rec);
        history.push(rec);
    }
    Ok(TrainOutcome { model, history, train_indices: train_idx, test_indices: test_idx })
}

/// `(mean loss, accuracy)` over the chosen samples in fixed batches, without
/// updating anything. Train mode uses batch statistics, infer mode the running ones.
fn split_loss(
    model: &PaacnModel,
    samples: &[Sample],
    idx: &[usize],
    cfg: &TrainConfig,
    mode: Mode,
) -> Result<(f64, f64)> {
    let (mut loss_sum, mut hits) = (0.0, 0usize);
    for chunk in batches(idx, cfg.batch_size) {
        let labels: Vec<usize> = chunk.iter().map(|&i| samples[i].label).collect();
        let tape = Tape::new();
        let sess = Session::new(&tape, &model.params, mode);
        let probs = model.forward(&sess, tape.constant(batch_tensor(samples, chunk)?))?;
        loss_sum += total_loss(probs, &labels, &cfg.loss)?.total.item()? * chunk.len() as f64;
        hits += correct(probs.value().data(), &labels);
    }
    Ok((loss_sum / idx.len() as f64, hits as f64 / idx.len() as f64))
}

pub struct Evaluation {
    /// Malignant-class probability per sample.
    pub scores: Vec<f64>,
    pub labels: Vec<u8>,
    pub confusion: ConfusionMatrix,
    pub report: MetricReport,
    /// `None` when only one class is present.
    pub roc: Option<RocCurve>,
}

pub const DECISION_THRESHOLD: f64 = 0.5;

pub fn evaluate(model: &PaacnModel, samples: &[Sample], batch_size: usize) -> Result<Evaluation> {
    if samples.is_empty() {
        return Err(Error::data("nothing to evaluate"));
    }
    let s = model.config.input_size;
    let mut scores = Vec::with_capacity(samples.len());
    let all: Vec<usize> = (0..samples.len()).collect();
    for chunk in all.chunks(batch_size.max(1)) {
        let x = batch_tensor(samples, chunk)?;
        if x.dims()[2..] != [s, s] {
            return Err(Error::shape(format!("inputs are {:?}, model expects {s}x{s}", &x.dims()[2..])));
        }
        let p = model.predict(&x)?;
        scores.extend(p.data().chunks(2).map(|r| r[1]));
    }
    scores_to_evaluation(scores, samples.iter().map(|x| x.label as u8).collect())
}

pub fn scores_to_evaluation(scores: Vec<f64>, labels: Vec<u8>) -> Result<Evaluation> {
    let confusion = confusion_from_scores(&scores, &labels, DECISION_THRESHOLD)?;
    let report = metrics_from_confusion(&confusion)?;
    let both = labels.contains(&0) && labels.contains(&1);
    let roc = if both { Some(roc_points(&scores, &labels)?) } else { None };
    Ok(Evaluation { scores, labels, confusion, report, roc })
}

/// Trailing moving average with the given window; starts at index `window - 1`.
pub fn moving_average(values: &[f64], window: usize) -> Vec<f64> {
    if window == 0 || values.len() < window {
        return Vec::new();
    }
    values.windows(window).map(|w| w.iter().sum::<f64>() / window as f64).collect()
}
