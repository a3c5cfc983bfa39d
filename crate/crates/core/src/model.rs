//! Multi-scale fusion and the assembled classifier.
//!
//! Pipeline: atrous pyramid, channel attention, then two branches on the
//! half-resolution grid (average-pooled attention features, and a 1x1
//! channel-expanding convolution followed by max pooling), fused by
//! concatenation or summation, tokenized for self-attention, flattened, and
//! classified by a two-layer dense head.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attention::ChannelAttention;
use crate::autodiff::{concat_channels, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{
    avg_pool2d, max_pool2d, pool_extent, Activation, AdaptiveAtrousBlock, AtrousConv2d, Dense, Mode, Padding, Params,
    PyramidMode, Session,
};
use crate::rng;
use crate::tensor::Tensor;
use crate::transformer::{pool_factor, tokens_from_featuremap, SelfAttention};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    Concat,
    Sum,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub input_size: usize,
    pub base_channels: usize,
    pub expand_channels: usize,
    pub dilation_rates: Vec<usize>,
    pub attention_ratio: usize,
    pub token_budget: usize,
    /// Query/key/value width of the self-attention layer.
    pub attention_dim: usize,
    pub dense_units: usize,
    pub classes: usize,
    pub fusion_mode: FusionMode,
    pub pyramid_mode: PyramidMode,
    /// Inputs are z-score normalized per image when loaded.
    pub zscore_input: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::desk()
    }
}

impl ModelConfig {
    /// 32x32 input with narrow widths, small enough to train on a CPU in minutes.
    pub fn desk() -> Self {
        ModelConfig {
            input_size: 32,
            base_channels: 8,
            expand_channels: 16,
            dilation_rates: vec![1, 2, 3],
            attention_ratio: 4,
            token_budget: 64,
            attention_dim: 16,
            dense_units: 32,
            classes: 2,
            fusion_mode: FusionMode::Concat,
            pyramid_mode: PyramidMode::Parallel,
            zscore_input: true,
        }
    }

    /// Full-width network at 227x227.
    pub fn full() -> Self {
        ModelConfig {
            input_size: 227,
            base_channels: 64,
            expand_channels: 128,
            dilation_rates: vec![1, 2, 3],
            attention_ratio: 8,
            token_budget: 256,
            attention_dim: 64,
            dense_units: 256,
            classes: 2,
            fusion_mode: FusionMode::Concat,
            pyramid_mode: PyramidMode::Parallel,
            zscore_input: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("input_size", self.input_size),
            ("base_channels", self.base_channels),
            ("expand_channels", self.expand_channels),
            ("attention_ratio", self.attention_ratio),
            ("token_budget", self.token_budget),
            ("attention_dim", self.attention_dim),
            ("dense_units", self.dense_units),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::config(format!("{name} must be positive")));
        }
        if self.input_size < 2 {
            return Err(Error::config("input_size must be at least 2"));
        }
        if self.dilation_rates.is_empty() || self.dilation_rates.contains(&0) {
            return Err(Error::config("dilation_rates must be a nonempty list of positive rates"));
        }
        if self.classes != 2 {
            return Err(Error::config(format!("only two classes are supported, got {}", self.classes)));
        }
        if !self.base_channels.is_multiple_of(self.attention_ratio) {
            return Err(Error::config(format!(
                "attention_ratio {} does not divide base_channels {}",
                self.attention_ratio, self.base_channels
            )));
        }
        if self.fusion_mode == FusionMode::Sum && self.base_channels != self.expand_channels {
            return Err(Error::config("sum fusion needs base_channels == expand_channels"));
        }
        pool_factor(self.half_size(), self.half_size(), self.token_budget)?;
        Ok(())
    }

    pub fn half_size(&self) -> usize {
        pool_extent(self.input_size, 2, 2)
    }

    pub fn fused_channels(&self) -> usize {
        match self.fusion_mode {
            FusionMode::Concat => self.base_channels + self.expand_channels,
            FusionMode::Sum => self.base_channels,
        }
    }

    /// `(tokens, token width)` entering self-attention.
    pub fn token_shape(&self) -> Result<(usize, usize)> {
        let h = self.half_size();
        let f = pool_factor(h, h, self.token_budget)?;
        Ok(((h / f) * (h / f), self.fused_channels()))
    }

    /// Per-sample output shape of every stage, computed from the config alone.
    pub fn stage_shapes(&self) -> Result<Vec<Stage>> {
        let (s, h) = (self.input_size, self.half_size());
        let (b, e, f) = (self.base_channels, self.expand_channels, self.fused_channels());
        let (t, d) = self.token_shape()?;
        let mut stages: Vec<Stage> =
            self.dilation_rates.iter().map(|r| Stage::new(format!("atrous_r{r}"), &[b, s, s])).collect();
        stages.extend([
            Stage::new("pyramid", &[b, s, s]),
            Stage::new("channel_attention", &[b, s, s]),
            Stage::new("downsampled", &[b, h, h]),
            Stage::new("pool_expand", &[e, h, h]),
            Stage::new("fused", &[f, h, h]),
            Stage::new("tokens", &[t, d]),
            Stage::new("self_attention", &[t, d]),
            Stage::new("flatten", &[t * d]),
            Stage::new("dense", &[self.dense_units]),
            Stage::new("softmax", &[self.classes]),
        ]);
        Ok(stages)
    }
}

/// Named per-sample output shape.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stage {
    pub name: String,
    pub dims: Vec<usize>,
}

impl Stage {
    fn new(name: impl Into<String>, dims: &[usize]) -> Self {
        Stage { name: name.into(), dims: dims.to_vec() }
    }
}

/// Channel-axis concatenation of `[C_i, H, W]` (or batched) maps, in order.
pub fn fuse_concat<'t>(features: &[Var<'t>]) -> Result<Var<'t>> {
    let dims: Vec<Vec<usize>> = features.iter().map(|f| f.dims()).collect();
    if let Some(first) = dims.first() {
        let spatial = |d: &Vec<usize>| d[d.len().saturating_sub(2)..].to_vec();
        if dims.iter().any(|d| d.len() != first.len() || spatial(d) != spatial(first) || d.len() < 3) {
            return Err(Error::shape(format!("fusion inputs differ spatially: {dims:?}")));
        }
        if first.len() == 3 {
            let lifted: Vec<Var<'t>> = features
                .iter()
                .map(|f| {
                    let d = f.dims();
                    f.reshape(&[1, d[0], d[1], d[2]])
                })
                .collect::<Result<_>>()?;
            let out = concat_channels(&lifted)?;
            let d = out.dims();
            return out.reshape(&d[1..]);
        }
    }
    concat_channels(features)
}

/// Elementwise sum of equally shaped maps, left fold in argument order.
pub fn fuse_sum<'t>(features: &[Var<'t>]) -> Result<Var<'t>> {
    let (first, rest) = features.split_first().ok_or_else(|| Error::shape("fusion of zero tensors"))?;
    rest.iter().try_fold(*first, |acc, &f| acc.add(f))
}

#[derive(Clone, Debug)]
pub struct PaacnModel {
    pub config: ModelConfig,
    pub seed: u64,
    pub params: Params,
    pub pyramid: AdaptiveAtrousBlock,
    pub attention: ChannelAttention,
    pub expand: AtrousConv2d,
    pub self_attention: SelfAttention,
    pub hidden: Dense,
    pub head: Dense,
}

/// Stage outputs from a traced forward pass.
pub struct Trace<'t> {
    pub stages: Vec<(String, Var<'t>)>,
}

impl Trace<'_> {
    /// Output shapes without the batch axis.
    pub fn shapes(&self) -> Vec<Stage> {
        self.stages.iter().map(|(n, v)| Stage { name: n.clone(), dims: v.dims()[1..].to_vec() }).collect()
    }
}

pub fn build_paacn(cfg: &ModelConfig, seed: u64) -> Result<PaacnModel> {
    cfg.validate()?;
    let mut params = Params::new();
    let mut r = rng::stream(seed, "init");
    let b = cfg.base_channels;
    let pyramid =
        AdaptiveAtrousBlock::new(&mut params, &mut r, "pyramid", 1, b, &cfg.dilation_rates, cfg.pyramid_mode)?;
    let attention = ChannelAttention::new(&mut params, &mut r, "channel_attention", b, cfg.attention_ratio)?;
    let expand = AtrousConv2d::new(&mut params, &mut r, "expand", b, cfg.expand_channels, 1, 1, Padding::Explicit(0))?;
    let (t, d) = cfg.token_shape()?;
    let self_attention = SelfAttention::new(&mut params, &mut r, "self_attention", d, cfg.attention_dim, true, true)?;
    let hidden = Dense::new(&mut params, &mut r, "dense", t * d, cfg.dense_units, Activation::Relu)?;
    let head = Dense::new(&mut params, &mut r, "head", cfg.dense_units, cfg.classes, Activation::Softmax)?;
    Ok(PaacnModel { config: cfg.clone(), seed, params, pyramid, attention, expand, self_attention, hidden, head })
}

impl PaacnModel {
    pub fn parameter_count(&self) -> usize {
        self.params.trainable_count()
    }

    /// `x` is `[B, 1, S, S]`; returns `[B, 2]` class probabilities
    /// (column 1 is malignant).
    pub fn forward<'t>(&self, s: &Session<'_, 't>, x: Var<'t>) -> Result<Var<'t>> {
        Ok(self.forward_traced(s, x)?.stages.pop().expect("nonempty trace").1)
    }

    pub fn forward_traced<'t>(&self, s: &Session<'_, 't>, x: Var<'t>) -> Result<Trace<'t>> {
        let cfg = &self.config;
        let d = x.dims();
        if d.len() != 4 || d[1] != 1 || d[2] != cfg.input_size || d[3] != cfg.input_size {
            return Err(Error::shape(format!("model expects [B, 1, {0}, {0}], got {d:?}", cfg.input_size)));
        }
        let batch = d[0];
        let mut stages = Vec::new();
        let branches = self.pyramid.branch_outputs(s, x)?;
        for (r, &out) in cfg.dilation_rates.iter().zip(&branches) {
            stages.push((format!("atrous_r{r}"), out));
        }
        let combined = match cfg.pyramid_mode {
            PyramidMode::Parallel => fuse_sum(&branches)?,
            PyramidMode::Sequential => *branches.last().expect("nonempty pyramid"),
        };
        let pyramid = self.pyramid.norm.forward(s, combined)?.relu()?;
        stages.push(("pyramid".into(), pyramid));
        let attended = self.attention.forward(s, pyramid)?;
        stages.push(("channel_attention".into(), attended));
        let down = avg_pool2d(attended, 2, 2)?;
        stages.push(("downsampled".into(), down));
        let expanded = max_pool2d(self.expand.forward(s, attended)?.relu()?, 2, 2)?;
        stages.push(("pool_expand".into(), expanded));
        let fused = match cfg.fusion_mode {
            FusionMode::Concat => fuse_concat(&[down, expanded])?,
            FusionMode::Sum => fuse_sum(&[down, expanded])?,
        };
        stages.push(("fused".into(), fused));
        let seq = tokens_from_featuremap(fused, cfg.token_budget)?;
        stages.push(("tokens".into(), seq.tokens));
        let (mixed, _) = self.self_attention.forward(s, &seq)?;
        stages.push(("self_attention".into(), mixed.tokens));
        let flat = mixed.tokens.reshape(&[batch, seq.len() * seq.dim()])?;
        stages.push(("flatten".into(), flat));
        let hidden = self.hidden.forward(s, flat)?;
        stages.push(("dense".into(), hidden));
        let probs = self.head.forward(s, hidden)?;
        stages.push(("softmax".into(), probs));
        Ok(Trace { stages })
    }

    /// Infer-mode probabilities for a `[B, 1, S, S]` batch.
    pub fn predict(&self, batch: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let s = Session::new(&tape, &self.params, Mode::Infer);
        let probs = self.forward(&s, tape.constant(batch.clone()))?;
        Ok((*probs.value()).clone())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let param_dir = dir.join("params");
        std::fs::create_dir_all(&param_dir)?;
        let mut index = Vec::with_capacity(self.params.len());
        for (i, e) in self.params.entries().iter().enumerate() {
            let file = format!("params/{i:03}_{}.ptnsr", e.name);
            e.tensor.save(dir.join(&file))?;
            index.push(ParamRecord {
                index: i,
                name: e.name.clone(),
                file,
                dims: e.tensor.dims().to_vec(),
                trainable: e.trainable,
            });
        }
        let manifest = CheckpointManifest {
            format_version: CHECKPOINT_VERSION,
            seed: self.seed,
            config: self.config.clone(),
            stages: self.config.stage_shapes()?,
            parameter_count: self.parameter_count(),
            parameters: index,
        };
        let mut text = serde_json::to_string_pretty(&manifest)?;
        text.push('\n');
        std::fs::write(dir.join("model.json"), text)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(dir.join("model.json"))?;
        let manifest: CheckpointManifest = serde_json::from_str(&text)?;
        if manifest.format_version != CHECKPOINT_VERSION {
            return Err(Error::data(format!("unsupported checkpoint version {}", manifest.format_version)));
        }
        let mut model = build_paacn(&manifest.config, manifest.seed)?;
        if manifest.parameters.len() != model.params.len() {
            return Err(Error::data(format!(
                "checkpoint lists {} tensors, model has {}",
                manifest.parameters.len(),
                model.params.len()
            )));
        }
        let ids: Vec<_> = model.params.ids().collect();
        for (rec, id) in manifest.parameters.iter().zip(ids) {
            if model.params.entries()[id.index()].name != rec.name {
                return Err(Error::data(format!("checkpoint tensor {} is `{}`", rec.index, rec.name)));
            }
            let t = Tensor::load(dir.join(&rec.file))?;
            model.params.set(id, t).map_err(|e| Error::data(format!("{}: {e}", rec.name)))?;
        }
        Ok(model)
    }
}

#[derive(Serialize, Deserialize)]
struct ParamRecord {
    index: usize,
    name: String,
    file: String,
    dims: Vec<usize>,
    trainable: bool,
}

#[derive(Serialize, Deserialize)]
struct CheckpointManifest {
    format_version: u32,
    seed: u64,
    config: ModelConfig,
    stages: Vec<Stage>,
    parameter_count: usize,
    parameters: Vec<ParamRecord>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check_many;
    use crate::losses::{total_loss, LossWeights};

    fn random(dims: &[usize], seed: u64) -> Tensor {
        let mut r = rng::seeded(seed);
        Tensor::from_fn(dims, |_| rng::uniform(&mut r, 0.0, 1.0)).unwrap()
    }

    fn dims_of(stages: &[Stage], name: &str) -> Vec<usize> {
        stages.iter().find(|s| s.name == name).unwrap_or_else(|| panic!("no stage {name}")).dims.clone()
    }

    #[test]
    fn concat_and_sum_fusion() {
        let tape = Tape::new();
        let a = tape.constant(random(&[64, 113, 113], 0));
        let b = tape.constant(random(&[128, 113, 113], 1));
        assert_eq!(fuse_concat(&[a, b]).unwrap().dims(), vec![192, 113, 113]);
        assert_eq!(fuse_concat(&[a]).unwrap().value().data(), a.value().data());
        let c = tape.constant(random(&[128, 56, 56], 2));
        assert!(matches!(fuse_concat(&[a, c]), Err(Error::Shape(_))));

        let x = tape.constant(random(&[3, 4, 4], 3));
        let z = tape.constant(Tensor::zeros(&[3, 4, 4]).unwrap());
        let y = tape.constant(random(&[3, 4, 4], 4));
        assert_eq!(fuse_sum(&[x, z]).unwrap().value().data(), x.value().data());
        let doubled = fuse_sum(&[x, x]).unwrap().value();
        assert!(doubled.data().iter().zip(x.value().data()).all(|(d, v)| *d == 2.0 * v));
        assert_eq!(fuse_sum(&[x, y]).unwrap().value().data(), fuse_sum(&[y, x]).unwrap().value().data());
        assert!(matches!(fuse_sum(&[x, a]), Err(Error::Shape(_))));
    }

    #[test]
    fn full_width_shapes_at_32() {
        let cfg = ModelConfig { input_size: 32, ..ModelConfig::full() };
        let stages = cfg.stage_shapes().unwrap();
        assert_eq!(dims_of(&stages, "pool_expand"), vec![128, 16, 16]);
        assert_eq!(dims_of(&stages, "fused"), vec![192, 16, 16]);
        assert_eq!(dims_of(&stages, "atrous_r3"), vec![64, 32, 32]);
    }

    #[test]
    fn traced_shapes_match_declared() {
        for cfg in [
            ModelConfig::desk(),
            ModelConfig { pyramid_mode: PyramidMode::Sequential, ..ModelConfig::desk() },
            ModelConfig { fusion_mode: FusionMode::Sum, expand_channels: 8, ..ModelConfig::desk() },
            ModelConfig { input_size: 33, ..ModelConfig::desk() },
        ] {
            let model = build_paacn(&cfg, 0).unwrap();
            let tape = Tape::new();
            let s = Session::new(&tape, &model.params, Mode::Infer);
            let x = tape.constant(random(&[2, 1, cfg.input_size, cfg.input_size], 1));
            let trace = model.forward_traced(&s, x).unwrap();
            assert_eq!(trace.shapes(), cfg.stage_shapes().unwrap());
        }
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig::desk().validate().is_ok());
        assert!(ModelConfig::full().validate().is_ok());
        let bad = [
            ModelConfig { fusion_mode: FusionMode::Sum, ..ModelConfig::desk() },
            ModelConfig { attention_ratio: 3, ..ModelConfig::desk() },
            ModelConfig { classes: 3, ..ModelConfig::desk() },
            ModelConfig { dilation_rates: vec![], ..ModelConfig::desk() },
            ModelConfig { dense_units: 0, ..ModelConfig::desk() },
        ];
        for cfg in bad {
            assert!(matches!(build_paacn(&cfg, 0), Err(Error::Config(_))), "{cfg:?}");
        }
    }

    #[test]
    fn outputs_are_distributions_and_batch_independent() {
        let model = build_paacn(&ModelConfig::desk(), 3).unwrap();
        let batch = random(&[4, 1, 32, 32], 5);
        let p = model.predict(&batch).unwrap();
        for row in p.data().chunks(2) {
            assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
            assert!((row[0] + row[1] - 1.0).abs() < 1e-12);
        }
        let one = Tensor::new(&[1, 1, 32, 32], batch.data()[2 * 1024..3 * 1024].to_vec()).unwrap();
        let p1 = model.predict(&one).unwrap();
        assert!((p1.data()[0] - p.data()[4]).abs() < 1e-12);
        assert!((p1.data()[1] - p.data()[5]).abs() < 1e-12);
        assert_eq!(model.predict(&batch).unwrap(), p);
        assert!(matches!(model.predict(&random(&[1, 1, 16, 16], 0)), Err(Error::Shape(_))));
    }

    #[test]
    fn seeded_builds_are_reproducible() {
        let a = build_paacn(&ModelConfig::desk(), 9).unwrap();
        let b = build_paacn(&ModelConfig::desk(), 9).unwrap();
        let c = build_paacn(&ModelConfig::desk(), 10).unwrap();
        assert_eq!(a.params, b.params);
        assert_ne!(a.params, c.params);
        assert_eq!(a.parameter_count(), c.parameter_count());
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let model = build_paacn(&ModelConfig::desk(), 4).unwrap();
        model.save(dir.path()).unwrap();
        let back = PaacnModel::load(dir.path()).unwrap();
        assert_eq!(back.params, model.params);
        assert_eq!(back.config, model.config);
        let x = random(&[2, 1, 32, 32], 1);
        assert_eq!(back.predict(&x).unwrap(), model.predict(&x).unwrap());
        let json: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join("model.json")).unwrap()).unwrap();
        assert_eq!(json["format_version"], 1);
        assert_eq!(json["parameter_count"], model.parameter_count());
    }

    #[test]
    fn end_to_end_gradient_on_sampled_parameters() {
        let model = build_paacn(&ModelConfig::desk(), 1).unwrap();
        let x = random(&[2, 1, 32, 32], 2);
        let labels = [0usize, 1];
        let mut inputs = model.params.tensors();
        let n = inputs.len();
        inputs.push(x);
        let mut r = rng::seeded(3);
        let mut coords = Vec::new();
        for (i, e) in model.params.entries().iter().enumerate() {
            if e.trainable {
                for c in 0..e.tensor.numel() {
                    if rng::uniform(&mut r, 0.0, 1.0) < 0.002 {
                        coords.push((i, c));
                    }
                }
            }
        }
        let w = LossWeights::default();
        let rep = grad_check_many(
            |tape, v| {
                let s = Session::with_vars(tape, &model.params, v[..n].to_vec(), Mode::Train)?;
                Ok(total_loss(model.forward(&s, v[n])?, &labels, &w)?.total)
            },
            &inputs,
            Some(&coords),
            1e-6,
            1e-4,
        )
        .unwrap();
        assert!(rep.passed, "{rep:?}");
    }
}
