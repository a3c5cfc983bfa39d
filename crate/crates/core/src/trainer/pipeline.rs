//! File-level steps behind the command-line subcommands.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::data::{load_samples, DatasetManifest, ManifestRow};
use super::synth::{synth_dataset, SynthConfig};
use super::{evaluate, train, EpochRecord, Evaluation, TrainConfig, TrainOutcome};
use crate::error::{Error, Result};
use crate::metrics::write_reports;
use crate::model::PaacnModel;
use crate::preprocess::{augment, denoise_qwt, read_pgm, resize_bilinear, write_pgm, AugmentSpec, DenoiseSpec};

pub const EPOCHS_HEADER: &str = "epoch,train_loss,train_acc,test_loss,test_acc";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessConfig {
    /// Wavelet denoising before resizing; `null` skips it.
    pub denoise: Option<DenoiseSpec>,
    pub size: usize,
    /// `null` writes one output per input.
    pub augment: Option<AugmentSpec>,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig { denoise: Some(DenoiseSpec::default()), size: 32, augment: None }
    }
}

/// Everything a `--config` file may set; omitted sections take defaults.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub synth: SynthConfig,
    pub preprocess: PreprocessConfig,
    pub train: TrainConfig,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: ExperimentConfig = serde_json::from_str(&text)?;
        Ok(cfg)
    }

    /// The seed flag overrides the training seed.
    pub fn with_seed(mut self, seed: Option<u64>) -> Self {
        if let Some(s) = seed {
            self.train.seed = s;
        }
        self
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

pub fn run_synth(cfg: &SynthConfig, seed: u64, out: &Path) -> Result<PathBuf> {
    synth_dataset(cfg, seed, out)?;
    Ok(out.join("manifest.csv"))
}

/// Denoise, resize and optionally augment every manifest image into `out`,
/// writing 16-bit PGMs, `manifest.csv` and `provenance.json`.
pub fn run_preprocess(manifest_path: &Path, cfg: &PreprocessConfig, seed: u64, out: &Path) -> Result<PathBuf> {
    if cfg.size == 0 {
        return Err(Error::config("preprocess size must be positive"));
    }
    let manifest = DatasetManifest::read(manifest_path)?;
    std::fs::create_dir_all(out.join("images"))?;
    let mut rows = Vec::new();
    let mut provenance = Vec::new();
    for row in &manifest.rows {
        let img = read_pgm(&manifest.resolve(row))?;
        let source_id = img.source_id.clone();
        let (img, threshold) = match &cfg.denoise {
            Some(spec) => {
                let (d, t) = denoise_qwt(&img, spec)?;
                (d, Some(t))
            }
            None => (img, None),
        };
        let img = resize_bilinear(&img, cfg.size, cfg.size)?;
        let outputs = match &cfg.augment {
            Some(spec) => augment(&img, &AugmentSpec { output: Some((cfg.size, cfg.size)), ..spec.clone() }, seed)?,
            None => vec![img],
        };
        for (k, o) in outputs.iter().enumerate() {
            let rel = format!("images/{source_id}_{k:02}.pgm");
            write_pgm(o, &out.join(&rel), 65535)?;
            rows.push(ManifestRow { path: rel.clone(), label: row.label, source: row.source });
            provenance.push(json!({
                "source_id": source_id,
                "output": rel,
                "transforms": o.source_id,
                "denoise": cfg.denoise,
                "threshold": threshold,
                "size": cfg.size,
                "seed": seed,
            }));
        }
    }
    let new_manifest = DatasetManifest::new(out, rows)?;
    let path = out.join("manifest.csv");
    new_manifest.write(&path)?;
    write_json(&out.join("provenance.json"), &provenance)?;
    Ok(path)
}

pub fn write_epochs_csv(path: &Path, history: &[EpochRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in history {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_epochs_csv(path: &Path) -> Result<Vec<EpochRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<Vec<EpochRecord>, _>>()?)
}

/// Train from a manifest; writes `epochs.csv`, `checkpoint/` and the held-out
/// rows as `test_manifest.csv` into `out`.
pub fn run_train(
    cfg: &TrainConfig,
    manifest_path: &Path,
    out: &Path,
    on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let manifest = DatasetManifest::read(manifest_path)?;
    if !manifest.has_both_labels() {
        return Err(Error::data("training needs both benign and malignant rows"));
    }
    let samples = load_samples(&manifest, cfg.model.input_size, cfg.model.zscore_input)?;
    let outcome = train(cfg, &samples, on_epoch)?;
    std::fs::create_dir_all(out)?;
    write_epochs_csv(&out.join("epochs.csv"), &outcome.history)?;
    outcome.model.save(&out.join("checkpoint"))?;
    let absolute = |rows: &[usize]| DatasetManifest {
        root: out.to_path_buf(),
        rows: rows
            .iter()
            .map(|&i| {
                let r = &manifest.rows[i];
                ManifestRow { path: manifest.resolve(r).to_string_lossy().into_owned(), ..r.clone() }
            })
            .collect(),
    };
    absolute(&outcome.test_indices).write(&out.join("test_manifest.csv"))?;
    absolute(&outcome.train_indices).write(&out.join("train_manifest.csv"))?;
    let mut cfg_out = cfg.clone();
    cfg_out.model = outcome.model.config.clone();
    write_json(&out.join("train_config.json"), &cfg_out)?;
    Ok(outcome)
}

/// Evaluate a checkpoint on a manifest; writes `metrics.json`,
/// `confusion.json` and (when both classes occur) `roc.csv` into `out`.
pub fn run_eval(checkpoint: &Path, manifest_path: &Path, out: &Path, batch_size: usize) -> Result<Evaluation> {
    let model = PaacnModel::load(checkpoint)?;
    let manifest = DatasetManifest::read(manifest_path)?;
    let samples = load_samples(&manifest, model.config.input_size, model.config.zscore_input)?;
    let eval = evaluate(&model, &samples, batch_size)?;
    write_reports(out, &eval.confusion, &eval.report, eval.roc.as_ref())?;
    Ok(eval)
}
