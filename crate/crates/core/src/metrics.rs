//! Binary classification metrics with malignant (label 1) as the positive class.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionMatrix {
    pub fn new(tp: u64, fp: u64, tn: u64, fn_: u64) -> Self {
        ConfusionMatrix { tp, fp, tn, fn_ }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn merge(&self, other: &ConfusionMatrix) -> ConfusionMatrix {
        ConfusionMatrix::new(self.tp + other.tp, self.fp + other.fp, self.tn + other.tn, self.fn_ + other.fn_)
    }

    pub fn to_json(&self) -> Value {
        serde_json::to_value(self).expect("plain integers serialize")
    }
}

fn check_binary(scores: &[f64], labels: &[u8]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::shape(format!("{} scores vs {} labels", scores.len(), labels.len())));
    }
    if labels.iter().any(|&l| l > 1) {
        return Err(Error::domain("labels must be 0 or 1"));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::domain("scores must be finite"));
    }
    Ok(())
}

/// Predicts positive iff `score >= threshold`.
pub fn confusion_from_scores(scores: &[f64], labels: &[u8], threshold: f64) -> Result<ConfusionMatrix> {
    check_binary(scores, labels)?;
    let mut cm = ConfusionMatrix::default();
    for (&s, &l) in scores.iter().zip(labels) {
        match (s >= threshold, l == 1) {
            (true, true) => cm.tp += 1,
            (true, false) => cm.fp += 1,
            (false, false) => cm.tn += 1,
            (false, true) => cm.fn_ += 1,
        }
    }
    Ok(cm)
}

/// Each metric is `None` when its denominator is zero.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricReport {
    pub accuracy: Option<f64>,
    pub precision: Option<f64>,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub f1: Option<f64>,
    pub fpr: Option<f64>,
    pub fnr: Option<f64>,
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

pub fn metrics_from_confusion(cm: &ConfusionMatrix) -> Result<MetricReport> {
    if cm.total() == 0 {
        return Err(Error::domain("empty confusion matrix"));
    }
    let precision = ratio(cm.tp, cm.tp + cm.fp);
    let sensitivity = ratio(cm.tp, cm.tp + cm.fn_);
    let f1 = match (precision, sensitivity) {
        (Some(p), Some(r)) if p + r > 0.0 => Some(2.0 * p * r / (p + r)),
        _ => None,
    };
    Ok(MetricReport {
        accuracy: ratio(cm.tp + cm.tn, cm.total()),
        precision,
        sensitivity,
        specificity: ratio(cm.tn, cm.tn + cm.fp),
        f1,
        fpr: ratio(cm.fp, cm.fp + cm.tn),
        fnr: ratio(cm.fn_, cm.fn_ + cm.tp),
    })
}

/// Percent string with two decimals, or `"undefined"`.
pub fn percent(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{:.2}", 100.0 * x),
        None => "undefined".to_string(),
    }
}

impl MetricReport {
    pub fn entries(&self) -> [(&'static str, Option<f64>); 7] {
        [
            ("accuracy", self.accuracy),
            ("precision", self.precision),
            ("sensitivity", self.sensitivity),
            ("specificity", self.specificity),
            ("f1", self.f1),
            ("fpr", self.fpr),
            ("fnr", self.fnr),
        ]
    }

    /// `{"accuracy": {"value": 0.988, "percent": "98.80"}, ...}`; undefined
    /// metrics carry `null` and `"undefined"`.
    pub fn to_json(&self) -> Value {
        let mut map = serde_json::Map::new();
        for (k, v) in self.entries() {
            map.insert(k.to_string(), json!({ "value": v, "percent": percent(v) }));
        }
        Value::Object(map)
    }

    /// Inverse of `to_json`; reads the `value` fields and ignores extra keys.
    pub fn from_json(v: &Value) -> Result<Self> {
        let get = |k: &str| -> Result<Option<f64>> {
            match v.get(k).and_then(|e| e.get("value")) {
                Some(Value::Null) => Ok(None),
                Some(x) => x.as_f64().map(Some).ok_or_else(|| Error::data(format!("metric `{k}` is not a number"))),
                None => Err(Error::data(format!("metric `{k}` missing"))),
            }
        };
        Ok(MetricReport {
            accuracy: get("accuracy")?,
            precision: get("precision")?,
            sensitivity: get("sensitivity")?,
            specificity: get("specificity")?,
            f1: get("f1")?,
            fpr: get("fpr")?,
            fnr: get("fnr")?,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RocPoint {
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

/// Points ordered by descending threshold, from `(0, 0)` to `(1, 1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct RocCurve {
    pub points: Vec<RocPoint>,
}

pub fn roc_points(scores: &[f64], labels: &[u8]) -> Result<RocCurve> {
    check_binary(scores, labels)?;
    let pos = labels.iter().filter(|&&l| l == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::domain("ROC needs both classes present"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points = vec![RocPoint { threshold: f64::INFINITY, fpr: 0.0, tpr: 0.0 }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let t = scores[order[i]];
        while i < order.len() && scores[order[i]] == t {
            if labels[order[i]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(RocPoint { threshold: t, fpr: fp as f64 / neg as f64, tpr: tp as f64 / pos as f64 });
    }
    Ok(RocCurve { points })
}

impl RocCurve {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["threshold", "fpr", "tpr"])?;
        for p in &self.points {
            w.write_record([p.threshold.to_string(), p.fpr.to_string(), p.tpr.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

pub fn auc_trapezoid(curve: &RocCurve) -> f64 {
    curve.points.windows(2).map(|w| (w[1].fpr - w[0].fpr) * (w[1].tpr + w[0].tpr) / 2.0).sum()
}

/// Writes `metrics.json`, `confusion.json` and `roc.csv` into `dir`.
pub fn write_reports(dir: &Path, cm: &ConfusionMatrix, report: &MetricReport, roc: Option<&RocCurve>) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut metrics = report.to_json();
    if let Some(curve) = roc {
        metrics["auc"] = json!(auc_trapezoid(curve));
        curve.write_csv(&dir.join("roc.csv"))?;
    }
    let mut f = std::fs::File::create(dir.join("metrics.json"))?;
    serde_json::to_writer_pretty(&mut f, &metrics)?;
    writeln!(f)?;
    let mut f = std::fs::File::create(dir.join("confusion.json"))?;
    serde_json::to_writer_pretty(&mut f, &cm.to_json())?;
    writeln!(f)?;
    Ok(())
}
