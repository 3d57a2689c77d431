//! Instance-based metrics, per-attribute accuracy, embedding similarity and
//! report files.

use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::decoding::StepTrace;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::vocab::{check_labels, AttributeVocabulary};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub tn: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl ConfusionCounts {
    pub fn from_pair(pred: &[u8], gt: &[u8]) -> Result<Self> {
        if pred.len() != gt.len() {
            return Err(Error::Invalid(format!(
                "prediction has {} labels, ground truth {}",
                pred.len(),
                gt.len()
            )));
        }
        check_labels(pred, gt.len())?;
        check_labels(gt, gt.len())?;
        let mut c = Self::default();
        for (&p, &g) in pred.iter().zip(gt) {
            match (p, g) {
                (1, 1) => c.tp += 1,
                (0, 0) => c.tn += 1,
                (1, 0) => c.fp += 1,
                _ => c.fn_ += 1,
            }
        }
        Ok(c)
    }

    pub fn total(&self) -> usize {
        self.tp + self.tn + self.fp + self.fn_
    }

    /// Precision, recall, F1 and the chosen accuracy. When prediction and
    /// ground truth are both empty every metric is 1; otherwise a zero
    /// denominator yields 0.
    pub fn metrics(&self, variant: MetricVariant) -> InstanceMetrics {
        let both_empty = self.tp + self.fp + self.fn_ == 0;
        let ratio = |num: usize, den: usize| {
            if den > 0 {
                num as f64 / den as f64
            } else if both_empty {
                1.0
            } else {
                0.0
            }
        };
        let precision = ratio(self.tp, self.tp + self.fp);
        let recall = ratio(self.tp, self.tp + self.fn_);
        let accuracy = match variant {
            MetricVariant::Literal => ratio(self.tp + self.tn, self.total()),
            MetricVariant::SetBased => ratio(self.tp, self.tp + self.fp + self.fn_),
        };
        InstanceMetrics {
            accuracy,
            precision,
            recall,
            // 2TP / (2TP + FP + FN), the harmonic mean of P and R in one division.
            f1: ratio(2 * self.tp, 2 * self.tp + self.fp + self.fn_),
        }
    }
}

fn harmonic(p: f64, r: f64) -> f64 {
    if p + r > 0.0 {
        2.0 * p * r / (p + r)
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricVariant {
    /// `(TP + TN) / M`.
    Literal,
    /// `TP / (TP + FP + FN)`.
    #[default]
    SetBased,
}

impl FromStr for MetricVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "literal" => Ok(Self::Literal),
            "set_based" => Ok(Self::SetBased),
            _ => Err(Error::Invalid(format!("unknown metric variant {s:?}"))),
        }
    }
}

impl std::fmt::Display for MetricVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Literal => "literal",
            Self::SetBased => "set_based",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InstanceMetrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

pub fn instance_metrics(pred: &[u8], gt: &[u8], variant: MetricVariant) -> Result<InstanceMetrics> {
    Ok(ConfusionCounts::from_pair(pred, gt)?.metrics(variant))
}

/// Means of accuracy, precision and recall over instances; F1 is the
/// harmonic mean of the averaged precision and recall.
pub fn aggregate_metrics(instances: &[InstanceMetrics]) -> Result<InstanceMetrics> {
    if instances.is_empty() {
        return Err(Error::Invalid("no instances to aggregate".into()));
    }
    let n = instances.len() as f64;
    let mean = |f: fn(&InstanceMetrics) -> f64| instances.iter().map(f).sum::<f64>() / n;
    let precision = mean(|m| m.precision);
    let recall = mean(|m| m.recall);
    Ok(InstanceMetrics {
        accuracy: mean(|m| m.accuracy),
        precision,
        recall,
        f1: harmonic(precision, recall),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub variant: MetricVariant,
    pub instances: usize,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub per_attribute_accuracy: Vec<f64>,
}

pub fn per_attribute_accuracy(preds: &[Vec<u8>], gts: &[Vec<u8>]) -> Result<Vec<f64>> {
    if preds.len() != gts.len() || gts.is_empty() {
        return Err(Error::Invalid(format!(
            "{} predictions for {} ground truths",
            preds.len(),
            gts.len()
        )));
    }
    let m = gts[0].len();
    let mut hits = vec![0usize; m];
    for (p, g) in preds.iter().zip(gts) {
        if p.len() != m || g.len() != m {
            return Err(Error::Invalid("label vectors of different lengths".into()));
        }
        for j in 0..m {
            hits[j] += (p[j] == g[j]) as usize;
        }
    }
    Ok(hits.iter().map(|&h| h as f64 / gts.len() as f64).collect())
}

pub fn evaluate(preds: &[Vec<u8>], gts: &[Vec<u8>], variant: MetricVariant) -> Result<MetricsReport> {
    if preds.len() != gts.len() {
        return Err(Error::Invalid(format!(
            "{} predictions for {} ground truths",
            preds.len(),
            gts.len()
        )));
    }
    let per = preds
        .iter()
        .zip(gts)
        .map(|(p, g)| instance_metrics(p, g, variant))
        .collect::<Result<Vec<_>>>()?;
    let agg = aggregate_metrics(&per)?;
    Ok(MetricsReport {
        variant,
        instances: per.len(),
        accuracy: agg.accuracy,
        precision: agg.precision,
        recall: agg.recall,
        f1: agg.f1,
        per_attribute_accuracy: per_attribute_accuracy(preds, gts)?,
    })
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Invalid(format!("csv output for {}: {other:?}", path.display())),
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(header).map_err(|e| csv_err(path, e))?;
    for r in rows {
        w.write_record(r).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// One header row and one row per report.
pub fn write_reports_csv(path: &Path, reports: &[MetricsReport]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(["variant", "instances", "accuracy", "precision", "recall", "f1"])
        .map_err(|e| csv_err(path, e))?;
    for r in reports {
        w.write_record([
            r.variant.to_string(),
            r.instances.to_string(),
            r.accuracy.to_string(),
            r.precision.to_string(),
            r.recall.to_string(),
            r.f1.to_string(),
        ])
        .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_per_attribute_csv(path: &Path, vocab: &AttributeVocabulary, accuracy: &[f64]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(["attribute", "accuracy"]).map_err(|e| csv_err(path, e))?;
    for (name, a) in vocab.attributes().iter().zip(accuracy) {
        w.write_record([name.as_str(), &a.to_string()]).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityMatrix {
    pub names: Vec<String>,
    pub values: Vec<Vec<f64>>,
}

impl SimilarityMatrix {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
        let header: Vec<&str> = std::iter::once("").chain(self.names.iter().map(String::as_str)).collect();
        w.write_record(&header).map_err(|e| csv_err(path, e))?;
        for (name, row) in self.names.iter().zip(&self.values) {
            let rec: Vec<String> = std::iter::once(name.clone())
                .chain(row.iter().map(|v| v.to_string()))
                .collect();
            w.write_record(&rec).map_err(|e| csv_err(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Pairwise cosine similarity of the rows of `embeddings`.
pub fn similarity_matrix(embeddings: &Tensor, names: &[String]) -> Result<SimilarityMatrix> {
    let (m, _) = embeddings.dims2()?;
    if m < 2 || names.len() != m {
        return Err(Error::Invalid(format!(
            "similarity needs at least two rows with names, got {m} rows and {} names",
            names.len()
        )));
    }
    let norms: Vec<f64> = (0..m)
        .map(|i| embeddings.row(i).iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    if let Some(i) = norms.iter().position(|&n| n == 0.0) {
        return Err(Error::Invalid(format!("attribute {} has a zero-norm embedding", names[i])));
    }
    let mut values = vec![vec![0.0; m]; m];
    for i in 0..m {
        values[i][i] = 1.0;
        for j in i + 1..m {
            let dot: f64 = embeddings.row(i).iter().zip(embeddings.row(j)).map(|(a, b)| a * b).sum();
            let s = (dot / (norms[i] * norms[j])).clamp(-1.0, 1.0);
            values[i][j] = s;
            values[j][i] = s;
        }
    }
    Ok(SimilarityMatrix {
        names: names.to_vec(),
        values,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub prefix: Vec<String>,
    pub chosen: String,
    pub chosen_log_prob: f64,
    pub top: Vec<(String, f64)>,
    pub self_attention: Vec<Vec<Vec<f64>>>,
    pub cross_attention: Vec<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionTrace {
    pub sample: String,
    pub steps: Vec<TraceEntry>,
}

pub fn named_trace(sample: &str, steps: &[StepTrace], vocab: &AttributeVocabulary) -> AttentionTrace {
    AttentionTrace {
        sample: sample.to_string(),
        steps: steps
            .iter()
            .map(|s| TraceEntry {
                prefix: s.prefix.iter().map(|&t| vocab.token_name(t)).collect(),
                chosen: vocab.token_name(s.chosen),
                chosen_log_prob: s.chosen_log_prob,
                top: s.top.iter().map(|&(t, lp)| (vocab.token_name(t), lp)).collect(),
                self_attention: s.self_attention.clone(),
                cross_attention: s.cross_attention.clone(),
            })
            .collect(),
    }
}

pub fn export_attention_trace(traces: &[AttentionTrace], path: &Path) -> Result<()> {
    write_json(path, &traces)
}
