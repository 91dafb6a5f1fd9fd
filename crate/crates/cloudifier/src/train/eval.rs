//! Pixel-level confusion evaluation with per-dataset-kind rows.

use rayon::prelude::*;
use serde::Serialize;

use super::{batch_tensor, Sample};
use crate::error::Result;
use crate::graph::Network;

/// Which side of the benchmark a dataset belongs to: rendered (artificial)
/// scenes or the sketch stand-in for hand-drawn (natural) ones.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Artificial,
    Natural,
}

impl DatasetKind {
    pub fn name(&self) -> &'static str {
        match self {
            DatasetKind::Artificial => "artificial",
            DatasetKind::Natural => "natural",
        }
    }
}

/// Metrics for one dataset kind. Accuracy is trace/sum of the confusion
/// matrix; recall_k is confusion[k][k] over row k, absent (not zero) for
/// classes with no pixels.
#[derive(Clone, Debug, Serialize)]
pub struct EvalRow {
    pub kind: String,
    pub observations: usize,
    pub pixels: u64,
    pub pixel_accuracy: f64,
    pub per_class_recall: Vec<Option<f64>>,
    pub macro_recall: f64,
    pub scene_top1: f64,
    pub confusion: Vec<Vec<u64>>,
}

#[derive(Clone, Debug, Serialize)]
pub struct EvalReport {
    pub num_classes: usize,
    pub rows: Vec<EvalRow>,
}

impl EvalReport {
    pub fn row(&self, kind: &str) -> Option<&EvalRow> {
        self.rows.iter().find(|r| r.kind == kind)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialization")
    }
}

fn confusion_for(net: &Network, samples: &[Sample], classes: usize) -> Result<(Vec<Vec<u64>>, u64)> {
    let per_sample: Result<Vec<(Vec<Vec<u64>>, u64)>> = samples
        .par_iter()
        .map(|s| {
            let (x, labels) = batch_tensor(&[s])?;
            let logits = net.infer(&x)?;
            let c = logits.shape().c();
            let mut m = vec![vec![0u64; classes]; classes];
            let mut scene_counts = vec![0u64; classes];
            for (fiber, &label) in logits.data().chunks_exact(c).zip(labels.data()) {
                let pred = fiber
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap_or(std::cmp::Ordering::Equal))
                    .map(|(i, _)| i)
                    .unwrap_or(0);
                m[usize::from(label)][pred] += 1;
                scene_counts[pred] += 1;
            }
            // predicted scene label: the most common non-background predicted
            // class, background when nothing else is predicted
            let pred_scene = scene_counts
                .iter()
                .enumerate()
                .skip(1)
                .filter(|(_, &n)| n > 0)
                .max_by_key(|(i, &n)| (n, classes - i))
                .map(|(i, _)| i as u16)
                .unwrap_or(0);
            Ok((m, u64::from(pred_scene == s.scene_label)))
        })
        .collect();

    let mut confusion = vec![vec![0u64; classes]; classes];
    let mut scene_hits = 0u64;
    for (m, hit) in per_sample? {
        for (row, src) in confusion.iter_mut().zip(m) {
            for (dst, v) in row.iter_mut().zip(src) {
                *dst += v;
            }
        }
        scene_hits += hit;
    }
    Ok((confusion, scene_hits))
}

fn row_from_confusion(kind: String, observations: usize, confusion: Vec<Vec<u64>>, scene_hits: u64) -> EvalRow {
    let classes = confusion.len();
    let total: u64 = confusion.iter().flatten().sum();
    let trace: u64 = (0..classes).map(|k| confusion[k][k]).sum();
    let per_class_recall: Vec<Option<f64>> = (0..classes)
        .map(|k| {
            let row: u64 = confusion[k].iter().sum();
            (row > 0).then(|| confusion[k][k] as f64 / row as f64)
        })
        .collect();
    let defined: Vec<f64> = per_class_recall.iter().flatten().copied().collect();
    EvalRow {
        kind,
        observations,
        pixels: total,
        pixel_accuracy: if total > 0 { trace as f64 / total as f64 } else { 0.0 },
        macro_recall: if defined.is_empty() { 0.0 } else { defined.iter().sum::<f64>() / defined.len() as f64 },
        per_class_recall,
        scene_top1: if observations > 0 { scene_hits as f64 / observations as f64 } else { 0.0 },
        confusion,
    }
}

/// Evaluate a network over grouped datasets, producing one row per kind plus
/// an aggregate row. Evaluation is pure and deterministic: observations are
/// sharded across threads and the integer confusion matrices merged
/// additively.
pub fn evaluate(net: &Network, groups: &[(DatasetKind, Vec<Sample>)]) -> Result<EvalReport> {
    let classes = net.num_classes();
    let mut rows = Vec::new();
    let mut all = vec![vec![0u64; classes]; classes];
    let mut all_hits = 0u64;
    let mut all_obs = 0usize;
    for (kind, samples) in groups {
        let (confusion, scene_hits) = confusion_for(net, samples, classes)?;
        for (dst, src) in all.iter_mut().zip(&confusion) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        }
        all_hits += scene_hits;
        all_obs += samples.len();
        rows.push(row_from_confusion(kind.name().to_string(), samples.len(), confusion, scene_hits));
    }
    rows.push(row_from_confusion("all".to_string(), all_obs, all, all_hits));
    Ok(EvalReport { num_classes: classes, rows })
}

/// Text table mirroring the benchmark layout: accuracy and macro recall per
/// dataset kind.
pub fn format_report_table(model: &str, report: &EvalReport) -> String {
    let cell = |kind: &str, f: &dyn Fn(&EvalRow) -> f64| -> String {
        report.row(kind).map_or("    -".into(), |r| format!("{:5.1}%", 100.0 * f(r)))
    };
    let mut out = String::new();
    out.push_str("Model           ArtAcc  ArtRec  NatAcc  NatRec\n");
    out.push_str(&format!(
        "{model:<15} {}  {}  {}  {}\n",
        cell("artificial", &|r| r.pixel_accuracy),
        cell("artificial", &|r| r.macro_recall),
        cell("natural", &|r| r.pixel_accuracy),
        cell("natural", &|r| r.macro_recall),
    ));
    out
}

#[cfg(test)]
pub(crate) fn test_row(confusion: Vec<Vec<u64>>) -> EvalRow {
    row_from_confusion("test".into(), 0, confusion, 0)
}
