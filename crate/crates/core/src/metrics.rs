use std::io::Write;

use serde::Serialize;

/// One structured log line per epoch and split.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub split: String,
    pub word_accuracy: f64,
    /// Mean loss per head, in `E^V, (S, S^M, E^{V^M}, F) × M` order.
    pub losses: Vec<f64>,
    pub total_loss: f64,
    pub wall_clock_s: f64,
    pub parameters: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub attention: Option<AttentionStats>,
}

/// Mean cross-modal attention mass in the joint enhancement blocks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AttentionStats {
    pub semantic_to_visual: f64,
    pub visual_to_semantic: f64,
}

/// Names matching [`MetricsRecord::losses`] for `m` iterations.
pub fn loss_names(m: usize) -> Vec<String> {
    let mut names = vec!["ev".to_string()];
    for i in 1..=m {
        for h in ["s", "sm", "evm", "f"] {
            names.push(format!("{h}{i}"));
        }
    }
    names
}

pub fn write_jsonl<W: Write>(out: &mut W, record: &MetricsRecord) -> std::io::Result<()> {
    serde_json::to_writer(&mut *out, record)?;
    out.write_all(b"\n")
}

/// Fraction of exact matches.
pub fn word_accuracy<A: AsRef<str>, B: AsRef<str>>(predictions: &[A], labels: &[B]) -> f64 {
    assert_eq!(predictions.len(), labels.len(), "prediction count");
    if labels.is_empty() {
        return 0.0;
    }
    let hits = predictions
        .iter()
        .zip(labels)
        .filter(|(p, l)| p.as_ref().eq_ignore_ascii_case(l.as_ref()))
        .count();
    hits as f64 / labels.len() as f64
}
