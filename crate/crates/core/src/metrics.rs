//! Classification metrics: accuracy, macro-averaged F1, and equal error
//! rate for binary scoring tasks.

use crate::error::{Error, Result};

fn check_lengths(op: &'static str, preds: usize, labels: usize) -> Result<()> {
    if preds != labels || preds == 0 {
        return Err(Error::InvalidInput(format!(
            "{op}: need equal non-empty prediction/label lengths, got {preds} and {labels}"
        )));
    }
    Ok(())
}

pub fn accuracy(preds: &[usize], labels: &[usize]) -> Result<f64> {
    check_lengths("accuracy", preds.len(), labels.len())?;
    let correct = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(correct as f64 / preds.len() as f64)
}

/// Row = true label, column = prediction.
pub fn confusion_matrix(preds: &[usize], labels: &[usize], classes: usize) -> Result<Vec<Vec<usize>>> {
    check_lengths("confusion_matrix", preds.len(), labels.len())?;
    let mut m = vec![vec![0usize; classes]; classes];
    for (&p, &l) in preds.iter().zip(labels) {
        if p >= classes || l >= classes {
            return Err(Error::InvalidInput(format!(
                "confusion_matrix: prediction {p} / label {l} outside [0, {classes})"
            )));
        }
        m[l][p] += 1;
    }
    Ok(m)
}

/// Unweighted mean of per-class F1. A class absent from both predictions
/// and labels contributes F1 = 0, which keeps the macro average honest on
/// degenerate splits.
pub fn macro_f1(preds: &[usize], labels: &[usize], classes: usize) -> Result<f64> {
    if classes == 0 {
        return Err(Error::InvalidInput("macro_f1: need at least one class".into()));
    }
    let m = confusion_matrix(preds, labels, classes)?;
    let mut total = 0.0;
    for c in 0..classes {
        let tp = m[c][c];
        let fp: usize = (0..classes).filter(|&r| r != c).map(|r| m[r][c]).sum();
        let fn_: usize = (0..classes).filter(|&p| p != c).map(|p| m[c][p]).sum();
        let precision = if tp + fp > 0 { tp as f64 / (tp + fp) as f64 } else { 0.0 };
        let recall = if tp + fn_ > 0 { tp as f64 / (tp + fn_) as f64 } else { 0.0 };
        if precision + recall > 0.0 {
            total += 2.0 * precision * recall / (precision + recall);
        }
    }
    Ok(total / classes as f64)
}

/// Equal error rate. Sweeps a threshold over every distinct score (accept
/// when `score ≥ threshold`), picks the threshold minimizing |FAR − FRR|
/// (ties resolve to the lowest threshold), and returns (FAR + FRR) / 2
/// there, together with the chosen threshold.
pub fn eer_with_threshold(scores: &[f64], labels: &[usize]) -> Result<(f64, f64)> {
    check_lengths("eer", scores.len(), labels.len())?;
    let positives = labels.iter().filter(|&&l| l == 1).count();
    let negatives = labels.iter().filter(|&&l| l == 0).count();
    if positives + negatives != labels.len() {
        return Err(Error::InvalidInput("eer: labels must be 0 or 1".into()));
    }
    if positives == 0 || negatives == 0 {
        return Err(Error::InvalidInput(
            "eer: both label values must be present".into(),
        ));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite { op: "eer" });
    }

    let mut thresholds: Vec<f64> = scores.to_vec();
    thresholds.sort_by(|a, b| a.partial_cmp(b).expect("finite scores"));
    thresholds.dedup();

    let mut best: Option<(f64, f64, f64)> = None; // (|far-frr|, threshold, eer)
    for &t in &thresholds {
        let false_accepts = scores
            .iter()
            .zip(labels)
            .filter(|(s, l)| **l == 0 && **s >= t)
            .count();
        let false_rejects = scores
            .iter()
            .zip(labels)
            .filter(|(s, l)| **l == 1 && **s < t)
            .count();
        let far = false_accepts as f64 / negatives as f64;
        let frr = false_rejects as f64 / positives as f64;
        let gap = (far - frr).abs();
        let eer = (far + frr) / 2.0;
        match best {
            Some((best_gap, _, _)) if gap >= best_gap => {}
            _ => best = Some((gap, t, eer)),
        }
    }
    let (_, threshold, eer) = best.expect("at least one threshold");
    Ok((eer, threshold))
}

pub fn eer(scores: &[f64], labels: &[usize]) -> Result<f64> {
    eer_with_threshold(scores, labels).map(|(v, _)| v)
}
