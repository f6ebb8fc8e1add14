//! Word error rate and the evaluation metrics: MAE, Pearson, NDCG, F1.

use crate::errors::{Result, ZiqeError};

/// Threshold below which a transcription counts as "acceptable".
pub const ACCEPTABLE_WER: f64 = 0.14;

/// Aggregated evaluation results.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    /// Mean absolute error, ×100 when `scale_percent` was set.
    pub mae: f64,
    pub pearson: f64,
    pub ndcg: f64,
    pub f1: f64,
    pub count: usize,
}

impl EvalReport {
    /// Flat human-readable key-value block.
    pub fn to_text(&self) -> String {
        format!(
            "count: {}\nmae: {:.6}\npearson: {:.6}\nndcg: {:.6}\nf1: {:.6}\n# ndcg gain 2^(1-min(wer,1))-1, discount 1/log2(rank+1); f1 threshold {}\n",
            self.count, self.mae, self.pearson, self.ndcg, self.f1, ACCEPTABLE_WER
        )
    }

    /// Single-line machine-readable record.
    pub fn to_record(&self) -> String {
        format!(
            "count={}\tmae={:.6}\tpearson={:.6}\tndcg={:.6}\tf1={:.6}",
            self.count, self.mae, self.pearson, self.ndcg, self.f1
        )
    }
}

/// Word error rate: (substitutions + deletions + insertions) / |reference|,
/// from the minimal unit-cost edit distance. Can exceed 1.
pub fn word_error_rate(reference: &[u32], hypothesis: &[u32]) -> Result<f64> {
    if reference.is_empty() {
        return Err(ZiqeError::domain("empty reference in WER"));
    }
    let (n, m) = (reference.len(), hypothesis.len());
    let mut prev: Vec<usize> = (0..=m).collect();
    let mut cur = vec![0usize; m + 1];
    for i in 1..=n {
        cur[0] = i;
        for j in 1..=m {
            let sub = prev[j - 1] + usize::from(reference[i - 1] != hypothesis[j - 1]);
            cur[j] = sub.min(prev[j] + 1).min(cur[j - 1] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    Ok(prev[m] as f64 / n as f64)
}

/// Mean absolute error, ×100 when `scale_percent` is set.
pub fn mae(predictions: &[f64], labels: &[f64], scale_percent: bool) -> Result<f64> {
    if predictions.len() != labels.len() || predictions.is_empty() {
        return Err(ZiqeError::shape(format!(
            "mae: {} predictions vs {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    let sum: f64 = predictions
        .iter()
        .zip(labels)
        .map(|(p, l)| (p - l).abs())
        .sum();
    let v = sum / predictions.len() as f64;
    Ok(if scale_percent { v * 100.0 } else { v })
}

/// Sample Pearson correlation coefficient.
pub fn pearson(predictions: &[f64], labels: &[f64]) -> Result<f64> {
    if predictions.len() != labels.len() || predictions.len() < 2 {
        return Err(ZiqeError::shape("pearson needs two equal-length vectors of length >= 2"));
    }
    let n = predictions.len() as f64;
    let mp = predictions.iter().sum::<f64>() / n;
    let ml = labels.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vp = 0.0;
    let mut vl = 0.0;
    for (p, l) in predictions.iter().zip(labels) {
        cov += (p - mp) * (l - ml);
        vp += (p - mp) * (p - mp);
        vl += (l - ml) * (l - ml);
    }
    if vp == 0.0 || vl == 0.0 {
        return Err(ZiqeError::domain("undefined correlation for constant input"));
    }
    Ok(cov / (vp * vl).sqrt())
}

/// NDCG@k for WER prediction.
///
/// Items are ranked by ascending predicted WER (ties broken by input
/// order); relevance is 1 − min(true WER, 1); gain 2^r − 1 with discount
/// 1/log₂(rank+1), normalized by the ideal ordering. All-zero relevance is
/// defined as 1.
pub fn ndcg(predicted: &[f64], true_wer: &[f64], k: usize) -> Result<f64> {
    if predicted.len() != true_wer.len() || k > predicted.len() || predicted.is_empty() {
        return Err(ZiqeError::shape(format!(
            "ndcg: {} predictions, {} labels, k={k}",
            predicted.len(),
            true_wer.len()
        )));
    }
    let relevance: Vec<f64> = true_wer.iter().map(|&w| 1.0 - w.min(1.0)).collect();
    let gain_at = |order: &[usize]| -> f64 {
        order
            .iter()
            .take(k)
            .enumerate()
            .map(|(rank, &i)| {
                ((2.0f64).powf(relevance[i]) - 1.0) / ((rank + 2) as f64).log2()
            })
            .sum()
    };
    let mut by_pred: Vec<usize> = (0..predicted.len()).collect();
    by_pred.sort_by(|&a, &b| predicted[a].partial_cmp(&predicted[b]).unwrap());
    let mut ideal: Vec<usize> = (0..predicted.len()).collect();
    ideal.sort_by(|&a, &b| relevance[b].partial_cmp(&relevance[a]).unwrap());
    let idcg = gain_at(&ideal);
    if idcg == 0.0 {
        return Ok(1.0);
    }
    Ok(gain_at(&by_pred) / idcg)
}

/// F1 of the "acceptable" class after thresholding both predicted and true
/// WER at `tau` (≤ counts as acceptable). Returns 0 when precision and
/// recall are both undefined or zero.
pub fn f1_at_threshold(predicted: &[f64], true_wer: &[f64], tau: f64) -> Result<f64> {
    if predicted.len() != true_wer.len() {
        return Err(ZiqeError::shape(format!(
            "f1: {} predictions vs {} labels",
            predicted.len(),
            true_wer.len()
        )));
    }
    let mut tp = 0.0;
    let mut fp = 0.0;
    let mut fn_ = 0.0;
    for (p, t) in predicted.iter().zip(true_wer) {
        let pp = *p <= tau;
        let tt = *t <= tau;
        match (pp, tt) {
            (true, true) => tp += 1.0,
            (true, false) => fp += 1.0,
            (false, true) => fn_ += 1.0,
            (false, false) => {}
        }
    }
    if tp == 0.0 {
        return Ok(0.0);
    }
    let precision = tp / (tp + fp);
    let recall = tp / (tp + fn_);
    Ok(2.0 * precision * recall / (precision + recall))
}

/// Full report at NDCG@all and the standard acceptability threshold.
pub fn evaluate(predictions: &[f64], labels: &[f64], scale_percent: bool) -> Result<EvalReport> {
    Ok(EvalReport {
        mae: mae(predictions, labels, scale_percent)?,
        pearson: pearson(predictions, labels)?,
        ndcg: ndcg(predictions, labels, predictions.len())?,
        f1: f1_at_threshold(predictions, labels, ACCEPTABLE_WER)?,
        count: predictions.len(),
    })
}
