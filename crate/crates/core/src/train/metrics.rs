use crate::error::{Error, Result};

/// Probabilities are clamped to `[LOGLOSS_EPS, 1 - LOGLOSS_EPS]` before the log.
pub const LOGLOSS_EPS: f64 = 1e-12;

pub fn logloss(p: f64, y: f64) -> f64 {
    let p = p.clamp(LOGLOSS_EPS, 1.0 - LOGLOSS_EPS);
    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}

/// Mean logloss over a batch.
pub fn mean_logloss(preds: &[f64], labels: &[f64]) -> f64 {
    preds.iter().zip(labels).map(|(&p, &y)| logloss(p, y)).sum::<f64>() / preds.len() as f64
}

/// Rank-based ROC AUC; tied scores count half a win.
///
/// Wins are tallied in integer half-units, so the result is bit-identical to
/// a pairwise count divided by `P * N`.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::shape(format!("{} scores but {} labels", scores.len(), labels.len())));
    }
    if let Some(bad) = labels.iter().find(|&&l| l > 1) {
        return Err(Error::Validation(format!("label {bad} is not 0 or 1")));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::NumericDomain("NaN score".into()));
    }
    let positives = labels.iter().filter(|&&l| l == 1).count() as u128;
    let negatives = labels.len() as u128 - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::UndefinedMetric("AUC needs at least one positive and one negative".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    let mut half_wins: u128 = 0;
    let mut neg_below: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        let (mut pos, mut neg) = (0u128, 0u128);
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] == 1 {
                pos += 1;
            } else {
                neg += 1;
            }
            i += 1;
        }
        half_wins += pos * (2 * neg_below + neg);
        neg_below += neg;
    }
    Ok(half_wins as f64 / (2 * positives * negatives) as f64)
}
