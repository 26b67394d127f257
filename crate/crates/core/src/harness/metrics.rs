//! Threshold-free ranking metrics and the keep rate.
//!
//! Tie conventions: AUROC gives half credit to tied positive/negative pairs;
//! AP ranks by descending score with ties kept in input order.

use crate::error::{Error, Result};

fn class_counts(scores: &[f64], labels: &[bool]) -> Result<(u64, u64)> {
    if scores.len() != labels.len() {
        return Err(Error::shape(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::NonFinite("metric scores".into()));
    }
    let pos = labels.iter().filter(|&&l| l).count() as u64;
    Ok((pos, labels.len() as u64 - pos))
}

/// Mann–Whitney statistic `P(s⁺ > s⁻) + ½·P(s⁺ = s⁻)`, with positives the
/// `true` labels.
///
/// Twice the U statistic is an integer (sum of doubled mid-ranks), so the
/// result is one exact division.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let (pos, neg) = class_counts(scores, labels)?;
    if pos == 0 || neg == 0 {
        return Err(Error::Metric("AUROC needs both classes".into()));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Doubled mid-rank of a tie block covering 1-based ranks lo..=hi is lo + hi.
    let mut twice_rank_sum: u64 = 0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let doubled = (i + 1 + j + 1) as u64;
        let positives = idx[i..=j].iter().filter(|&&k| labels[k]).count() as u64;
        twice_rank_sum += doubled * positives;
        i = j + 1;
    }
    let twice_u = twice_rank_sum - pos * (pos + 1);
    Ok(twice_u as f64 / (2 * pos * neg) as f64)
}

/// Descending-score ranking with ties in input order.
pub fn ranking(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    idx
}

/// `Σ_k (R_k − R_{k−1})·P_k`: mean precision at the rank of each positive.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let (pos, _) = class_counts(scores, labels)?;
    if pos == 0 {
        return Err(Error::Metric("average precision needs at least one positive".into()));
    }
    let mut tp = 0u64;
    let mut sum = 0.0f64;
    for (k, &i) in ranking(scores).iter().enumerate() {
        if labels[i] {
            tp += 1;
            sum += tp as f64 / (k + 1) as f64;
        }
    }
    Ok(sum / pos as f64)
}

/// Fraction of `true` (kept) decisions.
pub fn keep_rate(kept: &[bool]) -> Result<f64> {
    if kept.is_empty() {
        return Err(Error::Empty("keep rate of an empty stream".into()));
    }
    Ok(kept.iter().filter(|&&k| k).count() as f64 / kept.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_values() {
        assert_eq!(auroc(&[0.1, 0.2, 0.8, 0.9], &[false, false, true, true]).unwrap(), 1.0);
        assert_eq!(auroc(&[0.9, 0.8, 0.2, 0.1], &[false, false, true, true]).unwrap(), 0.0);
        assert_eq!(auroc(&[0.5, 0.5], &[true, false]).unwrap(), 0.5);
        assert!(auroc(&[0.1, 0.2], &[true, true]).is_err());
        assert_eq!(average_precision(&[0.9, 0.8, 0.1], &[true, true, false]).unwrap(), 1.0);
        // Single positive at rank 3 of 4.
        assert_eq!(average_precision(&[0.9, 0.8, 0.7, 0.1], &[false, false, true, false]).unwrap(), 1.0 / 3.0);
        // Ties: input order decides, so the positive listed second ranks second.
        assert_eq!(average_precision(&[0.5, 0.5], &[false, true]).unwrap(), 0.5);
        assert!(average_precision(&[0.5], &[false]).is_err());
        assert_eq!(keep_rate(&[true, true, false, true]).unwrap(), 0.75);
        assert!(keep_rate(&[]).is_err());
    }
}
