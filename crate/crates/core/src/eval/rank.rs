use crate::error::{Error, Result};

/// `(AUC, AP)` of positive against negative scores.
///
/// AUC counts correctly ordered (positive, negative) pairs, ties worth one
/// half. AP averages, over positives, the precision at each positive's rank
/// when all scores are sorted in descending order; equal scores keep their
/// input order with positives listed before negatives.
pub fn rank_metrics(pos: &[f64], neg: &[f64]) -> Result<(f64, f64)> {
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::Invalid(
            "rank metrics need at least one positive and one negative score".into(),
        ));
    }
    if pos.iter().chain(neg).any(|s| s.is_nan()) {
        return Err(Error::NonFinite("ranking score".into()));
    }

    let mut sorted_neg = neg.to_vec();
    sorted_neg.sort_by(f64::total_cmp);
    let mut wins = 0.0;
    for &s in pos {
        let below = sorted_neg.partition_point(|&x| x < s);
        let upto = sorted_neg.partition_point(|&x| x <= s);
        wins += below as f64 + 0.5 * (upto - below) as f64;
    }
    let auc = wins / (pos.len() * neg.len()) as f64;

    let mut all: Vec<(f64, bool)> = pos
        .iter()
        .map(|&s| (s, true))
        .chain(neg.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut hits = 0usize;
    let mut ap = 0.0;
    for (rank, &(_, is_pos)) in all.iter().enumerate() {
        if is_pos {
            hits += 1;
            ap += hits as f64 / (rank + 1) as f64;
        }
    }
    Ok((auc, ap / pos.len() as f64))
}
