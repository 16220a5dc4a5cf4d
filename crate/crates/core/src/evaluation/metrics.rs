use serde::{Deserialize, Serialize};

use crate::recommender::ImpressionEvent;

/// Area under the ROC curve from the rank-sum statistic; tied scores count
/// one half. `None` when either class is absent.
pub fn auc(scores: &[f64], labels: &[bool]) -> Option<f64> {
    assert_eq!(scores.len(), labels.len(), "one label per score");
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return None;
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let mid_rank = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += mid_rank * idx[i..=j].iter().filter(|&&k| labels[k]).count() as f64;
        i = j + 1;
    }
    let (p, n) = (pos as f64, neg as f64);
    Some((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Counts taken directly from a logged set of impressions.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplayMetrics {
    pub impressions: usize,
    pub clicks: usize,
    pub conversions: usize,
    pub ctr: f64,
    pub cr: f64,
}

pub fn replay(log: &[ImpressionEvent]) -> ReplayMetrics {
    let clicks = log.iter().filter(|e| e.clicked).count();
    let conversions = log.iter().filter(|e| e.converted).count();
    let rate = |x: usize| if log.is_empty() { 0.0 } else { x as f64 / log.len() as f64 };
    ReplayMetrics { impressions: log.len(), clicks, conversions, ctr: rate(clicks), cr: rate(conversions) }
}
