//! Frame-level AUC/AP and segment mAP at temporal IoU thresholds.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::datamodel::GtSegment;
use crate::error::{Error, Result};
use crate::inference::Proposal;

pub const IOU_THRESHOLDS: [f64; 5] = [0.1, 0.2, 0.3, 0.4, 0.5];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub auc: f64,
    pub ap: f64,
    /// Keyed by the threshold printed with one decimal.
    pub map_at_iou: BTreeMap<String, f64>,
    pub avg_map: f64,
}

fn check_lengths(scores: &[f64], labels: &[bool]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::LengthMismatch(scores.len(), labels.len()));
    }
    Ok(())
}

/// ROC AUC as the probability that a positive outranks a negative, ties
/// counting one half. Exact: computed from doubled integer pair counts.
pub fn frame_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_lengths(scores, labels)?;
    let pos = labels.iter().filter(|&&l| l).count() as u128;
    let neg = labels.len() as u128 - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::SingleClassOnly);
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut doubled: u128 = 0;
    let mut neg_below: u128 = 0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j < idx.len() && scores[idx[j]] == scores[idx[i]] {
            j += 1;
        }
        let p = idx[i..j].iter().filter(|&&k| labels[k]).count() as u128;
        let q = (j - i) as u128 - p;
        doubled += 2 * neg_below * p + p * q;
        neg_below += q;
        i = j;
    }
    Ok(doubled as f64 / (2 * pos * neg) as f64)
}

/// Mean of precision at the rank of each positive, scores descending and
/// equal scores in index order.
pub fn frame_ap(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_lengths(scores, labels)?;
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let flags: Vec<bool> = idx.iter().map(|&i| labels[i]).collect();
    ranked_ap(&flags, flags.iter().filter(|&&l| l).count()).ok_or(Error::NoPositives)
}

/// `Σ precision@hit / n_relevant` over a ranked hit list.
fn ranked_ap(hits: &[bool], n_relevant: usize) -> Option<f64> {
    if n_relevant == 0 {
        return None;
    }
    let mut tp = 0usize;
    let mut sum = 0.0;
    for (rank, &h) in hits.iter().enumerate() {
        if h {
            tp += 1;
            sum += tp as f64 / (rank + 1) as f64;
        }
    }
    Some(sum / n_relevant as f64)
}

/// Temporal IoU of inclusive frame intervals.
pub fn iou(a: (usize, usize), b: (usize, usize)) -> f64 {
    let lo = a.0.max(b.0);
    let hi = a.1.min(b.1);
    let inter = if hi >= lo { hi - lo + 1 } else { 0 };
    let union = (a.1 - a.0 + 1) + (b.1 - b.0 + 1) - inter;
    inter as f64 / union as f64
}

/// AP of one class at one threshold. Proposals are taken by descending
/// confidence (ties keep input order) and each claims the unmatched ground
/// truth of its video with the highest IoU at or above `threshold`.
fn class_ap(proposals: &[Vec<Proposal>], gt: &[Vec<GtSegment>], class: usize, threshold: f64) -> Option<f64> {
    let gts: Vec<Vec<(usize, usize)>> = gt
        .iter()
        .map(|v| v.iter().filter(|s| s.category == class).map(|s| (s.start, s.end)).collect())
        .collect();
    let n_gt: usize = gts.iter().map(Vec::len).sum();
    let mut ranked: Vec<(usize, &Proposal)> = proposals
        .iter()
        .enumerate()
        .flat_map(|(v, ps)| ps.iter().filter(|p| p.category == class).map(move |p| (v, p)))
        .collect();
    ranked.sort_by(|a, b| b.1.confidence.total_cmp(&a.1.confidence));
    let mut used: Vec<Vec<bool>> = gts.iter().map(|v| vec![false; v.len()]).collect();
    let mut hits = Vec::with_capacity(ranked.len());
    for (v, p) in ranked {
        let mut best: Option<(usize, f64)> = None;
        for (j, &seg) in gts.get(v).map_or(&[][..], Vec::as_slice).iter().enumerate() {
            if used[v][j] {
                continue;
            }
            let o = iou((p.start, p.end), seg);
            if o >= threshold && best.is_none_or(|(_, b)| o > b) {
                best = Some((j, o));
            }
        }
        if let Some((j, _)) = best {
            used[v][j] = true;
        }
        hits.push(best.is_some());
    }
    ranked_ap(&hits, n_gt)
}

/// mAP over anomaly classes present in the ground truth at each threshold,
/// and their mean.
pub fn segment_map(proposals: &[Vec<Proposal>], gt: &[Vec<GtSegment>], thresholds: &[f64]) -> (Vec<f64>, f64) {
    let mut classes: Vec<usize> = gt.iter().flatten().map(|s| s.category).collect();
    classes.sort_unstable();
    classes.dedup();
    let per: Vec<f64> = thresholds
        .iter()
        .map(|&t| {
            if classes.is_empty() {
                return 0.0;
            }
            let aps: Vec<f64> = classes
                .iter()
                .filter_map(|&c| class_ap(proposals, gt, c, t))
                .collect();
            aps.iter().sum::<f64>() / aps.len() as f64
        })
        .collect();
    let avg = if per.is_empty() { 0.0 } else { per.iter().sum::<f64>() / per.len() as f64 };
    (per, avg)
}

pub fn threshold_key(t: f64) -> String {
    format!("{t:.1}")
}
