//! Inference: coarse `S_det`, fine per-class scores by hierarchical belief
//! modulation, proposal extraction, and test-set evaluation with exports.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::classify::{self, TAU};
use crate::datamodel::VideoRecord;
use crate::diff::{Graph, ParameterStore};
use crate::error::{Error, Result};
use crate::metrics::{self, EvalResult, IOU_THRESHOLDS};
use crate::model::DsaNet;
use crate::scalar::Scalar;
use crate::sgnm::min_prototype_distances;
use crate::tensor::Matrix;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InferenceConfig {
    pub threshold: f64,
    pub min_len: usize,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            threshold: 0.5,
            min_len: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Proposal {
    pub start: usize,
    pub end: usize,
    pub category: usize,
    pub confidence: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FineScoreMap {
    /// `N×C`; column 0 holds `1 - S_det`.
    pub scores: Matrix<f64>,
    pub beta: f64,
}

/// `S_det` for one video; the normality branch is never run.
pub fn coarse_scores<T: Scalar>(model: &DsaNet, store: &ParameterStore<T>, frames: &Matrix<T>) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let x = g.constant(frames.clone());
    let (_, s) = model.coarse(&mut g, store, x)?;
    Ok(g.value(s).to_f64())
}

/// Distributes `S_det(i)` over the anomaly classes by a softmax of the
/// alignment row at temperature `τ / β`; class 0 receives `1 - S_det(i)`.
pub fn hierarchical_belief_modulation(s_det: &[f64], s_align: &Matrix<f64>, beta: f64) -> Result<FineScoreMap> {
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(Error::BetaOutOfRange(beta));
    }
    let (n, c) = s_align.shape();
    if n != s_det.len() {
        return Err(Error::LengthMismatch(s_det.len(), n));
    }
    if c < 2 {
        return Err(Error::Config("belief modulation needs at least one anomaly class".into()));
    }
    let mut scores = Matrix::zeros(n, c);
    for i in 0..n {
        let logits: Vec<f64> = (1..c).map(|j| s_align.get(i, j) * beta / TAU).collect();
        let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
        let z: f64 = e.iter().sum();
        scores.set(i, 0, 1.0 - s_det[i]);
        for (j, ej) in e.iter().enumerate() {
            scores.set(i, j + 1, s_det[i] * ej / z);
        }
    }
    Ok(FineScoreMap { scores, beta })
}

/// Maximal runs at or above `threshold` per anomaly class, at least
/// `min_len` frames long, ordered by class then start.
pub fn extract_proposals(fine: &FineScoreMap, threshold: f64, min_len: usize) -> Vec<Proposal> {
    let (n, c) = fine.scores.shape();
    let mut out = Vec::new();
    for class in 1..c {
        let mut i = 0;
        while i < n {
            if fine.scores.get(i, class) < threshold {
                i += 1;
                continue;
            }
            let start = i;
            let mut sum = 0.0;
            while i < n && fine.scores.get(i, class) >= threshold {
                sum += fine.scores.get(i, class);
                i += 1;
            }
            let len = i - start;
            if len >= min_len.max(1) {
                out.push(Proposal {
                    start,
                    end: i - 1,
                    category: class,
                    confidence: sum / len as f64,
                });
            }
        }
    }
    out
}

#[derive(Clone, Debug)]
pub struct VideoInference {
    pub id: String,
    pub s_det: Vec<f64>,
    pub s_align: Matrix<f64>,
    pub fine: FineScoreMap,
    pub proposals: Vec<Proposal>,
}

#[derive(Clone, Debug)]
pub struct Evaluation {
    pub result: EvalResult,
    pub videos: Vec<VideoInference>,
}

/// Runs every video through the model given the precomputed `T_text`.
pub fn infer_video<T: Scalar>(
    model: &DsaNet,
    store: &ParameterStore<T>,
    id: &str,
    frames: &Matrix<T>,
    t_text: &Matrix<T>,
    beta: f64,
    cfg: &InferenceConfig,
) -> Result<VideoInference> {
    let mut g = Graph::new();
    let x = g.constant(frames.clone());
    let t = g.constant(t_text.clone());
    let s = model.scores(&mut g, store, x, t)?;
    let s_det = g.value(s.s_det).to_f64();
    let s_align = g.value(s.align.m).cast();
    let fine = hierarchical_belief_modulation(&s_det, &s_align, beta)?;
    let proposals = extract_proposals(&fine, cfg.threshold, cfg.min_len);
    Ok(VideoInference {
        id: id.to_owned(),
        s_det,
        s_align,
        fine,
        proposals,
    })
}

pub fn class_embeddings<T: Scalar>(model: &DsaNet, store: &ParameterStore<T>) -> Result<Matrix<T>> {
    let mut g = Graph::new();
    let t = model.class_embeddings(&mut g, store)?;
    Ok(g.value(t).clone())
}

/// Per-video quantities for inspecting the learned normality and background
/// prototypes.
#[derive(Clone, Debug)]
pub struct Diagnostics {
    /// Min cosine distance of each encoded frame to the video's DNPs; empty
    /// when the normality branch is disabled.
    pub dnp_distances: Vec<f64>,
    /// Class whose text embedding is nearest the background prototype.
    pub background_class: usize,
    pub event_class: usize,
}

pub fn diagnose<T: Scalar>(
    model: &DsaNet,
    store: &ParameterStore<T>,
    frames: &Matrix<T>,
    t_text: &Matrix<T>,
) -> Result<Diagnostics> {
    let mut g = Graph::new();
    let x = g.constant(frames.clone());
    let (f_video, s_det) = model.coarse(&mut g, store, x)?;
    let pair = classify::decouple_prototypes(&mut g, f_video, s_det)?;
    let dnp_distances = match &model.sgnm {
        Some(branch) => {
            let (_, p) = branch.prototypes(&mut g, store, f_video, s_det)?;
            min_prototype_distances(g.value(f_video), g.value(p))
        }
        None => Vec::new(),
    };
    Ok(Diagnostics {
        dnp_distances,
        background_class: classify::nearest_class(g.value(pair.f_bkg).data(), t_text),
        event_class: classify::nearest_class(g.value(pair.f_event).data(), t_text),
    })
}

/// Frame AUC/AP over the concatenated test frames and segment mAP over the
/// proposals. Fails when the split lacks the ground truth a metric needs.
pub fn evaluate<T: Scalar>(
    model: &DsaNet,
    store: &ParameterStore<T>,
    videos: &[(VideoRecord, Matrix<T>)],
    beta: f64,
    cfg: &InferenceConfig,
) -> Result<Evaluation> {
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(Error::BetaOutOfRange(beta));
    }
    let t_text = class_embeddings(model, store)?;
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    let mut outs = Vec::with_capacity(videos.len());
    for (rec, frames) in videos {
        let v = infer_video(model, store, &rec.id, frames, &t_text, beta, cfg)?;
        scores.extend_from_slice(&v.s_det);
        labels.extend(rec.frame_labels());
        outs.push(v);
    }
    let auc = metrics::frame_auc(&scores, &labels)?;
    let ap = metrics::frame_ap(&scores, &labels)?;
    let gt: Vec<_> = videos.iter().map(|(r, _)| r.gt_segments.clone()).collect();
    if gt.iter().all(Vec::is_empty) {
        return Err(Error::schema("gt_segments", "no ground-truth segments in the evaluation split"));
    }
    let props: Vec<_> = outs.iter().map(|v| v.proposals.clone()).collect();
    let (per, avg_map) = metrics::segment_map(&props, &gt, &IOU_THRESHOLDS);
    let map_at_iou = IOU_THRESHOLDS
        .iter()
        .zip(per)
        .map(|(&t, m)| (metrics::threshold_key(t), m))
        .collect();
    Ok(Evaluation {
        result: EvalResult {
            auc,
            ap,
            map_at_iou,
            avg_map,
        },
        videos: outs,
    })
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn score_csv(s: &[f64]) -> String {
    let mut out = String::from("frame_index,score\n");
    for (i, v) in s.iter().enumerate() {
        let _ = writeln!(out, "{i},{v}");
    }
    out
}

pub fn matrix_csv(m: &Matrix<f64>) -> String {
    let mut out = String::from("frame_index");
    for c in 0..m.cols() {
        let _ = write!(out, ",class_{c}");
    }
    out.push('\n');
    for i in 0..m.rows() {
        let _ = write!(out, "{i}");
        for v in m.row(i) {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    out
}

/// Writes `eval.json`, `map_at_iou.csv`, `proposals.json` and per-video
/// score tables under `scores/`.
pub fn write_evaluation(dir: &Path, ev: &Evaluation) -> Result<()> {
    let scores_dir = dir.join("scores");
    fs::create_dir_all(&scores_dir).map_err(|e| Error::io(&scores_dir, e))?;
    let json = serde_json::to_string_pretty(&ev.result).expect("EvalResult serializes") + "\n";
    write(&dir.join("eval.json"), &json)?;
    let mut table = String::from("iou_threshold,map\n");
    for (k, v) in &ev.result.map_at_iou {
        let _ = writeln!(table, "{k},{v}");
    }
    let _ = writeln!(table, "avg,{}", ev.result.avg_map);
    write(&dir.join("map_at_iou.csv"), &table)?;
    let proposals: std::collections::BTreeMap<&str, &Vec<Proposal>> =
        ev.videos.iter().map(|v| (v.id.as_str(), &v.proposals)).collect();
    let json = serde_json::to_string_pretty(&proposals).expect("proposals serialize") + "\n";
    write(&dir.join("proposals.json"), &json)?;
    for v in &ev.videos {
        write(&scores_dir.join(format!("{}_det.csv", v.id)), &score_csv(&v.s_det))?;
        write(&scores_dir.join(format!("{}_align.csv", v.id)), &matrix_csv(&v.s_align))?;
        write(&scores_dir.join(format!("{}_fine.csv", v.id)), &matrix_csv(&v.fine.scores))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn hbm_hand_example() {
        // Alignment gap of τ/β between classes 1 and 2 gives a logit gap of 1.
        let beta = 1.0;
        let a = Matrix::from_f64(1, 3, &[0.0, 2.0 * TAU, TAU]).unwrap();
        let f = hierarchical_belief_modulation(&[0.8], &a, beta).unwrap();
        let e = std::f64::consts::E;
        assert_relative_eq!(f.scores.get(0, 1), 0.8 * e / (e + 1.0), epsilon = 1e-12);
        assert_relative_eq!(f.scores.get(0, 2), 0.8 / (e + 1.0), epsilon = 1e-12);
        assert_relative_eq!(f.scores.get(0, 1), 0.5848, epsilon = 1e-4);
        assert_relative_eq!(f.scores.get(0, 0), 0.2, epsilon = 1e-12);
    }

    #[test]
    fn hbm_small_beta_is_uniform() {
        let a = Matrix::from_f64(1, 4, &[0.1, 0.9, -0.3, 0.2]).unwrap();
        let f = hierarchical_belief_modulation(&[0.6], &a, 1e-9).unwrap();
        for c in 1..4 {
            assert_relative_eq!(f.scores.get(0, c), 0.2, epsilon = 1e-8);
        }
    }

    #[test]
    fn hbm_rejects_bad_beta() {
        let a = Matrix::zeros(1, 3);
        for b in [0.0, -1.0, f64::NAN] {
            assert!(matches!(
                hierarchical_belief_modulation(&[0.5], &a, b),
                Err(Error::BetaOutOfRange(_))
            ));
        }
    }

    fn fine(rows: &[[f64; 3]]) -> FineScoreMap {
        FineScoreMap {
            scores: Matrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap(),
            beta: 1.0,
        }
    }

    #[test]
    fn proposal_rules() {
        let low = fine(&[[0.9, 0.05, 0.05]; 6]);
        assert!(extract_proposals(&low, 0.5, 2).is_empty());

        let mut rows = vec![[0.9, 0.05, 0.05]; 10];
        for r in rows.iter_mut().take(8).skip(3) {
            *r = [0.1, 0.2, 0.7];
        }
        rows[0] = [0.3, 0.1, 0.6];
        let p = extract_proposals(&fine(&rows), 0.5, 2);
        assert_eq!(p.len(), 1);
        assert_eq!((p[0].start, p[0].end, p[0].category), (3, 7, 2));
        assert_relative_eq!(p[0].confidence, 0.7, epsilon = 1e-12);
        assert_eq!(extract_proposals(&fine(&rows), 0.5, 1).len(), 2);
    }

    #[test]
    fn csv_layout() {
        assert_eq!(score_csv(&[0.5, 0.25]), "frame_index,score\n0,0.5\n1,0.25\n");
        let m = Matrix::from_f64(1, 2, &[0.1, 0.9]).unwrap();
        assert_eq!(matrix_csv(&m), "frame_index,class_0,class_1\n0,0.1,0.9\n");
    }
}
