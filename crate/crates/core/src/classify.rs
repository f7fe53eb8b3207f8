//! Classification branch: score-guided enhancement of the class embeddings,
//! the frame-class alignment map with its MIL cross-entropy, and the
//! decoupled event/background contrastive alignment.

use crate::detection::topk_mean_cols;
use crate::diff::{Graph, Init, ParameterStore, Var};
use crate::error::{Error, Result};
use crate::nn::FeedForward;
use crate::rng::ChaCha8Rng;
use crate::scalar::Scalar;
use crate::tensor::Matrix;

/// Contrastive temperature.
pub const TAU: f64 = 0.07;

fn check_nonzero_rows<T: Scalar>(g: &Graph<T>, v: Var, what: &'static str) -> Result<()> {
    let m = g.value(v);
    if (0..m.rows()).any(|i| m.row_norm(i) == 0.0) {
        return Err(Error::ZeroVector(what));
    }
    Ok(())
}

/// `V = Norm(S_detᵀ F_video)`, `1×D`. An all-zero score track falls back to
/// uniform weights.
pub fn score_weighted_summary<T: Scalar>(g: &mut Graph<T>, f_video: Var, s_det: Var) -> Result<Var> {
    let n = g.shape(f_video).0;
    if g.shape(s_det) != (n, 1) {
        return Err(Error::ShapeMismatch {
            op: "score_weighted_summary",
            lhs: g.shape(f_video),
            rhs: g.shape(s_det),
        });
    }
    let weights = if g.value(s_det).data().iter().all(|s| *s == T::zero()) {
        g.constant(Matrix::filled(n, 1, T::of(1.0 / n as f64)))
    } else {
        s_det
    };
    let wt = g.transpose(weights)?;
    let v = g.matmul(wt, f_video)?;
    check_nonzero_rows(g, v, "score_weighted_summary")?;
    g.l2_normalize(v)
}

/// `T_enh = T + FFN(T + V)`, with the FFN output layer starting at zero.
#[derive(Clone, Debug)]
pub struct VisionTextFusion {
    pub ffn: FeedForward,
}

impl VisionTextFusion {
    pub fn new<T: Scalar>(store: &mut ParameterStore<T>, dim: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(Self {
            ffn: FeedForward::new(store, "classify.fusion", dim, 2 * dim, Init::Zeros, true, rng)?,
        })
    }

    pub fn enhance<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParameterStore<T>,
        t_text: Var,
        f_video: Var,
        s_det: Var,
    ) -> Result<Var> {
        let v = score_weighted_summary(g, f_video, s_det)?;
        let fused = g.add_row(t_text, v)?;
        let delta = self.ffn.forward(g, store, fused)?;
        g.add(t_text, delta)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct AlignmentMap {
    /// `N×C` cosine similarities.
    pub m: Var,
    /// `1×C` column top-k means.
    pub s_c: Var,
}

pub fn alignment_map<T: Scalar>(g: &mut Graph<T>, f_video: Var, t_enh: Var, k: usize) -> Result<AlignmentMap> {
    check_nonzero_rows(g, f_video, "alignment_map frames")?;
    check_nonzero_rows(g, t_enh, "alignment_map classes")?;
    let m = g.cosine_similarity(f_video, t_enh)?;
    let s_c = topk_mean_cols(g, m, k)?;
    Ok(AlignmentMap { m, s_c })
}

/// `-log softmax(logits / τ)[target]` for a `1×C` row of logits, in
/// log-sum-exp form.
pub fn softmax_cross_entropy<T: Scalar>(g: &mut Graph<T>, logits: Var, target: usize, tau: f64) -> Result<Var> {
    let (r, c) = g.shape(logits);
    if r != 1 || target >= c {
        return Err(Error::ShapeMismatch {
            op: "softmax_cross_entropy",
            lhs: (r, c),
            rhs: (1, target),
        });
    }
    let z = g.scale(logits, T::of(1.0 / tau))?;
    let m = g.value(z).data().iter().fold(T::neg_infinity(), |a, &b| a.max(b));
    let shifted = g.add_scalar(z, -m)?;
    let e = g.exp(shifted)?;
    let total = g.sum(e)?;
    let lse = g.log(total)?;
    let zt = g.element(shifted, 0, target)?;
    g.sub(lse, zt)
}

/// Cross-entropy of `softmax(S_c / τ)` against the video category.
pub fn align_loss<T: Scalar>(g: &mut Graph<T>, s_c: Var, category: usize) -> Result<Var> {
    softmax_cross_entropy(g, s_c, category, TAU)
}

#[derive(Clone, Copy, Debug)]
pub struct PrototypePair {
    pub f_event: Var,
    pub f_bkg: Var,
    pub w_event: Var,
    pub w_bkg: Var,
}

/// `w_event = softmax(S_det)`, `w_bkg = 1 - w_event` (not renormalized);
/// prototypes are the weighted frame sums.
pub fn decouple_prototypes<T: Scalar>(g: &mut Graph<T>, f_video: Var, s_det: Var) -> Result<PrototypePair> {
    let st = g.transpose(s_det)?;
    let w_event = g.row_softmax(st, T::one())?;
    let w_bkg = g.one_minus(w_event)?;
    let f_event = g.matmul(w_event, f_video)?;
    let f_bkg = g.matmul(w_bkg, f_video)?;
    Ok(PrototypePair {
        f_event,
        f_bkg,
        w_event,
        w_bkg,
    })
}

/// Targets of the event and background terms: the video category, and the
/// normal class.
pub fn dcsa_targets(category: usize) -> (usize, usize) {
    (category, 0)
}

/// `-log softmax_c(cos(proto, t_c) / τ)[target]`.
pub fn contrastive_term<T: Scalar>(g: &mut Graph<T>, proto: Var, t_text: Var, target: usize) -> Result<Var> {
    check_nonzero_rows(g, proto, "contrastive prototype")?;
    check_nonzero_rows(g, t_text, "contrastive text embedding")?;
    let sim = g.cosine_similarity(proto, t_text)?;
    softmax_cross_entropy(g, sim, target, TAU)
}

#[derive(Clone, Copy, Debug)]
pub struct DcsaLoss {
    pub event: Var,
    /// Absent when the background prototype vanishes (single-frame video).
    pub bkg: Option<Var>,
    pub total: Var,
}

pub fn dcsa_loss<T: Scalar>(g: &mut Graph<T>, pair: &PrototypePair, t_text: Var, category: usize) -> Result<DcsaLoss> {
    let (event_target, bkg_target) = dcsa_targets(category);
    let event = contrastive_term(g, pair.f_event, t_text, event_target)?;
    let bkg_zero = g.value(pair.f_bkg).row_norm(0) == 0.0;
    if bkg_zero {
        log::warn!("background prototype is zero (single-frame video); skipping its contrastive term");
        return Ok(DcsaLoss {
            event,
            bkg: None,
            total: event,
        });
    }
    let bkg = contrastive_term(g, pair.f_bkg, t_text, bkg_target)?;
    let total = g.add(event, bkg)?;
    Ok(DcsaLoss {
        event,
        bkg: Some(bkg),
        total,
    })
}

/// Index of the text embedding closest in cosine to `proto`.
pub fn nearest_class<T: Scalar>(proto: &[T], t_text: &Matrix<T>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for c in 0..t_text.rows() {
        let s = crate::tensor::cosine(proto, t_text.row(c)).unwrap_or(f64::NEG_INFINITY);
        if s > best.1 {
            best = (c, s);
        }
    }
    best.0
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{gaussian, seeded};
    use approx::assert_relative_eq;

    fn random(n: usize, d: usize, seed: u64) -> Matrix<f64> {
        let mut rng = seeded(seed);
        Matrix::from_fn(n, d, |_, _| gaussian(&mut rng))
    }

    fn summary(f: &Matrix<f64>, s: &[f64]) -> Matrix<f64> {
        let mut g = Graph::new();
        let fv = g.constant(f.clone());
        let sv = g.constant(Matrix::column(s));
        let v = score_weighted_summary(&mut g, fv, sv).unwrap();
        g.value(v).clone()
    }

    #[test]
    fn one_hot_scores_pick_a_frame() {
        let f = random(3, 4, 1);
        let v = summary(&f, &[0.0, 1.0, 0.0]);
        let n = f.row_norm(1);
        for j in 0..4 {
            assert_relative_eq!(v.get(0, j), f.get(1, j) / n, epsilon = 1e-12);
        }
    }

    #[test]
    fn summary_is_scale_invariant_and_handles_zero_scores() {
        let f = random(4, 3, 2);
        let s = [0.1, 0.7, 0.3, 0.2];
        let s2: Vec<f64> = s.iter().map(|x| 2.0 * x).collect();
        assert!(summary(&f, &s).max_abs_diff(&summary(&f, &s2)) < 1e-12);
        let uniform = summary(&f, &[0.0; 4]);
        assert!(uniform.max_abs_diff(&summary(&f, &[0.25; 4])) < 1e-12);
    }

    #[test]
    fn zero_fusion_is_identity() {
        let mut store = ParameterStore::<f64>::new();
        let fusion = VisionTextFusion::new(&mut store, 4, &mut seeded(0)).unwrap();
        let t = random(3, 4, 5);
        let mut g = Graph::new();
        let tv = g.constant(t.clone());
        let f = g.constant(random(5, 4, 6));
        let s = g.constant(Matrix::column(&[0.1, 0.2, 0.3, 0.4, 0.5]));
        let e = fusion.enhance(&mut g, &store, tv, f, s).unwrap();
        assert_eq!(g.value(e), &t);
    }

    #[test]
    fn alignment_examples() {
        let mut g = Graph::<f64>::new();
        let f = g.constant(Matrix::from_f64(3, 2, &[2.0, 0.0, 1.0, 1.0, 0.0, 3.0]).unwrap());
        let t = g.constant(Matrix::from_f64(2, 2, &[1.0, 0.0, 0.0, 1.0]).unwrap());
        let a = alignment_map(&mut g, f, t, 2).unwrap();
        let m = g.value(a.m);
        assert_relative_eq!(m.get(0, 0), 1.0, epsilon = 1e-15);
        assert_eq!(m.shape(), (3, 2));
        let h = std::f64::consts::FRAC_1_SQRT_2;
        assert_relative_eq!(g.value(a.s_c).get(0, 0), (1.0 + h) / 2.0, epsilon = 1e-12);
    }

    fn ce(s: &[f64], label: usize) -> f64 {
        let mut g = Graph::<f64>::new();
        let v = g.constant(Matrix::row_vector(s));
        let l = align_loss(&mut g, v, label).unwrap();
        g.item(l)
    }

    #[test]
    fn align_loss_examples() {
        assert_relative_eq!(ce(&[0.3; 4], 2), (4.0f64).ln(), epsilon = 1e-12);
        assert!(ce(&[1.0, -1.0, -1.0], 0) < 1e-11);
        assert_relative_eq!(ce(&[0.2, 0.5, -0.1], 1), ce(&[0.7, 1.0, 0.4], 1), epsilon = 1e-12);
    }

    #[test]
    fn decoupling_examples() {
        let f = Matrix::<f64>::from_f64(2, 2, &[1.0, 0.0, 0.0, 1.0]).unwrap();
        let mut g = Graph::new();
        let fv = g.constant(f);
        let s = g.constant(Matrix::column(&[(3.0f64).ln(), 0.0]));
        let pair = decouple_prototypes(&mut g, fv, s).unwrap();
        let w = g.value(pair.w_event).to_f64();
        assert_relative_eq!(w[0], 0.75, epsilon = 1e-12);
        assert_relative_eq!(w[1], 0.25, epsilon = 1e-12);
        assert_relative_eq!(g.value(pair.f_event).get(0, 0), 0.75, epsilon = 1e-12);
        assert_relative_eq!(g.value(pair.f_bkg).get(0, 1), 0.75, epsilon = 1e-12);

        let f = random(4, 3, 3);
        let mut g = Graph::new();
        let fv = g.constant(f.clone());
        let s = g.constant(Matrix::column(&[0.4; 4]));
        let pair = decouple_prototypes(&mut g, fv, s).unwrap();
        for j in 0..3 {
            let mean = (0..4).map(|i| f.get(i, j)).sum::<f64>() / 4.0;
            assert_relative_eq!(g.value(pair.f_event).get(0, j), mean, epsilon = 1e-12);
            assert_relative_eq!(g.value(pair.f_bkg).get(0, j), 3.0 * mean, epsilon = 1e-12);
        }
    }

    #[test]
    fn single_frame_skips_background() {
        let mut g = Graph::<f64>::new();
        let fv = g.constant(Matrix::from_f64(1, 2, &[1.0, 0.5]).unwrap());
        let s = g.constant(Matrix::column(&[0.8]));
        let pair = decouple_prototypes(&mut g, fv, s).unwrap();
        assert_eq!(g.value(pair.w_bkg).data(), &[0.0]);
        let t = g.constant(Matrix::from_f64(2, 2, &[1.0, 0.0, 0.0, 1.0]).unwrap());
        let l = dcsa_loss(&mut g, &pair, t, 1).unwrap();
        assert!(l.bkg.is_none());
    }

    #[test]
    fn normal_video_targets_class_zero() {
        assert_eq!(dcsa_targets(0), (0, 0));
        assert_eq!(dcsa_targets(2), (2, 0));
    }

    fn event_loss(proto: &[f64], t: &Matrix<f64>, target: usize) -> f64 {
        let mut g = Graph::<f64>::new();
        let p = g.constant(Matrix::row_vector(proto));
        let tv = g.constant(t.clone());
        let l = contrastive_term(&mut g, p, tv, target).unwrap();
        g.item(l)
    }

    #[test]
    fn event_term_examples() {
        let t = Matrix::<f64>::identity(4);
        assert_relative_eq!(event_loss(&[1.0, 1.0, 1.0, 1.0], &t, 2), (4.0f64).ln(), epsilon = 1e-12);
        assert!(event_loss(&[0.0, 0.0, 1.0, 0.0], &t, 2) < 1e-5);
        let p = [0.3, -0.2, 0.9, 0.1];
        let p7: Vec<f64> = p.iter().map(|x| 7.0 * x).collect();
        assert_relative_eq!(event_loss(&p, &t, 1), event_loss(&p7, &t, 1), epsilon = 1e-12);
    }

    #[test]
    fn nearest_class_by_cosine() {
        let t = Matrix::<f64>::from_f64(3, 2, &[1.0, 0.0, 0.0, 1.0, -1.0, 0.0]).unwrap();
        assert_eq!(nearest_class(&[0.1, 5.0], &t), 1);
        assert_eq!(nearest_class(&[-3.0, 0.5], &t), 2);
    }
}
