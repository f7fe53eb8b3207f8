//! MIL detection head: per-frame sigmoid scores, top-k pooling to a video
//! score, and binary cross-entropy against the video label.

use crate::diff::{Graph, Init, ParameterStore, Var};
use crate::error::{Error, Result};
use crate::nn::{Linear, LinearSpec};
use crate::rng::ChaCha8Rng;
use crate::scalar::Scalar;

pub const DEFAULT_K_FRACTION: f64 = 1.0 / 16.0;

/// `max(1, ceil(fraction * n))`, capped at `n`.
pub fn k_for(n: usize, fraction: f64) -> usize {
    ((fraction * n as f64).ceil() as usize).clamp(1, n.max(1))
}

/// Indices of the `k` largest values, largest first; equal values keep the
/// lower index first.
pub fn topk_indices(values: &[f64], k: usize) -> Result<Vec<usize>> {
    let n = values.len();
    if k == 0 || k > n {
        return Err(Error::KOutOfRange { k, n });
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    idx.truncate(k);
    Ok(idx)
}

/// Plain-number top-k mean.
pub fn topk_mean_values(values: &[f64], k: usize) -> Result<f64> {
    let idx = topk_indices(values, k)?;
    Ok(idx.iter().map(|&i| values[i]).sum::<f64>() / k as f64)
}

/// Top-k mean of an `N×1` column as a `1×1` node. Gradient reaches only the
/// selected frames.
pub fn topk_mean<T: Scalar>(g: &mut Graph<T>, p: Var, k: usize) -> Result<Var> {
    let values = g.value(p).to_f64();
    let idx = topk_indices(&values, k)?;
    let sel = g.select_rows(p, &idx)?;
    g.mean(sel)
}

/// Column-wise top-k means of an `N×C` matrix as a `1×C` row.
pub fn topk_mean_cols<T: Scalar>(g: &mut Graph<T>, m: Var, k: usize) -> Result<Var> {
    let cols = g.shape(m).1;
    let mut parts = Vec::with_capacity(cols);
    for c in 0..cols {
        let col = g.slice_cols(m, c, c + 1)?;
        parts.push(topk_mean(g, col, k)?);
    }
    g.concat_cols(&parts)
}

/// `-[y log p + (1 - y) log(1 - p)]` with the clamped log.
pub fn mil_loss<T: Scalar>(g: &mut Graph<T>, p_bar: Var, y: u8) -> Result<Var> {
    let target = if y == 1 { p_bar } else { g.one_minus(p_bar)? };
    let l = g.log(target)?;
    g.neg(l)
}

#[derive(Clone, Debug)]
pub struct DetectionHead {
    pub classifier: Linear,
    pub k_fraction: f64,
}

impl DetectionHead {
    pub fn new<T: Scalar>(
        store: &mut ParameterStore<T>,
        dim: usize,
        k_fraction: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if !(k_fraction > 0.0 && k_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "detection.k_fraction must lie in (0, 1], got {k_fraction}"
            )));
        }
        Ok(Self {
            classifier: Linear::new(store, "detection.classifier", dim, 1, LinearSpec::new(Init::FanIn), rng)?,
            k_fraction,
        })
    }

    pub fn k(&self, n: usize) -> usize {
        k_for(n, self.k_fraction)
    }

    /// `S_det` as an `N×1` column of probabilities.
    pub fn score_frames<T: Scalar>(&self, g: &mut Graph<T>, store: &ParameterStore<T>, f_video: Var) -> Result<Var> {
        let logits = self.classifier.forward(g, store, f_video)?;
        g.sigmoid(logits)
    }

    /// Video-level probability and its MIL loss.
    pub fn video_loss<T: Scalar>(&self, g: &mut Graph<T>, s_det: Var, y: u8) -> Result<(Var, Var)> {
        let n = g.shape(s_det).0;
        let p_bar = topk_mean(g, s_det, self.k(n))?;
        let loss = mil_loss(g, p_bar, y)?;
        Ok((p_bar, loss))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use crate::tensor::Matrix;
    use approx::assert_relative_eq;

    #[test]
    fn k_rule() {
        assert_eq!(k_for(1, DEFAULT_K_FRACTION), 1);
        assert_eq!(k_for(16, DEFAULT_K_FRACTION), 1);
        assert_eq!(k_for(17, DEFAULT_K_FRACTION), 2);
        assert_eq!(k_for(5, 1.0), 5);
    }

    #[test]
    fn topk_mean_examples() {
        assert_relative_eq!(topk_mean_values(&[0.9, 0.1, 0.8, 0.2], 2).unwrap(), 0.85, epsilon = 1e-15);
        assert_relative_eq!(topk_mean_values(&[0.9, 0.1, 0.8, 0.2], 4).unwrap(), 0.5, epsilon = 1e-15);
        assert_eq!(topk_mean_values(&[0.3; 5], 3).unwrap(), 0.3);
        assert!(matches!(topk_mean_values(&[0.1], 2), Err(Error::KOutOfRange { k: 2, n: 1 })));
        assert!(matches!(topk_indices(&[0.1], 0), Err(Error::KOutOfRange { .. })));
    }

    #[test]
    fn ties_prefer_lower_index() {
        assert_eq!(topk_indices(&[0.5, 0.7, 0.5, 0.5], 2).unwrap(), vec![1, 0]);
    }

    #[test]
    fn zero_classifier_scores_half() {
        let mut store = ParameterStore::<f64>::new();
        let head = DetectionHead::new(&mut store, 4, DEFAULT_K_FRACTION, &mut seeded(0)).unwrap();
        store.get_mut(head.classifier.weight).value = Matrix::zeros(4, 1);
        let mut g = Graph::new();
        let x = g.constant(Matrix::filled(3, 4, 0.7));
        let s = head.score_frames(&mut g, &store, x).unwrap();
        assert_eq!(g.value(s).data(), &[0.5, 0.5, 0.5]);
    }

    #[test]
    fn saturated_logits() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Matrix::column(&[40.0, -40.0]));
        let p = g.sigmoid(x).unwrap();
        let v = g.value(p);
        assert!(v.get(0, 0) > 1.0 - 1e-12 && v.get(0, 0) < 1.0 + 1e-12);
        assert!(v.get(1, 0) < 1e-12);
    }

    fn bce(p: f64, y: u8) -> f64 {
        let mut g = Graph::<f64>::new();
        let v = g.constant(Matrix::scalar(p));
        let l = mil_loss(&mut g, v, y).unwrap();
        g.item(l)
    }

    #[test]
    fn mil_loss_examples() {
        assert_relative_eq!(bce(0.5, 1), std::f64::consts::LN_2, epsilon = 1e-15);
        assert_relative_eq!(bce(0.5, 0), std::f64::consts::LN_2, epsilon = 1e-15);
        assert!(bce(0.999_999, 1) < 1e-5);
        for p in [0.1, 0.37, 0.8] {
            assert_relative_eq!(bce(p, 1), bce(1.0 - p, 0), epsilon = 1e-12);
        }
    }

    #[test]
    fn positive_gradient_only_at_topk() {
        let mut g = Graph::<f64>::new();
        let logits = g.input(Matrix::column(&[0.1, 2.0, -1.0, 1.5, 0.0]));
        let p = g.sigmoid(logits).unwrap();
        let p_bar = topk_mean(&mut g, p, 2).unwrap();
        let l = mil_loss(&mut g, p_bar, 1).unwrap();
        g.backward(l).unwrap();
        let grad = g.grad(logits).unwrap();
        for (i, &d) in grad.data().iter().enumerate() {
            assert_eq!(d != 0.0, i == 1 || i == 3, "frame {i}");
        }
    }

    #[test]
    fn column_topk() {
        let mut g = Graph::<f64>::new();
        let m = g.constant(Matrix::from_f64(3, 2, &[0.9, 0.2, 0.1, 0.2, 0.5, 0.2]).unwrap());
        let s = topk_mean_cols(&mut g, m, 2).unwrap();
        assert_relative_eq!(g.value(s).get(0, 0), 0.7, epsilon = 1e-15);
        assert_relative_eq!(g.value(s).get(0, 1), 0.2, epsilon = 1e-15);
    }
}
