//! Self-guided normality modeling (training only).
//!
//! The lowest-scoring frames of a video are treated as normal candidates.
//! Learnable queries distill them into `K` per-video prototypes, a compact
//! loss pulls candidates toward their nearest prototype, and a decoder
//! rebuilds every frame from the prototypes alone. Reconstruction error is a
//! second anomaly view that is tied to `S_det` by a consistency loss.

use serde::{Deserialize, Serialize};

use crate::diff::{Graph, Init, ParamId, ParameterStore, Var};
use crate::error::{Error, Result};
use crate::nn::{Attention, FeedForward, LayerNorm, Linear, LinearSpec};
use crate::rng::ChaCha8Rng;
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SgnmConfig {
    #[serde(rename = "K")]
    pub k: usize,
    pub m_fraction: f64,
    pub decoder_layers: usize,
}

impl Default for SgnmConfig {
    fn default() -> Self {
        Self {
            k: 16,
            m_fraction: 0.8,
            decoder_layers: 8,
        }
    }
}

impl SgnmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("sgnm.K must be >= 1".into()));
        }
        if !(self.m_fraction > 0.0 && self.m_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "sgnm.m_fraction must lie in (0, 1], got {}",
                self.m_fraction
            )));
        }
        if self.decoder_layers == 0 {
            return Err(Error::Config("sgnm.decoder_layers must be >= 1".into()));
        }
        Ok(())
    }

    pub fn m(&self, n: usize) -> usize {
        ((self.m_fraction * n as f64).ceil() as usize).clamp(1, n.max(1))
    }
}

/// Indices of the `m` lowest scores in ascending frame order; equal scores
/// keep the lower index.
pub fn bottom_m_indices(scores: &[f64], m: usize) -> Result<Vec<usize>> {
    let n = scores.len();
    if m == 0 || m > n {
        return Err(Error::MOutOfRange { m, n });
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
    idx.truncate(m);
    idx.sort_unstable();
    Ok(idx)
}

/// `F_n`: the `m` frames with the lowest `S_det`, in temporal order.
pub fn select_normal_candidates<T: Scalar>(g: &mut Graph<T>, f_video: Var, s_det: Var, m: usize) -> Result<Var> {
    let scores = g.value(s_det).to_f64();
    if scores.len() != g.shape(f_video).0 {
        return Err(Error::LengthMismatch(scores.len(), g.shape(f_video).0));
    }
    let idx = bottom_m_indices(&scores, m)?;
    g.select_rows(f_video, &idx)
}

fn check_nonzero_rows<T: Scalar>(g: &Graph<T>, v: Var, what: &'static str) -> Result<()> {
    let m = g.value(v);
    if (0..m.rows()).any(|i| m.row_norm(i) == 0.0) {
        return Err(Error::ZeroVector(what));
    }
    Ok(())
}

/// Single-layer cross-attention from `K` learnable queries onto `F_n`,
/// with projected queries and keys and raw candidate features as values.
#[derive(Clone, Debug)]
pub struct DnpExtractor {
    pub queries: ParamId,
    pub query_proj: Linear,
    pub key_proj: Linear,
}

impl DnpExtractor {
    pub fn new<T: Scalar>(store: &mut ParameterStore<T>, dim: usize, k: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let spec = || LinearSpec::new(Init::FanIn).no_bias();
        Ok(Self {
            queries: store.init("sgnm.queries", k, dim, Init::Gaussian(1.0 / (dim as f64).sqrt()), true, rng)?,
            query_proj: Linear::new(store, "sgnm.dnp.query", dim, dim, spec(), rng)?,
            key_proj: Linear::new(store, "sgnm.dnp.key", dim, dim, spec(), rng)?,
        })
    }

    /// `P = softmax(Q Wq (F_n Wk)ᵀ / √D) F_n`, `K×D`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParameterStore<T>, f_n: Var) -> Result<Var> {
        let dim = g.shape(f_n).1;
        let q = g.param(store, self.queries);
        let q = self.query_proj.forward(g, store, q)?;
        let k = self.key_proj.forward(g, store, f_n)?;
        let kt = g.transpose(k)?;
        let logits = g.matmul(q, kt)?;
        let logits = g.scale(logits, T::of(1.0 / (dim as f64).sqrt()))?;
        let attn = g.row_softmax(logits, T::one())?;
        g.matmul(attn, f_n)
    }
}

/// Mean over candidates of the cosine distance to the nearest prototype.
pub fn compact_loss<T: Scalar>(g: &mut Graph<T>, f_n: Var, p: Var) -> Result<Var> {
    check_nonzero_rows(g, f_n, "compact_loss candidates")?;
    check_nonzero_rows(g, p, "compact_loss prototypes")?;
    let cos = g.cosine_similarity(f_n, p)?;
    let dist = g.one_minus(cos)?;
    let nearest = g.min_rows(dist)?;
    g.mean(nearest)
}

/// Per-frame distance to the closest prototype, as plain numbers.
pub fn min_prototype_distances<T: Scalar>(frames: &crate::Matrix<T>, p: &crate::Matrix<T>) -> Vec<f64> {
    (0..frames.rows())
        .map(|i| {
            (0..p.rows())
                .map(|j| 1.0 - crate::tensor::cosine(frames.row(i), p.row(j)).unwrap_or(0.0))
                .fold(f64::INFINITY, f64::min)
        })
        .collect()
}

/// One decoder layer: pre-norm residual feed-forward on the query stream,
/// then single-head cross-attention onto the prototypes. The first layer
/// drops the residual around its attention so its output lies in the span
/// of the projected prototypes.
#[derive(Clone, Debug)]
pub struct DecoderLayer {
    pub ffn_norm: LayerNorm,
    pub ffn: FeedForward,
    pub attn_norm: LayerNorm,
    pub attn: Attention,
    pub attn_residual: bool,
}

impl DecoderLayer {
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParameterStore<T>, h: Var, p: Var) -> Result<Var> {
        let n = self.ffn_norm.forward(g, store, h)?;
        let f = self.ffn.forward(g, store, n)?;
        let h = g.add(h, f)?;
        let n = self.attn_norm.forward(g, store, h)?;
        let a = self.attn.forward(g, store, n, p)?;
        if self.attn_residual {
            g.add(h, a)
        } else {
            Ok(a)
        }
    }
}

#[derive(Clone, Debug)]
pub struct ReconDecoder {
    pub input: FeedForward,
    pub layers: Vec<DecoderLayer>,
}

impl ReconDecoder {
    pub fn new<T: Scalar>(store: &mut ParameterStore<T>, dim: usize, n_layers: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let input = FeedForward::new(store, "sgnm.decoder.input", dim, dim, Init::FanIn, true, rng)?;
        let layers = (0..n_layers)
            .map(|l| {
                let name = format!("sgnm.decoder.layer{l}");
                Ok(DecoderLayer {
                    ffn_norm: LayerNorm::new(store, &format!("{name}.ffn_norm"), dim, true, rng)?,
                    ffn: FeedForward::new(store, &format!("{name}.ffn"), dim, 2 * dim, Init::FanIn, true, rng)?,
                    attn_norm: LayerNorm::new(store, &format!("{name}.attn_norm"), dim, true, rng)?,
                    attn: Attention::new(store, &format!("{name}.attn"), dim, 1, true, rng)?,
                    attn_residual: l > 0,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { input, layers })
    }

    /// `F_rec`, `N×D`, built from `P` alone.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParameterStore<T>, f_video: Var, p: Var) -> Result<Var> {
        let mut h = self.input.forward(g, store, f_video)?;
        for layer in &self.layers {
            h = layer.forward(g, store, h, p)?;
        }
        Ok(h)
    }
}

/// `S_rec(i) = (1 - cos(F_video(i), F_rec(i))) / 2` as an `N×1` column.
pub fn reconstruction_score<T: Scalar>(g: &mut Graph<T>, f_video: Var, f_rec: Var) -> Result<Var> {
    check_nonzero_rows(g, f_video, "reconstruction_score input")?;
    check_nonzero_rows(g, f_rec, "reconstruction_score reconstruction")?;
    let cos = g.cosine_rows(f_video, f_rec)?;
    let d = g.one_minus(cos)?;
    g.scale(d, T::of(0.5))
}

/// Mean squared difference of two score tracks.
pub fn consistency_loss<T: Scalar>(g: &mut Graph<T>, s_det: Var, s_rec: Var) -> Result<Var> {
    let (a, b) = (g.shape(s_det), g.shape(s_rec));
    if a != b {
        return Err(Error::LengthMismatch(a.0 * a.1, b.0 * b.1));
    }
    let d = g.sub(s_det, s_rec)?;
    let sq = g.square(d)?;
    g.mean(sq)
}

/// Extractor and decoder of the branch.
#[derive(Clone, Debug)]
pub struct Sgnm {
    pub config: SgnmConfig,
    pub extractor: DnpExtractor,
    pub decoder: ReconDecoder,
}

#[derive(Clone, Copy, Debug)]
pub struct SgnmOutput {
    pub candidates: Var,
    pub prototypes: Var,
    pub f_rec: Var,
    pub s_rec: Var,
    pub compact: Var,
    pub consist: Var,
}

impl Sgnm {
    pub fn new<T: Scalar>(store: &mut ParameterStore<T>, dim: usize, config: &SgnmConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config: config.clone(),
            extractor: DnpExtractor::new(store, dim, config.k, rng)?,
            decoder: ReconDecoder::new(store, dim, config.decoder_layers, rng)?,
        })
    }

    pub fn prototypes<T: Scalar>(&self, g: &mut Graph<T>, store: &ParameterStore<T>, f_video: Var, s_det: Var) -> Result<(Var, Var)> {
        let n = g.shape(f_video).0;
        let f_n = select_normal_candidates(g, f_video, s_det, self.config.m(n))?;
        let p = self.extractor.forward(g, store, f_n)?;
        Ok((f_n, p))
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParameterStore<T>, f_video: Var, s_det: Var) -> Result<SgnmOutput> {
        let (candidates, prototypes) = self.prototypes(g, store, f_video, s_det)?;
        let compact = compact_loss(g, candidates, prototypes)?;
        let f_rec = self.decoder.forward(g, store, f_video, prototypes)?;
        let s_rec = reconstruction_score(g, f_video, f_rec)?;
        let consist = consistency_loss(g, s_det, s_rec)?;
        Ok(SgnmOutput {
            candidates,
            prototypes,
            f_rec,
            s_rec,
            compact,
            consist,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{gaussian, seeded};
    use crate::tensor::Matrix;
    use approx::assert_relative_eq;

    fn random(n: usize, d: usize, seed: u64) -> Matrix<f64> {
        let mut rng = seeded(seed);
        Matrix::from_fn(n, d, |_, _| gaussian(&mut rng))
    }

    #[test]
    fn bottom_m_rules() {
        assert_eq!(bottom_m_indices(&[0.1, 0.2, 0.3, 0.4], 2).unwrap(), vec![0, 1]);
        assert_eq!(bottom_m_indices(&[0.9, 0.2, 0.5], 3).unwrap(), vec![0, 1, 2]);
        assert_eq!(bottom_m_indices(&[0.5, 0.1, 0.5, 0.5], 2).unwrap(), vec![0, 1]);
        assert_eq!(bottom_m_indices(&[0.9, 0.1, 0.3], 2).unwrap(), vec![1, 2]);
        assert!(matches!(bottom_m_indices(&[0.1], 2), Err(Error::MOutOfRange { m: 2, n: 1 })));
    }

    #[test]
    fn full_selection_is_identity() {
        let x = random(4, 3, 1);
        let mut g = Graph::new();
        let f = g.constant(x.clone());
        let s = g.constant(Matrix::column(&[0.4, 0.1, 0.3, 0.2]));
        let sel = select_normal_candidates(&mut g, f, s, 4).unwrap();
        assert_eq!(g.value(sel), &x);
    }

    #[test]
    fn m_rule() {
        let cfg = SgnmConfig::default();
        assert_eq!(cfg.m(10), 8);
        assert_eq!(cfg.m(1), 1);
        assert_eq!(cfg.m(3), 3);
    }

    fn extractor(d: usize, k: usize) -> (ParameterStore<f64>, DnpExtractor) {
        let mut store = ParameterStore::new();
        let e = DnpExtractor::new(&mut store, d, k, &mut seeded(3)).unwrap();
        (store, e)
    }

    #[test]
    fn single_candidate_is_every_prototype() {
        let (store, e) = extractor(4, 3);
        let x = random(1, 4, 2);
        let mut g = Graph::new();
        let f = g.constant(x.clone());
        let p = e.forward(&mut g, &store, f).unwrap();
        for r in 0..3 {
            for (a, b) in g.value(p).row(r).iter().zip(x.row(0)) {
                assert_relative_eq!(a, b, epsilon = 1e-14);
            }
        }
    }

    #[test]
    fn identical_candidates_give_identical_prototypes() {
        let (store, e) = extractor(4, 3);
        let row = random(1, 4, 8);
        let x = Matrix::from_fn(5, 4, |_, j| row.get(0, j));
        let mut g = Graph::new();
        let f = g.constant(x);
        let p = e.forward(&mut g, &store, f).unwrap();
        let pv = g.value(p);
        for r in 1..3 {
            for (a, b) in pv.row(r).iter().zip(pv.row(0)) {
                assert_relative_eq!(a, b, epsilon = 1e-14);
            }
        }
    }

    fn compact(f: &[f64], m: usize, p: &[f64], k: usize, d: usize) -> Result<f64> {
        let mut g = Graph::<f64>::new();
        let fv = g.constant(Matrix::from_f64(m, d, f).unwrap());
        let pv = g.constant(Matrix::from_f64(k, d, p).unwrap());
        let l = compact_loss(&mut g, fv, pv)?;
        Ok(g.item(l))
    }

    #[test]
    fn compact_examples() {
        assert_eq!(compact(&[1.0, 0.0, 0.0, 2.0], 2, &[0.0, 1.0, 3.0, 0.0], 2, 2).unwrap(), 0.0);
        assert_relative_eq!(compact(&[1.0, 0.0], 1, &[0.0, 1.0], 1, 2).unwrap(), 1.0, epsilon = 1e-15);
        let half = (3.0f64).sqrt() / 2.0;
        assert_relative_eq!(
            compact(&[1.0, 0.0, 0.5, half], 2, &[1.0, 0.0], 1, 2).unwrap(),
            0.25,
            epsilon = 1e-12
        );
        assert!(matches!(compact(&[0.0, 0.0], 1, &[1.0, 0.0], 1, 2), Err(Error::ZeroVector(_))));
    }

    fn rank(m: &Matrix<f64>, rel: f64) -> usize {
        // Gram-matrix eigenvalues by Jacobi rotation.
        let g = m.transpose().matmul(m).unwrap();
        let n = g.rows();
        let mut a: Vec<Vec<f64>> = (0..n).map(|i| g.row(i).to_vec()).collect();
        for _ in 0..100 {
            for p in 0..n {
                for q in p + 1..n {
                    if a[p][q].abs() < 1e-300 {
                        continue;
                    }
                    let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                    let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                    let t = if theta == 0.0 { 1.0 } else { t };
                    let c = 1.0 / (t * t + 1.0).sqrt();
                    let s = t * c;
                    for k in 0..n {
                        let (akp, akq) = (a[k][p], a[k][q]);
                        a[k][p] = c * akp - s * akq;
                        a[k][q] = s * akp + c * akq;
                    }
                    for k in 0..n {
                        let (apk, aqk) = (a[p][k], a[q][k]);
                        a[p][k] = c * apk - s * aqk;
                        a[q][k] = s * apk + c * aqk;
                    }
                }
            }
        }
        let sv: Vec<f64> = (0..n).map(|i| a[i][i].max(0.0).sqrt()).collect();
        let top = sv.iter().cloned().fold(0.0, f64::max);
        sv.iter().filter(|&&s| s > rel * top).count()
    }

    #[test]
    fn depth_one_reconstruction_has_rank_at_most_k() {
        let mut store = ParameterStore::<f64>::new();
        let dec = ReconDecoder::new(&mut store, 8, 1, &mut seeded(4)).unwrap();
        let mut g = Graph::new();
        let f = g.constant(random(10, 8, 5));
        let p = g.constant(random(2, 8, 6));
        let rec = dec.forward(&mut g, &store, f, p).unwrap();
        assert_eq!(rank(g.value(rec), 1e-4), 2);
        assert_eq!(rank(&random(10, 8, 1), 1e-4), 8);
    }

    #[test]
    fn identical_prototypes_give_parallel_rows() {
        let mut store = ParameterStore::<f64>::new();
        let dec = ReconDecoder::new(&mut store, 6, 1, &mut seeded(4)).unwrap();
        let row = random(1, 6, 9);
        let mut g = Graph::new();
        let f = g.constant(random(5, 6, 5));
        let p = g.constant(Matrix::from_fn(3, 6, |_, j| row.get(0, j)));
        let rec = dec.forward(&mut g, &store, f, p).unwrap();
        let r = g.value(rec);
        for i in 1..5 {
            let c = crate::tensor::cosine(r.row(0), r.row(i)).unwrap();
            assert_relative_eq!(c.abs(), 1.0, epsilon = 1e-12);
        }
    }

    fn s_rec(a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Matrix::from_f64(1, a.len(), a).unwrap());
        let y = g.constant(Matrix::from_f64(1, b.len(), b).unwrap());
        let s = reconstruction_score(&mut g, x, y).unwrap();
        g.value(s).to_f64()
    }

    #[test]
    fn reconstruction_score_examples() {
        assert_relative_eq!(s_rec(&[1.0, 2.0], &[1.0, 2.0])[0], 0.0, epsilon = 1e-15);
        assert_relative_eq!(s_rec(&[1.0, 2.0], &[-1.0, -2.0])[0], 1.0, epsilon = 1e-15);
        assert_relative_eq!(s_rec(&[1.0, 0.0], &[0.0, 3.0])[0], 0.5, epsilon = 1e-15);
    }

    fn consist(a: &[f64], b: &[f64]) -> Result<f64> {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Matrix::column(a));
        let y = g.constant(Matrix::column(b));
        let l = consistency_loss(&mut g, x, y)?;
        Ok(g.item(l))
    }

    #[test]
    fn consistency_examples() {
        assert_eq!(consist(&[0.3, 0.7], &[0.3, 0.7]).unwrap(), 0.0);
        assert_eq!(consist(&[1.0, 0.0], &[0.0, 0.0]).unwrap(), 0.5);
        assert_eq!(consist(&[0.2, 0.9], &[0.6, 0.1]).unwrap(), consist(&[0.6, 0.1], &[0.2, 0.9]).unwrap());
        assert!(matches!(consist(&[0.1], &[0.1, 0.2]), Err(Error::LengthMismatch(1, 2))));
    }

    #[test]
    fn consistency_gradient_reaches_both_tracks() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Matrix::column(&[0.2, 0.9]));
        let y = g.input(Matrix::column(&[0.6, 0.1]));
        let l = consistency_loss(&mut g, x, y).unwrap();
        g.backward(l).unwrap();
        let gx = g.grad(x).unwrap().to_f64();
        let gy = g.grad(y).unwrap().to_f64();
        assert_relative_eq!(gx[0], -0.4, epsilon = 1e-12);
        assert_relative_eq!(gy[0], 0.4, epsilon = 1e-12);
    }
}
