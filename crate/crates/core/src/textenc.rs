//! Toy byte-level text encoder with a frozen backbone and trainable
//! adapters in its first blocks, producing one embedding per class name.

use serde::{Deserialize, Serialize};

use crate::diff::{Graph, Init, ParamId, ParameterStore, Var};
use crate::error::{Error, Result};
use crate::nn::{Attention, FeedForward, LayerNorm, Linear, LinearSpec};
use crate::rng::ChaCha8Rng;
use crate::scalar::Scalar;

/// Class names longer than this many bytes are truncated.
pub const MAX_TOKENS: usize = 32;
const VOCAB: usize = 256;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TextConfig {
    pub layers: usize,
    pub adapter_layers: usize,
    pub omega: f64,
    /// Precomputed `C×D` base embeddings in the feature-file format, used in
    /// place of the toy encoder.
    #[serde(default)]
    pub embeddings_file: Option<String>,
}

impl Default for TextConfig {
    fn default() -> Self {
        Self {
            layers: 4,
            adapter_layers: 3,
            omega: 0.1,
            embeddings_file: None,
        }
    }
}

impl TextConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 {
            return Err(Error::Config("text.layers must be >= 1".into()));
        }
        if self.adapter_layers > self.layers {
            return Err(Error::Config(format!(
                "text.adapter_layers={} exceeds text.layers={}",
                self.adapter_layers, self.layers
            )));
        }
        if !(0.0..=1.0).contains(&self.omega) {
            return Err(Error::Config(format!("text.omega must lie in [0, 1], got {}", self.omega)));
        }
        Ok(())
    }
}

/// `x_out = (1 - ω) x + ω Norm(x_adapt)`, where `Norm` rescales each row of
/// `x_adapt` to the norm of the matching row of `x`.
pub fn adapter_fuse<T: Scalar>(g: &mut Graph<T>, x: Var, x_adapt: Var, omega: f64) -> Result<Var> {
    let (sx, sa) = (g.shape(x), g.shape(x_adapt));
    if sx != sa {
        return Err(Error::ShapeMismatch {
            op: "adapter_fuse",
            lhs: sx,
            rhs: sa,
        });
    }
    if omega == 0.0 {
        return Ok(x);
    }
    let norms = g.row_norms(x)?;
    let unit = g.l2_normalize(x_adapt)?;
    let rescaled = g.mul_col(unit, norms)?;
    if omega == 1.0 {
        return Ok(rescaled);
    }
    let keep = g.scale(x, T::of(1.0 - omega))?;
    let adapt = g.scale(rescaled, T::of(omega))?;
    g.add(keep, adapt)
}

/// Bottleneck `up(gelu(down(x)))`; `up` starts at zero.
#[derive(Clone, Debug)]
pub struct Adapter {
    pub down: Linear,
    pub up: Linear,
}

impl Adapter {
    pub fn new<T: Scalar>(store: &mut ParameterStore<T>, name: &str, dim: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let hidden = (dim / 4).max(1);
        Ok(Self {
            down: Linear::new(store, &format!("{name}.down"), dim, hidden, LinearSpec::new(Init::FanIn), rng)?,
            up: Linear::new(store, &format!("{name}.up"), hidden, dim, LinearSpec::new(Init::Zeros), rng)?,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParameterStore<T>, x: Var) -> Result<Var> {
        let h = self.down.forward(g, store, x)?;
        let h = g.gelu(h)?;
        self.up.forward(g, store, h)
    }
}

/// Frozen post-norm transformer block with an optional parallel adapter
/// that taps the block input.
#[derive(Clone, Debug)]
pub struct TextBlock {
    pub attn: Attention,
    pub norm1: LayerNorm,
    pub ffn: FeedForward,
    pub norm2: LayerNorm,
    pub adapter: Option<Adapter>,
}

impl TextBlock {
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParameterStore<T>, x: Var, omega: f64) -> Result<Var> {
        let a = self.attn.forward(g, store, x, x)?;
        let h = g.add(x, a)?;
        let h = self.norm1.forward(g, store, h)?;
        let f = self.ffn.forward(g, store, h)?;
        let h2 = g.add(h, f)?;
        let out = self.norm2.forward(g, store, h2)?;
        match &self.adapter {
            Some(adapter) => {
                let delta = adapter.forward(g, store, x)?;
                let x_adapt = g.add(out, delta)?;
                adapter_fuse(g, out, x_adapt, omega)
            }
            None => Ok(out),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ToyTextEncoder {
    pub embed: ParamId,
    pub position: ParamId,
    pub blocks: Vec<TextBlock>,
    pub omega: f64,
    pub dim: usize,
}

impl ToyTextEncoder {
    pub fn new<T: Scalar>(store: &mut ParameterStore<T>, dim: usize, cfg: &TextConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let embed = store.init("text.embed", VOCAB, dim, Init::Gaussian(1.0), false, rng)?;
        let position = store.init("text.position", MAX_TOKENS, dim, Init::Gaussian(0.5), false, rng)?;
        let mut blocks = (0..cfg.layers)
            .map(|l| {
                let name = format!("text.block{l}");
                Ok(TextBlock {
                    attn: Attention::new(store, &format!("{name}.attn"), dim, 1, false, rng)?,
                    norm1: LayerNorm::new(store, &format!("{name}.norm1"), dim, false, rng)?,
                    ffn: FeedForward::new(store, &format!("{name}.ffn"), dim, 2 * dim, Init::FanIn, false, rng)?,
                    norm2: LayerNorm::new(store, &format!("{name}.norm2"), dim, false, rng)?,
                    adapter: None,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        // Adapters are drawn last: the frozen weights do not depend on L.
        for (l, block) in blocks.iter_mut().take(cfg.adapter_layers).enumerate() {
            block.adapter = Some(Adapter::new(store, &format!("text.adapter{l}"), dim, rng)?);
        }
        Ok(Self {
            embed,
            position,
            blocks,
            omega: cfg.omega,
            dim,
        })
    }

    /// Unnormalized mean-pooled embedding of one name, `1×D`.
    fn encode_one<T: Scalar>(&self, g: &mut Graph<T>, store: &ParameterStore<T>, name: &str) -> Result<Var> {
        let tokens: Vec<usize> = name.bytes().take(MAX_TOKENS).map(usize::from).collect();
        let embed = g.param(store, self.embed);
        let position = g.param(store, self.position);
        let tok = g.gather_rows(embed, &tokens)?;
        let pos = g.slice_rows(position, 0, tokens.len())?;
        let mut x = g.add(tok, pos)?;
        for block in &self.blocks {
            x = block.forward(g, store, x, self.omega)?;
        }
        let pooled = g.sum_rows(x)?;
        g.scale(pooled, T::of(1.0 / tokens.len() as f64))
    }

    /// `T_text`, `C×D` with unit rows.
    pub fn encode_classes<T: Scalar>(&self, g: &mut Graph<T>, store: &ParameterStore<T>, names: &[String]) -> Result<Var> {
        if let Some(i) = names.iter().position(|n| n.is_empty()) {
            return Err(Error::EmptyClassName(i));
        }
        let rows = names
            .iter()
            .map(|n| self.encode_one(g, store, n))
            .collect::<Result<Vec<_>>>()?;
        let t = if rows.len() == 1 { rows[0] } else { g.concat_rows(&rows)? };
        g.l2_normalize(t)
    }
}

/// `Σ_{a≥1} |cos(t_0, t_a)|`.
pub fn separation_loss<T: Scalar>(g: &mut Graph<T>, t: Var) -> Result<Var> {
    let m = g.value(t);
    if m.rows() < 2 {
        return Err(Error::Config("separation loss needs at least two classes".into()));
    }
    if (0..m.rows()).any(|i| m.row_norm(i) == 0.0) {
        return Err(Error::ZeroVector("separation_loss"));
    }
    let c = m.rows();
    let t0 = g.slice_rows(t, 0, 1)?;
    let rest = g.slice_rows(t, 1, c)?;
    let cos = g.cosine_similarity(t0, rest)?;
    let a = g.abs(cos)?;
    g.sum(a)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{gaussian, seeded};
    use crate::tensor::Matrix;
    use approx::assert_relative_eq;

    fn names(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    fn encode(cfg: &TextConfig, v: &[&str]) -> Matrix<f64> {
        let mut store = ParameterStore::new();
        let enc = ToyTextEncoder::new(&mut store, 8, cfg, &mut seeded(11)).unwrap();
        let mut g = Graph::new();
        let t = enc.encode_classes(&mut g, &store, &names(v)).unwrap();
        g.value(t).clone()
    }

    #[test]
    fn embeddings_are_unit_and_deterministic() {
        let t = encode(&TextConfig::default(), &["normal", "fight", "fight"]);
        for i in 0..3 {
            assert_relative_eq!(t.row_norm(i), 1.0, epsilon = 1e-12);
        }
        assert_eq!(t.row(1), t.row(2));
        assert_ne!(t.row(0), t.row(1));
        assert_eq!(t, encode(&TextConfig::default(), &["normal", "fight", "fight"]));
    }

    #[test]
    fn omega_is_inert_while_adapters_are_zero() {
        let a = encode(&TextConfig { omega: 0.1, ..Default::default() }, &["normal", "riot"]);
        let b = encode(&TextConfig { omega: 0.9, ..Default::default() }, &["normal", "riot"]);
        let c = encode(&TextConfig { adapter_layers: 0, ..Default::default() }, &["normal", "riot"]);
        assert!(a.max_abs_diff(&b) < 1e-12);
        assert!(a.max_abs_diff(&c) < 1e-12);
    }

    #[test]
    fn empty_name_rejected() {
        let mut store = ParameterStore::<f32>::new();
        let enc = ToyTextEncoder::new(&mut store, 8, &TextConfig::default(), &mut seeded(0)).unwrap();
        let mut g = Graph::new();
        assert!(matches!(
            enc.encode_classes(&mut g, &store, &names(&["normal", ""])),
            Err(Error::EmptyClassName(1))
        ));
    }

    #[test]
    fn only_adapters_are_trainable() {
        let mut store = ParameterStore::<f32>::new();
        ToyTextEncoder::new(&mut store, 8, &TextConfig::default(), &mut seeded(0)).unwrap();
        for (_, p) in store.iter() {
            assert_eq!(p.trainable, p.name.starts_with("text.adapter"), "{}", p.name);
        }
    }

    fn fuse(x: &Matrix<f64>, a: &Matrix<f64>, omega: f64) -> Matrix<f64> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let av = g.constant(a.clone());
        let y = adapter_fuse(&mut g, xv, av, omega).unwrap();
        g.value(y).clone()
    }

    #[test]
    fn fuse_endpoints_and_norm_bound() {
        let mut rng = seeded(2);
        let x = Matrix::from_fn(6, 5, |_, _| 3.0 * gaussian(&mut rng));
        let a = Matrix::from_fn(6, 5, |_, _| gaussian(&mut rng));
        assert_eq!(fuse(&x, &a, 0.0), x);
        let full = fuse(&x, &a, 1.0);
        for i in 0..6 {
            assert_relative_eq!(full.row_norm(i), x.row_norm(i), epsilon = 1e-12);
        }
        for omega in [0.1, 0.35, 0.6, 0.9] {
            let y = fuse(&x, &a, omega);
            for i in 0..6 {
                assert!(y.row_norm(i) <= x.row_norm(i) + 1e-12);
            }
        }
    }

    #[test]
    fn fuse_shape_mismatch() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Matrix::zeros(2, 3));
        let a = g.constant(Matrix::zeros(3, 3));
        assert!(matches!(adapter_fuse(&mut g, x, a, 0.5), Err(Error::ShapeMismatch { .. })));
    }

    fn sep(rows: &[f64], c: usize, d: usize) -> Result<f64> {
        let mut g = Graph::<f64>::new();
        let t = g.constant(Matrix::from_f64(c, d, rows).unwrap());
        let l = separation_loss(&mut g, t)?;
        Ok(g.item(l))
    }

    #[test]
    fn separation_examples() {
        assert_eq!(sep(&[1.0, 0.0, 0.0, 0.0, 2.0, 0.0, 0.0, 0.0, 1.0], 3, 3).unwrap(), 0.0);
        assert_relative_eq!(sep(&[1.0, 2.0, -1.0, -2.0], 2, 2).unwrap(), 1.0, epsilon = 1e-12);
        let h = (3.0f64).sqrt() / 2.0;
        let q = (15.0f64).sqrt() / 4.0;
        assert_relative_eq!(sep(&[1.0, 0.0, 0.5, h, -0.25, q], 3, 2).unwrap(), 0.75, epsilon = 1e-12);
        assert_relative_eq!(
            sep(&[1.0, 0.0, 5.0, 5.0 * (3.0f64).sqrt(), -0.25, q], 3, 2).unwrap(),
            0.75,
            epsilon = 1e-12
        );
        assert!(matches!(sep(&[0.0, 0.0, 1.0, 0.0], 2, 2), Err(Error::ZeroVector(_))));
    }
}
