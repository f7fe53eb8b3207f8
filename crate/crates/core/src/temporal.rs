//! Two-stage temporal context: self-attention inside non-overlapping
//! windows, then a dual-channel graph convolution whose edges come from
//! feature cosine similarity and from relative temporal distance.

use serde::{Deserialize, Serialize};

use crate::diff::{Graph, Init, ParameterStore, Var};
use crate::error::{Error, Result};
use crate::nn::{Attention, LayerNorm, Linear, LinearSpec};
use crate::rng::ChaCha8Rng;
use crate::scalar::Scalar;
use crate::tensor::Matrix;

/// Softmax temperature of the similarity adjacency.
pub const GRAPH_TEMPERATURE: f64 = 1.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TemporalConfig {
    pub window: usize,
    pub n_heads: usize,
    pub sigma: f64,
    pub gcn_layers: usize,
}

impl Default for TemporalConfig {
    fn default() -> Self {
        Self {
            window: 8,
            n_heads: 4,
            sigma: 2.0,
            gcn_layers: 1,
        }
    }
}

impl TemporalConfig {
    pub fn validate(&self, dim: usize) -> Result<()> {
        if self.window == 0 {
            return Err(Error::Config("temporal.window must be >= 1".into()));
        }
        if self.n_heads == 0 || dim % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "temporal.n_heads={} must divide dim={dim}",
                self.n_heads
            )));
        }
        if !(self.sigma > 0.0) {
            return Err(Error::Config("temporal.sigma must be positive".into()));
        }
        if self.gcn_layers == 0 {
            return Err(Error::Config("temporal.gcn_layers must be >= 1".into()));
        }
        Ok(())
    }
}

/// Multi-head self-attention restricted to consecutive windows, followed by
/// a residual connection and layer norm.
#[derive(Clone, Debug)]
pub struct LocalTransformer {
    pub attn: Attention,
    pub norm: LayerNorm,
    pub window: usize,
}

impl LocalTransformer {
    pub fn new<T: Scalar>(
        store: &mut ParameterStore<T>,
        name: &str,
        dim: usize,
        cfg: &TemporalConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(Self {
            attn: Attention::new(store, &format!("{name}.attn"), dim, cfg.n_heads, true, rng)?,
            norm: LayerNorm::new(store, &format!("{name}.norm"), dim, true, rng)?,
            window: cfg.window,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParameterStore<T>, x: Var) -> Result<Var> {
        let n = g.shape(x).0;
        let mut parts = Vec::with_capacity(n.div_ceil(self.window));
        for start in (0..n).step_by(self.window) {
            let end = (start + self.window).min(n);
            let xw = if start == 0 && end == n { x } else { g.slice_rows(x, start, end)? };
            let a = self.attn.forward(g, store, xw, xw)?;
            let r = g.add(xw, a)?;
            parts.push(self.norm.forward(g, store, r)?);
        }
        if parts.len() == 1 {
            Ok(parts[0])
        } else {
            g.concat_rows(&parts)
        }
    }
}

/// Row-stochastic adjacency pair over the frames of one video.
#[derive(Clone, Copy, Debug)]
pub struct AdjacencyPair {
    pub a_sim: Var,
    pub a_dist: Var,
}

/// `exp(-|i-j| / sigma)`, row-normalized.
pub fn distance_adjacency<T: Scalar>(n: usize, sigma: f64) -> Matrix<T> {
    distance_adjacency_from(&(0..n).collect::<Vec<_>>(), sigma)
}

/// Distance adjacency for frames whose original positions are `positions`.
pub fn distance_adjacency_from<T: Scalar>(positions: &[usize], sigma: f64) -> Matrix<T> {
    let n = positions.len();
    let mut m = Matrix::zeros(n, n);
    for i in 0..n {
        let w: Vec<f64> = positions
            .iter()
            .map(|&pj| (-(positions[i].abs_diff(pj) as f64) / sigma).exp())
            .collect();
        let s: f64 = w.iter().sum();
        for (j, wj) in w.into_iter().enumerate() {
            m.set(i, j, T::of(wj / s));
        }
    }
    m
}

/// Similarity channel is a softmax over cosine similarities (differentiable
/// in `f`); the distance channel is a constant.
pub fn build_adjacency<T: Scalar>(g: &mut Graph<T>, f: Var, sigma: f64) -> Result<AdjacencyPair> {
    let n = g.shape(f).0;
    let cos = g.cosine_similarity(f, f)?;
    let a_sim = g.row_softmax(cos, T::of(GRAPH_TEMPERATURE))?;
    let a_dist = g.constant(distance_adjacency(n, sigma));
    Ok(AdjacencyPair { a_sim, a_dist })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Gelu,
    Identity,
}

/// `act(concat(A_sim·F·W_s, A_dist·F·W_d)·W_o + b)`, plus `F` when residual.
#[derive(Clone, Debug)]
pub struct DualGcnLayer {
    pub sim_proj: Linear,
    pub dist_proj: Linear,
    pub fuse: Linear,
    pub activation: Activation,
    pub residual: bool,
}

impl DualGcnLayer {
    pub fn new<T: Scalar>(
        store: &mut ParameterStore<T>,
        name: &str,
        dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(Self {
            sim_proj: Linear::new(store, &format!("{name}.sim"), dim, dim, LinearSpec::new(Init::FanIn).no_bias(), rng)?,
            dist_proj: Linear::new(store, &format!("{name}.dist"), dim, dim, LinearSpec::new(Init::FanIn).no_bias(), rng)?,
            fuse: Linear::new(store, &format!("{name}.fuse"), 2 * dim, dim, LinearSpec::new(Init::FanIn), rng)?,
            activation: Activation::Gelu,
            residual: true,
        })
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParameterStore<T>,
        f: Var,
        adj: &AdjacencyPair,
    ) -> Result<Var> {
        let s = g.matmul(adj.a_sim, f)?;
        let s = self.sim_proj.forward(g, store, s)?;
        let d = g.matmul(adj.a_dist, f)?;
        let d = self.dist_proj.forward(g, store, d)?;
        let cat = g.concat_cols(&[s, d])?;
        let mut h = self.fuse.forward(g, store, cat)?;
        if self.activation == Activation::Gelu {
            h = g.gelu(h)?;
        }
        if self.residual {
            h = g.add(h, f)?;
        }
        Ok(h)
    }
}

/// All GCN layers share the adjacency built from the stage input.
pub fn dual_gcn<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParameterStore<T>,
    layers: &[DualGcnLayer],
    f: Var,
    adj: &AdjacencyPair,
) -> Result<Var> {
    let mut h = f;
    for layer in layers {
        h = layer.forward(g, store, h, adj)?;
    }
    Ok(h)
}

/// Maps `F_clip` to the contextualized `F_video`.
#[derive(Clone, Debug)]
pub struct TemporalEncoder {
    pub local: LocalTransformer,
    pub gcn: Vec<DualGcnLayer>,
    pub sigma: f64,
}

impl TemporalEncoder {
    pub fn new<T: Scalar>(
        store: &mut ParameterStore<T>,
        dim: usize,
        cfg: &TemporalConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        cfg.validate(dim)?;
        let local = LocalTransformer::new(store, "temporal.local", dim, cfg, rng)?;
        let gcn = (0..cfg.gcn_layers)
            .map(|l| DualGcnLayer::new(store, &format!("temporal.gcn{l}"), dim, rng))
            .collect::<Result<_>>()?;
        Ok(Self {
            local,
            gcn,
            sigma: cfg.sigma,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParameterStore<T>, f_clip: Var) -> Result<Var> {
        let h = self.local.forward(g, store, f_clip)?;
        let adj = build_adjacency(g, h, self.sigma)?;
        dual_gcn(g, store, &self.gcn, h, &adj)
    }
}
