//! Parameterized layers shared by the branches.

use crate::diff::{Graph, Init, ParamId, ParameterStore, Var};
use crate::error::Result;
use crate::rng::ChaCha8Rng;
use crate::scalar::Scalar;

/// `x·W + b` with `W` stored `in×out`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

pub struct LinearSpec {
    pub init: Init,
    pub bias: bool,
    pub trainable: bool,
}

impl LinearSpec {
    pub const fn new(init: Init) -> Self {
        Self {
            init,
            bias: true,
            trainable: true,
        }
    }

    pub const fn no_bias(mut self) -> Self {
        self.bias = false;
        self
    }

    pub const fn frozen(mut self, frozen: bool) -> Self {
        self.trainable = !frozen;
        self
    }
}

impl Linear {
    pub fn new<T: Scalar>(
        store: &mut ParameterStore<T>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        spec: LinearSpec,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let weight = store.init(&format!("{name}.weight"), in_dim, out_dim, spec.init, spec.trainable, rng)?;
        let bias = if spec.bias {
            Some(store.init(&format!("{name}.bias"), 1, out_dim, Init::Zeros, spec.trainable, rng)?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParameterStore<T>, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let y = g.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = g.param(store, b);
                g.add_row(y, b)
            }
            None => Ok(y),
        }
    }
}

/// Row standardization with learnable gain and shift.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub shift: ParamId,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

impl LayerNorm {
    pub fn new<T: Scalar>(
        store: &mut ParameterStore<T>,
        name: &str,
        dim: usize,
        trainable: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(Self {
            gain: store.init(&format!("{name}.gain"), 1, dim, Init::Ones, trainable, rng)?,
            shift: store.init(&format!("{name}.shift"), 1, dim, Init::Zeros, trainable, rng)?,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParameterStore<T>, x: Var) -> Result<Var> {
        let n = g.layer_norm(x, T::of(LAYER_NORM_EPS))?;
        let gain = g.param(store, self.gain);
        let shift = g.param(store, self.shift);
        let y = g.mul_row(n, gain)?;
        g.add_row(y, shift)
    }
}

/// Two-layer GELU MLP.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new<T: Scalar>(
        store: &mut ParameterStore<T>,
        name: &str,
        dim: usize,
        hidden: usize,
        out_init: Init,
        trainable: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(Self {
            up: Linear::new(store, &format!("{name}.up"), dim, hidden, LinearSpec::new(Init::FanIn).frozen(!trainable), rng)?,
            down: Linear::new(store, &format!("{name}.down"), hidden, dim, LinearSpec::new(out_init).frozen(!trainable), rng)?,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParameterStore<T>, x: Var) -> Result<Var> {
        let h = self.up.forward(g, store, x)?;
        let h = g.gelu(h)?;
        self.down.forward(g, store, h)
    }
}

/// Multi-head scaled dot-product attention without projection biases.
#[derive(Clone, Debug)]
pub struct Attention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
}

impl Attention {
    pub fn new<T: Scalar>(
        store: &mut ParameterStore<T>,
        name: &str,
        dim: usize,
        heads: usize,
        trainable: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(crate::Error::Config(format!(
                "{name}: {heads} heads do not divide dimension {dim}"
            )));
        }
        let spec = || LinearSpec::new(Init::FanIn).no_bias().frozen(!trainable);
        Ok(Self {
            query: Linear::new(store, &format!("{name}.query"), dim, dim, spec(), rng)?,
            key: Linear::new(store, &format!("{name}.key"), dim, dim, spec(), rng)?,
            value: Linear::new(store, &format!("{name}.value"), dim, dim, spec(), rng)?,
            output: Linear::new(store, &format!("{name}.output"), dim, dim, spec(), rng)?,
            heads,
        })
    }

    /// Rows of `query` attend over rows of `context`.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParameterStore<T>,
        query: Var,
        context: Var,
    ) -> Result<Var> {
        let q = self.query.forward(g, store, query)?;
        let k = self.key.forward(g, store, context)?;
        let v = self.value.forward(g, store, context)?;
        let dim = g.shape(q).1;
        let dh = dim / self.heads;
        let scale = T::of(1.0 / (dh as f64).sqrt());
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (
                    g.slice_cols(q, h * dh, (h + 1) * dh)?,
                    g.slice_cols(k, h * dh, (h + 1) * dh)?,
                    g.slice_cols(v, h * dh, (h + 1) * dh)?,
                )
            };
            let kt = g.transpose(kh)?;
            let scores = g.matmul(qh, kt)?;
            let scores = g.scale(scores, scale)?;
            let attn = g.row_softmax(scores, T::one())?;
            outs.push(g.matmul(attn, vh)?);
        }
        let merged = if outs.len() == 1 { outs[0] } else { g.concat_cols(&outs)? };
        self.output.forward(g, store, merged)
    }
}
