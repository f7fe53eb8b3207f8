use std::collections::BTreeMap;

use crate::diff::graph::Graph;
use crate::error::{Error, Result};
use crate::rng::{gaussian, ChaCha8Rng};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

/// Index of a parameter inside a [`ParameterStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug)]
pub struct Param<T> {
    pub name: String,
    pub value: Matrix<T>,
    pub grad: Matrix<T>,
    /// Frozen parameters are read in the forward pass but never updated.
    pub trainable: bool,
    m: Matrix<T>,
    v: Matrix<T>,
}

/// How a fresh parameter is filled.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    Identity,
    /// i.i.d. normal with the given standard deviation.
    Gaussian(f64),
    /// Normal with std `1/sqrt(rows)` (fan-in scaling).
    FanIn,
}

impl Init {
    pub fn build<T: Scalar>(self, rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix<T> {
        match self {
            Init::Zeros => Matrix::zeros(rows, cols),
            Init::Ones => Matrix::filled(rows, cols, T::one()),
            Init::Identity => {
                Matrix::from_fn(rows, cols, |i, j| if i == j { T::one() } else { T::zero() })
            }
            Init::Gaussian(std) => Matrix::from_fn(rows, cols, |_, _| T::of(std * gaussian(rng))),
            Init::FanIn => {
                let std = 1.0 / (rows as f64).sqrt();
                Matrix::from_fn(rows, cols, |_, _| T::of(std * gaussian(rng)))
            }
        }
    }
}

/// AdamW with decoupled weight decay.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Named parameters plus their gradients and optimizer moments.
#[derive(Clone, Debug, Default)]
pub struct ParameterStore<T> {
    params: Vec<Param<T>>,
    index: BTreeMap<String, ParamId>,
    step: u64,
}

impl<T: Scalar> ParameterStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            index: BTreeMap::new(),
            step: 0,
        }
    }

    pub fn register(&mut self, name: &str, value: Matrix<T>, trainable: bool) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(Error::schema(name, "parameter registered twice"));
        }
        let (r, c) = value.shape();
        let id = ParamId(self.params.len());
        self.params.push(Param {
            name: name.to_owned(),
            value,
            grad: Matrix::zeros(r, c),
            trainable,
            m: Matrix::zeros(r, c),
            v: Matrix::zeros(r, c),
        });
        self.index.insert(name.to_owned(), id);
        Ok(id)
    }

    pub fn init(
        &mut self,
        name: &str,
        rows: usize,
        cols: usize,
        init: Init,
        trainable: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<ParamId> {
        let value = init.build(rows, cols, rng);
        self.register(name, value, trainable)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn by_name(&self, name: &str) -> Option<&Param<T>> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad = Matrix::zeros(p.value.rows(), p.value.cols());
        }
    }

    /// Adds the leaf gradients of `graph` into the stored gradients.
    pub fn absorb(&mut self, graph: &Graph<T>) {
        for (id, g) in graph.param_grads() {
            self.params[id.0].grad.add_assign(g);
        }
    }

    /// One AdamW update of every trainable parameter.
    pub fn adamw_step(&mut self, opt: &AdamW) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - opt.beta1.powi(t);
        let bc2 = 1.0 - opt.beta2.powi(t);
        for p in self.params.iter_mut().filter(|p| p.trainable) {
            let n = p.value.len();
            for k in 0..n {
                let g = p.grad.data()[k].f64();
                let m = opt.beta1 * p.m.data()[k].f64() + (1.0 - opt.beta1) * g;
                let v = opt.beta2 * p.v.data()[k].f64() + (1.0 - opt.beta2) * g * g;
                p.m.data_mut()[k] = T::of(m);
                p.v.data_mut()[k] = T::of(v);
                let w = p.value.data()[k].f64();
                let update = (m / bc1) / ((v / bc2).sqrt() + opt.eps) + opt.weight_decay * w;
                p.value.data_mut()[k] = T::of(w - opt.lr * update);
            }
        }
    }

    /// Copies values of same-named parameters from `other`.
    pub fn load_values(&mut self, other: &[(String, Matrix<T>)]) -> Result<()> {
        for (name, value) in other {
            let id = self
                .id(name)
                .ok_or_else(|| Error::schema(name.clone(), "unknown parameter in checkpoint"))?;
            let p = &mut self.params[id.0];
            if p.value.shape() != value.shape() {
                return Err(Error::ShapeMismatch {
                    op: "load_values",
                    lhs: p.value.shape(),
                    rhs: value.shape(),
                });
            }
            p.value = value.clone();
        }
        Ok(())
    }

    /// Same parameters cast to another scalar type; optimizer state is reset.
    pub fn cast<U: Scalar>(&self) -> ParameterStore<U> {
        let mut out = ParameterStore::new();
        for p in &self.params {
            out.register(&p.name, p.value.cast(), p.trainable)
                .expect("names are unique in the source store");
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParameterStore::<f32>::new();
        s.register("a", Matrix::zeros(1, 1), true).unwrap();
        assert!(s.register("a", Matrix::zeros(1, 1), true).is_err());
    }

    #[test]
    fn zero_lr_leaves_values() {
        let mut rng = seeded(1);
        let mut s = ParameterStore::<f64>::new();
        let id = s.init("w", 2, 2, Init::FanIn, true, &mut rng).unwrap();
        let before = s.get(id).value.clone();
        s.get_mut(id).grad = Matrix::filled(2, 2, 0.5);
        s.adamw_step(&AdamW {
            lr: 0.0,
            ..AdamW::default()
        });
        assert_eq!(s.get(id).value, before);
    }

    #[test]
    fn adamw_first_step_moves_by_lr() {
        let mut s = ParameterStore::<f64>::new();
        let id = s.register("w", Matrix::scalar(1.0), true).unwrap();
        let frozen = s.register("f", Matrix::scalar(1.0), false).unwrap();
        s.get_mut(id).grad = Matrix::scalar(3.0);
        s.get_mut(frozen).grad = Matrix::scalar(3.0);
        let opt = AdamW {
            lr: 0.1,
            weight_decay: 0.0,
            ..AdamW::default()
        };
        s.adamw_step(&opt);
        // Bias-corrected first step is lr * g/|g|.
        assert!((s.get(id).value.item() - 0.9).abs() < 1e-6);
        assert_eq!(s.get(frozen).value.item(), 1.0);
    }
}
