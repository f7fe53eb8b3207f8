//! Weakly-supervised video anomaly detection over frame-feature sequences.
//!
//! Three branches share one temporal encoder: a MIL detection head producing
//! per-frame anomaly scores, a training-only normality branch that
//! reconstructs features from per-video normal prototypes, and a
//! classification branch aligning frames and decoupled event/background
//! prototypes with class text embeddings.
//!
//! All numerics are generic over [`Scalar`] (`f32` or `f64`); the aliases at
//! the crate root fix the common instantiations.

pub mod classify;
pub mod datamodel;
pub mod detection;
pub mod diff;
pub mod error;
pub mod inference;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod report;
pub mod rng;
pub mod scalar;
pub mod sgnm;
pub mod temporal;
pub mod tensor;
pub mod textenc;
pub mod training;

pub use error::{Error, Result};
pub use model::DsaNet;
pub use training::RunConfig;
pub use scalar::Scalar;
pub use tensor::Matrix;

pub type Matrix32 = Matrix<f32>;
pub type Matrix64 = Matrix<f64>;
pub type Graph32 = diff::Graph<f32>;
pub type Graph64 = diff::Graph<f64>;
pub type Store32 = diff::ParameterStore<f32>;
pub type Store64 = diff::ParameterStore<f64>;
