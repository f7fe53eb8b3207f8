//! Differentiable dense computation: graph, parameters, optimizer,
//! finite-difference checks and checkpoints.

pub mod checkpoint;
pub mod fdcheck;
pub mod graph;
pub mod params;

pub use fdcheck::{finite_diff_check, FdOptions, FdReport, ParamCheck};
pub use graph::{Graph, Var};
pub use params::{AdamW, Init, Param, ParamId, ParameterStore};
