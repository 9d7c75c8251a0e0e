//! Deterministic reverse-mode differentiation over small dense matrices.
//!
//! A [`Graph`] records primitive operations as they execute; [`Graph::backward`]
//! sweeps them in reverse and accumulates gradients into leaves. Learnable
//! tensors live in a [`ParamStore`] and are updated by an [`Optimizer`].

pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod nn;
pub mod optim;
pub mod params;
pub mod tensor;

pub use error::{DiffError, Result};
pub use graph::{sigmoid, softmax_in_place, Graph, Var, LAYER_NORM_EPS};
pub use nn::{affine, mlp_forward, AffineVars};
pub use optim::{halving_lr, OptimKind, Optimizer};
pub use params::{Param, ParamId, ParamStore};
pub use tensor::{matmul, Tensor};
