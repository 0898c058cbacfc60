//! Linearized Bregman iterations and multilevel sparse training over
//! grouped parameter vectors.
//!
//! The crate is organized along the pipeline:
//!
//! - [`param_space`]: grouped flat vectors, support masks, sparsity metrics;
//! - [`regularizers`]: the group-separable regularizer, its elastic-net
//!   envelope, proximal operators, and Bregman divergences;
//! - [`models`]: differentiable finite-sum problems (synthetic convex losses
//!   and small feed-forward networks with hand-coded backpropagation);
//! - [`transfer`]: restriction/prolongation between the fine parameter space
//!   and the coarse space of selected groups;
//! - [`optimizers`]: the LinBreg step, the multilevel training cycle,
//!   variance-reduced coarse gradients, and sparse initialization;
//! - [`diagnostics`]: FLOP accounting, convergence-rate checks, run records;
//! - [`verify`]: self-contained oracle suites backing `bregml verify`.

pub mod diagnostics;
pub mod models;
pub mod optimizers;
pub mod param_space;
pub mod regularizers;
pub mod rng;
pub mod transfer;
pub mod verify;

pub use param_space::{GroupLayout, GroupRole, GroupSpec, ParamVector, SupportMask};
pub use regularizers::{BregmanState, RegTerm, RegularizerSpec};
