//! Factorization of partially observed sparse tensors with subset
//! alternating least squares (SALS), its coordinate-descent and ALS
//! special cases, and a parallel-SGD baseline.
//!
//! Besides the serial solvers the crate contains row-to-machine assignment
//! strategies, an in-process simulation of the distributed algorithm with
//! exact communication accounting, and an out-of-core execution path that
//! streams residuals from fixed-width binary cache files.

pub mod cache;
pub mod cluster;
pub mod error;
pub mod io;
pub mod linalg;
pub mod partition;
pub mod sgd;
pub mod solver;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
pub use solver::{factorize, factorize_cdtf, ColumnOrder, Counters, Monitor, SolverParams};
pub use tensor::{
    loss, loss_with, rmse, verify_residual, FactorMatrix, FactorModel, Regularization, ResidualKind,
    ResidualState, SparseTensorStore, TensorEntry,
};
