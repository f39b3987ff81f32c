//! Training-free few-shot adaptation of cached multimodal embeddings.
//!
//! The crate covers zero-shot classification from text heads, the Tip
//! residual cache adapter, proximal kernel ridge regression (ProKeR), and
//! MUKA, which runs ProKeR with a product of per-space RBF kernels. The
//! [`protocol`] module reproduces the few-shot evaluation workflow
//! (seeded sampling, cross-validation, grid search and hyperparameter
//! transfer), and [`synth`] generates small two-space datasets with known
//! structure plus brute-force oracles for testing.

pub mod adapters;
pub mod cli;
pub mod error;
pub mod kernel;
pub mod linalg;
pub mod protocol;
pub mod store;
pub mod synth;

pub use error::{Error, ExitKind};
