//! Extremal perturbation attribution.

#![allow(clippy::neg_cmp_op_on_partial_ord)] // `!(x > 0.0)` also rejects NaN
#![allow(clippy::needless_range_loop)] // window loops index several parallel arrays

pub mod area;
pub mod channel;
pub mod engine;
pub mod error;
pub mod evaluation;
pub mod gradcheck;
pub mod graph;
pub mod imageio;
pub mod mask;
pub mod models;
pub mod perturbation;
pub mod selftest;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use tensor::Tensor;
