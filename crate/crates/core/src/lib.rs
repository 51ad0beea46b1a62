//! Mixture-of-variational-experts layers and hierarchical variational
//! continual learning on a small reverse-mode autodiff tape.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod diversity;
pub mod error;
pub mod experiment;
pub mod gradcheck;
pub mod harness;
pub mod linalg;
pub mod mixture;
pub mod model;
pub mod optim;
pub mod selftest;
pub mod tape;
pub mod tensor;
pub mod variational;

pub use error::{Error, Result};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
