//! Online continual learning with rehearsal and a continual bias adaptor (CBA).
//!
//! The crate covers the whole pipeline: a small reverse-mode autodiff engine
//! with second-order support, an MLP classifier with an optional bias adaptor,
//! reservoir replay, ER and DER++ losses, the bi-level CBA training step,
//! synthetic and file-backed task streams, continual-learning metrics and an
//! experiment runner.

pub mod autodiff;
pub mod bilevel;
pub mod buffer;
pub mod error;
pub mod methods;
pub mod metrics;
pub mod nn;
pub mod runner;
pub mod stream;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
