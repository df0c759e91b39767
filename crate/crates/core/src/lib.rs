//! Multi-style trajectory forecasting.
//!
//! A two-stage network: the style-proposal stage classifies agents into
//! hidden behavior categories by nearest endpoint and proposes one endpoint
//! per style channel; the stylized-prediction stage completes each proposal
//! into a full future trajectory. Everything here is pure computation over
//! `alloc`; file formats and the command line live in the `msn` crate.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod context;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
mod linalg;
pub mod model;
pub mod nn;
pub mod param;
pub mod predict;
pub mod style;
pub mod tape;
pub mod tensor;
pub mod train;
pub mod transformer;

pub use error::{Error, Result};
pub use param::{Gradients, ParamId, ParamStore, Parameter};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
