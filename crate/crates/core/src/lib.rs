//! Simultaneous visual tracking and keypoint estimation through transformer-predicted target
//! models.
//!
//! The crate is `no_std` (it needs `alloc`). File formats, the training driver and the CLI
//! live in the companion `step` crate.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod data;
pub mod encoding;
pub mod loss;
pub mod math;
pub mod metrics;
pub mod network;
pub mod nn;
pub mod param;
pub mod tensor;
pub mod toy;
pub mod tracker;
pub mod train;

pub use param::{Init, ParamId, ParamStore, Parameter};
pub use tensor::{Graph, Tensor, TensorError, Var};
