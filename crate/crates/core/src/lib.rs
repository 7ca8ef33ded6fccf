//! Target-aware transformer knowledge distillation on a small reverse-mode
//! tensor engine.
//!
//! The crate is `no_std` (it needs `alloc`). File formats, the training
//! harness and the command line live in the `tat` crate.

#![no_std]

extern crate alloc;

pub mod audit;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod hier;
pub mod losses;
pub mod metrics;
pub mod nets;
pub mod optim;
pub mod params;
pub mod projector;
pub mod real;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use real::Real;
pub use tape::{Mode, Tape, Var};
pub use tensor::Tensor;
