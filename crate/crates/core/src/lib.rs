//! LSTA: an LSTM variant with recurrent spatial attention and output
//! pooling, built on a small reverse-mode tensor engine.
//!
//! The crate is `no_std` (it needs `alloc`). File formats, the CLI and
//! anything touching the filesystem live in the companion `lsta-cli` crate.
//!
//! Layout:
//! - [`tensor`], [`tape`], [`kernels`]: dense `f64` tensors, the op
//!   vocabulary with adjoints, and the convolution kernels behind it.
//! - [`gradcheck`]: central finite differences.
//! - [`pooling`]: category selection and class-activation-map attention.
//! - [`cells`]: ConvLSTM and LSTA.
//! - [`streams`]: appearance/motion streams and two-stream fusion.
//! - [`synth`]: the synthetic verb/object activity task.
//! - [`train`]: losses, optimizers, the training loop and metrics.

#![no_std]

extern crate alloc;

pub mod cells;
pub mod error;
pub mod gradcheck;
pub mod kernels;
pub mod math;
pub mod params;
pub mod pooling;
pub mod rng;
pub mod streams;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use params::{Binding, ParamId, ParamSet};
pub use rng::SplitMix64;
pub use tape::{Tape, Var};
pub use tensor::{Shape, Tensor};
