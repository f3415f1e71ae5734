//! Sparse mixture-of-experts layers with compressed experts.
//!
//! The crate is `no_std` (it needs `alloc`) and carries everything that is
//! pure computation:
//!
//! * [`tensor`] and [`tape`]: dense row-major tensors and a reverse-mode
//!   differentiation tape over them, with [`gradcheck`] to validate every
//!   gradient rule against central differences.
//! * [`router`], [`experts`], [`moe_layer`]: top-k routing, gated FFN experts,
//!   the compressed-expert bank and the two layer forwards (full top-k and
//!   compressed-expert mode).
//! * [`model`], [`decode`] and [`task`]: a small decoder stack, cached
//!   inference for it, and synthetic sequence tasks to train it on.
//! * [`optim`], [`train`], [`sweep`]: AdamW with a cosine schedule, the
//!   training loop, evaluation and the expert-reduction sweep.
//! * [`accounting`]: exact active-parameter arithmetic.
//!
//! IO, timing and the command line live in the companion `cemoe` crate.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod accounting;
pub mod decode;
pub mod error;
pub mod experts;
pub mod gradcheck;
pub mod model;
pub mod moe_layer;
pub mod optim;
pub mod router;
pub mod scalar;
pub mod stats;
pub mod sweep;
pub mod tape;
pub mod task;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Real;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
