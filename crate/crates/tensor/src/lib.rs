//! Minimal dense-tensor engine with reverse-mode automatic differentiation
//! and the Adam optimizer — just enough to express and train small hybrid
//! CNNs (conv / batchnorm / maxpool / dense / relu / dropout) at f32 or f64.
//!
//! A [`Tape`] owns every tensor of one forward pass and replays recorded
//! ops in reverse for gradients. Tapes are single-worker by design: share
//! nothing, run independent tapes in parallel instead. The hot kernels are
//! data-parallel over disjoint output slices when the `parallel` feature is
//! on (default) and bitwise identical to the sequential fallback either way.

mod adam;
mod error;
mod gradcheck;
mod init;
mod rng;
mod scalar;
mod tape;
mod tensor;

#[doc(hidden)]
pub mod kernels;

#[cfg(any(test, feature = "oracles"))]
pub mod oracles;

#[cfg(test)]
mod op_tests;

pub use adam::{AdamState, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
pub use error::{Result, TensorError};
pub use gradcheck::{gradcheck, GradReport, TensorDeviation, REL_FLOOR};
pub use init::he_uniform;
pub use rng::{stream_seed, DetRng};
pub use scalar::Scalar;
pub use tape::{Mode, Tape, TapeMark, Var, BN_EPS, BN_MOMENTUM};
pub use tensor::Tensor;
