//! Reverse-mode automatic differentiation over small dense tensors.
//!
//! Operations are recorded on a [`Tape`] as they execute; [`Tape::backward`]
//! sweeps the tape once in reverse and accumulates gradients into every leaf
//! created with `requires_grad`. The op set is deliberately narrow: enough to
//! express the convolutional generators, discriminators and classifiers used
//! elsewhere in the workspace, with no general broadcasting.

pub mod element;
pub mod error;
pub mod gradcheck;
mod kernels;
mod ops;
pub mod optim;
pub mod params;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use element::Element;
pub use error::{AutodiffError, Result};
pub use optim::{Algorithm, OptimizerConfig, OptimizerState};
pub use params::{Bound, ParamId, ParamStore};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{Tensor, TensorOf};
