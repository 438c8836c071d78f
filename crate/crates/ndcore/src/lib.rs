//! Minimal dense numerics for training small graph models on the CPU:
//! [`Tensor`] values, a define-by-run reverse-mode [`Tape`], named
//! [`ParameterStore`]s with Glorot initialisation, [`Adam`], and JSON
//! [`Checkpoint`]s. Everything runs in `f64`.

pub mod adam;
pub mod checkpoint;
pub mod error;
pub mod gradcheck;
pub mod kernels;
pub mod params;
pub mod tape;
pub mod tensor;

pub use adam::{Adam, AdamConfig};
pub use checkpoint::{Checkpoint, ParamRecord, CHECKPOINT_FORMAT};
pub use error::{NdError, Result};
pub use params::{glorot_uniform, Bindings, Parameter, ParameterStore};
pub use tape::{sigmoid, Tape, Var};
pub use tensor::Tensor;
