//! Driver attentional map prediction at desk scale: a deterministic tensor
//! core with reverse-mode differentiation, the coarse-to-fine video saliency
//! model, clip assembly and synthetic data, saliency metrics and the
//! attention analysis suite.

pub mod adam;
pub mod analysis;
pub mod autograd;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod io;
pub mod metrics;
pub mod model;
pub mod ops;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
