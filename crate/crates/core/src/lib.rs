//! ANN-to-SNN conversion with learned clipping thresholds.

pub mod balance;
pub mod diagnostics;
pub mod error;
pub mod forward;
pub mod graph;
pub mod io;
pub mod ops;
pub mod pipeline;
pub mod snn;
pub mod spectral;
pub mod tensor;
pub mod transform;

pub use error::{Error, Result};
pub use graph::{ActivationMode, LayerSpec, NetworkGraph};
pub use tensor::Tensor;
