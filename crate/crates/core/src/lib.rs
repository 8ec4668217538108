pub mod adjoint;
pub mod data_synth;
pub mod error;
pub mod loss_metrics;
pub mod network;
pub mod regularizer;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Activation, ConvKernelStack, FeatureField};
