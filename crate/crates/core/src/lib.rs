pub mod ablation;
pub mod attention;
pub mod autograd;
pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod gradsuite;
pub mod metrics;
pub mod model;
pub mod params;
pub mod rng;
pub mod tensor;
pub mod train;

pub use autograd::{Gradients, Tape, Var};
pub use error::{Error, Result};
pub use params::ParamStore;
pub use rng::RngStream;
pub use tensor::Tensor;
