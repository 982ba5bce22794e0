//! Strips-window attention style transfer on a small reverse-mode tensor
//! engine.

pub mod attention;
pub mod autodiff;
pub mod complexity;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod index;
pub mod io;
pub mod loss;
pub mod model;
pub mod optim;
pub mod params;
pub mod spatial;
pub mod tensor;
pub mod transfer;

pub use autodiff::{Tape, Var};
pub use error::{Error, Result};
pub use model::{ModelConfig, S2wat};
pub use params::{Init, ParameterStore};
pub use tensor::{Real, Tensor};
