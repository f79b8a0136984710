//! Layer-freezing transfer experiments on small convolutional networks.

pub mod analysis;
pub mod config;
pub mod datagen;
pub mod error;
pub mod gradcheck;
pub mod layers;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod protocol;
pub mod seed;
pub mod surgery;
pub mod tensor;
pub mod zoo;

pub use error::{Error, Result};
pub use model::{build_model, Model, NamedTensors};
pub use tensor::{Scalar, Tensor};
pub use zoo::{ModelSpec, Preset};
