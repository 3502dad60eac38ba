//! Multi-encoder-decoder recurrent networks with spatial attention fusion
//! for sensor-network sequence-to-sequence forecasting.

pub mod baselines;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use model::{Forecast, ModelConfig, ParameterStore};
pub use tensor::{Rng, SeriesTensor3, Tensor};
