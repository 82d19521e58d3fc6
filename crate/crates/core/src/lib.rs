//! Electrical- and chemical-synapse continuous-time recurrent networks,
//! sparse circuit wirings, a small convolutional perception head, and a
//! synthetic lane-keeping bench for training and evaluating them.

pub mod checkpoint;
pub mod convhead;
pub mod dynamics;
pub mod error;
pub mod image;
pub mod metrics;
pub mod network;
pub mod params;
pub mod scalar;
pub mod simworld;
pub mod tape;
pub mod trainer;
pub mod wiring;

pub use error::{Error, Result};
pub use params::ModelKind;
pub use scalar::Scalar;

pub type PolicyF32 = network::Policy<f32>;
pub type PolicyF64 = network::Policy<f64>;
pub type ModelParamsF32 = params::ModelParams<f32>;
pub type ModelParamsF64 = params::ModelParams<f64>;
