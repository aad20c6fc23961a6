//! Weight-tied repeated transformers with per-token adaptive depth.
//!
//! The crate carries its own reverse-mode autodiff ([`autodiff`]), the three
//! model variants ([`model`]), repeat routing ([`routing`]), an analytic cost
//! model ([`cost`]) and a byte-level training harness ([`train`]).

pub mod autodiff;
pub mod cost;
pub mod error;
pub mod model;
pub mod optim;
pub mod routing;
pub mod tensor;
pub mod train;

pub use error::{Error, Result, TensorError};
pub use model::{ModelConfig, ModelParams, Participation, Variant};
pub use routing::{CapacitySchedule, Routing};
pub use tensor::{Float, Tensor};
