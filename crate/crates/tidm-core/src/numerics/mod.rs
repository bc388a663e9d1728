//! Tensors, reverse-mode differentiation, deterministic RNG, parameters.

pub mod adam;
pub mod gradcheck;
pub mod kernels;
pub mod params;
pub mod real;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use adam::Adam;
pub use gradcheck::{finite_difference_check, GradCheckConfig, GradCheckReport, ParamMap};
pub use params::ParamStore;
pub use real::Real;
pub use rng::Rng;
pub use tape::{backpropagate, bind_param_map, bind_params, BoundParams, NodeId, Tape};
pub use tensor::{GTensor, Tensor};
