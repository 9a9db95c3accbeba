pub mod agent;
pub mod autodiff;
pub mod config;
pub mod envs;
pub mod error;
pub mod experience;
pub mod nn;
pub mod plan;
pub mod planner;
pub mod policy;
pub mod reward;
pub mod scalar;
pub mod tensor;
pub mod trainer;
pub mod value;
pub mod world_model;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;

/// Default floating-point type for training and checkpoints.
pub type Real = f32;
pub type Models = agent::ModelBundle<Real>;
pub type Demos = experience::DemoSet<Real>;
pub type Runner = trainer::Trainer<Real>;
