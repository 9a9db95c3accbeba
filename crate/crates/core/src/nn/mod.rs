//! Parameterised networks, optimisation and checkpoint storage.

pub mod checkpoint;
pub mod mlp;
pub mod optim;
pub mod params;

pub use mlp::{BoundMlp, Mlp, MlpSpec};
pub use optim::{adam_step, clip_grad_norm, global_norm, polyak_update, AdamConfig};
pub use params::{GradStore, Param, ParamStore};
