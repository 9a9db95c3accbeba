//! Deterministic desk-scale manipulation tasks with scripted,
//! observation-only demonstrators.

mod liftcarry;
mod push;

use rand::RngCore;

use crate::error::{Error, Result};

pub use liftcarry::{LiftCarry, LiftCarryConfig, LiftCarryState, Stage};
pub use push::{Push2d, PushConfig, PushState};

#[derive(Clone, Debug, PartialEq)]
pub struct StepResult {
    pub observation: Vec<f64>,
    pub done: bool,
    pub success: bool,
}

pub trait Environment: Send {
    fn name(&self) -> &'static str;
    fn obs_dim(&self) -> usize;
    fn action_dim(&self) -> usize;
    fn max_steps(&self) -> usize;
    fn reset(&mut self, rng: &mut dyn RngCore) -> Vec<f64>;
    /// Advances one step; actions are clipped to `[-1, 1]`.
    fn step(&mut self, action: &[f64]) -> StepResult;
    fn observation(&self) -> Vec<f64>;
    /// Scripted demonstrator acting on observations only.
    fn expert_action(&self, obs: &[f64]) -> Vec<f64>;
    /// Success over a stored observation sequence.
    fn trajectory_success(&self, observations: &[Vec<f64>]) -> bool;
    /// Shaped reward for diagnostics; never seen by the learner.
    fn dense_reward(&self, obs: &[f64]) -> f64;
}

pub const ENV_NAMES: [&str; 3] = ["push2d", "push2d-transfer", "liftcarry1d"];

pub fn make_env(name: &str) -> Result<Box<dyn Environment>> {
    match name {
        "push2d" => Ok(Box::new(Push2d::new(PushConfig::default())?)),
        "push2d-transfer" => Ok(Box::new(Push2d::new(PushConfig::transfer())?)),
        "liftcarry1d" => Ok(Box::new(LiftCarry::new(LiftCarryConfig::default())?)),
        other => Err(Error::Config(format!(
            "unknown environment {other:?}; expected one of {}",
            ENV_NAMES.join(", ")
        ))),
    }
}

pub(crate) fn clip_unit(a: f64) -> f64 {
    if a.is_nan() {
        0.0
    } else {
        a.clamp(-1.0, 1.0)
    }
}

/// Observations and success of one scripted-expert episode.
pub fn expert_rollout(env: &mut dyn Environment, rng: &mut dyn RngCore) -> (Vec<Vec<f64>>, bool) {
    let mut obs = env.reset(rng);
    let mut traj = vec![obs.clone()];
    let mut success = false;
    for _ in 0..env.max_steps() {
        let a = env.expert_action(&obs);
        let s = env.step(&a);
        obs = s.observation;
        traj.push(obs.clone());
        success |= s.success;
        if s.done {
            break;
        }
    }
    (traj, success)
}
