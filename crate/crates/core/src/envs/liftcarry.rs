use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use super::{clip_unit, Environment, StepResult};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LiftCarryConfig {
    pub v_max: f64,
    pub grasp_radius: f64,
    pub reset_half_width: f64,
    pub ee_start: [f64; 2],
    pub lift_height: f64,
    pub y_place: f64,
    pub place_tolerance: f64,
    pub max_steps: usize,
    pub workspace: f64,
}

impl Default for LiftCarryConfig {
    fn default() -> Self {
        Self {
            v_max: 0.1,
            grasp_radius: 0.03,
            reset_half_width: 0.1,
            ee_start: [0.0, 0.2],
            lift_height: 0.08,
            y_place: 0.3,
            place_tolerance: 0.03,
            max_steps: 60,
            workspace: 0.5,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LiftCarryState {
    /// `(y, z)` of the gripper.
    pub ee: [f64; 2],
    /// `(y, z)` of the block; `z = 0` is the table.
    pub block: [f64; 2],
    pub grasped: bool,
    pub t: usize,
}

/// Gripper moving in the `(y, z)` plane that must pick a block off the
/// table, carry it to `y_place` and set it down. Observation is
/// `(ee_y, ee_z, block_y, block_z, grip)`, action is `(dy, dz, grip)` with
/// a positive grip command closing the gripper.
#[derive(Clone, Debug)]
pub struct LiftCarry {
    cfg: LiftCarryConfig,
    state: LiftCarryState,
    stage: Stage,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Initialized,
    Lifted,
    Transported,
    Placed,
}

impl LiftCarryConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.v_max > 0.0 && self.grasp_radius > 0.0 && self.lift_height > 0.0) {
            return Err(Error::Config("lift-carry geometry must be positive".into()));
        }
        if (self.y_place.abs() - self.reset_half_width) <= self.place_tolerance {
            return Err(Error::Config(
                "place target overlaps the reset region".into(),
            ));
        }
        if self.max_steps == 0 {
            return Err(Error::Config("max_steps must be positive".into()));
        }
        Ok(())
    }

    fn at_target(&self, block_y: f64) -> bool {
        (block_y - self.y_place).abs() < self.place_tolerance
    }

    /// Advances the staged metric by one observation.
    pub fn advance(&self, stage: Stage, obs: &[f64]) -> Stage {
        let (by, bz, grip) = (obs[2], obs[3], obs[4] > 0.5);
        match stage {
            Stage::Initialized if grip && bz >= self.lift_height => Stage::Lifted,
            Stage::Lifted if grip && bz >= self.lift_height && self.at_target(by) => {
                Stage::Transported
            }
            Stage::Transported if !grip && bz == 0.0 && self.at_target(by) => Stage::Placed,
            s => s,
        }
    }
}

impl LiftCarry {
    pub fn new(cfg: LiftCarryConfig) -> Result<Self> {
        cfg.validate()?;
        let state = LiftCarryState {
            ee: cfg.ee_start,
            block: [0.0, 0.0],
            grasped: false,
            t: 0,
        };
        Ok(Self {
            cfg,
            state,
            stage: Stage::Initialized,
        })
    }

    pub fn state(&self) -> LiftCarryState {
        self.state
    }

    pub fn transition(cfg: &LiftCarryConfig, s: &LiftCarryState, action: &[f64]) -> LiftCarryState {
        let w = cfg.workspace;
        let dy = cfg.v_max * clip_unit(action.first().copied().unwrap_or(0.0));
        let dz = cfg.v_max * clip_unit(action.get(1).copied().unwrap_or(0.0));
        let close = clip_unit(action.get(2).copied().unwrap_or(0.0)) > 0.0;
        let ee = [(s.ee[0] + dy).clamp(-w, w), (s.ee[1] + dz).clamp(0.0, w)];
        let mut block = s.block;
        let mut grasped = s.grasped;
        if grasped && !close {
            grasped = false;
            block[1] = 0.0;
        } else if !grasped && close {
            let d = ((s.ee[0] - block[0]).powi(2) + (s.ee[1] - block[1]).powi(2)).sqrt();
            grasped = d < cfg.grasp_radius;
        }
        if grasped {
            block = ee;
        }
        LiftCarryState {
            ee,
            block,
            grasped,
            t: s.t + 1,
        }
    }

    fn obs_of(s: &LiftCarryState) -> Vec<f64> {
        vec![
            s.ee[0],
            s.ee[1],
            s.block[0],
            s.block[1],
            if s.grasped { 1.0 } else { 0.0 },
        ]
    }

    pub fn stage(&self) -> Stage {
        self.stage
    }

    pub fn scripted_expert(cfg: &LiftCarryConfig, obs: &[f64]) -> [f64; 3] {
        let (ey, ez, by, bz, grip) = (obs[0], obs[1], obs[2], obs[3], obs[4] > 0.5);
        let v = cfg.v_max;
        let toward = |ty: f64, tz: f64| [clip_unit((ty - ey) / v), clip_unit((tz - ez) / v)];
        let carry_z = cfg.lift_height + 0.02;
        if !grip {
            if cfg.at_target(by) && bz == 0.0 {
                let [a, b] = toward(ey, carry_z);
                return [a, b, -1.0];
            }
            let d = ((ey - by).powi(2) + (ez - bz).powi(2)).sqrt();
            let [a, b] = toward(by, bz);
            let close = if d < 0.5 * cfg.grasp_radius {
                1.0
            } else {
                -1.0
            };
            return if close > 0.0 {
                [0.0, 0.0, 1.0]
            } else {
                [a, b, -1.0]
            };
        }
        if ez < cfg.lift_height {
            let [_, b] = toward(ey, carry_z);
            return [0.0, b, 1.0];
        }
        if (ey - cfg.y_place).abs() > 0.25 * cfg.place_tolerance {
            let [a, b] = toward(cfg.y_place, carry_z);
            return [a, b, 1.0];
        }
        [0.0, 0.0, -1.0]
    }
}

impl Environment for LiftCarry {
    fn name(&self) -> &'static str {
        "liftcarry1d"
    }

    fn obs_dim(&self) -> usize {
        5
    }

    fn action_dim(&self) -> usize {
        3
    }

    fn max_steps(&self) -> usize {
        self.cfg.max_steps
    }

    fn reset(&mut self, rng: &mut dyn RngCore) -> Vec<f64> {
        let h = self.cfg.reset_half_width;
        self.state = LiftCarryState {
            ee: self.cfg.ee_start,
            block: [rng.random_range(-h..h), 0.0],
            grasped: false,
            t: 0,
        };
        self.stage = Stage::Initialized;
        self.observation()
    }

    fn step(&mut self, action: &[f64]) -> StepResult {
        self.state = Self::transition(&self.cfg, &self.state, action);
        let obs = self.observation();
        self.stage = self.cfg.advance(self.stage, &obs);
        let success = self.stage == Stage::Placed;
        StepResult {
            observation: obs,
            done: success || self.state.t >= self.cfg.max_steps,
            success,
        }
    }

    fn observation(&self) -> Vec<f64> {
        Self::obs_of(&self.state)
    }

    fn expert_action(&self, obs: &[f64]) -> Vec<f64> {
        Self::scripted_expert(&self.cfg, obs).to_vec()
    }

    fn trajectory_success(&self, observations: &[Vec<f64>]) -> bool {
        observations
            .iter()
            .fold(Stage::Initialized, |s, o| self.cfg.advance(s, o))
            == Stage::Placed
    }

    fn dense_reward(&self, obs: &[f64]) -> f64 {
        let d = ((obs[0] - obs[2]).powi(2) + (obs[1] - obs[3]).powi(2)).sqrt();
        -d - (obs[2] - self.cfg.y_place).abs()
    }
}
