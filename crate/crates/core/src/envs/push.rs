use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use super::{clip_unit, Environment, StepResult};
use crate::error::{Error, Result};

/// Motion per step is resolved in this many substeps so a full-speed step
/// cannot pass through the block.
const SUBSTEPS: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PushConfig {
    pub v_max: f64,
    pub contact_radius: f64,
    pub block_half_size: f64,
    pub reset_half_width: f64,
    pub ee_start: [f64; 2],
    pub y_goal: f64,
    pub max_steps: usize,
    pub workspace: f64,
}

impl Default for PushConfig {
    fn default() -> Self {
        Self {
            v_max: 0.1,
            contact_radius: 0.05,
            block_half_size: 0.025,
            reset_half_width: 0.1,
            ee_start: [0.0, 0.35],
            y_goal: -0.3,
            max_steps: 60,
            workspace: 0.5,
        }
    }
}

impl PushConfig {
    /// Same scene with the goal line on the opposite side.
    pub fn transfer() -> Self {
        Self {
            y_goal: 0.3,
            ..Self::default()
        }
    }

    /// `-1` when the block must go below the line, `+1` above it.
    pub fn direction(&self) -> f64 {
        if self.y_goal < 0.0 {
            -1.0
        } else {
            1.0
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.v_max > 0.0 && self.contact_radius > 0.0 && self.workspace > 0.0) {
            return Err(Error::Config("push geometry must be positive".into()));
        }
        if self.y_goal.abs() <= self.reset_half_width {
            return Err(Error::Config(format!(
                "goal line {} lies inside the reset region",
                self.y_goal
            )));
        }
        if self.max_steps == 0 {
            return Err(Error::Config("max_steps must be positive".into()));
        }
        Ok(())
    }

    pub fn crossed(&self, block_y: f64) -> bool {
        if self.direction() < 0.0 {
            block_y < self.y_goal
        } else {
            block_y > self.y_goal
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PushState {
    pub ee: [f64; 2],
    pub block: [f64; 2],
    pub t: usize,
}

/// Point pusher and a block on a plane; contact is a rigid projection that
/// restores the contact radius along the pusher-to-block direction.
#[derive(Clone, Debug)]
pub struct Push2d {
    cfg: PushConfig,
    state: PushState,
}

impl Push2d {
    pub fn new(cfg: PushConfig) -> Result<Self> {
        cfg.validate()?;
        let state = PushState {
            ee: cfg.ee_start,
            block: [0.0, 0.0],
            t: 0,
        };
        Ok(Self { cfg, state })
    }

    pub fn config(&self) -> &PushConfig {
        &self.cfg
    }

    pub fn state(&self) -> PushState {
        self.state
    }

    pub fn set_state(&mut self, state: PushState) {
        self.state = state;
    }

    /// Pure transition function.
    pub fn transition(cfg: &PushConfig, state: &PushState, action: &[f64]) -> PushState {
        let ax = clip_unit(action.first().copied().unwrap_or(0.0));
        let ay = clip_unit(action.get(1).copied().unwrap_or(0.0));
        let w = cfg.workspace;
        let mut ee = state.ee;
        let mut block = state.block;
        let dx = cfg.v_max * ax / SUBSTEPS as f64;
        let dy = cfg.v_max * ay / SUBSTEPS as f64;
        for _ in 0..SUBSTEPS {
            ee = [(ee[0] + dx).clamp(-w, w), (ee[1] + dy).clamp(-w, w)];
            let rx = block[0] - ee[0];
            let ry = block[1] - ee[1];
            let d = (rx * rx + ry * ry).sqrt();
            if d < cfg.contact_radius {
                let (ux, uy) = if d > 0.0 {
                    (rx / d, ry / d)
                } else {
                    let n = (dx * dx + dy * dy).sqrt();
                    if n > 0.0 {
                        (dx / n, dy / n)
                    } else {
                        (0.0, 1.0)
                    }
                };
                block = [
                    (ee[0] + cfg.contact_radius * ux).clamp(-w, w),
                    (ee[1] + cfg.contact_radius * uy).clamp(-w, w),
                ];
            }
        }
        PushState {
            ee,
            block,
            t: state.t + 1,
        }
    }

    /// `-||ee - block|| - |y_block - y_goal|`.
    pub fn dense_reward_oracle(cfg: &PushConfig, state: &PushState) -> f64 {
        let d = ((state.ee[0] - state.block[0]).powi(2) + (state.ee[1] - state.block[1]).powi(2))
            .sqrt();
        -d - (state.block[1] - cfg.y_goal).abs()
    }

    /// Scripted pusher: get behind the block (relative to the goal side),
    /// line up, then push toward the line while correcting sideways drift.
    pub fn scripted_expert(cfg: &PushConfig, obs: &[f64]) -> [f64; 2] {
        let (ex, ey, bx, by) = (obs[0], obs[1], obs[2], obs[3]);
        let s = cfg.direction();
        let rc = cfg.contact_radius;
        let v = cfg.v_max;
        let toward = |tx: f64, ty: f64| [clip_unit((tx - ex) / v), clip_unit((ty - ey) / v)];
        // distance behind the block, measured against the push direction
        let behind = s * (by - ey);
        let dx = bx - ex;
        if behind > 0.0 && dx.abs() < 0.5 * behind + 0.005 {
            return [clip_unit(dx / v), s];
        }
        let stand_off = rc + 0.02;
        if behind >= rc + 0.01 {
            return toward(bx, by - s * stand_off);
        }
        let side = if ex >= bx { 1.0 } else { -1.0 };
        let clear = 2.4 * rc;
        if dx.abs() < clear - 0.02 {
            toward(bx + side * clear, ey)
        } else {
            toward(ex, by - s * stand_off)
        }
    }
}

impl Environment for Push2d {
    fn name(&self) -> &'static str {
        if self.cfg.direction() < 0.0 {
            "push2d"
        } else {
            "push2d-transfer"
        }
    }

    fn obs_dim(&self) -> usize {
        4
    }

    fn action_dim(&self) -> usize {
        2
    }

    fn max_steps(&self) -> usize {
        self.cfg.max_steps
    }

    fn reset(&mut self, rng: &mut dyn RngCore) -> Vec<f64> {
        let h = self.cfg.reset_half_width;
        let bx = rng.random_range(-h..h);
        let by = rng.random_range(-h..h);
        self.state = PushState {
            ee: self.cfg.ee_start,
            block: [bx, by],
            t: 0,
        };
        self.observation()
    }

    fn step(&mut self, action: &[f64]) -> StepResult {
        self.state = Self::transition(&self.cfg, &self.state, action);
        let success = self.cfg.crossed(self.state.block[1]);
        StepResult {
            observation: self.observation(),
            done: success || self.state.t >= self.cfg.max_steps,
            success,
        }
    }

    fn observation(&self) -> Vec<f64> {
        vec![
            self.state.ee[0],
            self.state.ee[1],
            self.state.block[0],
            self.state.block[1],
        ]
    }

    fn expert_action(&self, obs: &[f64]) -> Vec<f64> {
        Self::scripted_expert(&self.cfg, obs).to_vec()
    }

    fn trajectory_success(&self, observations: &[Vec<f64>]) -> bool {
        observations.iter().any(|o| self.cfg.crossed(o[3]))
    }

    fn dense_reward(&self, obs: &[f64]) -> f64 {
        let state = PushState {
            ee: [obs[0], obs[1]],
            block: [obs[2], obs[3]],
            t: 0,
        };
        Self::dense_reward_oracle(&self.cfg, &state)
    }
}
