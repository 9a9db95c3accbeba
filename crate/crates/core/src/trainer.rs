//! The interaction and learning loop, evaluation, demonstration
//! collection and transfer.

use std::fmt::Write as _;
use std::fs::{self, File, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::agent::{ModelBundle, ModelConfig};
use crate::config::{TrainConfig, TransferMode};
use crate::envs::{expert_rollout, make_env, Environment};
use crate::error::{Error, Result};
use crate::experience::{DemoSet, ReplayBuffer, Transition, TransitionSequence};
use crate::nn::{adam_step, clip_grad_norm, AdamConfig, GradStore};
use crate::plan::Plan;
use crate::planner::{FinalPlan, Planner, PlannerConfig, TraceRecord};
use crate::reward::pair_inputs;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const METRICS_FILE: &str = "metrics.csv";
pub const TIMING_FILE: &str = "timing.csv";
pub const FINAL_DIR: &str = "final";
pub const HALT_DIR: &str = "halt";
pub const METRICS_HEADER: &str =
    "episode,steps,success,cumulative_successes,mean_inferred_reward,dynamics_loss,reward_loss,value_loss,policy_loss,alpha";

const STREAM_INIT: u64 = 0;
const STREAM_ENV: u64 = 1;
const STREAM_ACT: u64 = 2;
const STREAM_UPDATE: u64 = 3;

/// Independent generator for one purpose, derived from the run seed.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// One component update, in the order it ran.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UpdateKind {
    Dynamics,
    Reward,
    Value,
    Polyak,
    Policy,
    Temperature,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct CallCounts {
    pub plan: usize,
    pub dynamics: usize,
    pub reward: usize,
    pub value: usize,
    pub policy: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeRecord {
    pub episode: usize,
    pub steps: usize,
    pub success: bool,
    pub cumulative_successes: usize,
    pub mean_inferred_reward: f64,
    pub dynamics_loss: Option<f64>,
    pub reward_loss: Option<f64>,
    pub value_loss: Option<f64>,
    pub policy_loss: Option<f64>,
    pub alpha: f64,
    pub wall_time_s: f64,
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl EpisodeRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.episode,
            self.steps,
            self.success as u8,
            self.cumulative_successes,
            self.mean_inferred_reward,
            opt(self.dynamics_loss),
            opt(self.reward_loss),
            opt(self.value_loss),
            opt(self.policy_loss),
            self.alpha
        )
    }
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub records: Vec<EpisodeRecord>,
    /// 1-based episode of the first success.
    pub first_success: Option<usize>,
    pub final_checkpoint: PathBuf,
    pub stopped_early: bool,
    pub calls: CallCounts,
}

impl TrainSummary {
    /// Success fraction over the last `window` episodes.
    pub fn trailing_success_rate(&self, window: usize) -> Option<f64> {
        trailing_rate(&self.records, window)
    }
}

fn trailing_rate(records: &[EpisodeRecord], window: usize) -> Option<f64> {
    if window == 0 || records.len() < window {
        return None;
    }
    let tail = &records[records.len() - window..];
    Some(tail.iter().filter(|r| r.success).count() as f64 / window as f64)
}

#[derive(Default)]
struct LossSums {
    dynamics: (f64, usize),
    reward: (f64, usize),
    value: (f64, usize),
    policy: (f64, usize),
}

fn mean_of((s, n): (f64, usize)) -> Option<f64> {
    (n > 0).then(|| s / n as f64)
}

fn to_t<T: Scalar>(v: &[f64]) -> Vec<T> {
    v.iter().map(|&x| T::from_f64_lossy(x)).collect()
}

fn to_f64<T: Scalar>(v: &[T]) -> Vec<f64> {
    v.iter().map(|x| x.to_f64_lossy()).collect()
}

fn rows_at<T: Scalar>(
    batch: &[TransitionSequence<T>],
    f: impl Fn(&TransitionSequence<T>) -> &Vec<T>,
) -> Tensor<T> {
    Tensor::from_rows(&batch.iter().map(|s| f(s).clone()).collect::<Vec<_>>())
}

/// Model shapes for an environment under a run configuration.
pub fn model_config_for(cfg: &TrainConfig, env: &dyn Environment) -> ModelConfig {
    ModelConfig {
        obs_dim: env.obs_dim(),
        action_dim: env.action_dim(),
        latent_dim: cfg.latent_dim,
        hidden: cfg.hidden.clone(),
        horizon: cfg.horizon,
        ensemble_size: cfg.ensemble_size,
        initial_alpha: cfg.initial_alpha,
    }
}

/// Checks that every tensor of `models` has the shape a fresh bundle for
/// `expected` would have, listing offenders.
pub fn check_compatible<T: Scalar>(models: &ModelBundle<T>, expected: &ModelConfig) -> Result<()> {
    let mut rng = stream_rng(0, STREAM_INIT);
    let fresh = ModelBundle::<T>::new(expected.clone(), &mut rng)?;
    let have = models.named_tensors();
    let want = fresh.named_tensors();
    let mut bad = Vec::new();
    for (name, t) in &want {
        match have.get(name) {
            Some(h) if h.shape() == t.shape() => {}
            Some(h) => bad.push(format!("{name} {:?} (expected {:?})", h.shape(), t.shape())),
            None => bad.push(format!("{name} missing")),
        }
    }
    for name in have.keys().filter(|n| !want.contains_key(*n)) {
        bad.push(format!("{name} unexpected"));
    }
    if bad.is_empty() {
        Ok(())
    } else {
        Err(Error::Dimension {
            context: format!("checkpoint tensors: {}", bad.join(", ")),
            expected: expected.obs_dim,
            actual: models.config.obs_dim,
        })
    }
}

pub struct Trainer<T> {
    cfg: TrainConfig,
    env: Box<dyn Environment>,
    demos: DemoSet<T>,
    models: ModelBundle<T>,
    buffer: ReplayBuffer<T>,
    planner: Planner,
    adam: AdamConfig,
    env_rng: ChaCha8Rng,
    act_rng: ChaCha8Rng,
    update_rng: ChaCha8Rng,
    calls: CallCounts,
    update_log: Option<Vec<UpdateKind>>,
    records: Vec<EpisodeRecord>,
    cumulative_successes: usize,
}

impl<T: Scalar> Trainer<T> {
    /// Fresh models (or `cfg.init_checkpoint`) for `cfg.env` with the given
    /// demonstrations.
    pub fn new(cfg: TrainConfig, demos: DemoSet<T>) -> Result<Self> {
        cfg.validate()?;
        let env = make_env(&cfg.env)?;
        let expected = model_config_for(&cfg, env.as_ref());
        let models = match &cfg.init_checkpoint {
            Some(dir) => {
                let m = ModelBundle::<T>::load(dir)?;
                check_compatible(&m, &expected)?;
                m
            }
            None => ModelBundle::new(expected, &mut stream_rng(cfg.seed, STREAM_INIT))?,
        };
        Self::with_models(cfg, demos, models)
    }

    pub fn with_models(
        cfg: TrainConfig,
        demos: DemoSet<T>,
        models: ModelBundle<T>,
    ) -> Result<Self> {
        cfg.validate()?;
        let env = make_env(&cfg.env)?;
        if demos.is_empty() || demos.num_pairs() == 0 {
            return Err(Error::Config(
                "demonstration set has no observation pairs".into(),
            ));
        }
        if demos.obs_dim() != env.obs_dim() {
            return Err(Error::dim(
                "demonstration observations",
                env.obs_dim(),
                demos.obs_dim(),
            ));
        }
        check_compatible(&models, &model_config_for(&cfg, env.as_ref()))?;
        let planner = Planner::new(cfg.planner_config(), cfg.threads)?;
        Ok(Self {
            env_rng: stream_rng(cfg.seed, STREAM_ENV),
            act_rng: stream_rng(cfg.seed, STREAM_ACT),
            update_rng: stream_rng(cfg.seed, STREAM_UPDATE),
            cfg,
            env,
            demos,
            models,
            buffer: ReplayBuffer::new(),
            planner,
            adam: AdamConfig::default(),
            calls: CallCounts::default(),
            update_log: None,
            records: Vec::new(),
            cumulative_successes: 0,
        })
    }

    /// Loads demonstrations from `cfg.demos`.
    pub fn from_config(cfg: TrainConfig) -> Result<Self> {
        let path = cfg
            .demos
            .clone()
            .ok_or_else(|| Error::Config("no demonstration file given".into()))?;
        let demos = DemoSet::<T>::load(&path)?;
        Self::new(cfg, demos)
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn models(&self) -> &ModelBundle<T> {
        &self.models
    }

    pub fn models_mut(&mut self) -> &mut ModelBundle<T> {
        &mut self.models
    }

    pub fn buffer(&self) -> &ReplayBuffer<T> {
        &self.buffer
    }

    pub fn calls(&self) -> &CallCounts {
        &self.calls
    }

    pub fn records(&self) -> &[EpisodeRecord] {
        &self.records
    }

    /// Starts recording the order of component updates.
    pub fn record_updates(&mut self) {
        self.update_log = Some(Vec::new());
    }

    pub fn update_log(&self) -> &[UpdateKind] {
        self.update_log.as_deref().unwrap_or(&[])
    }

    fn log(&mut self, kind: UpdateKind) {
        if let Some(l) = &mut self.update_log {
            l.push(kind);
        }
    }

    fn target_entropy(&self) -> f64 {
        self.cfg
            .target_entropy
            .unwrap_or(-(self.models.config.action_dim as f64))
    }

    fn act(&mut self, obs: &[T], prev: &mut Option<Plan<T>>) -> Result<Vec<T>> {
        if self.cfg.ablation.plans() {
            self.calls.plan += 1;
            let out = self.planner.plan(
                &self.models,
                obs,
                prev.as_ref(),
                FinalPlan::Sample,
                &mut self.act_rng,
            )?;
            let a = out.plan.first().to_vec();
            *prev = Some(out.plan);
            Ok(a)
        } else {
            let z = self.models.world.encode(obs)?;
            let plan = self.models.policy.sample_plan(&z, &mut self.act_rng)?;
            Ok(plan.first().to_vec())
        }
    }

    /// Collects one episode, stores it and runs its update rounds.
    pub fn run_episode(&mut self) -> Result<EpisodeRecord> {
        let started = Instant::now();
        let mut obs = to_t::<T>(&self.env.reset(&mut self.env_rng));
        let mut prev = None;
        let mut transitions = Vec::new();
        let mut success = false;
        for _ in 0..self.env.max_steps() {
            let action = self.act(&obs, &mut prev)?;
            let step = self.env.step(&to_f64(&action));
            let next = to_t::<T>(&step.observation);
            transitions.push(Transition {
                obs: obs.clone(),
                action,
                next_obs: next.clone(),
            });
            obs = next;
            success |= step.success;
            if step.done {
                break;
            }
        }
        let steps = transitions.len();
        let mean_inferred_reward = self.mean_reward(&transitions)?;
        self.buffer.push_episode(&transitions)?;
        let rounds = (steps as f64 * self.cfg.utd).round() as usize;
        let mut sums = LossSums::default();
        for _ in 0..rounds {
            self.update_round_into(&mut sums)?;
        }
        self.cumulative_successes += success as usize;
        let record = EpisodeRecord {
            episode: self.records.len() + 1,
            steps,
            success,
            cumulative_successes: self.cumulative_successes,
            mean_inferred_reward,
            dynamics_loss: mean_of(sums.dynamics),
            reward_loss: mean_of(sums.reward),
            value_loss: mean_of(sums.value),
            policy_loss: mean_of(sums.policy),
            alpha: self.models.temperature.alpha(),
            wall_time_s: started.elapsed().as_secs_f64(),
        };
        self.records.push(record.clone());
        Ok(record)
    }

    fn mean_reward(&self, transitions: &[Transition<T>]) -> Result<f64> {
        if transitions.is_empty() {
            return Ok(0.0);
        }
        let o = Tensor::from_rows(
            &transitions
                .iter()
                .map(|t| t.obs.clone())
                .collect::<Vec<_>>(),
        );
        let o2 = Tensor::from_rows(
            &transitions
                .iter()
                .map(|t| t.next_obs.clone())
                .collect::<Vec<_>>(),
        );
        let z = self.models.world.encode_batch(&o)?;
        let z2 = self.models.world.encode_batch(&o2)?;
        let r = self.models.reward.reward_batch(&z, &z2)?;
        Ok(r.sum_f64() / r.rows() as f64)
    }

    /// One round of component updates: dynamics, reward, value with target
    /// tracking, then policy with temperature. Skipped while no stored
    /// episode is long enough to supply a model window.
    pub fn update_round(&mut self) -> Result<()> {
        self.update_round_into(&mut LossSums::default())
    }

    fn update_round_into(&mut self, sums: &mut LossSums) -> Result<()> {
        let h = self.cfg.horizon;
        let b = self.cfg.batch_size;
        let uses_model = self.cfg.ablation.uses_model();
        if uses_model && self.buffer.num_windows(h) == 0 {
            return Ok(());
        }
        let lr = self.cfg.lr;
        if uses_model {
            let seqs = self
                .buffer
                .sample_trajectory_batch(h, b, &mut self.update_rng)?;
            let dl = self.models.world.dynamics_loss(&seqs, h, self.cfg.rho)?;
            adam_step(
                self.models.world.encoder.params_mut(),
                &dl.encoder_grads,
                self.cfg.encoder_lr,
                &self.adam,
            )?;
            adam_step(
                self.models.world.dynamics.params_mut(),
                &dl.dynamics_grads,
                lr,
                &self.adam,
            )?;
            self.calls.dynamics += 1;
            self.log(UpdateKind::Dynamics);
            sums.dynamics.0 += dl.loss;
            sums.dynamics.1 += 1;
        }

        let batch = self
            .buffer
            .sample_trajectory_batch(1, b, &mut self.update_rng)?;
        let obs = rows_at(&batch, |s| &s.observations[0]);
        let next_obs = rows_at(&batch, |s| &s.observations[1]);
        let actions = rows_at(&batch, |s| &s.actions[0]);
        let world = &self.models.world;
        let z = world.encode_batch(&obs)?;
        let z_next = world.encode_batch(&next_obs)?;

        let demo = self.demos.sample_demo_pairs(b, &mut self.update_rng)?;
        let d0 = Tensor::from_rows(&demo.iter().map(|p| p.0.clone()).collect::<Vec<_>>());
        let d1 = Tensor::from_rows(&demo.iter().map(|p| p.1.clone()).collect::<Vec<_>>());
        let dz = pair_inputs(&world.encode_batch(&d0)?, &world.encode_batch(&d1)?);
        let lz = pair_inputs(&z, &z_next);
        let rl = self
            .models
            .reward
            .reward_loss(&lz, &dz, self.cfg.beta, &mut self.update_rng)?;
        adam_step(
            self.models.reward.net.params_mut(),
            &rl.grads,
            lr,
            &self.adam,
        )?;
        self.calls.reward += 1;
        self.log(UpdateKind::Reward);
        sums.reward.0 += rl.loss;
        sums.reward.1 += 1;

        let (value_loss, encoder_grads) = if uses_model {
            let targets = self.models.value_targets(
                &z_next,
                self.cfg.lambda,
                self.cfg.gamma,
                &mut self.update_rng,
            )?;
            (self.models.value.value_loss(&z, &actions, &targets)?, None)
        } else {
            let targets =
                self.models
                    .one_step_targets(&z, &z_next, self.cfg.gamma, &mut self.update_rng)?;
            let (vl, eg) = self
                .models
                .value_loss_through_encoder(&obs, &actions, &targets)?;
            (vl, Some(eg))
        };
        let mut vgrads = value_loss.grads;
        clip_grad_norm(&mut vgrads, self.cfg.value_grad_clip);
        for (m, g) in self.models.value.members_mut().iter_mut().zip(&vgrads) {
            adam_step(m.params_mut(), g, lr, &self.adam)?;
        }
        if let Some(mut eg) = encoder_grads {
            clip_grad_norm(std::slice::from_mut(&mut eg), self.cfg.value_grad_clip);
            adam_step(
                self.models.world.encoder.params_mut(),
                &eg,
                self.cfg.encoder_lr,
                &self.adam,
            )?;
        }
        self.calls.value += 1;
        self.log(UpdateKind::Value);
        self.models.value.update_targets(self.cfg.polyak)?;
        self.log(UpdateKind::Polyak);
        sums.value.0 += value_loss.loss;
        sums.value.1 += 1;

        // fresh latents so the policy sees the encoder as updated this round
        let z = if uses_model {
            z
        } else {
            self.models.world.encode_batch(&obs)?
        };
        let pl = if uses_model {
            self.models
                .policy_loss(&z, self.cfg.lambda, self.cfg.gamma, &mut self.update_rng)?
        } else {
            self.models.policy_loss_one_step(&z, &mut self.update_rng)?
        };
        let mut pgrads: [GradStore<T>; 1] = [pl.grads];
        clip_grad_norm(&mut pgrads, self.cfg.policy_grad_clip);
        adam_step(
            self.models.policy.net.params_mut(),
            &pgrads[0],
            lr,
            &self.adam,
        )?;
        self.calls.policy += 1;
        self.log(UpdateKind::Policy);
        let target = self.target_entropy();
        self.models
            .temperature
            .update(pl.mean_log_prob, target, self.cfg.alpha_lr, &self.adam)?;
        self.log(UpdateKind::Temperature);
        sums.policy.0 += pl.loss;
        sums.policy.1 += 1;
        Ok(())
    }

    fn should_stop(&self) -> bool {
        if self.cfg.stop_on_first_success && self.cumulative_successes > 0 {
            return true;
        }
        match self.cfg.stop_on_success_rate {
            Some(rate) => {
                trailing_rate(&self.records, self.cfg.success_window).is_some_and(|r| r >= rate)
            }
            None => false,
        }
    }

    /// Runs the episode budget, writing metrics, periodic checkpoints and a
    /// final checkpoint under `out`. A non-finite loss saves the current
    /// models under `out/halt` with a diagnostics file, then fails.
    pub fn train(&mut self, out: &Path) -> Result<TrainSummary> {
        fs::create_dir_all(out).map_err(|e| Error::io(format!("creating {}", out.display()), e))?;
        let cfg_path = out.join("config.toml");
        fs::write(&cfg_path, self.cfg.to_toml()?)
            .map_err(|e| Error::io(format!("writing {}", cfg_path.display()), e))?;
        let mut metrics = create_with_header(&out.join(METRICS_FILE), METRICS_HEADER)?;
        let mut timing = create_with_header(&out.join(TIMING_FILE), "episode,wall_time_s")?;
        let mut stopped_early = false;
        for ep in 0..self.cfg.episodes {
            let record = match self.run_episode() {
                Ok(r) => r,
                Err(e @ Error::NonFinite(_)) => {
                    self.halt(out, ep + 1, &e)?;
                    return Err(e);
                }
                Err(e) => return Err(e),
            };
            append_line(&mut metrics, &record.csv_row(), out)?;
            append_line(
                &mut timing,
                &format!("{},{}", record.episode, record.wall_time_s),
                out,
            )?;
            log::info!(
                "episode {} steps {} success {} cumulative {} alpha {:.4}",
                record.episode,
                record.steps,
                record.success,
                record.cumulative_successes,
                record.alpha
            );
            if self.cfg.checkpoint_every > 0 && record.episode % self.cfg.checkpoint_every == 0 {
                self.models.save(
                    &out.join("checkpoints")
                        .join(format!("episode_{:05}", record.episode)),
                )?;
            }
            if self.should_stop() {
                stopped_early = ep + 1 < self.cfg.episodes;
                break;
            }
        }
        let final_checkpoint = out.join(FINAL_DIR);
        self.models.save(&final_checkpoint)?;
        Ok(TrainSummary {
            first_success: self.records.iter().find(|r| r.success).map(|r| r.episode),
            records: self.records.clone(),
            final_checkpoint,
            stopped_early,
            calls: self.calls.clone(),
        })
    }

    fn halt(&self, out: &Path, episode: usize, err: &Error) -> Result<()> {
        let dir = out.join(HALT_DIR);
        self.models.save(&dir)?;
        let mut diag = String::new();
        let _ = writeln!(diag, "episode: {episode}");
        let _ = writeln!(diag, "error: {err}");
        let _ = writeln!(diag, "alpha: {}", self.models.temperature.alpha());
        let _ = writeln!(
            diag,
            "buffer_transitions: {}",
            self.buffer.num_transitions()
        );
        for (name, t) in self.models.named_tensors() {
            if !t.is_finite() {
                let _ = writeln!(diag, "non_finite_tensor: {name}");
            }
        }
        let path = dir.join("diagnostics.txt");
        fs::write(&path, diag).map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
        log::error!(
            "training halted at episode {episode}: {err}; state saved to {}",
            dir.display()
        );
        Ok(())
    }
}

fn create_with_header(path: &Path, header: &str) -> Result<File> {
    let mut f = OpenOptions::new()
        .create(true)
        .write(true)
        .truncate(true)
        .open(path)
        .map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
    writeln!(f, "{header}").map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
    Ok(f)
}

fn append_line(f: &mut File, line: &str, out: &Path) -> Result<()> {
    writeln!(f, "{line}")
        .and_then(|_| f.flush())
        .map_err(|e| Error::io(format!("writing metrics in {}", out.display()), e))
}

/// Trains from a configuration whose `demos` path is set.
pub fn train<T: Scalar>(cfg: TrainConfig, out: &Path) -> Result<TrainSummary> {
    Trainer::<T>::from_config(cfg)?.train(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalEpisode {
    pub steps: usize,
    pub success: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub success_percent: f64,
    pub episodes: Vec<EvalEpisode>,
    /// First action of the first planning call, for reproducibility checks.
    pub first_action: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct EvalOptions {
    pub episodes: usize,
    pub seed: u64,
    pub planner: PlannerConfig,
    pub threads: Option<usize>,
    /// Act with the policy mean instead of the planner.
    pub policy_only: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            episodes: 100,
            seed: 0,
            planner: PlannerConfig::default(),
            threads: None,
            policy_only: false,
        }
    }
}

/// Seeded evaluation with the optimised plan mean (no final sampling).
pub fn evaluate<T: Scalar>(
    models: &ModelBundle<T>,
    env: &mut dyn Environment,
    opts: &EvalOptions,
) -> Result<EvalReport> {
    if opts.episodes == 0 {
        return Err(Error::Config(
            "evaluation needs at least one episode".into(),
        ));
    }
    if models.config.obs_dim != env.obs_dim() {
        return Err(Error::dim(
            "checkpoint observation",
            env.obs_dim(),
            models.config.obs_dim,
        ));
    }
    if models.config.action_dim != env.action_dim() {
        return Err(Error::dim(
            "checkpoint action",
            env.action_dim(),
            models.config.action_dim,
        ));
    }
    let pcfg = PlannerConfig {
        horizon: models.config.horizon,
        ..opts.planner.clone()
    };
    let planner = Planner::new(pcfg, opts.threads)?;
    let mut env_rng = stream_rng(opts.seed, STREAM_ENV);
    let mut act_rng = stream_rng(opts.seed, STREAM_ACT);
    let mut episodes = Vec::with_capacity(opts.episodes);
    let mut first_action = None;
    for _ in 0..opts.episodes {
        let mut obs = to_t::<T>(&env.reset(&mut env_rng));
        let mut prev: Option<Plan<T>> = None;
        let mut success = false;
        let mut steps = 0;
        for _ in 0..env.max_steps() {
            let plan = if opts.policy_only {
                models.policy.mean_plan(&models.world.encode(&obs)?)?
            } else {
                planner
                    .plan(models, &obs, prev.as_ref(), FinalPlan::Mean, &mut act_rng)?
                    .plan
            };
            let a = to_f64(plan.first());
            first_action.get_or_insert_with(|| a.clone());
            prev = Some(plan);
            let s = env.step(&a);
            steps += 1;
            success |= s.success;
            obs = to_t(&s.observation);
            if s.done {
                break;
            }
        }
        episodes.push(EvalEpisode { steps, success });
    }
    let wins = episodes.iter().filter(|e| e.success).count();
    Ok(EvalReport {
        success_percent: 100.0 * wins as f64 / episodes.len() as f64,
        episodes,
        first_action: first_action.unwrap_or_default(),
    })
}

/// Successful scripted-expert episodes, observations only. Fails if fewer
/// than `n` successes occur within `10 n` attempts.
pub fn gen_demos<T: Scalar>(env: &mut dyn Environment, n: usize, seed: u64) -> Result<DemoSet<T>> {
    if n == 0 {
        return Err(Error::Config(
            "number of demonstrations must be positive".into(),
        ));
    }
    let mut rng = stream_rng(seed, STREAM_ENV);
    let mut episodes = Vec::with_capacity(n);
    for _ in 0..10 * n {
        let (traj, ok) = expert_rollout(env, &mut rng);
        if ok && env.trajectory_success(&traj) {
            episodes.push(traj.iter().map(|o| to_t::<T>(o)).collect());
            if episodes.len() == n {
                return DemoSet::new(env.obs_dim(), episodes);
            }
        }
    }
    Err(Error::InsufficientData(format!(
        "expert produced {} of {n} successful demonstrations in {} attempts",
        episodes.len(),
        10 * n
    )))
}

/// Initialises from a trained checkpoint, then trains on new
/// demonstrations with an empty replay buffer. `DynamicsOnly` keeps just
/// the encoder and dynamics.
pub fn transfer_trainer<T: Scalar>(
    init: &Path,
    demos: DemoSet<T>,
    cfg: TrainConfig,
    mode: TransferMode,
) -> Result<Trainer<T>> {
    cfg.validate()?;
    let loaded = ModelBundle::<T>::load(init)?;
    let env = make_env(&cfg.env)?;
    let expected = model_config_for(&cfg, env.as_ref());
    check_compatible(&loaded, &expected)?;
    let models = match mode {
        TransferMode::Full => loaded,
        TransferMode::DynamicsOnly => {
            loaded.reinit_except_world(&mut stream_rng(cfg.seed, STREAM_INIT))?
        }
    };
    let cfg = TrainConfig {
        init_checkpoint: None,
        ..cfg
    };
    Trainer::with_models(cfg, demos, models)
}

pub fn transfer<T: Scalar>(
    init: &Path,
    cfg: TrainConfig,
    mode: TransferMode,
    out: &Path,
) -> Result<TrainSummary> {
    let path = cfg
        .demos
        .clone()
        .ok_or_else(|| Error::Config("no demonstration file given".into()))?;
    let demos = DemoSet::<T>::load(&path)?;
    transfer_trainer(init, demos, cfg, mode)?.train(out)
}

/// One traced planning call from a reset of `env`.
pub fn plan_trace<T: Scalar>(
    models: &ModelBundle<T>,
    env: &mut dyn Environment,
    planner: &PlannerConfig,
    seed: u64,
    threads: Option<usize>,
) -> Result<Vec<TraceRecord>> {
    if models.config.obs_dim != env.obs_dim() {
        return Err(Error::dim(
            "checkpoint observation",
            env.obs_dim(),
            models.config.obs_dim,
        ));
    }
    let pcfg = PlannerConfig {
        horizon: models.config.horizon,
        ..planner.clone()
    };
    let p = Planner::new(pcfg, threads)?;
    let obs = to_t::<T>(&env.reset(&mut stream_rng(seed, STREAM_ENV)));
    let z0 = models.world.encode(&obs)?.to_row();
    let out = p.plan_latent(
        models,
        &z0,
        None,
        FinalPlan::Mean,
        true,
        &mut stream_rng(seed, STREAM_ACT),
    )?;
    Ok(out.trace)
}

pub fn trace_csv(trace: &[TraceRecord]) -> String {
    let mut s = String::from("iteration,plan_index,return,elite\n");
    for r in trace {
        let _ = writeln!(
            s,
            "{},{},{},{}",
            r.iteration, r.plan_index, r.ret, r.elite as u8
        );
    }
    s
}
