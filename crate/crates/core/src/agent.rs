//! All learned components together, the losses that couple them, and
//! checkpoint persistence.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::checkpoint::{load_tensors, save_tensors};
use crate::nn::{BoundMlp, GradStore, Mlp, MlpSpec, ParamStore};
use crate::policy::{policy_spec, PolicyModel, Temperature};
use crate::reward::{reward_spec, RewardModel};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::value::{
    lambda_return, lambda_return_on_tape, value_spec, Aggregation, QMode, ReturnParams,
    ValueEnsemble, ValueLoss,
};
use crate::world_model::{dynamics_spec, encoder_spec, WorldModel};

pub const MODEL_CONFIG_FILE: &str = "model.toml";

/// Shapes of every network in a bundle.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub obs_dim: usize,
    pub action_dim: usize,
    pub latent_dim: usize,
    pub hidden: Vec<usize>,
    pub horizon: usize,
    pub ensemble_size: usize,
    pub initial_alpha: f64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("obs_dim", self.obs_dim),
            ("action_dim", self.action_dim),
            ("latent_dim", self.latent_dim),
            ("horizon", self.horizon),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(Error::Config(
                "hidden layer widths must be non-empty and positive".into(),
            ));
        }
        if self.ensemble_size < 2 {
            return Err(Error::Config(format!(
                "ensemble_size must be at least 2, got {}",
                self.ensemble_size
            )));
        }
        if !(self.initial_alpha > 0.0 && self.initial_alpha.is_finite()) {
            return Err(Error::Config("initial_alpha must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelBundle<T> {
    pub config: ModelConfig,
    pub world: WorldModel<T>,
    pub reward: RewardModel<T>,
    pub value: ValueEnsemble<T>,
    pub policy: PolicyModel<T>,
    pub temperature: Temperature<T>,
}

#[derive(Clone, Debug)]
pub struct PolicyLoss<T> {
    pub loss: f64,
    /// Mean per-step log-probability of the sampled plans.
    pub mean_log_prob: f64,
    pub grads: GradStore<T>,
}

/// Frozen models bound to a tape as constants.
struct FrozenModels {
    dynamics: BoundMlp,
    reward: BoundMlp,
    values: Vec<BoundMlp>,
}

impl<T: Scalar> ModelBundle<T> {
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let world = WorldModel::new(c.obs_dim, c.action_dim, c.latent_dim, &c.hidden, rng)?;
        let reward = RewardModel::new(c.latent_dim, &c.hidden, rng)?;
        let value =
            ValueEnsemble::new(c.ensemble_size, c.latent_dim, c.action_dim, &c.hidden, rng)?;
        let policy = PolicyModel::new(c.latent_dim, c.action_dim, c.horizon, &c.hidden, rng)?;
        let temperature = Temperature::new(c.initial_alpha)?;
        Ok(Self {
            config,
            world,
            reward,
            value,
            policy,
            temperature,
        })
    }

    /// Fresh reward, value, policy and temperature around this bundle's
    /// encoder and dynamics.
    pub fn reinit_except_world<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Self> {
        let mut fresh = Self::new(self.config.clone(), rng)?;
        fresh.world = self.world.clone();
        Ok(fresh)
    }

    fn bind_frozen(&self, tape: &mut Tape<T>) -> FrozenModels {
        FrozenModels {
            dynamics: self.world.dynamics.bind(tape, false),
            reward: self.reward.net.bind(tape, false),
            values: self
                .value
                .members()
                .iter()
                .map(|m| m.bind(tape, false))
                .collect(),
        }
    }

    /// Model-based λ-return targets from next latents `z_next`: one policy
    /// plan sampled at `z_next`, rolled with the online dynamics, rewards
    /// from the current reward model and bootstrap values from the target
    /// ensemble (`TdTarget`). Returns an `n x 1` column.
    pub fn value_targets<R: Rng + ?Sized>(
        &self,
        z_next: &Tensor<T>,
        lambda: f64,
        gamma: f64,
        rng: &mut R,
    ) -> Result<Tensor<T>> {
        let h = self.config.horizon;
        let ad = self.config.action_dim;
        let sample = self.policy.sample_batch(z_next, rng)?;
        let latents = self.world.rollout_batch(z_next, &sample.actions, h)?;
        let mut rewards = Vec::with_capacity(h);
        let mut qs = Vec::with_capacity(h + 1);
        for t in 0..h {
            rewards.push(self.reward.reward_batch(&latents[t], &latents[t + 1])?);
            let a = sample.actions.slice_cols(t * ad, ad);
            qs.push(self.value.aggregate_batch(
                &latents[t],
                &a,
                QMode::Target,
                Aggregation::TdTarget,
                rng,
            )?);
        }
        let last = sample.actions.slice_cols((h - 1) * ad, ad);
        qs.push(self.value.aggregate_batch(
            &latents[h],
            &last,
            QMode::Target,
            Aggregation::TdTarget,
            rng,
        )?);
        let p = ReturnParams {
            lambda,
            gamma,
            alpha: self.temperature.alpha(),
        };
        let n = z_next.rows();
        let mut out = Tensor::zeros(n, 1);
        for row in 0..n {
            let r: Vec<T> = rewards.iter().map(|x| x.get(row, 0)).collect();
            let q: Vec<T> = qs.iter().map(|x| x.get(row, 0)).collect();
            let g = lambda_return(&r, &q, sample.log_probs.row(row), &p);
            out.set(row, 0, g);
        }
        Ok(out)
    }

    /// Model-free 1-step targets on experienced transitions:
    /// `r(z, z') + gamma * (Q_td(z', a') - alpha log pi(a'|z'))` with `a'`
    /// the first action of a fresh policy sample.
    pub fn one_step_targets<R: Rng + ?Sized>(
        &self,
        z: &Tensor<T>,
        z_next: &Tensor<T>,
        gamma: f64,
        rng: &mut R,
    ) -> Result<Tensor<T>> {
        let ad = self.config.action_dim;
        let r = self.reward.reward_batch(z, z_next)?;
        let sample = self.policy.sample_batch(z_next, rng)?;
        let a1 = sample.actions.slice_cols(0, ad);
        let q =
            self.value
                .aggregate_batch(z_next, &a1, QMode::Target, Aggregation::TdTarget, rng)?;
        let alpha = T::lit(self.temperature.alpha());
        let g = T::lit(gamma);
        Ok(Tensor::from_fn(z.rows(), 1, |row, _| {
            r.get(row, 0) + g * (q.get(row, 0) - alpha * sample.log_probs.get(row, 0))
        }))
    }

    /// Value regression with latents produced on the tape by the encoder, so
    /// the encoder is trained by the value loss. Returns value and encoder
    /// gradients.
    pub fn value_loss_through_encoder(
        &self,
        obs: &Tensor<T>,
        a: &Tensor<T>,
        targets: &Tensor<T>,
    ) -> Result<(ValueLoss<T>, GradStore<T>)> {
        let mut tape = Tape::new();
        let enc = self.world.encoder.bind(&mut tape, true);
        let ov = tape.constant(obs.clone());
        let z = enc.forward(&mut tape, ov)?;
        let (total, pending) = self.value.value_loss_on_tape(&mut tape, z, a, targets)?;
        let grads = tape.backward(total)?;
        let enc_grads = enc.grads(&grads);
        Ok((pending.finish(&grads), enc_grads))
    }

    /// `-mean G^λ` over policy plans from `z`, differentiated through the
    /// sampled actions into frozen dynamics, reward and the online ensemble
    /// mean. Gradients are returned for the policy only.
    pub fn policy_loss<R: Rng + ?Sized>(
        &self,
        z: &Tensor<T>,
        lambda: f64,
        gamma: f64,
        rng: &mut R,
    ) -> Result<PolicyLoss<T>> {
        let eps = self.policy.draw_noise(z.rows(), rng);
        self.policy_loss_with_noise(z, lambda, gamma, self.temperature.alpha(), &eps)
    }

    pub fn policy_loss_with_noise(
        &self,
        z: &Tensor<T>,
        lambda: f64,
        gamma: f64,
        alpha: f64,
        eps: &Tensor<T>,
    ) -> Result<PolicyLoss<T>> {
        let h = self.config.horizon;
        let ad = self.config.action_dim;
        let mut tape = Tape::new();
        let pnet = self.policy.net.bind(&mut tape, true);
        let frozen = self.bind_frozen(&mut tape);
        let z0 = tape.constant(z.clone());
        let sample = self.policy.sample_on_tape(&mut tape, &pnet, z0, eps)?;
        let mut zt = z0;
        let mut rewards = Vec::with_capacity(h);
        let mut qs = Vec::with_capacity(h + 1);
        let mut logps = Vec::with_capacity(h);
        let mut a = z0;
        for t in 0..h {
            a = tape.slice_cols(sample.actions, t * ad, ad);
            let za = tape.concat_cols(&[zt, a]);
            qs.push(mean_q_on_tape(&mut tape, &frozen.values, za)?);
            let next = frozen.dynamics.forward(&mut tape, za)?;
            let pair = tape.concat_cols(&[zt, next]);
            rewards.push(frozen.reward.forward(&mut tape, pair)?);
            logps.push(tape.slice_cols(sample.log_probs, t, 1));
            zt = next;
        }
        let za = tape.concat_cols(&[zt, a]);
        qs.push(mean_q_on_tape(&mut tape, &frozen.values, za)?);
        let p = ReturnParams {
            lambda,
            gamma,
            alpha,
        };
        let g = lambda_return_on_tape(&mut tape, &rewards, &qs, &logps, &p);
        let mean_g = tape.mean(g);
        let loss = tape.scale(mean_g, -T::one());
        self.finish_policy_loss(tape, loss, sample.log_probs, &pnet)
    }

    /// `-mean[Q_mean(z, a_0) - alpha log pi(a_0|z)]` using the first step of
    /// each policy plan.
    pub fn policy_loss_one_step<R: Rng + ?Sized>(
        &self,
        z: &Tensor<T>,
        rng: &mut R,
    ) -> Result<PolicyLoss<T>> {
        let eps = self.policy.draw_noise(z.rows(), rng);
        let ad = self.config.action_dim;
        let alpha = self.temperature.alpha();
        let mut tape = Tape::new();
        let pnet = self.policy.net.bind(&mut tape, true);
        let values: Vec<BoundMlp> = self
            .value
            .members()
            .iter()
            .map(|m| m.bind(&mut tape, false))
            .collect();
        let z0 = tape.constant(z.clone());
        let sample = self.policy.sample_on_tape(&mut tape, &pnet, z0, &eps)?;
        let a0 = tape.slice_cols(sample.actions, 0, ad);
        let za = tape.concat_cols(&[z0, a0]);
        let q = mean_q_on_tape(&mut tape, &values, za)?;
        let lp = tape.slice_cols(sample.log_probs, 0, 1);
        let ent = tape.scale(lp, T::lit(alpha));
        let obj = tape.sub(q, ent);
        let m = tape.mean(obj);
        let loss = tape.scale(m, -T::one());
        let first = tape.slice_cols(sample.log_probs, 0, 1);
        self.finish_policy_loss(tape, loss, first, &pnet)
    }

    fn finish_policy_loss(
        &self,
        mut tape: Tape<T>,
        loss: Var,
        log_probs: Var,
        pnet: &BoundMlp,
    ) -> Result<PolicyLoss<T>> {
        let value = tape.value(loss).item().to_f64_lossy();
        if !value.is_finite() {
            return Err(Error::NonFinite("policy loss".into()));
        }
        let lp = tape.value(log_probs);
        let mean_log_prob = lp.sum_f64() / lp.len() as f64;
        let grads = tape.backward(loss)?;
        Ok(PolicyLoss {
            loss: value,
            mean_log_prob,
            grads: pnet.grads(&grads),
        })
    }

    /// Flat name -> tensor map of every parameter, including target copies.
    pub fn named_tensors(&self) -> BTreeMap<String, Tensor<T>> {
        let mut out = BTreeMap::new();
        let mut put = |prefix: &str, store: &ParamStore<T>| {
            for (name, t) in store.iter() {
                out.insert(format!("{prefix}/{name}"), t.clone());
            }
        };
        put("encoder", self.world.encoder.params());
        put("dynamics", self.world.dynamics.params());
        put("reward", self.reward.net.params());
        for (i, m) in self.value.members().iter().enumerate() {
            put(&format!("value{i}"), m.params());
        }
        for (i, m) in self.value.targets().iter().enumerate() {
            put(&format!("value_target{i}"), m.params());
        }
        put("policy", self.policy.net.params());
        put("temperature", self.temperature.params());
        out
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        save_tensors(dir, &self.named_tensors())?;
        let text = toml::to_string_pretty(&self.config)
            .map_err(|e| Error::Checkpoint(format!("serialising model config: {e}")))?;
        let path = dir.join(MODEL_CONFIG_FILE);
        fs::write(&path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    pub fn load_config(dir: &Path) -> Result<ModelConfig> {
        let path = dir.join(MODEL_CONFIG_FILE);
        let text = fs::read_to_string(&path)
            .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        toml::from_str(&text).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let config = Self::load_config(dir)?;
        config.validate()?;
        let mut tensors = load_tensors::<T>(dir)?;
        let c = &config;
        let mut missing = Vec::new();
        let mut mismatched = Vec::new();
        let mut net = |prefix: &str,
                       spec: MlpSpec,
                       tensors: &mut BTreeMap<String, Tensor<T>>|
         -> Option<Mlp<T>> {
            let template = Mlp::<T>::constant(spec.clone(), T::zero()).ok()?;
            let mut store = ParamStore::new();
            for (name, shape) in template
                .params()
                .iter()
                .map(|(n, t)| (n.to_string(), t.shape()))
            {
                let key = format!("{prefix}/{name}");
                match tensors.remove(&key) {
                    Some(t) if t.shape() == shape => store.insert(name, t),
                    Some(t) => mismatched.push(format!("{key} {:?} != {:?}", t.shape(), shape)),
                    None => missing.push(key),
                }
            }
            Mlp::from_params(spec, store).ok()
        };
        let encoder = net(
            "encoder",
            encoder_spec(c.obs_dim, c.latent_dim, &c.hidden),
            &mut tensors,
        );
        let dynamics = net(
            "dynamics",
            dynamics_spec(c.latent_dim, c.action_dim, &c.hidden),
            &mut tensors,
        );
        let reward = net("reward", reward_spec(c.latent_dim, &c.hidden), &mut tensors);
        let vspec = value_spec(c.latent_dim, c.action_dim, &c.hidden);
        let members: Vec<_> = (0..c.ensemble_size)
            .map(|i| net(&format!("value{i}"), vspec.clone(), &mut tensors))
            .collect();
        let targets: Vec<_> = (0..c.ensemble_size)
            .map(|i| net(&format!("value_target{i}"), vspec.clone(), &mut tensors))
            .collect();
        let policy = net(
            "policy",
            policy_spec(c.latent_dim, c.action_dim, c.horizon, &c.hidden),
            &mut tensors,
        );
        let log_alpha = tensors.remove("temperature/log_alpha");
        if log_alpha.is_none() {
            missing.push("temperature/log_alpha".into());
        }
        if !missing.is_empty() || !mismatched.is_empty() {
            return Err(Error::Checkpoint(format!(
                "checkpoint {} does not match its model config; missing [{}], mismatched [{}]",
                dir.display(),
                missing.join(", "),
                mismatched.join(", ")
            )));
        }
        let broken = || Error::Checkpoint("checkpoint tensors do not form valid networks".into());
        let world =
            WorldModel::from_parts(encoder.ok_or_else(broken)?, dynamics.ok_or_else(broken)?)?;
        let reward = RewardModel {
            net: reward.ok_or_else(broken)?,
        };
        let members = members
            .into_iter()
            .collect::<Option<Vec<_>>>()
            .ok_or_else(broken)?;
        let targets = targets
            .into_iter()
            .collect::<Option<Vec<_>>>()
            .ok_or_else(broken)?;
        let value = ValueEnsemble::from_parts(members, targets)?;
        let policy = PolicyModel::from_net(policy.ok_or_else(broken)?, c.action_dim, c.horizon)?;
        let mut tstore = ParamStore::new();
        tstore.insert(Temperature::<T>::NAME, log_alpha.expect("checked"));
        let temperature = Temperature::from_params(tstore)?;
        Ok(Self {
            config,
            world,
            reward,
            value,
            policy,
            temperature,
        })
    }
}

fn mean_q_on_tape<T: Scalar>(tape: &mut Tape<T>, values: &[BoundMlp], za: Var) -> Result<Var> {
    let mut acc = values[0].forward(tape, za)?;
    for v in &values[1..] {
        let q = v.forward(tape, za)?;
        acc = tape.add(acc, q);
    }
    Ok(tape.scale(acc, T::one() / T::from_usize(values.len()).unwrap()))
}
