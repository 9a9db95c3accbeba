//! Encoder and deterministic latent dynamics.

use rand::Rng;

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::experience::TransitionSequence;
use crate::nn::{GradStore, Mlp, MlpSpec};
use crate::plan::Plan;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Latent vector produced by the encoder or the dynamics model.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentState<T>(pub Vec<T>);

impl<T: Scalar> LatentState<T> {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[T] {
        &self.0
    }

    pub fn to_row(&self) -> Tensor<T> {
        Tensor::row_vector(&self.0)
    }
}

/// Latent rollout of a plan: `latents[i + 1] = f(latents[i], actions[i])`.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictedTrajectory<T> {
    pub latents: Vec<LatentState<T>>,
    pub actions: Vec<Vec<T>>,
    pub rewards: Option<Vec<T>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct WorldModel<T> {
    pub encoder: Mlp<T>,
    pub dynamics: Mlp<T>,
}

#[derive(Clone, Debug)]
pub struct DynamicsLoss<T> {
    pub loss: f64,
    pub encoder_grads: GradStore<T>,
    pub dynamics_grads: GradStore<T>,
}

pub fn encoder_spec(obs_dim: usize, latent_dim: usize, hidden: &[usize]) -> MlpSpec {
    MlpSpec {
        input_dim: obs_dim,
        hidden: hidden.to_vec(),
        output_dim: latent_dim,
        use_layernorm: true,
        final_bias: true,
        normalize_output: true,
    }
}

pub fn dynamics_spec(latent_dim: usize, action_dim: usize, hidden: &[usize]) -> MlpSpec {
    MlpSpec {
        input_dim: latent_dim + action_dim,
        hidden: hidden.to_vec(),
        output_dim: latent_dim,
        use_layernorm: true,
        final_bias: true,
        normalize_output: true,
    }
}

impl<T: Scalar> WorldModel<T> {
    pub fn new<R: Rng + ?Sized>(
        obs_dim: usize,
        action_dim: usize,
        latent_dim: usize,
        hidden: &[usize],
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            encoder: Mlp::new(encoder_spec(obs_dim, latent_dim, hidden), rng)?,
            dynamics: Mlp::new(dynamics_spec(latent_dim, action_dim, hidden), rng)?,
        })
    }

    pub fn from_parts(encoder: Mlp<T>, dynamics: Mlp<T>) -> Result<Self> {
        let latent = encoder.spec().output_dim;
        if dynamics.spec().output_dim != latent || dynamics.spec().input_dim <= latent {
            return Err(Error::Config(
                "encoder and dynamics latent dimensions disagree".into(),
            ));
        }
        Ok(Self { encoder, dynamics })
    }

    pub fn obs_dim(&self) -> usize {
        self.encoder.spec().input_dim
    }

    pub fn latent_dim(&self) -> usize {
        self.encoder.spec().output_dim
    }

    pub fn action_dim(&self) -> usize {
        self.dynamics.spec().input_dim - self.latent_dim()
    }

    /// Encodes a batch of observations (one per row).
    pub fn encode_batch(&self, obs: &Tensor<T>) -> Result<Tensor<T>> {
        if obs.cols() != self.obs_dim() {
            return Err(Error::dim(
                "encoder observation",
                self.obs_dim(),
                obs.cols(),
            ));
        }
        self.encoder.forward(obs)
    }

    pub fn encode(&self, obs: &[T]) -> Result<LatentState<T>> {
        if obs.len() != self.obs_dim() {
            return Err(Error::dim("encoder observation", self.obs_dim(), obs.len()));
        }
        Ok(LatentState(self.encoder.forward_one(obs)?))
    }

    /// One latent step for a batch of `(z, a)` rows.
    pub fn predict_next_batch(&self, z: &Tensor<T>, a: &Tensor<T>) -> Result<Tensor<T>> {
        if z.cols() != self.latent_dim() {
            return Err(Error::dim("dynamics latent", self.latent_dim(), z.cols()));
        }
        if a.cols() != self.action_dim() {
            return Err(Error::dim("dynamics action", self.action_dim(), a.cols()));
        }
        self.dynamics.forward(&Tensor::concat_cols(&[z, a]))
    }

    pub fn predict_next(&self, z: &LatentState<T>, a: &[T]) -> Result<LatentState<T>> {
        let next = self.predict_next_batch(&z.to_row(), &Tensor::row_vector(a))?;
        Ok(LatentState(next.into_vec()))
    }

    pub fn rollout(&self, z0: &LatentState<T>, plan: &Plan<T>) -> Result<PredictedTrajectory<T>> {
        if plan.horizon() > 0 && plan.action_dim() != self.action_dim() {
            return Err(Error::dim(
                "plan action",
                self.action_dim(),
                plan.action_dim(),
            ));
        }
        let mut latents = Vec::with_capacity(plan.horizon() + 1);
        let mut actions = Vec::with_capacity(plan.horizon());
        latents.push(z0.clone());
        for i in 0..plan.horizon() {
            let next = self.predict_next(latents.last().expect("non-empty"), plan.step(i))?;
            latents.push(next);
            actions.push(plan.step(i).to_vec());
        }
        Ok(PredictedTrajectory {
            latents,
            actions,
            rewards: None,
        })
    }

    /// Batched rollout. `plans` holds one flattened plan per row; returns the
    /// `horizon + 1` latent batches, starting with `z0`.
    pub fn rollout_batch(
        &self,
        z0: &Tensor<T>,
        plans: &Tensor<T>,
        horizon: usize,
    ) -> Result<Vec<Tensor<T>>> {
        let ad = self.action_dim();
        if plans.cols() != horizon * ad {
            return Err(Error::dim("batched plans", horizon * ad, plans.cols()));
        }
        let mut out = Vec::with_capacity(horizon + 1);
        out.push(z0.clone());
        for t in 0..horizon {
            let a = plans.slice_cols(t * ad, ad);
            let next = self.predict_next_batch(out.last().expect("non-empty"), &a)?;
            out.push(next);
        }
        Ok(out)
    }

    /// Self-supervised latent prediction loss over a batch of experienced
    /// sequences:
    ///
    /// `mean_b sum_{i=1..H} rho^i * ||z_hat_i - sg(e(o_i))||^2 / latent_dim`
    ///
    /// where `z_hat_0 = e(o_0)` and `z_hat_{i+1} = f(z_hat_i, a_i)`. Targets
    /// are encoded outside the tape, so no gradient reaches the encoder
    /// through them.
    pub fn dynamics_loss(
        &self,
        batch: &[TransitionSequence<T>],
        horizon: usize,
        rho: f64,
    ) -> Result<DynamicsLoss<T>> {
        if batch.is_empty() {
            return Err(Error::InsufficientData("empty dynamics batch".into()));
        }
        for (i, seq) in batch.iter().enumerate() {
            if seq.len() < horizon {
                return Err(Error::InsufficientData(format!(
                    "sequence {i} has {} transitions, need {horizon}",
                    seq.len()
                )));
            }
        }
        let b = batch.len();
        let latent = self.latent_dim();
        let obs_at = |t: usize| {
            Tensor::from_rows(
                &batch
                    .iter()
                    .map(|s| s.observations[t].clone())
                    .collect::<Vec<_>>(),
            )
        };
        let act_at = |t: usize| {
            Tensor::from_rows(
                &batch
                    .iter()
                    .map(|s| s.actions[t].clone())
                    .collect::<Vec<_>>(),
            )
        };

        let mut tape = Tape::new();
        let enc = self.encoder.bind(&mut tape, true);
        let dynm = self.dynamics.bind(&mut tape, true);
        let o0 = tape.constant(obs_at(0));
        let mut z = enc.forward(&mut tape, o0)?;
        let norm = 1.0 / (b * latent) as f64;
        let mut total = None;
        let mut loss = 0.0f64;
        for t in 1..=horizon {
            let target = tape.constant(self.encode_batch(&obs_at(t))?);
            let a = tape.constant(act_at(t - 1));
            let za = tape.concat_cols(&[z, a]);
            z = dynm.forward(&mut tape, za)?;
            let diff = tape.sub(z, target);
            let sq = tape.square(diff);
            let weight = rho.powi(t as i32) * norm;
            loss += weight * tape.value(sq).sum_f64();
            let s = tape.sum(sq);
            let term = tape.scale(s, T::lit(weight));
            total = Some(match total {
                None => term,
                Some(acc) => tape.add(acc, term),
            });
        }
        let Some(total) = total else {
            return Ok(DynamicsLoss {
                loss: 0.0,
                encoder_grads: GradStore::zeros_like(self.encoder.params()),
                dynamics_grads: GradStore::zeros_like(self.dynamics.params()),
            });
        };
        if !loss.is_finite() {
            return Err(Error::NonFinite("dynamics loss".into()));
        }
        let grads = tape.backward(total)?;
        Ok(DynamicsLoss {
            loss,
            encoder_grads: enc.grads(&grads),
            dynamics_grads: dynm.grads(&grads),
        })
    }
}
