//! Latent-conditioned squashed Gaussian over whole action sequences, and
//! its automatically tuned entropy temperature.

use std::f64::consts::{LN_2, PI};

use rand::Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{adam_step, AdamConfig, BoundMlp, GradStore, Mlp, MlpSpec, ParamStore};
use crate::plan::Plan;
use crate::scalar::Scalar;
use crate::tensor::{softplus, Tensor};
use crate::world_model::LatentState;

pub const LOG_STD_MIN: f64 = -10.0;
pub const LOG_STD_MAX: f64 = 2.0;

pub fn policy_spec(
    latent_dim: usize,
    action_dim: usize,
    horizon: usize,
    hidden: &[usize],
) -> MlpSpec {
    MlpSpec {
        input_dim: latent_dim,
        hidden: hidden.to_vec(),
        output_dim: 2 * horizon * action_dim,
        use_layernorm: true,
        final_bias: true,
        normalize_output: false,
    }
}

/// Squashed samples for a batch: `actions` is `n x (H*A)` (flattened plans),
/// `log_probs` is `n x H` (per-step log density).
#[derive(Clone, Debug, PartialEq)]
pub struct PolicySample<T> {
    pub actions: Tensor<T>,
    pub log_probs: Tensor<T>,
}

/// Tape handles of a reparameterised sample.
#[derive(Clone, Copy, Debug)]
pub struct PolicySampleVars {
    pub actions: Var,
    pub log_probs: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PolicyModel<T> {
    pub net: Mlp<T>,
    horizon: usize,
    action_dim: usize,
}

fn soft_log_std<T: Scalar>(raw: T) -> T {
    let half = T::lit(0.5 * (LOG_STD_MAX - LOG_STD_MIN));
    T::lit(LOG_STD_MIN) + half * (raw.tanh() + T::one())
}

/// `log(1 - tanh(u)^2)` evaluated without cancellation.
pub fn log_one_minus_tanh_sq<T: Scalar>(u: T) -> T {
    T::lit(2.0) * (T::lit(LN_2) - u - softplus(-T::lit(2.0) * u))
}

/// Block indicator summing each step's `action_dim` columns.
fn step_sum_matrix<T: Scalar>(horizon: usize, action_dim: usize) -> Tensor<T> {
    Tensor::from_fn(horizon * action_dim, horizon, |r, c| {
        if r / action_dim == c {
            T::one()
        } else {
            T::zero()
        }
    })
}

impl<T: Scalar> PolicyModel<T> {
    pub fn new<R: Rng + ?Sized>(
        latent_dim: usize,
        action_dim: usize,
        horizon: usize,
        hidden: &[usize],
        rng: &mut R,
    ) -> Result<Self> {
        if horizon == 0 || action_dim == 0 {
            return Err(Error::Config(
                "policy needs horizon and action_dim >= 1".into(),
            ));
        }
        Ok(Self {
            net: Mlp::new(policy_spec(latent_dim, action_dim, horizon, hidden), rng)?,
            horizon,
            action_dim,
        })
    }

    pub fn from_net(net: Mlp<T>, action_dim: usize, horizon: usize) -> Result<Self> {
        if net.spec().output_dim != 2 * horizon * action_dim {
            return Err(Error::dim(
                "policy output",
                2 * horizon * action_dim,
                net.spec().output_dim,
            ));
        }
        Ok(Self {
            net,
            horizon,
            action_dim,
        })
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    pub fn latent_dim(&self) -> usize {
        self.net.spec().input_dim
    }

    fn width(&self) -> usize {
        self.horizon * self.action_dim
    }

    /// Pre-squash means and clamped log-stds, each `n x (H*A)`.
    pub fn distribution(&self, z: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        if z.cols() != self.latent_dim() {
            return Err(Error::dim("policy latent", self.latent_dim(), z.cols()));
        }
        let out = self.net.forward(z)?;
        let w = self.width();
        Ok((out.slice_cols(0, w), out.slice_cols(w, w).map(soft_log_std)))
    }

    /// Standard normal noise for `n` samples, drawn row-major.
    pub fn draw_noise<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Tensor<T> {
        Tensor::from_fn(n, self.width(), |_, _| {
            T::from_f64_lossy(rng.sample(StandardNormal))
        })
    }

    /// Squashed sample for fixed noise.
    pub fn sample_with_noise(&self, z: &Tensor<T>, eps: &Tensor<T>) -> Result<PolicySample<T>> {
        let (mu, log_std) = self.distribution(z)?;
        if eps.shape() != mu.shape() {
            return Err(Error::Shape(format!(
                "policy noise {:?} for output {:?}",
                eps.shape(),
                mu.shape()
            )));
        }
        let n = z.rows();
        let (h, ad) = (self.horizon, self.action_dim);
        let mut actions = Tensor::zeros(n, h * ad);
        let mut log_probs = Tensor::zeros(n, h);
        let c = T::lit(-0.5 * (2.0 * PI).ln());
        for r in 0..n {
            for t in 0..h {
                let mut lp = T::zero();
                for d in 0..ad {
                    let k = t * ad + d;
                    let e = eps.get(r, k);
                    let ls = log_std.get(r, k);
                    let u = mu.get(r, k) + ls.exp() * e;
                    actions.set(r, k, u.tanh());
                    lp = lp + (T::lit(-0.5) * e * e - ls + c) - log_one_minus_tanh_sq(u);
                }
                log_probs.set(r, t, lp);
            }
        }
        Ok(PolicySample { actions, log_probs })
    }

    pub fn sample_batch<R: Rng + ?Sized>(
        &self,
        z: &Tensor<T>,
        rng: &mut R,
    ) -> Result<PolicySample<T>> {
        let eps = self.draw_noise(z.rows(), rng);
        self.sample_with_noise(z, &eps)
    }

    /// Deterministic plans `tanh(mu)`.
    pub fn mean_actions(&self, z: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.distribution(z)?.0.map(|u| u.tanh()))
    }

    pub fn sample_plan<R: Rng + ?Sized>(&self, z: &LatentState<T>, rng: &mut R) -> Result<Plan<T>> {
        let s = self.sample_batch(&z.to_row(), rng)?;
        Plan::from_flat(self.horizon, self.action_dim, s.actions.into_vec())
    }

    pub fn mean_plan(&self, z: &LatentState<T>) -> Result<Plan<T>> {
        let a = self.mean_actions(&z.to_row())?;
        Plan::from_flat(self.horizon, self.action_dim, a.into_vec())
    }

    /// Log density of already-squashed actions, one column per step. Actions
    /// must lie strictly inside `(-1, 1)`.
    pub fn log_prob(&self, z: &Tensor<T>, actions: &Tensor<T>) -> Result<Tensor<T>> {
        let (mu, log_std) = self.distribution(z)?;
        if actions.shape() != mu.shape() {
            return Err(Error::Shape(format!(
                "actions {:?} for policy output {:?}",
                actions.shape(),
                mu.shape()
            )));
        }
        let eps = Tensor::from_fn(mu.rows(), mu.cols(), |r, k| {
            (actions.get(r, k).atanh() - mu.get(r, k)) / log_std.get(r, k).exp()
        });
        Ok(self.sample_with_noise(z, &eps)?.log_probs)
    }

    /// Reparameterised sample on a tape, differentiable through `z` and the
    /// bound network.
    pub fn sample_on_tape(
        &self,
        tape: &mut Tape<T>,
        net: &BoundMlp,
        z: Var,
        eps: &Tensor<T>,
    ) -> Result<PolicySampleVars> {
        let (h, ad) = (self.horizon, self.action_dim);
        let w = h * ad;
        let out = net.forward(tape, z)?;
        if tape.value(out).shape() != (eps.rows(), 2 * w) {
            return Err(Error::Shape(format!(
                "policy noise {:?} for output {:?}",
                eps.shape(),
                tape.value(out).shape()
            )));
        }
        let mu = tape.slice_cols(out, 0, w);
        let raw = tape.slice_cols(out, w, w);
        let th = tape.tanh(raw);
        let half = 0.5 * (LOG_STD_MAX - LOG_STD_MIN);
        let scaled = tape.scale(th, T::lit(half));
        let log_std = tape.add_const(scaled, T::lit(LOG_STD_MIN + half));
        let std = tape.exp(log_std);
        let ev = tape.constant(eps.clone());
        let noise = tape.mul(std, ev);
        let u = tape.add(mu, noise);
        let actions = tape.tanh(u);

        // -log(1 - tanh(u)^2) = 2u + 2 softplus(-2u) - 2 ln 2
        let m2u = tape.scale(u, T::lit(-2.0));
        let sp = tape.softplus(m2u);
        let usp = tape.add(u, sp);
        let corr = tape.scale(usp, T::lit(2.0));
        let per = tape.sub(corr, log_std);
        let c = -0.5 * (2.0 * PI).ln() - 2.0 * LN_2;
        let consts = tape.constant(eps.map(|e| T::lit(-0.5) * e * e + T::lit(c)));
        let per = tape.add(per, consts);
        let sum = tape.constant(step_sum_matrix(h, ad));
        let log_probs = tape.matmul(per, sum);
        Ok(PolicySampleVars { actions, log_probs })
    }
}

/// Entropy temperature `alpha = exp(log_alpha)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Temperature<T> {
    params: ParamStore<T>,
}

impl<T: Scalar> Temperature<T> {
    pub const NAME: &'static str = "log_alpha";

    pub fn new(initial_alpha: f64) -> Result<Self> {
        if !(initial_alpha > 0.0 && initial_alpha.is_finite()) {
            return Err(Error::Config(format!(
                "initial alpha must be positive, got {initial_alpha}"
            )));
        }
        let mut params = ParamStore::new();
        params.insert(Self::NAME, Tensor::scalar(T::lit(initial_alpha.ln())));
        Ok(Self { params })
    }

    pub fn from_params(params: ParamStore<T>) -> Result<Self> {
        match params.get(Self::NAME) {
            Some(t) if t.shape() == (1, 1) => Ok(Self { params }),
            _ => Err(Error::Checkpoint("missing scalar log_alpha".into())),
        }
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn log_alpha(&self) -> f64 {
        self.params
            .get(Self::NAME)
            .expect("present")
            .item()
            .to_f64_lossy()
    }

    pub fn alpha(&self) -> f64 {
        self.log_alpha().exp()
    }

    /// Loss `-alpha * (mean log pi + target_entropy)` and its gradient with
    /// respect to `log_alpha`.
    pub fn loss_and_grad(&self, mean_log_prob: f64, target_entropy: f64) -> (f64, f64) {
        let a = self.alpha();
        let v = -a * (mean_log_prob + target_entropy);
        (v, v)
    }

    pub fn update(
        &mut self,
        mean_log_prob: f64,
        target_entropy: f64,
        lr: f64,
        cfg: &AdamConfig,
    ) -> Result<f64> {
        if !mean_log_prob.is_finite() {
            return Err(Error::NonFinite("policy log-probability".into()));
        }
        let (loss, g) = self.loss_and_grad(mean_log_prob, target_entropy);
        let mut grads = GradStore::new();
        grads.insert(Self::NAME, Tensor::scalar(T::lit(g)));
        adam_step(&mut self.params, &grads, lr, cfg)?;
        Ok(loss)
    }
}
