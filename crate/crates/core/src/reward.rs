//! Inferred reward over latent state transitions, trained adversarially
//! against demonstration transitions with a gradient penalty.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::experience::shuffled_indices;
use crate::nn::{GradStore, Mlp, MlpSpec};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::world_model::LatentState;

/// Which side of the adversarial game a transition pair comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PairSource {
    Learner,
    Demo,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransitionPair<T> {
    pub z: LatentState<T>,
    pub z_next: LatentState<T>,
    pub source: PairSource,
}

/// Unbounded scalar reward: no LayerNorm, no output bias, no squashing.
pub fn reward_spec(latent_dim: usize, hidden: &[usize]) -> MlpSpec {
    MlpSpec {
        input_dim: 2 * latent_dim,
        hidden: hidden.to_vec(),
        output_dim: 1,
        use_layernorm: false,
        final_bias: false,
        normalize_output: false,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RewardModel<T> {
    pub net: Mlp<T>,
}

#[derive(Clone, Debug)]
pub struct RewardLoss<T> {
    pub loss: f64,
    pub learner_mean: f64,
    pub demo_mean: f64,
    pub gradient_penalty: f64,
    pub grads: GradStore<T>,
}

/// Stacks `[z ; z']` row-wise into pair inputs.
pub fn pair_inputs<T: Scalar>(z: &Tensor<T>, z_next: &Tensor<T>) -> Tensor<T> {
    Tensor::concat_cols(&[z, z_next])
}

/// Joint linear interpolates `u * learner + (1 - u) * demo` with one
/// `u ~ U(0, 1)` per row, after independently shuffling both batches.
pub fn interpolate_pairs<T: Scalar, R: Rng + ?Sized>(
    learner: &Tensor<T>,
    demo: &Tensor<T>,
    rng: &mut R,
) -> Result<Tensor<T>> {
    if learner.shape() != demo.shape() {
        return Err(Error::Shape(format!(
            "gradient penalty needs equal learner/demo batches, got {:?} and {:?}",
            learner.shape(),
            demo.shape()
        )));
    }
    let n = learner.rows();
    let li = shuffled_indices(n, rng);
    let di = shuffled_indices(n, rng);
    let mut out = Tensor::zeros(n, learner.cols());
    for r in 0..n {
        let u = T::from_f64_lossy(rng.random::<f64>());
        let lr = learner.row(li[r]);
        let dr = demo.row(di[r]);
        for ((o, &l), &d) in out.row_mut(r).iter_mut().zip(lr).zip(dr) {
            *o = u * l + (T::one() - u) * d;
        }
    }
    Ok(out)
}

/// `mean_rows (||grad_x r(x)||_2 - 1)^2` given a builder for the input gradient.
pub fn gradient_penalty_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    interpolates: Var,
    input_gradient: impl FnOnce(&mut Tape<T>, Var) -> Result<Var>,
) -> Result<Var> {
    let g = input_gradient(tape, interpolates)?;
    let norm = tape.row_norm(g);
    let dev = tape.add_const(norm, -T::one());
    let sq = tape.square(dev);
    Ok(tape.mean(sq))
}

impl<T: Scalar> RewardModel<T> {
    pub fn new<R: Rng + ?Sized>(latent_dim: usize, hidden: &[usize], rng: &mut R) -> Result<Self> {
        Ok(Self {
            net: Mlp::new(reward_spec(latent_dim, hidden), rng)?,
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.net.spec().input_dim / 2
    }

    pub fn reward(&self, z: &LatentState<T>, z_next: &LatentState<T>) -> Result<T> {
        if z.dim() != z_next.dim() {
            return Err(Error::dim("reward pair", z.dim(), z_next.dim()));
        }
        let out = self.reward_batch(&z.to_row(), &z_next.to_row())?;
        Ok(out.item())
    }

    /// Rewards for a batch of `(z, z')` rows, as an `n x 1` column.
    pub fn reward_batch(&self, z: &Tensor<T>, z_next: &Tensor<T>) -> Result<Tensor<T>> {
        self.net.forward(&pair_inputs(z, z_next))
    }

    /// Gradient penalty and its parameter gradient, on its own.
    pub fn gradient_penalty<R: Rng + ?Sized>(
        &self,
        learner: &Tensor<T>,
        demo: &Tensor<T>,
        rng: &mut R,
    ) -> Result<(f64, GradStore<T>)> {
        let x = interpolate_pairs(learner, demo, rng)?;
        let mut tape = Tape::new();
        let net = self.net.bind(&mut tape, true);
        let xv = tape.constant(x);
        let gp = gradient_penalty_on_tape(&mut tape, xv, |t, v| net.input_gradient(t, v))?;
        let value = tape.value(gp).item().to_f64_lossy();
        let grads = tape.backward(gp)?;
        Ok((value, net.grads(&grads)))
    }

    /// `E_learner[r] - E_demo[r] + beta * GP`, with pair inputs already
    /// detached from the encoder.
    pub fn reward_loss<R: Rng + ?Sized>(
        &self,
        learner: &Tensor<T>,
        demo: &Tensor<T>,
        beta: f64,
        rng: &mut R,
    ) -> Result<RewardLoss<T>> {
        if learner.rows() == 0 {
            return Err(Error::InsufficientData("empty learner batch".into()));
        }
        if demo.rows() == 0 {
            return Err(Error::Config("empty demonstration batch".into()));
        }
        let mut tape = Tape::new();
        let net = self.net.bind(&mut tape, true);
        let lv = tape.constant(learner.clone());
        let dv = tape.constant(demo.clone());
        let lr = net.forward(&mut tape, lv)?;
        let dr = net.forward(&mut tape, dv)?;
        let learner_mean = tape.value(lr).sum_f64() / learner.rows() as f64;
        let demo_mean = tape.value(dr).sum_f64() / demo.rows() as f64;
        let lm = tape.mean(lr);
        let dm = tape.mean(dr);
        let mut loss = tape.sub(lm, dm);
        let mut gp_value = 0.0;
        if beta != 0.0 {
            let x = interpolate_pairs(learner, demo, rng)?;
            let xv = tape.constant(x);
            let gp = gradient_penalty_on_tape(&mut tape, xv, |t, v| net.input_gradient(t, v))?;
            gp_value = tape.value(gp).item().to_f64_lossy();
            let scaled = tape.scale(gp, T::lit(beta));
            loss = tape.add(loss, scaled);
        }
        let total = learner_mean - demo_mean + beta * gp_value;
        if !total.is_finite() {
            return Err(Error::NonFinite("reward loss".into()));
        }
        let grads = tape.backward(loss)?;
        Ok(RewardLoss {
            loss: total,
            learner_mean,
            demo_mean,
            gradient_penalty: gp_value,
            grads: net.grads(&grads),
        })
    }
}
