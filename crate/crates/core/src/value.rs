//! Ensemble state-action value with slow target copies and the λ-return
//! used for both value targets and the policy objective.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{polyak_update, BoundMlp, GradStore, Mlp, MlpSpec};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub fn value_spec(latent_dim: usize, action_dim: usize, hidden: &[usize]) -> MlpSpec {
    MlpSpec {
        input_dim: latent_dim + action_dim,
        hidden: hidden.to_vec(),
        output_dim: 1,
        use_layernorm: true,
        final_bias: true,
        normalize_output: false,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QMode {
    Online,
    Target,
}

/// How per-member estimates are reduced to one value.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Aggregation {
    /// Minimum over a uniformly sampled pair of distinct members.
    TdTarget,
    /// Mean over all members.
    ReturnEstimate,
}

/// Discounting and blending parameters of the λ-return.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReturnParams {
    pub lambda: f64,
    pub gamma: f64,
    pub alpha: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ValueEnsemble<T> {
    members: Vec<Mlp<T>>,
    targets: Vec<Mlp<T>>,
}

/// Value loss built on a tape, awaiting its backward pass.
#[derive(Debug)]
pub struct PendingValueLoss {
    pub loss: f64,
    pub target_mean: f64,
    bound: Vec<BoundMlp>,
}

impl PendingValueLoss {
    pub fn finish<T: Scalar>(self, grads: &Gradients<T>) -> ValueLoss<T> {
        ValueLoss {
            loss: self.loss,
            target_mean: self.target_mean,
            grads: self.bound.iter().map(|b| b.grads(grads)).collect(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ValueLoss<T> {
    pub loss: f64,
    pub target_mean: f64,
    pub grads: Vec<GradStore<T>>,
}

/// Reduces one sample's member values.
pub fn aggregate_q<T: Scalar, R: Rng + ?Sized>(
    per_member: &[T],
    purpose: Aggregation,
    rng: &mut R,
) -> Result<T> {
    if per_member.len() < 2 {
        return Err(Error::Config(format!(
            "value ensemble needs at least 2 members, got {}",
            per_member.len()
        )));
    }
    Ok(match purpose {
        Aggregation::TdTarget => {
            let (i, j) = sample_pair(per_member.len(), rng);
            per_member[i].min(per_member[j])
        }
        Aggregation::ReturnEstimate => {
            let n = T::from_usize(per_member.len()).unwrap();
            per_member.iter().copied().sum::<T>() / n
        }
    })
}

/// Two distinct member indices, uniformly.
pub fn sample_pair<R: Rng + ?Sized>(n: usize, rng: &mut R) -> (usize, usize) {
    let i = rng.random_range(0..n);
    let mut j = rng.random_range(0..n - 1);
    if j >= i {
        j += 1;
    }
    (i, j)
}

/// Reference λ-return for one trajectory, computed backwards:
///
/// `G_H = q_H`,
/// `G_t = λ q_t + (1 - λ) (r_t + γ G_{t+1}) - α log π_t`.
///
/// `q` has `H + 1` entries, `rewards` and `log_probs` have `H`.
pub fn lambda_return<T: Scalar>(rewards: &[T], q: &[T], log_probs: &[T], p: &ReturnParams) -> T {
    let h = rewards.len();
    assert_eq!(q.len(), h + 1, "lambda_return needs H + 1 values");
    assert_eq!(log_probs.len(), h, "lambda_return needs H log-probs");
    let lambda = T::lit(p.lambda);
    let gamma = T::lit(p.gamma);
    let alpha = T::lit(p.alpha);
    let mut g = q[h];
    for t in (0..h).rev() {
        g = lambda * q[t] + (T::one() - lambda) * (rewards[t] + gamma * g) - alpha * log_probs[t];
    }
    g
}

/// The same recursion over batched columns on a tape.
pub fn lambda_return_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    rewards: &[Var],
    q: &[Var],
    log_probs: &[Var],
    p: &ReturnParams,
) -> Var {
    let h = rewards.len();
    assert_eq!(q.len(), h + 1);
    assert_eq!(log_probs.len(), h);
    let mut g = q[h];
    for t in (0..h).rev() {
        let disc = tape.scale(g, T::lit(p.gamma));
        let inner = tape.add(rewards[t], disc);
        let boot = tape.scale(q[t], T::lit(p.lambda));
        let model = tape.scale(inner, T::lit(1.0 - p.lambda));
        g = tape.add(boot, model);
        if p.alpha != 0.0 {
            let ent = tape.scale(log_probs[t], T::lit(p.alpha));
            g = tape.sub(g, ent);
        }
    }
    g
}

impl<T: Scalar> ValueEnsemble<T> {
    pub fn new<R: Rng + ?Sized>(
        count: usize,
        latent_dim: usize,
        action_dim: usize,
        hidden: &[usize],
        rng: &mut R,
    ) -> Result<Self> {
        if count < 2 {
            return Err(Error::Config(format!(
                "value ensemble needs at least 2 members, got {count}"
            )));
        }
        let spec = value_spec(latent_dim, action_dim, hidden);
        let members = (0..count)
            .map(|_| Mlp::new(spec.clone(), rng))
            .collect::<Result<Vec<_>>>()?;
        let targets = members.clone();
        Ok(Self { members, targets })
    }

    pub fn from_parts(members: Vec<Mlp<T>>, targets: Vec<Mlp<T>>) -> Result<Self> {
        if members.len() < 2 || members.len() != targets.len() {
            return Err(Error::Config(format!(
                "ensemble needs >= 2 members and matching targets ({} vs {})",
                members.len(),
                targets.len()
            )));
        }
        for (m, t) in members.iter().zip(&targets) {
            if m.spec() != t.spec() {
                return Err(Error::Config("member/target spec mismatch".into()));
            }
        }
        Ok(Self { members, targets })
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn members(&self) -> &[Mlp<T>] {
        &self.members
    }

    pub fn members_mut(&mut self) -> &mut [Mlp<T>] {
        &mut self.members
    }

    pub fn targets(&self) -> &[Mlp<T>] {
        &self.targets
    }

    fn nets(&self, mode: QMode) -> &[Mlp<T>] {
        match mode {
            QMode::Online => &self.members,
            QMode::Target => &self.targets,
        }
    }

    /// Per-member values for a batch, each an `n x 1` column.
    pub fn q_values(&self, z: &Tensor<T>, a: &Tensor<T>, mode: QMode) -> Result<Vec<Tensor<T>>> {
        let x = Tensor::concat_cols(&[z, a]);
        self.nets(mode).iter().map(|m| m.forward(&x)).collect()
    }

    /// Aggregated batch values. `TdTarget` draws one member pair for the
    /// whole batch and evaluates only those two networks.
    pub fn aggregate_batch<R: Rng + ?Sized>(
        &self,
        z: &Tensor<T>,
        a: &Tensor<T>,
        mode: QMode,
        purpose: Aggregation,
        rng: &mut R,
    ) -> Result<Tensor<T>> {
        let x = Tensor::concat_cols(&[z, a]);
        let nets = self.nets(mode);
        match purpose {
            Aggregation::TdTarget => {
                let (i, j) = sample_pair(nets.len(), rng);
                let qi = nets[i].forward(&x)?;
                let qj = nets[j].forward(&x)?;
                Ok(qi.zip_map(&qj, |a, b| a.min(b)))
            }
            Aggregation::ReturnEstimate => self.mean_q(&x, mode),
        }
    }

    /// Mean over members for already-concatenated `[z ; a]` rows.
    pub fn mean_q(&self, za: &Tensor<T>, mode: QMode) -> Result<Tensor<T>> {
        let nets = self.nets(mode);
        let mut acc = nets[0].forward(za)?;
        for m in &nets[1..] {
            acc.add_assign(&m.forward(za)?);
        }
        Ok(acc.scale(T::one() / T::from_usize(nets.len()).unwrap()))
    }

    /// Squared regression of every online member onto fixed `targets`
    /// (`n x 1`), averaged over batch and members.
    pub fn value_loss(
        &self,
        z: &Tensor<T>,
        a: &Tensor<T>,
        targets: &Tensor<T>,
    ) -> Result<ValueLoss<T>> {
        let mut tape = Tape::new();
        let zv = tape.constant(z.clone());
        let (total, out) = self.value_loss_on_tape(&mut tape, zv, a, targets)?;
        let grads = tape.backward(total)?;
        Ok(out.finish(&grads))
    }

    /// Builds the regression loss on `tape` with latents `z` given as a
    /// tape variable, so callers may differentiate into whatever produced it.
    pub fn value_loss_on_tape(
        &self,
        tape: &mut Tape<T>,
        z: Var,
        a: &Tensor<T>,
        targets: &Tensor<T>,
    ) -> Result<(Var, PendingValueLoss)> {
        if !targets.is_finite() {
            let bad = targets
                .data()
                .iter()
                .position(|v| !v.is_finite())
                .unwrap_or(0);
            return Err(Error::NonFinite(format!("value target at row {bad}")));
        }
        let n = tape.value(z).rows();
        if targets.shape() != (n, 1) || a.rows() != n {
            return Err(Error::Shape(format!(
                "value targets {:?} and actions {:?} for batch of {n}",
                targets.shape(),
                a.shape()
            )));
        }
        let av = tape.constant(a.clone());
        let x = tape.concat_cols(&[z, av]);
        let tv = tape.constant(targets.clone());
        let scale = 1.0 / (self.members.len() * n) as f64;
        let mut total = None;
        let mut loss = 0.0;
        let mut bound = Vec::with_capacity(self.members.len());
        for m in &self.members {
            let b = m.bind(tape, true);
            let q = b.forward(tape, x)?;
            let d = tape.sub(q, tv);
            let sq = tape.square(d);
            loss += tape.value(sq).sum_f64() * scale;
            let s = tape.sum(sq);
            let term = tape.scale(s, T::lit(scale));
            total = Some(match total {
                None => term,
                Some(acc) => tape.add(acc, term),
            });
            bound.push(b);
        }
        if !loss.is_finite() {
            return Err(Error::NonFinite("value loss".into()));
        }
        let total = total.expect("at least two members");
        Ok((
            total,
            PendingValueLoss {
                loss,
                target_mean: targets.sum_f64() / n as f64,
                bound,
            },
        ))
    }

    /// Moves every target copy toward its online member.
    pub fn update_targets(&mut self, coeff: f64) -> Result<()> {
        for (t, m) in self.targets.iter_mut().zip(&self.members) {
            polyak_update(t.params_mut(), m.params(), coeff)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn aggregation_rules() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(
            aggregate_q(&[1.0, 3.0], Aggregation::TdTarget, &mut rng).unwrap(),
            1.0
        );
        assert_eq!(
            aggregate_q(&[1.0, 3.0, 5.0], Aggregation::ReturnEstimate, &mut rng).unwrap(),
            3.0
        );
        for purpose in [Aggregation::TdTarget, Aggregation::ReturnEstimate] {
            assert_eq!(aggregate_q(&[2.5; 4], purpose, &mut rng).unwrap(), 2.5);
        }
        assert!(aggregate_q(&[1.0], Aggregation::ReturnEstimate, &mut rng).is_err());
    }

    #[test]
    fn pair_sampling_is_distinct_and_covers_all() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut seen = [[0usize; 5]; 5];
        for _ in 0..5000 {
            let (i, j) = sample_pair(5, &mut rng);
            assert_ne!(i, j);
            seen[i][j] += 1;
        }
        for (i, row) in seen.iter().enumerate() {
            for (j, &c) in row.iter().enumerate() {
                if i != j {
                    assert!(c > 150, "pair ({i},{j}) drawn {c} times");
                }
            }
        }
    }

    #[test]
    fn lambda_one_keeps_first_step() {
        let p = ReturnParams {
            lambda: 1.0,
            gamma: 0.99,
            alpha: 0.3,
        };
        let g = lambda_return(
            &[1.0, 2.0, 3.0],
            &[4.0, 5.0, 6.0, 7.0],
            &[-1.0, 0.5, 2.0],
            &p,
        );
        assert_eq!(g, 4.0 - 0.3 * -1.0);
    }

    #[test]
    fn lambda_zero_is_model_return() {
        let p = ReturnParams {
            lambda: 0.0,
            gamma: 0.5,
            alpha: 0.0,
        };
        let g = lambda_return(
            &[1.0, 2.0, 4.0],
            &[9.0, 9.0, 9.0, 8.0],
            &[7.0, 7.0, 7.0],
            &p,
        );
        assert_eq!(g, 1.0 + 0.5 * 2.0 + 0.25 * 4.0 + 0.125 * 8.0);
    }

    #[test]
    fn zero_weight_members_give_zero() {
        let spec = value_spec(3, 2, &[8, 8]);
        let members = vec![Mlp::<f64>::constant(spec.clone(), 0.0).unwrap(); 2];
        let ens = ValueEnsemble::from_parts(members.clone(), members).unwrap();
        let z = Tensor::from_fn(4, 3, |r, c| (r + c) as f64);
        let a = Tensor::from_fn(4, 2, |r, _| r as f64 * 0.1);
        for q in ens.q_values(&z, &a, QMode::Online).unwrap() {
            assert!(q.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn targets_copy_after_full_polyak() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut ens = ValueEnsemble::<f32>::new(3, 4, 2, &[8, 8], &mut rng).unwrap();
        for m in ens.members_mut() {
            *m = Mlp::new(m.spec().clone(), &mut rng).unwrap();
        }
        ens.update_targets(1.0).unwrap();
        let z = Tensor::from_fn(5, 4, |r, c| (r as f32 - c as f32) * 0.2);
        let a = Tensor::from_fn(5, 2, |r, c| (r * c) as f32 * 0.1);
        assert_eq!(
            ens.q_values(&z, &a, QMode::Online).unwrap(),
            ens.q_values(&z, &a, QMode::Target).unwrap()
        );
    }

    #[test]
    fn value_loss_simple_cases() {
        let spec = value_spec(1, 1, &[2]);
        let mut members = vec![Mlp::<f64>::constant(spec.clone(), 0.0).unwrap(); 2];
        for m in &mut members {
            m.params_mut().set("l1.bias", Tensor::scalar(2.0)).unwrap();
        }
        let ens = ValueEnsemble::from_parts(members.clone(), members).unwrap();
        let z = Tensor::scalar(0.3);
        let a = Tensor::scalar(-0.2);
        let out = ens.value_loss(&z, &a, &Tensor::scalar(5.0)).unwrap();
        assert!((out.loss - 9.0).abs() < 1e-12);
        let zero = ens.value_loss(&z, &a, &Tensor::scalar(2.0)).unwrap();
        assert_eq!(zero.loss, 0.0);
        assert!(ens.value_loss(&z, &a, &Tensor::scalar(f64::NAN)).is_err());
    }
}
