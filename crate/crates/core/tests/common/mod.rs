#![allow(dead_code)]

use mpail2::agent::{ModelBundle, ModelConfig};
use mpail2::autodiff::Tape;
use mpail2::experience::TransitionSequence;
use mpail2::nn::{GradStore, ParamStore};
use mpail2::plan::Plan;
use mpail2::planner::{elite_update, FinalPlan, Planner, PlannerConfig, PlanningModel};
use mpail2::reward::{gradient_penalty_on_tape, interpolate_pairs};
use mpail2::value::{lambda_return, ReturnParams};
use mpail2::{Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_EPS: f64 = 1e-4;

pub fn small_bundle(seed: u64) -> ModelBundle<f64> {
    let cfg = ModelConfig {
        obs_dim: 4,
        action_dim: 2,
        latent_dim: 8,
        hidden: vec![16, 16],
        horizon: 3,
        ensemble_size: 3,
        initial_alpha: 0.1,
    };
    ModelBundle::new(cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

pub fn random_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Tensor<f64> {
    Tensor::from_fn(rows, cols, |_, _| rng.random_range(-scale..scale))
}

/// Worst per-tensor `||analytic - numeric|| / max(||analytic||, ||numeric||)`
/// over every tensor of `store`, with numeric derivatives by central
/// differences of `loss` under in-place perturbation.
pub fn fd_relative_error(
    store: &mut ParamStore<f64>,
    analytic: &GradStore<f64>,
    mut loss: impl FnMut(&ParamStore<f64>) -> f64,
) -> f64 {
    let names: Vec<String> = store.names().map(str::to_string).collect();
    let mut worst = 0.0f64;
    for name in names {
        let base = store.get(&name).unwrap().clone();
        let mut numeric = vec![0.0; base.len()];
        for (k, slot) in numeric.iter_mut().enumerate() {
            let mut plus = base.clone();
            plus.data_mut()[k] += FD_EPS;
            store.set(&name, plus).unwrap();
            let lp = loss(store);
            let mut minus = base.clone();
            minus.data_mut()[k] -= FD_EPS;
            store.set(&name, minus).unwrap();
            let lm = loss(store);
            *slot = (lp - lm) / (2.0 * FD_EPS);
        }
        store.set(&name, base).unwrap();
        let a = analytic
            .get(&name)
            .expect("gradient for every parameter")
            .data();
        let diff: f64 = a
            .iter()
            .zip(&numeric)
            .map(|(x, y)| (x - y).powi(2))
            .sum::<f64>()
            .sqrt();
        let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nn: f64 = numeric.iter().map(|x| x * x).sum::<f64>().sqrt();
        let denom = na.max(nn);
        if denom > 1e-10 {
            worst = worst.max(diff / denom);
        }
    }
    worst
}

fn sequences(rng: &mut ChaCha8Rng, n: usize, h: usize) -> Vec<TransitionSequence<f64>> {
    (0..n)
        .map(|_| TransitionSequence {
            observations: (0..=h)
                .map(|_| (0..4).map(|_| rng.random_range(-0.5..0.5)).collect())
                .collect(),
            actions: (0..h)
                .map(|_| (0..2).map(|_| rng.random_range(-1.0..1.0)).collect())
                .collect(),
        })
        .collect()
}

pub fn dynamics_gradient_error(seed: u64) -> f64 {
    let mut m = small_bundle(seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
    let batch = sequences(&mut rng, 6, 3);
    let out = m.world.dynamics_loss(&batch, 3, 0.95).unwrap();
    let world = m.world.clone();
    let e_dyn = fd_relative_error(m.world.dynamics.params_mut(), &out.dynamics_grads, |p| {
        let mut w = world.clone();
        *w.dynamics.params_mut() = p.clone();
        w.dynamics_loss(&batch, 3, 0.95).unwrap().loss
    });
    let e_enc = fd_relative_error(m.world.encoder.params_mut(), &out.encoder_grads, |p| {
        // targets are stop-gradient: re-encode them with the unperturbed encoder
        let mut w = world.clone();
        *w.encoder.params_mut() = p.clone();
        dynamics_loss_fixed_targets(&w, &world, &batch)
    });
    e_dyn.max(e_enc)
}

/// Dynamics loss whose targets come from `target_model`.
fn dynamics_loss_fixed_targets(
    online: &mpail2::world_model::WorldModel<f64>,
    target_model: &mpail2::world_model::WorldModel<f64>,
    batch: &[TransitionSequence<f64>],
) -> f64 {
    let h = batch[0].len();
    let mut total = 0.0;
    for seq in batch {
        let mut z = online.encode(&seq.observations[0]).unwrap();
        for t in 1..=h {
            z = online.predict_next(&z, &seq.actions[t - 1]).unwrap();
            let target = target_model.encode(&seq.observations[t]).unwrap();
            let sq: f64 =
                z.0.iter()
                    .zip(&target.0)
                    .map(|(a, b)| (a - b).powi(2))
                    .sum();
            total += 0.95f64.powi(t as i32) * sq / z.dim() as f64;
        }
    }
    total / batch.len() as f64
}

pub fn reward_gradient_error(seed: u64) -> f64 {
    let mut m = small_bundle(seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 200);
    let learner = random_tensor(&mut rng, 8, 16, 1.0);
    let demo = random_tensor(&mut rng, 8, 16, 1.0);
    let interp_seed = seed + 300;
    let out = m
        .reward
        .reward_loss(
            &learner,
            &demo,
            0.1,
            &mut ChaCha8Rng::seed_from_u64(interp_seed),
        )
        .unwrap();
    let rm = m.reward.clone();
    fd_relative_error(m.reward.net.params_mut(), &out.grads, |p| {
        let mut r = rm.clone();
        *r.net.params_mut() = p.clone();
        r.reward_loss(
            &learner,
            &demo,
            0.1,
            &mut ChaCha8Rng::seed_from_u64(interp_seed),
        )
        .unwrap()
        .loss
    })
}

pub fn value_gradient_error(seed: u64) -> f64 {
    let mut m = small_bundle(seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 400);
    let z = random_tensor(&mut rng, 8, 8, 1.0);
    let a = random_tensor(&mut rng, 8, 2, 1.0);
    let targets = random_tensor(&mut rng, 8, 1, 2.0);
    let out = m.value.value_loss(&z, &a, &targets).unwrap();
    let ens = m.value.clone();
    let mut worst = 0.0f64;
    for i in 0..ens.len() {
        let e = fd_relative_error(m.value.members_mut()[i].params_mut(), &out.grads[i], |p| {
            let mut v = ens.clone();
            *v.members_mut()[i].params_mut() = p.clone();
            v.value_loss(&z, &a, &targets).unwrap().loss
        });
        worst = worst.max(e);
    }
    worst
}

pub fn policy_gradient_error(seed: u64) -> f64 {
    let mut m = small_bundle(seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 500);
    let z = random_tensor(&mut rng, 6, 8, 1.0);
    let eps = m.policy.draw_noise(6, &mut rng);
    let out = m.policy_loss_with_noise(&z, 0.95, 0.99, 0.1, &eps).unwrap();
    let base = m.clone();
    fd_relative_error(m.policy.net.params_mut(), &out.grads, |p| {
        let mut b = base.clone();
        *b.policy.net.params_mut() = p.clone();
        b.policy_loss_with_noise(&z, 0.95, 0.99, 0.1, &eps)
            .unwrap()
            .loss
    })
}

/// Non-recursive expansion: with `c = (1 - λ) γ`,
/// `G = sum_k c^k (λ q_k + (1 - λ) r_k - α lp_k) + c^H q_H`.
pub fn lambda_return_expanded(
    r: &[f64],
    q: &[f64],
    lp: &[f64],
    lambda: f64,
    gamma: f64,
    alpha: f64,
) -> f64 {
    let h = r.len();
    let c = (1.0 - lambda) * gamma;
    let mut total = 0.0;
    for k in 0..h {
        let mut w = 1.0;
        for _ in 0..k {
            w *= c;
        }
        total += w * (lambda * q[k] + (1.0 - lambda) * r[k] - alpha * lp[k]);
    }
    let mut w = 1.0;
    for _ in 0..h {
        w *= c;
    }
    total + w * q[h]
}

pub struct LambdaOracleReport {
    pub max_abs_error: f64,
    pub collapse_exact: bool,
}

pub fn lambda_return_oracle(trials: usize, seed: u64) -> LambdaOracleReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_abs_error = 0.0f64;
    let mut collapse_exact = true;
    for _ in 0..trials {
        let r: Vec<f64> = (0..5).map(|_| rng.random_range(-2.0..2.0)).collect();
        let q: Vec<f64> = (0..6).map(|_| rng.random_range(-5.0..5.0)).collect();
        let lp: Vec<f64> = (0..5).map(|_| rng.random_range(-3.0..1.0)).collect();
        let lambda = rng.random_range(0.0..1.0);
        let gamma = rng.random_range(0.5..1.0);
        let alpha = rng.random_range(0.0..0.5);
        let p = ReturnParams {
            lambda,
            gamma,
            alpha,
        };
        let g = lambda_return(&r, &q, &lp, &p);
        max_abs_error = max_abs_error
            .max((g - lambda_return_expanded(&r, &q, &lp, lambda, gamma, alpha)).abs());

        // λ = 1: pure bootstrap from the first value
        let g1 = lambda_return(
            &r,
            &q,
            &lp,
            &ReturnParams {
                lambda: 1.0,
                gamma,
                alpha,
            },
        );
        collapse_exact &= g1 == q[0] - alpha * lp[0];
        // λ = 0: discounted soft Monte Carlo return closed by q_H
        let g0 = lambda_return(
            &r,
            &q,
            &lp,
            &ReturnParams {
                lambda: 0.0,
                gamma,
                alpha,
            },
        );
        let mut mc = q[5];
        for t in (0..5).rev() {
            mc = r[t] + gamma * mc - alpha * lp[t];
        }
        let mut closed = 0.0;
        let mut disc = 1.0;
        for t in 0..5 {
            closed += disc * (r[t] - alpha * lp[t]);
            disc *= gamma;
        }
        closed += disc * q[5];
        collapse_exact &= g0 == mc && (g0 - closed).abs() <= 1e-12;
    }
    LambdaOracleReport {
        max_abs_error,
        collapse_exact,
    }
}

/// `(max |GP - 0|, max |GP - 1|)` per sample for a unit-norm linear reward and
/// a constant reward.
pub fn gradient_penalty_analytics(seed: u64) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst_linear = 0.0f64;
    let mut worst_const = 0.0f64;
    for _ in 0..50 {
        let d = 6;
        let mut w: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let n = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        w.iter_mut().for_each(|x| *x /= n);
        let l = random_tensor(&mut rng, 1, d, 1.0);
        let dm = random_tensor(&mut rng, 1, d, 1.0);
        let x = interpolate_pairs(&l, &dm, &mut rng).unwrap();

        // linear r(x) = w.x has input gradient w everywhere
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let gp =
            gradient_penalty_on_tape(&mut tape, xv, |t, _| Ok(t.constant(Tensor::row_vector(&w))))
                .unwrap();
        worst_linear = worst_linear.max(tape.value(gp).item().abs());

        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let gp =
            gradient_penalty_on_tape(&mut tape, xv, |t, _| Ok(t.constant(Tensor::zeros(1, d))))
                .unwrap();
        worst_const = worst_const.max((tape.value(gp).item() - 1.0).abs());
    }
    (worst_linear, worst_const)
}

/// `z' = z + B a`, reward `-(z' - g)^2` summed over dimensions, no terminal
/// value; latent equals observation.
pub struct LinearQuadratic {
    pub b: [[f64; 2]; 2],
    pub goal: [f64; 2],
}

impl PlanningModel<f64> for LinearQuadratic {
    fn action_dim(&self) -> usize {
        2
    }

    fn encode(&self, obs: &[f64]) -> Result<Tensor<f64>> {
        Ok(Tensor::row_vector(obs))
    }

    fn next_latent(&self, z: &Tensor<f64>, a: &Tensor<f64>) -> Result<Tensor<f64>> {
        Ok(Tensor::from_fn(z.rows(), 2, |r, c| {
            z.get(r, c) + self.b[c][0] * a.get(r, 0) + self.b[c][1] * a.get(r, 1)
        }))
    }

    fn reward(&self, _z: &Tensor<f64>, z_next: &Tensor<f64>) -> Result<Tensor<f64>> {
        Ok(Tensor::from_fn(z_next.rows(), 1, |r, _| {
            -(0..2)
                .map(|c| (z_next.get(r, c) - self.goal[c]).powi(2))
                .sum::<f64>()
        }))
    }

    fn terminal_value(&self, z: &Tensor<f64>, _a: &Tensor<f64>) -> Result<Tensor<f64>> {
        Ok(Tensor::zeros(z.rows(), 1))
    }

    fn policy_plans(
        &self,
        _z0: &Tensor<f64>,
        n: usize,
        _rng: &mut dyn rand::RngCore,
    ) -> Result<Tensor<f64>> {
        Ok(Tensor::zeros(n, 2))
    }
}

/// Worst L∞ gap between the planner's final mean and a 100 x 100 grid-search
/// optimum over `[-1, 1]^2`, across `seeds` random problems.
pub fn mppi_grid_gap(seeds: u64) -> f64 {
    let cfg = PlannerConfig {
        num_samples: 512,
        num_elites: 64,
        horizon: 1,
        iterations: 5,
        temperature: 2.0,
        policy_fraction: 0.0,
        ..PlannerConfig::default()
    };
    let planner = Planner::new(cfg, Some(1)).unwrap();
    let mut worst = 0.0f64;
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = LinearQuadratic {
            b: [
                [rng.random_range(0.5..1.0), rng.random_range(-0.2..0.2)],
                [rng.random_range(-0.2..0.2), rng.random_range(0.5..1.0)],
            ],
            goal: [rng.random_range(-0.6..0.6), rng.random_range(-0.6..0.6)],
        };
        let z0 = [rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2)];
        let zt = Tensor::row_vector(&z0);
        let grid = 100;
        let mut best = (f64::NEG_INFINITY, [0.0, 0.0]);
        for i in 0..grid {
            for j in 0..grid {
                let a = [
                    -1.0 + 2.0 * i as f64 / (grid - 1) as f64,
                    -1.0 + 2.0 * j as f64 / (grid - 1) as f64,
                ];
                let next = model.next_latent(&zt, &Tensor::row_vector(&a)).unwrap();
                let r = model.reward(&zt, &next).unwrap().item();
                if r > best.0 {
                    best = (r, a);
                }
            }
        }
        let out = planner
            .plan_latent(&model, &zt, None, FinalPlan::Mean, false, &mut rng)
            .unwrap();
        let mean: &Plan<f64> = &out.distribution.mean;
        for k in 0..2 {
            worst = worst.max((mean.first()[k] - best.1[k]).abs());
        }
    }
    worst
}

/// Elite weights for returns (10, 8, 2, 0), K = 2, temperature 2, and
/// whether adding 100 to every return leaves the mean bitwise unchanged.
pub fn elite_softmax_check() -> (Vec<f64>, bool) {
    let cfg = PlannerConfig {
        num_samples: 4,
        num_elites: 2,
        horizon: 1,
        temperature: 2.0,
        ..PlannerConfig::default()
    };
    let plans = Tensor::from_rows(&[vec![0.3], vec![-0.7], vec![0.9], vec![0.1]]);
    let base = elite_update(&[10.0f64, 8.0, 2.0, 0.0], &plans, &cfg, 1)
        .unwrap()
        .unwrap();
    let shifted = elite_update(&[110.0f64, 108.0, 102.0, 100.0], &plans, &cfg, 1)
        .unwrap()
        .unwrap();
    let same = base
        .distribution
        .mean
        .as_flat()
        .iter()
        .map(|x| x.to_bits())
        .eq(shifted
            .distribution
            .mean
            .as_flat()
            .iter()
            .map(|x| x.to_bits()))
        && base
            .weights
            .iter()
            .map(|x| x.to_bits())
            .eq(shifted.weights.iter().map(|x| x.to_bits()));
    (base.weights, same)
}
