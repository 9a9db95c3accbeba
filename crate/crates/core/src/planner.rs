//! MPPI over whole plans: a warm-started diagonal Gaussian, mixed with
//! policy proposals, reweighted by exponentiated elite returns.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::agent::ModelBundle;
use crate::error::{Error, Result};
use crate::plan::Plan;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::value::QMode;

pub const THREADS_ENV: &str = "MPAIL2_THREADS";

/// Plans scored per task; fixed so results do not depend on thread count.
pub const SCORE_CHUNK: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlannerConfig {
    pub num_samples: usize,
    pub policy_fraction: f64,
    pub num_elites: usize,
    pub horizon: usize,
    pub iterations: usize,
    pub temperature: f64,
    pub std_min: f64,
    pub std_max: f64,
    pub gamma: f64,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        Self {
            num_samples: 512,
            policy_fraction: 0.05,
            num_elites: 64,
            horizon: 7,
            iterations: 5,
            temperature: 2.0,
            std_min: 0.05,
            std_max: 2.0,
            gamma: 0.99,
        }
    }
}

impl PlannerConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.num_samples == 0 || self.horizon == 0 || self.iterations == 0 {
            return fail("planner num_samples, horizon and iterations must be >= 1".into());
        }
        if self.num_elites == 0 || self.num_elites > self.num_samples {
            return fail(format!(
                "num_elites must be in 1..={}, got {}",
                self.num_samples, self.num_elites
            ));
        }
        if !(0.0..=1.0).contains(&self.policy_fraction) {
            return fail(format!(
                "policy_fraction must be in [0, 1], got {}",
                self.policy_fraction
            ));
        }
        if !(self.std_min > 0.0 && self.std_min < self.std_max) {
            return fail(format!(
                "std range must satisfy 0 < std_min < std_max, got ({}, {})",
                self.std_min, self.std_max
            ));
        }
        if !(self.temperature > 0.0) || !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return fail("temperature must be > 0 and gamma in (0, 1]".into());
        }
        Ok(())
    }

    /// Policy proposals per iteration, `round(policy_fraction * N)`.
    pub fn num_policy_samples(&self) -> usize {
        (self.policy_fraction * self.num_samples as f64).round() as usize
    }
}

/// Diagonal Gaussian over plans.
#[derive(Clone, Debug, PartialEq)]
pub struct PlanDistribution<T> {
    pub mean: Plan<T>,
    pub std: Plan<T>,
}

impl<T: Scalar> PlanDistribution<T> {
    pub fn std_in_range(&self, cfg: &PlannerConfig) -> bool {
        self.std
            .as_flat()
            .iter()
            .all(|s| (cfg.std_min..=cfg.std_max).contains(&s.to_f64_lossy()))
    }
}

/// Models the planner needs, batched over rows.
pub trait PlanningModel<T: Scalar>: Sync {
    fn action_dim(&self) -> usize;
    fn encode(&self, obs: &[T]) -> Result<Tensor<T>>;
    fn next_latent(&self, z: &Tensor<T>, a: &Tensor<T>) -> Result<Tensor<T>>;
    fn reward(&self, z: &Tensor<T>, z_next: &Tensor<T>) -> Result<Tensor<T>>;
    /// Ensemble-mean value at the terminal latent.
    fn terminal_value(&self, z: &Tensor<T>, a: &Tensor<T>) -> Result<Tensor<T>>;
    /// `n` plans sampled from the policy at `z0`, flattened one per row.
    fn policy_plans(
        &self,
        z0: &Tensor<T>,
        n: usize,
        rng: &mut dyn rand::RngCore,
    ) -> Result<Tensor<T>>;
}

impl<T: Scalar> PlanningModel<T> for ModelBundle<T> {
    fn action_dim(&self) -> usize {
        self.config.action_dim
    }

    fn encode(&self, obs: &[T]) -> Result<Tensor<T>> {
        Ok(self.world.encode(obs)?.to_row())
    }

    fn next_latent(&self, z: &Tensor<T>, a: &Tensor<T>) -> Result<Tensor<T>> {
        self.world.predict_next_batch(z, a)
    }

    fn reward(&self, z: &Tensor<T>, z_next: &Tensor<T>) -> Result<Tensor<T>> {
        self.reward.reward_batch(z, z_next)
    }

    fn terminal_value(&self, z: &Tensor<T>, a: &Tensor<T>) -> Result<Tensor<T>> {
        self.value
            .mean_q(&Tensor::concat_cols(&[z, a]), QMode::Online)
    }

    fn policy_plans(
        &self,
        z0: &Tensor<T>,
        n: usize,
        rng: &mut dyn rand::RngCore,
    ) -> Result<Tensor<T>> {
        if self.policy.horizon() == 0 {
            return Err(Error::Config("policy horizon is zero".into()));
        }
        Ok(self.policy.sample_batch(&z0.repeat_row(n), rng)?.actions)
    }
}

/// One scored candidate, for offline inspection.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceRecord {
    pub iteration: usize,
    pub plan_index: usize,
    pub ret: f64,
    pub elite: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct PlanStats {
    pub policy_calls: usize,
    pub discarded: usize,
    /// Iterations in which no candidate had a finite return.
    pub degenerate_iterations: usize,
}

#[derive(Clone, Debug)]
pub struct PlanOutcome<T> {
    pub plan: Plan<T>,
    pub distribution: PlanDistribution<T>,
    pub stats: PlanStats,
    pub trace: Vec<TraceRecord>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FinalPlan {
    /// Draw from the optimised distribution.
    Sample,
    /// Use the optimised mean.
    Mean,
}

/// Result of reweighting one iteration's candidates.
#[derive(Clone, Debug, PartialEq)]
pub struct EliteUpdate<T> {
    pub distribution: PlanDistribution<T>,
    pub elites: Vec<usize>,
    pub weights: Vec<f64>,
}

/// Shifts the previous plan one step earlier, zeroes the last step and
/// resets the spread to `std_max`.
pub fn warm_start<T: Scalar>(
    prev: Option<&Plan<T>>,
    action_dim: usize,
    cfg: &PlannerConfig,
) -> Result<PlanDistribution<T>> {
    let h = cfg.horizon;
    let mut mean = Plan::zeros(h, action_dim);
    if let Some(p) = prev {
        if p.horizon() != h || p.action_dim() != action_dim {
            return Err(Error::Shape(format!(
                "previous plan is {}x{}, planner expects {h}x{action_dim}",
                p.horizon(),
                p.action_dim()
            )));
        }
        for i in 0..h.saturating_sub(1) {
            mean.step_mut(i).copy_from_slice(p.step(i + 1));
        }
    }
    let std = Plan::from_flat(h, action_dim, vec![T::lit(cfg.std_max); h * action_dim])?;
    Ok(PlanDistribution { mean, std })
}

/// `sum_t gamma^t r(z_t, z_{t+1}) + gamma^H V(z_H, a_{H-1})` for every
/// flattened plan row, with `z0` a single latent row.
pub fn score_plans<T: Scalar, M: PlanningModel<T> + ?Sized>(
    model: &M,
    z0: &Tensor<T>,
    plans: &Tensor<T>,
    horizon: usize,
    gamma: f64,
) -> Result<Vec<T>> {
    let ad = model.action_dim();
    if plans.cols() != horizon * ad {
        return Err(Error::dim("scored plans", horizon * ad, plans.cols()));
    }
    if horizon == 0 {
        return Err(Error::Config("cannot score plans with horizon 0".into()));
    }
    let n = plans.rows();
    let mut z = z0.repeat_row(n);
    let mut ret = Tensor::zeros(n, 1);
    let mut discount = T::one();
    let g = T::lit(gamma);
    for t in 0..horizon {
        let a = plans.slice_cols(t * ad, ad);
        let next = model.next_latent(&z, &a)?;
        let r = model.reward(&z, &next)?;
        ret.add_assign(&r.scale(discount));
        discount = discount * g;
        z = next;
    }
    let last = plans.slice_cols((horizon - 1) * ad, ad);
    let v = model.terminal_value(&z, &last)?;
    ret.add_assign(&v.scale(discount));
    Ok(ret.into_vec())
}

/// Softmax over the top-K finite returns only, with the maximum
/// subtracted, then weighted mean and clipped weighted std of those plans.
/// Returns `None` when no return is finite.
pub fn elite_update<T: Scalar>(
    returns: &[T],
    plans: &Tensor<T>,
    cfg: &PlannerConfig,
    action_dim: usize,
) -> Result<Option<EliteUpdate<T>>> {
    if returns.len() != plans.rows() {
        return Err(Error::Shape(format!(
            "{} returns for {} plans",
            returns.len(),
            plans.rows()
        )));
    }
    let mut finite: Vec<(usize, f64)> = returns
        .iter()
        .enumerate()
        .map(|(i, r)| (i, r.to_f64_lossy()))
        .filter(|(_, r)| r.is_finite())
        .collect();
    if finite.is_empty() {
        return Ok(None);
    }
    finite.sort_by(|a, b| b.1.partial_cmp(&a.1).expect("finite").then(a.0.cmp(&b.0)));
    finite.truncate(cfg.num_elites);
    let best = finite[0].1;
    let raw: Vec<f64> = finite
        .iter()
        .map(|(_, r)| ((r - best) / cfg.temperature).exp())
        .collect();
    let z: f64 = raw.iter().sum();
    let weights: Vec<f64> = raw.iter().map(|w| w / z).collect();
    let width = plans.cols();
    let mut mean = vec![0.0f64; width];
    for ((i, _), w) in finite.iter().zip(&weights) {
        for (m, x) in mean.iter_mut().zip(plans.row(*i)) {
            *m += w * x.to_f64_lossy();
        }
    }
    let mut var = vec![0.0f64; width];
    for ((i, _), w) in finite.iter().zip(&weights) {
        for ((v, x), m) in var.iter_mut().zip(plans.row(*i)).zip(&mean) {
            let d = x.to_f64_lossy() - m;
            *v += w * d * d;
        }
    }
    let h = width / action_dim.max(1);
    let distribution = PlanDistribution {
        mean: Plan::from_flat(h, action_dim, mean.iter().map(|&m| T::lit(m)).collect())?,
        std: Plan::from_flat(
            h,
            action_dim,
            var.iter()
                .map(|&v| T::lit(v.sqrt().clamp(cfg.std_min, cfg.std_max)))
                .collect(),
        )?,
    };
    Ok(Some(EliteUpdate {
        distribution,
        elites: finite.iter().map(|(i, _)| *i).collect(),
        weights,
    }))
}

/// MPPI planner with a private scoring pool.
pub struct Planner {
    cfg: PlannerConfig,
    pool: Option<rayon::ThreadPool>,
    threads: usize,
}

impl std::fmt::Debug for Planner {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Planner")
            .field("cfg", &self.cfg)
            .field("threads", &self.threads)
            .finish()
    }
}

/// Thread count from an explicit override, else `MPAIL2_THREADS`, else the
/// machine's parallelism.
pub fn resolve_threads(explicit: Option<usize>) -> Result<usize> {
    if let Some(n) = explicit {
        return if n == 0 {
            Err(Error::Config("thread count must be >= 1".into()))
        } else {
            Ok(n)
        };
    }
    match std::env::var(THREADS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(Error::Config(format!(
                "{THREADS_ENV} must be a positive integer, got {v:?}"
            ))),
        },
        Err(_) => Ok(std::thread::available_parallelism()
            .map(|n| n.get())
            .unwrap_or(1)),
    }
}

impl Planner {
    pub fn new(cfg: PlannerConfig, threads: Option<usize>) -> Result<Self> {
        cfg.validate()?;
        let threads = resolve_threads(threads)?;
        let pool = if threads > 1 {
            Some(
                rayon::ThreadPoolBuilder::new()
                    .num_threads(threads)
                    .build()
                    .map_err(|e| Error::Config(format!("building planner thread pool: {e}")))?,
            )
        } else {
            None
        };
        Ok(Self { cfg, pool, threads })
    }

    pub fn config(&self) -> &PlannerConfig {
        &self.cfg
    }

    pub fn threads(&self) -> usize {
        self.threads
    }

    /// Scores in fixed-size chunks, in parallel when a pool exists.
    pub fn score<T: Scalar, M: PlanningModel<T> + ?Sized>(
        &self,
        model: &M,
        z0: &Tensor<T>,
        plans: &Tensor<T>,
    ) -> Result<Vec<T>> {
        let n = plans.rows();
        let starts: Vec<usize> = (0..n).step_by(SCORE_CHUNK).collect();
        let run = |&s: &usize| {
            let len = SCORE_CHUNK.min(n - s);
            score_plans(
                model,
                z0,
                &plans.slice_rows(s, len),
                self.cfg.horizon,
                self.cfg.gamma,
            )
        };
        let chunks: Vec<Result<Vec<T>>> = match &self.pool {
            Some(pool) => pool.install(|| starts.par_iter().map(run).collect()),
            None => starts.iter().map(run).collect(),
        };
        let mut out = Vec::with_capacity(n);
        for c in chunks {
            out.extend(c?);
        }
        Ok(out)
    }

    /// Full MPPI from a single encoded latent `z0`.
    pub fn plan_latent<T: Scalar, M: PlanningModel<T> + ?Sized, R: Rng>(
        &self,
        model: &M,
        z0: &Tensor<T>,
        prev: Option<&Plan<T>>,
        final_plan: FinalPlan,
        record_trace: bool,
        rng: &mut R,
    ) -> Result<PlanOutcome<T>> {
        let cfg = &self.cfg;
        let ad = model.action_dim();
        let h = cfg.horizon;
        let width = h * ad;
        let m = cfg.num_policy_samples();
        let n_gauss = cfg.num_samples - m;
        let mut dist = warm_start(prev, ad, cfg)?;
        let mut stats = PlanStats::default();
        let mut trace = Vec::new();
        for iteration in 0..cfg.iterations {
            let mut plans = Tensor::zeros(cfg.num_samples, width);
            for r in 0..n_gauss {
                for (k, x) in plans.row_mut(r).iter_mut().enumerate() {
                    let e: f64 = rng.sample(StandardNormal);
                    let v = dist.mean.as_flat()[k] + dist.std.as_flat()[k] * T::from_f64_lossy(e);
                    *x = v.max(-T::one()).min(T::one());
                }
            }
            if m > 0 {
                let pp = model.policy_plans(z0, m, rng)?;
                stats.policy_calls += 1;
                if pp.shape() != (m, width) {
                    return Err(Error::Shape(format!(
                        "policy proposals {:?}, expected ({m}, {width})",
                        pp.shape()
                    )));
                }
                for r in 0..m {
                    plans.row_mut(n_gauss + r).copy_from_slice(pp.row(r));
                }
            }
            let returns = self.score(model, z0, &plans)?;
            let bad = returns.iter().filter(|r| !r.is_finite()).count();
            if bad > 0 {
                stats.discarded += bad;
                log::warn!("planner discarded {bad} plans with non-finite returns");
            }
            let update = elite_update(&returns, &plans, cfg, ad)?;
            if record_trace {
                let elites = update
                    .as_ref()
                    .map(|u| u.elites.clone())
                    .unwrap_or_default();
                for (i, r) in returns.iter().enumerate() {
                    trace.push(TraceRecord {
                        iteration,
                        plan_index: i,
                        ret: r.to_f64_lossy(),
                        elite: elites.contains(&i),
                    });
                }
            }
            match update {
                Some(u) => dist = u.distribution,
                None => stats.degenerate_iterations += 1,
            }
        }
        let mut plan = match final_plan {
            FinalPlan::Mean => dist.mean.clone(),
            FinalPlan::Sample => {
                let flat = dist
                    .mean
                    .as_flat()
                    .iter()
                    .zip(dist.std.as_flat())
                    .map(|(&mu, &s)| mu + s * T::from_f64_lossy(rng.sample(StandardNormal)))
                    .collect();
                Plan::from_flat(h, ad, flat)?
            }
        };
        plan.clamp_to_bounds();
        Ok(PlanOutcome {
            plan,
            distribution: dist,
            stats,
            trace,
        })
    }

    /// Encodes `obs` and plans from it.
    pub fn plan<T: Scalar, M: PlanningModel<T> + ?Sized, R: Rng>(
        &self,
        model: &M,
        obs: &[T],
        prev: Option<&Plan<T>>,
        final_plan: FinalPlan,
        rng: &mut R,
    ) -> Result<PlanOutcome<T>> {
        let z0 = model.encode(obs)?;
        self.plan_latent(model, &z0, prev, final_plan, false, rng)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_counts() {
        let cfg = PlannerConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.num_policy_samples(), 26);
    }

    #[test]
    fn invalid_configs_rejected() {
        let bad = [
            PlannerConfig {
                num_elites: 600,
                ..Default::default()
            },
            PlannerConfig {
                policy_fraction: 1.5,
                ..Default::default()
            },
            PlannerConfig {
                std_min: 2.0,
                std_max: 1.0,
                ..Default::default()
            },
            PlannerConfig {
                iterations: 0,
                ..Default::default()
            },
        ];
        for cfg in bad {
            assert!(cfg.validate().is_err(), "{cfg:?}");
        }
    }

    #[test]
    fn warm_start_shifts_and_resets() {
        let cfg = PlannerConfig {
            horizon: 3,
            ..Default::default()
        };
        let prev = Plan::from_steps(&[vec![1.0f32, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap();
        let d = warm_start(Some(&prev), 2, &cfg).unwrap();
        assert_eq!(d.mean.as_flat(), &[3.0, 4.0, 5.0, 6.0, 0.0, 0.0]);
        assert!(d.std.as_flat().iter().all(|&s| s == 2.0));
        let start = warm_start::<f32>(None, 2, &cfg).unwrap();
        assert!(start.mean.as_flat().iter().all(|&m| m == 0.0));
        let one = PlannerConfig {
            horizon: 1,
            ..Default::default()
        };
        let d1 = warm_start(Some(&Plan::from_steps(&[vec![0.7f32]]).unwrap()), 1, &one).unwrap();
        assert_eq!(d1.mean.as_flat(), &[0.0]);
    }

    #[test]
    fn single_finite_elite_becomes_mean() {
        let cfg = PlannerConfig {
            horizon: 1,
            num_elites: 2,
            ..Default::default()
        };
        let plans = Tensor::from_rows(&[vec![0.3f64], vec![-0.5], vec![0.9]]);
        let u = elite_update(&[f64::NAN, 1.0, f64::NEG_INFINITY], &plans, &cfg, 1)
            .unwrap()
            .unwrap();
        assert_eq!(u.elites, vec![1]);
        assert_eq!(u.distribution.mean.as_flat(), &[-0.5]);
        assert_eq!(u.distribution.std.as_flat(), &[0.05]);
        assert!(elite_update(&[f64::NAN; 3], &plans, &cfg, 1)
            .unwrap()
            .is_none());
    }

    #[test]
    fn equal_elites_average() {
        let cfg = PlannerConfig {
            horizon: 1,
            num_elites: 2,
            ..Default::default()
        };
        let plans = Tensor::from_rows(&[vec![0.2f64], vec![0.6], vec![-1.0]]);
        let u = elite_update(&[3.0, 3.0, 0.0], &plans, &cfg, 1)
            .unwrap()
            .unwrap();
        assert_eq!(u.weights, vec![0.5, 0.5]);
        assert!((u.distribution.mean.as_flat()[0] - 0.4).abs() < 1e-15);
    }
}
