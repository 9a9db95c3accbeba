use std::f64::consts::PI;

use mpail2::config::TrainConfig;
use mpail2::envs::{make_env, Push2d, PushConfig, PushState};
use mpail2::experience::{DemoSet, ReplayBuffer, Transition};
use mpail2::plan::Plan;
use mpail2::planner::{elite_update, warm_start, PlannerConfig};
use mpail2::policy::PolicyModel;
use mpail2::value::{lambda_return, ReturnParams};
use mpail2::Tensor;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn planner_cfg(n: usize, k: usize, temperature: f64) -> PlannerConfig {
    PlannerConfig {
        num_samples: n,
        num_elites: k,
        horizon: 2,
        temperature,
        ..PlannerConfig::default()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn elite_weights_are_a_distribution(
        returns in prop::collection::vec(-50.0f64..50.0, 4..40),
        k_frac in 0.05f64..1.0,
        temperature in 0.1f64..10.0,
        seed in any::<u64>(),
    ) {
        let n = returns.len();
        let k = ((k_frac * n as f64).ceil() as usize).clamp(1, n);
        let cfg = planner_cfg(n, k, temperature);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let plans = Tensor::<f64>::from_fn(n, 4, |_, _| rand::Rng::random_range(&mut rng, -1.0..1.0));
        let up = elite_update(&returns, &plans, &cfg, 2).unwrap().unwrap();
        prop_assert_eq!(up.elites.len(), k);
        prop_assert!((up.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(up.weights.iter().all(|w| *w >= 0.0));
        prop_assert!(up.distribution.std_in_range(&cfg));
        // every elite beats every non-elite
        let worst_elite = up.elites.iter().map(|&i| returns[i]).fold(f64::INFINITY, f64::min);
        for (i, r) in returns.iter().enumerate() {
            if !up.elites.contains(&i) {
                prop_assert!(*r <= worst_elite);
            }
        }
        // mean is a convex combination of elite plans
        for (c, m) in up.distribution.mean.as_flat().iter().enumerate() {
            let lo = up.elites.iter().map(|&i| plans.get(i, c)).fold(f64::INFINITY, f64::min);
            let hi = up.elites.iter().map(|&i| plans.get(i, c)).fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(*m >= lo - 1e-12 && *m <= hi + 1e-12);
        }
    }

    #[test]
    fn elite_weights_ignore_integer_shifts(
        returns in prop::collection::vec(-1000i32..1000, 2..30),
        shift in -1000i32..1000,
    ) {
        let n = returns.len();
        let cfg = planner_cfg(n, n.min(5), 2.0);
        let plans = Tensor::<f64>::from_fn(n, 4, |r, c| ((r * 7 + c * 3) % 11) as f64 / 11.0 - 0.5);
        let base: Vec<f64> = returns.iter().map(|&r| r as f64).collect();
        let moved: Vec<f64> = returns.iter().map(|&r| (r + shift) as f64).collect();
        let a = elite_update(&base, &plans, &cfg, 2).unwrap().unwrap();
        let b = elite_update(&moved, &plans, &cfg, 2).unwrap().unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn warm_start_shifts_and_resets_spread(
        flat in prop::collection::vec(-1.0f64..1.0, 14),
    ) {
        let cfg = PlannerConfig::default();
        let prev = Plan::from_flat(7, 2, flat.clone()).unwrap();
        let d = warm_start(Some(&prev), 2, &cfg).unwrap();
        prop_assert_eq!(&d.mean.as_flat()[..12], &flat[2..]);
        prop_assert_eq!(&d.mean.as_flat()[12..], &[0.0, 0.0]);
        prop_assert!(d.std.as_flat().iter().all(|s| *s == cfg.std_max));
    }

    #[test]
    fn clamped_plans_are_in_bounds(flat in prop::collection::vec(-5.0f64..5.0, 6)) {
        let mut p = Plan::from_flat(3, 2, flat).unwrap();
        p.clamp_to_bounds();
        prop_assert!(p.in_bounds());
    }

    #[test]
    fn policy_samples_are_bounded_with_squashed_density(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pol = PolicyModel::<f64>::new(4, 2, 3, &[8], &mut rng).unwrap();
        let z = Tensor::<f64>::from_fn(5, 4, |r, c| ((r + 2 * c) as f64 * 0.37).sin());
        let eps = pol.draw_noise(5, &mut rng);
        let s = pol.sample_with_noise(&z, &eps).unwrap();
        prop_assert!(s.actions.data().iter().all(|a| a.is_finite() && a.abs() <= 1.0));
        prop_assert!(s.log_probs.data().iter().all(|l| l.is_finite()));
        let (mu, log_std) = pol.distribution(&z).unwrap();
        for r in 0..5 {
            for t in 0..3 {
                let mut lp = 0.0;
                for d in 0..2 {
                    let k = t * 2 + d;
                    let sigma = log_std.get(r, k).exp();
                    let u = mu.get(r, k) + sigma * eps.get(r, k);
                    let gauss = -0.5 * ((u - mu.get(r, k)) / sigma).powi(2) - sigma.ln() - 0.5 * (2.0 * PI).ln();
                    lp += gauss - (1.0 - u.tanh().powi(2)).ln();
                }
                let got = s.log_probs.get(r, t);
                prop_assert!((got - lp).abs() <= 1e-8 * lp.abs().max(1.0), "{} vs {}", got, lp);
            }
        }
    }

    #[test]
    fn lambda_return_is_affine_in_rewards(
        r in prop::collection::vec(-5.0f64..5.0, 4),
        q in prop::collection::vec(-5.0f64..5.0, 5),
        c in -3.0f64..3.0,
    ) {
        let p = ReturnParams { lambda: 0.95, gamma: 0.99, alpha: 0.0 };
        let lp = vec![0.0; 4];
        let base = lambda_return(&r, &q, &lp, &p);
        let shifted: Vec<f64> = r.iter().map(|x| x + c).collect();
        let coeff: f64 = (0..4).map(|k| (0.05f64 * 0.99).powi(k)).sum::<f64>() * 0.05;
        let moved = lambda_return(&shifted, &q, &lp, &p);
        prop_assert!((moved - base - c * coeff).abs() < 1e-9);
    }

    #[test]
    fn replay_windows_are_contiguous(
        lens in prop::collection::vec(1usize..12, 1..6),
        horizon in 1usize..6,
        seed in any::<u64>(),
    ) {
        let mut buf = ReplayBuffer::<f64>::new();
        let mut counter = 0.0;
        for len in &lens {
            let ep: Vec<Transition<f64>> = (0..*len)
                .map(|i| {
                    let o = counter + i as f64;
                    Transition { obs: vec![o], action: vec![o * 10.0], next_obs: vec![o + 1.0] }
                })
                .collect();
            counter += 1000.0;
            buf.push_episode(&ep).unwrap();
        }
        let expected: usize = lens.iter().map(|l| (l + 1).saturating_sub(horizon)).sum();
        prop_assert_eq!(buf.num_windows(horizon), expected);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        match buf.sample_trajectory_batch(horizon, 16, &mut rng) {
            Ok(seqs) => {
                prop_assert!(expected > 0);
                prop_assert_eq!(seqs.len(), 16);
                for s in seqs {
                    prop_assert_eq!(s.len(), horizon);
                    for i in 0..horizon {
                        prop_assert_eq!(s.observations[i + 1][0], s.observations[i][0] + 1.0);
                        prop_assert_eq!(s.actions[i][0], s.observations[i][0] * 10.0);
                    }
                }
            }
            Err(_) => prop_assert_eq!(expected, 0),
        }
    }

    #[test]
    fn demo_pairs_enumerate_consecutive_observations(
        lens in prop::collection::vec(2usize..9, 1..5),
        seed in any::<u64>(),
    ) {
        let mut next = 0.0;
        let episodes: Vec<Vec<Vec<f64>>> = lens
            .iter()
            .map(|l| {
                (0..*l)
                    .map(|_| {
                        next += 1.0;
                        vec![next, -next]
                    })
                    .collect()
            })
            .collect();
        let demos = DemoSet::new(2, episodes).unwrap();
        let expected: usize = lens.iter().map(|l| l - 1).sum();
        prop_assert_eq!(demos.num_pairs(), expected);
        prop_assert_eq!(demos.pairs().count(), expected);
        for (a, b) in demos.pairs() {
            prop_assert_eq!(b[0], a[0] + 1.0);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (a, b) in demos.sample_demo_pairs(32, &mut rng).unwrap() {
            prop_assert_eq!(b[0], a[0] + 1.0);
        }
        let round = DemoSet::<f64>::parse(&demos.to_text(), std::path::Path::new("mem")).unwrap();
        prop_assert_eq!(round.episodes(), demos.episodes());
    }

    #[test]
    fn push_stays_in_workspace(
        actions in prop::collection::vec((-3.0f64..3.0, -3.0f64..3.0), 1..80),
        seed in any::<u64>(),
    ) {
        let cfg = PushConfig::default();
        let mut env = make_env("push2d").unwrap();
        env.reset(&mut ChaCha8Rng::seed_from_u64(seed));
        let mut steps = 0;
        for (ax, ay) in actions {
            let s = env.step(&[ax, ay]);
            steps += 1;
            prop_assert!(s.observation.iter().all(|x| x.abs() <= cfg.workspace));
            prop_assert!(steps <= cfg.max_steps);
            if s.done {
                break;
            }
        }
    }

    #[test]
    fn block_keeps_contact_distance(
        ee in (-0.5f64..0.5, -0.5f64..0.5),
        block in (-0.4f64..0.4, -0.4f64..0.4),
        a in (-1.0f64..1.0, -1.0f64..1.0),
    ) {
        let cfg = PushConfig::default();
        let s = PushState { ee: [ee.0, ee.1], block: [block.0, block.1], t: 0 };
        let n = Push2d::transition(&cfg, &s, &[a.0, a.1]);
        let d = ((n.ee[0] - n.block[0]).powi(2) + (n.ee[1] - n.block[1]).powi(2)).sqrt();
        let moved = n.block != s.block;
        // a moved block was last placed at the contact radius, unless the wall clipped it
        let clipped = n.block.iter().any(|x| x.abs() >= cfg.workspace);
        if moved && !clipped {
            prop_assert!((d - cfg.contact_radius).abs() < 1e-9 || d > cfg.contact_radius);
        }
        prop_assert!(n.t == 1);
    }

    #[test]
    fn config_toml_round_trips(
        episodes in 0usize..1000,
        horizon in 1usize..10,
        lr in 1e-6f64..1e-2,
        utd in 0.1f64..4.0,
    ) {
        let cfg = TrainConfig { episodes, horizon, lr, utd, ..TrainConfig::default() };
        let back = TrainConfig::from_toml_str(&cfg.to_toml().unwrap(), std::path::Path::new("mem.toml")).unwrap();
        prop_assert_eq!(back, cfg);
    }

    #[test]
    fn matmul_matches_naive_product(
        m in 1usize..7, k in 1usize..7, n in 1usize..7, seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |r, c| Tensor::<f64>::from_fn(r, c, |_, _| rand::Rng::random_range(&mut rng, -2.0..2.0));
        let a = draw(m, k);
        let b = draw(k, n);
        let c = a.matmul(&b);
        for i in 0..m {
            for j in 0..n {
                let want: f64 = (0..k).map(|t| a.get(i, t) * b.get(t, j)).sum();
                prop_assert!((c.get(i, j) - want).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn window_starts_are_uniform() {
    let mut buf = ReplayBuffer::<f64>::new();
    for (e, len) in [5usize, 9, 3, 12].iter().enumerate() {
        let ep: Vec<Transition<f64>> = (0..*len)
            .map(|i| {
                let o = (e * 100 + i) as f64;
                Transition {
                    obs: vec![o],
                    action: vec![0.0],
                    next_obs: vec![o + 1.0],
                }
            })
            .collect();
        buf.push_episode(&ep).unwrap();
    }
    let h = 3;
    let cells = buf.num_windows(h);
    let draws = 200 * cells;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut counts = std::collections::BTreeMap::<u64, usize>::new();
    for s in buf.sample_trajectory_batch(h, draws, &mut rng).unwrap() {
        *counts.entry(s.observations[0][0] as u64).or_default() += 1;
    }
    assert_eq!(counts.len(), cells);
    let expected = draws as f64 / cells as f64;
    let chi2: f64 = counts
        .values()
        .map(|&c| (c as f64 - expected).powi(2) / expected)
        .sum();
    // 99.9th percentile of chi-square with 20 degrees of freedom
    assert_eq!(cells - 1, 20);
    assert!(chi2 < 45.31, "chi2 {chi2}");
}
