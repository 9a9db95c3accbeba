use mpail2::envs::{expert_rollout, make_env, Environment, Push2d, PushConfig, PushState};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn ks_uniform_p_value(samples: &mut [f64], lo: f64, hi: f64) -> f64 {
    samples.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = samples.len() as f64;
    let mut d: f64 = 0.0;
    for (i, &x) in samples.iter().enumerate() {
        let f = (x - lo) / (hi - lo);
        d = d.max((i as f64 + 1.0) / n - f).max(f - i as f64 / n);
    }
    let lambda = (n.sqrt() + 0.12 + 0.11 / n.sqrt()) * d;
    let mut p = 0.0;
    for k in 1..100 {
        let k = k as f64;
        p += 2.0 * (-1f64).powf(k - 1.0) * (-2.0 * k * k * lambda * lambda).exp();
    }
    p.clamp(0.0, 1.0)
}

#[test]
fn reset_is_seeded_and_uniform() {
    let mut env = make_env("push2d").unwrap();
    let a = env.reset(&mut ChaCha8Rng::seed_from_u64(7));
    let b = env.reset(&mut ChaCha8Rng::seed_from_u64(7));
    assert_eq!(a, b);
    assert_eq!(a.len(), 4);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for _ in 0..10_000 {
        let o = env.reset(&mut rng);
        assert_eq!(&o[..2], &[0.0, 0.35]);
        xs.push(o[2]);
        ys.push(o[3]);
    }
    let px = ks_uniform_p_value(&mut xs, -0.1, 0.1);
    let py = ks_uniform_p_value(&mut ys, -0.1, 0.1);
    assert!(px > 0.01 && py > 0.01, "KS p-values {px} {py}");
}

#[test]
fn aligned_push_moves_block_by_overlap() {
    let cfg = PushConfig::default();
    let block = [0.02, -0.01];
    let s = PushState {
        ee: [block[0], block[1] + 0.06],
        block,
        t: 0,
    };
    let n = Push2d::transition(&cfg, &s, &[0.0, -1.0]);
    // ee travels v_max; contact starts after the 0.01 gap closes, from then
    // the block stays exactly r_c ahead of the ee
    let ee_end = block[1] + 0.06 - cfg.v_max;
    let expected_block_y = ee_end - cfg.contact_radius;
    assert!((n.ee[1] - ee_end).abs() < 1e-12);
    assert!((n.block[1] - expected_block_y).abs() < 1e-12);
    assert!((n.block[1] - block[1] + 0.09).abs() < 1e-12);
    assert!((n.block[0] - block[0]).abs() < 1e-12);
}

#[test]
fn block_only_moves_on_contact() {
    let cfg = PushConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    use rand::Rng;
    for _ in 0..2000 {
        let s = PushState {
            ee: [rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5)],
            block: [rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5)],
            t: 0,
        };
        let a = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
        let n = Push2d::transition(&cfg, &s, &a);
        // closest approach of the ee segment to the block
        let (px, py) = (s.ee[0], s.ee[1]);
        let (qx, qy) = (n.ee[0], n.ee[1]);
        let (dx, dy) = (qx - px, qy - py);
        let len2 = dx * dx + dy * dy;
        let t = if len2 > 0.0 {
            (((s.block[0] - px) * dx + (s.block[1] - py) * dy) / len2).clamp(0.0, 1.0)
        } else {
            0.0
        };
        let cx = px + t * dx - s.block[0];
        let cy = py + t * dy - s.block[1];
        if (cx * cx + cy * cy).sqrt() > cfg.contact_radius + 1e-9 {
            assert_eq!(n.block, s.block);
        }
        for v in n.ee.iter().chain(&n.block) {
            assert!(v.abs() <= 0.5);
        }
    }
}

#[test]
fn identical_episodes_are_bitwise_identical() {
    let run = || {
        let mut env = make_env("push2d").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut obs = vec![env.reset(&mut rng)];
        for i in 0..60 {
            let a = [((i * 7) % 5) as f64 / 2.0 - 1.0, -0.8];
            let s = env.step(&a);
            obs.push(s.observation);
            if s.done {
                break;
            }
        }
        obs
    };
    assert_eq!(run(), run());
}

#[test]
fn success_is_any_strict_crossing() {
    let env = Push2d::new(PushConfig::default()).unwrap();
    let o = |by: f64| vec![0.0, 0.3, 0.0, by];
    assert!(env.trajectory_success(&[o(0.0), o(-0.31), o(-0.2)]));
    assert!(!env.trajectory_success(&[o(0.0), o(-0.3)]));
    assert!(!env.trajectory_success(&[o(0.1), o(0.0)]));
}

fn expert_rate(name: &str, episodes: usize) -> f64 {
    let mut env = make_env(name).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut wins = 0;
    for _ in 0..episodes {
        let (traj, ok) = expert_rollout(env.as_mut(), &mut rng);
        assert_eq!(ok, env.trajectory_success(&traj));
        assert!(traj.len() <= env.max_steps() + 1);
        wins += ok as usize;
    }
    wins as f64 / episodes as f64
}

#[test]
fn expert_succeeds_on_push() {
    let rate = expert_rate("push2d", 1000);
    assert!(rate >= 0.95, "push2d expert success {rate}");
}

#[test]
fn expert_succeeds_on_transfer_push() {
    let rate = expert_rate("push2d-transfer", 1000);
    assert!(rate >= 0.95, "push2d-transfer expert success {rate}");
}

#[test]
fn dense_reward_rises_along_expert_push() {
    let mut env = make_env("push2d").unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..20 {
        let (traj, ok) = expert_rollout(env.as_mut(), &mut rng);
        assert!(ok);
        let r: Vec<f64> = traj.iter().map(|o| env.dense_reward(o)).collect();
        for w in r.windows(2) {
            assert!(w[1] >= w[0] - 1e-12, "reward fell: {r:?}");
        }
    }
}

#[test]
fn unknown_env_is_rejected() {
    assert!(make_env("cartpole").is_err());
    assert_eq!(make_env("liftcarry1d").unwrap().obs_dim(), 5);
}
