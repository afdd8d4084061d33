use proptest::prelude::*;
use read_lab::generator::{Generator, GeneratorConfig, Trajectory};
use read_lab::nn::{AdamW, AdamWConfig};
use read_lab::reward::{IrlBatch, RewardConfig, RewardMode, RewardNet};
use read_lab::rng::{from_seed, stream};
use rand::Rng as _;

fn generator(seed: u64) -> Generator {
    Generator::new(
        GeneratorConfig {
            vocab_size: 10,
            embed_dim: 4,
            state_dim: 6,
            ff_width: 6,
            ff_layers: 1,
            dropout: 0.0,
            bos: 0,
            eos: Some(1),
        },
        &mut from_seed(seed),
    )
}

fn reward_net(seed: u64, dropout: f64) -> RewardNet {
    RewardNet::new(
        RewardConfig {
            state_dim: 6,
            vocab_size: 10,
            embed_dim: 4,
            hidden: 8,
            layers: 2,
            dropout,
        },
        &mut from_seed(seed),
    )
}

/// Sentences over disjoint token pools, EOS-terminated.
fn corpus(pool: &[usize], n: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut r = stream(seed, "corpus", pool[0] as u64);
    (0..n)
        .map(|_| {
            let len = r.random_range(2..5);
            let mut s: Vec<usize> = (0..len).map(|_| pool[r.random_range(0..pool.len())]).collect();
            s.push(1);
            s
        })
        .collect()
}

#[test]
fn irl_separates_real_from_generated() {
    let mut wins = 0;
    for seed in 0..5u64 {
        let g = generator(seed);
        let force = |c: Vec<Vec<usize>>| -> Vec<Trajectory> { c.iter().map(|s| g.teacher_force(s).unwrap()).collect() };
        let real = force(corpus(&[2, 3, 4, 5], 16, seed));
        let generated = force(corpus(&[6, 7, 8, 9], 16, seed));
        let log_q: Vec<f64> = generated.iter().map(Trajectory::log_prob).collect();
        let p_real = vec![0.2; real.len()];
        let p_gen = vec![0.7; generated.len()];
        let batch = IrlBatch {
            real: &real,
            generated: &generated,
            gen_log_probs: &log_q,
            p_fake_real: &p_real,
            p_fake_gen: &p_gen,
        };
        let mut r = reward_net(100 + seed, 0.2);
        let mut opt = AdamW::new(AdamWConfig::new(0.004, 0.01));
        for it in 0..200 {
            r.irl_update(&mut opt, &batch, RewardMode::Read, Some(it), 5.0).unwrap();
        }
        let mean = |ts: &[Trajectory], p: f64| {
            ts.iter().map(|t| r.trajectory_reward(t, p, RewardMode::Read).unwrap().total).sum::<f64>() / ts.len() as f64
        };
        if mean(&real, 0.2) - mean(&generated, 0.7) > 0.0 {
            wins += 1;
        }
    }
    assert!(wins >= 4, "separated in {wins}/5 seeds");
}

#[test]
fn irl_objective_increases() {
    let g = generator(1);
    let real: Vec<Trajectory> = corpus(&[2, 3], 8, 1).iter().map(|s| g.teacher_force(s).unwrap()).collect();
    let generated: Vec<Trajectory> = corpus(&[8, 9], 8, 1).iter().map(|s| g.teacher_force(s).unwrap()).collect();
    let log_q: Vec<f64> = generated.iter().map(Trajectory::log_prob).collect();
    let p = vec![0.5; 8];
    let batch = IrlBatch {
        real: &real,
        generated: &generated,
        gen_log_probs: &log_q,
        p_fake_real: &p,
        p_fake_gen: &p,
    };
    let mut r = reward_net(3, 0.0);
    let mut opt = AdamW::new(AdamWConfig::new(0.004, 0.0));
    let before = r.irl_objective(&batch, RewardMode::DRead).unwrap();
    for _ in 0..50 {
        r.irl_update(&mut opt, &batch, RewardMode::DRead, None, 5.0).unwrap();
    }
    assert!(r.irl_objective(&batch, RewardMode::DRead).unwrap() > before);
}

#[test]
fn three_step_reward_matches_external_sum() {
    let g = generator(5);
    let r = reward_net(6, 0.2);
    let traj = g.teacher_force(&[4, 7, 2]).unwrap();
    assert!(!traj.finished);
    let p = 0.37;
    let total = r.trajectory_reward(&traj, p, RewardMode::Read).unwrap().total;

    // Independent per-step evaluation: concatenate [state, action embedding,
    // p] and run the MLP layer by layer.
    let mut external = 0.0;
    for t in 0..3 {
        let mut x = traj.states[t].clone();
        x.extend_from_slice(r.action_embedding.row(traj.tokens[t]));
        x.push(p);
        let n = r.mlp.layers.len();
        for (i, layer) in r.mlp.layers.iter().enumerate() {
            let mut y = layer.bias.clone();
            for (o, yo) in y.iter_mut().enumerate() {
                for (j, xj) in x.iter().enumerate() {
                    *yo += layer.weight[o * layer.n_in + j] * xj;
                }
            }
            if i + 1 < n {
                y.iter_mut().for_each(|v| *v = r.mlp.hidden.apply(*v));
            } else {
                y.iter_mut().for_each(|v| *v = r.mlp.output.apply(*v));
            }
            x = y;
        }
        external += x[0];
    }
    assert!((total - external).abs() < 1e-9, "{total} vs {external}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn dread_is_invariant_to_fake_probability(seed in 0u64..1000, p in 0.0f64..=1.0, q in 0.0f64..=1.0) {
        let g = generator(seed);
        let r = reward_net(seed + 1, 0.2);
        let traj = g.sample_trajectories(1, 6, seed, 1.0).unwrap().remove(0);
        let a = r.trajectory_reward(&traj, p, RewardMode::DRead).unwrap();
        let b = r.trajectory_reward(&traj, q, RewardMode::DRead).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn reward_total_is_sum_of_active_steps(seed in 0u64..1000, p in 0.0f64..=1.0) {
        let g = generator(seed);
        let r = reward_net(seed + 1, 0.0);
        let traj = g.sample_trajectories(1, 6, seed, 1.0).unwrap().remove(0);
        let tr = r.trajectory_reward(&traj, p, RewardMode::Read).unwrap();
        prop_assert_eq!(tr.per_step.len(), traj.len());
        let sum: f64 = tr.per_step.iter().sum();
        prop_assert!((sum - tr.total).abs() < 1e-9);
        for t in traj.active_len()..traj.len() {
            prop_assert_eq!(tr.per_step[t], 0.0);
        }
    }

    #[test]
    fn read_responds_to_fake_probability(seed in 0u64..1000) {
        let g = generator(seed);
        let r = reward_net(seed + 1, 0.0);
        let traj = g.teacher_force(&[3, 4, 5]).unwrap();
        let a = r.trajectory_reward(&traj, 0.0, RewardMode::Read).unwrap().total;
        let b = r.trajectory_reward(&traj, 1.0, RewardMode::Read).unwrap().total;
        prop_assert!(a != b);
    }
}
