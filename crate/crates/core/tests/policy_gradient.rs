use proptest::prelude::*;
use read_lab::generator::{Baseline, Generator, GeneratorConfig, Trajectory};
use read_lab::nn::{AdamW, AdamWConfig, Parameters};
use read_lab::rng::{from_seed, stream};

fn tiny(vocab_size: usize, eos: Option<usize>, seed: u64) -> Generator {
    Generator::new(
        GeneratorConfig {
            vocab_size,
            embed_dim: 3,
            state_dim: 4,
            ff_width: 4,
            ff_layers: 1,
            dropout: 0.0,
            bos: 0,
            eos,
        },
        &mut from_seed(seed),
    )
}

/// Fixed, parameter-independent per-step reward.
fn step_reward(t: usize, a: usize) -> f64 {
    [[0.3, -1.0, 2.0], [1.5, 0.2, -0.7]][t][a]
}

fn rewards_of(tokens: &[usize]) -> Vec<f64> {
    tokens.iter().enumerate().map(|(t, &a)| step_reward(t, a)).collect()
}

/// Every trajectory of length <= 2 over three tokens, with token 2 as EOS.
fn all_trajectories() -> Vec<Vec<usize>> {
    let mut out = vec![vec![2]];
    for a in 0..2 {
        for b in 0..3 {
            out.push(vec![a, b]);
        }
    }
    out
}

/// `E[return]` by exact enumeration, forward passes only.
fn expected_return(g: &Generator) -> f64 {
    all_trajectories()
        .iter()
        .map(|tau| g.trajectory_log_prob(tau).unwrap().exp() * rewards_of(tau).iter().sum::<f64>())
        .sum()
}

#[test]
fn enumeration_covers_all_probability_mass() {
    let g = tiny(3, Some(2), 11);
    let mass: f64 = all_trajectories().iter().map(|t| g.trajectory_log_prob(t).unwrap().exp()).sum();
    assert!((mass - 1.0).abs() < 1e-12);
}

#[test]
fn monte_carlo_gradient_is_unbiased() {
    let g = tiny(3, Some(2), 11);

    // Oracle: central differences of the enumerated expectation.
    let base = g.flatten();
    let mut probe = g.clone();
    let mut flat = base.clone();
    let h = 1e-5;
    let exact: Vec<f64> = (0..base.len())
        .map(|i| {
            flat[i] = base[i] + h;
            probe.assign_flat(&flat);
            let up = expected_return(&probe);
            flat[i] = base[i] - h;
            probe.assign_flat(&flat);
            let down = expected_return(&probe);
            flat[i] = base[i];
            (up - down) / (2.0 * h)
        })
        .collect();

    let n = 100_000;
    let trajs = g.sample_trajectories(n, 2, 99, 1.0).unwrap();
    let mut sum = vec![0.0; base.len()];
    let mut sq = vec![0.0; base.len()];
    for tau in &trajs {
        let tg = g.trajectory_policy_gradient(tau, &rewards_of(&tau.tokens), 0.0, 0.0).unwrap();
        for (i, x) in tg.grad.flatten().into_iter().enumerate() {
            sum[i] += x;
            sq[i] += x * x;
        }
    }
    let nf = n as f64;
    let mut within = 0;
    for i in 0..base.len() {
        let mean = sum[i] / nf;
        let var = (sq[i] / nf - mean * mean).max(0.0) * nf / (nf - 1.0);
        let se = (var / nf).sqrt();
        if (mean - exact[i]).abs() <= 3.0 * se + 1e-9 {
            within += 1;
        }
    }
    let rate = within as f64 / base.len() as f64;
    assert!(rate >= 0.95, "{within}/{} coordinates within 3 SE", base.len());
}

#[test]
fn first_token_histogram_matches_multinomial() {
    let v = 5;
    let g = tiny(v, None, 4);
    let probs: Vec<f64> = g.next_token_log_probs(&[]).unwrap().iter().map(|l| l.exp()).collect();
    let n = 100_000;
    let mut counts = vec![0usize; v];
    for t in g.sample_trajectories(n, 1, 17, 1.0).unwrap() {
        assert_eq!(t.len(), 1);
        counts[t.tokens[0]] += 1;
    }
    for (c, p) in counts.iter().zip(&probs) {
        let mean = n as f64 * p;
        let sigma = (n as f64 * p * (1.0 - p)).sqrt();
        assert!((*c as f64 - mean).abs() <= 3.0 * sigma, "count {c}, expected {mean:.1} +- {sigma:.1}");
    }
}

/// Scales the output layer so the initial next-token distributions are
/// far from uniform.
fn peaked(seed: u64) -> Generator {
    let mut g = tiny(4, None, seed);
    let last = g.head.layers.len() - 1;
    let layer = &mut g.head.layers[last];
    layer.weight.iter_mut().for_each(|w| *w *= 40.0);
    layer.bias.iter_mut().enumerate().for_each(|(i, b)| *b = if i == 0 { 3.0 } else { 0.0 });
    g
}

fn entropy(log_probs: &[f64]) -> f64 {
    -log_probs.iter().map(|l| l.exp() * l).sum::<f64>()
}

/// Exact mean per-step entropy over two-step trajectories, by enumeration.
fn mean_step_entropy(g: &Generator) -> f64 {
    let first = g.next_token_log_probs(&[]).unwrap();
    let second: f64 = (0..4)
        .map(|a| first[a].exp() * entropy(&g.next_token_log_probs(&[a]).unwrap()))
        .sum();
    (entropy(&first) + second) / 2.0
}

#[test]
fn zero_reward_entropy_does_not_decrease() {
    let mut g = peaked(3);
    let mut opt = AdamW::new(AdamWConfig::new(0.005, 0.0));
    let mut baseline = Baseline::new(0.9);
    let start = mean_step_entropy(&g);
    let mut prev = start;
    for it in 0..100 {
        let trajs = g.sample_trajectories(256, 2, 1000 + it, 1.0).unwrap();
        let zeros: Vec<Vec<f64>> = trajs.iter().map(|t| vec![0.0; t.len()]).collect();
        g.policy_gradient_step(&mut opt, &trajs, &zeros, 0.5, &mut baseline, 5.0).unwrap();
        let h = mean_step_entropy(&g);
        assert!(h >= prev - 1e-3, "entropy fell from {prev} to {h} at update {it}");
        prev = h;
    }
    assert!(prev > start + 0.1, "entropy {start} -> {prev}");
}

#[test]
fn sampling_is_schedule_independent() {
    use read_lab::parallel::{with_mode, Mode};
    let g = tiny(6, Some(1), 8);
    let a = with_mode(Mode::Sequential, || g.sample_trajectories(40, 6, 3, 1.0).unwrap());
    let b = with_mode(Mode::Parallel, || g.sample_trajectories(40, 6, 3, 1.0).unwrap());
    assert_eq!(a, b);
    let ga = with_mode(Mode::Sequential, || g.policy_gradient(&a, &rewards_like(&a), 0.1, 0.2).unwrap());
    let gb = with_mode(Mode::Parallel, || g.policy_gradient(&a, &rewards_like(&a), 0.1, 0.2).unwrap());
    assert_eq!(ga.0.flatten(), gb.0.flatten());
}

fn rewards_like(trajs: &[Trajectory]) -> Vec<Vec<f64>> {
    trajs
        .iter()
        .map(|t| t.tokens.iter().map(|&a| a as f64 * 0.1 - 0.2).collect())
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn sampled_trajectories_are_well_formed(seed in 0u64..1000, max_len in 1usize..8, temp in 0.2f64..3.0) {
        let g = tiny(7, Some(1), seed);
        for t in g.sample_trajectories(8, max_len, seed, temp).unwrap() {
            prop_assert!(!t.is_empty() && t.len() <= max_len);
            prop_assert_eq!(t.states.len(), t.len());
            prop_assert!(t.tokens.iter().all(|&a| a < 7));
            // EOS only ever terminates.
            prop_assert!(t.tokens[..t.len() - 1].iter().all(|&a| a != 1));
            prop_assert_eq!(t.finished, t.tokens.last() == Some(&1));
            let lp = g.trajectory_log_prob(&t.tokens).unwrap();
            prop_assert!((t.log_prob() - lp).abs() < 1e-6);
            prop_assert!(t.step_log_probs.iter().all(|&l| l <= 0.0));
        }
    }

    #[test]
    fn next_token_distribution_is_normalized(seed in 0u64..1000, prefix in proptest::collection::vec(0usize..7, 0..6)) {
        let g = tiny(7, Some(1), seed);
        let total: f64 = g.next_token_log_probs(&prefix).unwrap().iter().map(|l| l.exp()).sum();
        prop_assert!((total - 1.0).abs() < 1e-9);
    }

    #[test]
    fn policy_gradient_is_linear_in_rewards(seed in 0u64..500, scale in -3.0f64..3.0) {
        let g = tiny(5, Some(1), seed);
        let mut r = stream(seed, "test", 0);
        let trajs = g.sample_trajectories(6, 4, seed, 1.0).unwrap();
        let rewards: Vec<Vec<f64>> = trajs
            .iter()
            .map(|t| (0..t.len()).map(|_| rand::Rng::random_range(&mut r, -1.0..1.0)).collect())
            .collect();
        let scaled: Vec<Vec<f64>> = rewards.iter().map(|v| v.iter().map(|x| x * scale).collect()).collect();
        let a = g.policy_gradient(&trajs, &rewards, 0.0, 0.0).unwrap().0.flatten();
        let b = g.policy_gradient(&trajs, &scaled, 0.0, 0.0).unwrap().0.flatten();
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x * scale - y).abs() < 1e-9 * (1.0 + x.abs()));
        }
    }
}
