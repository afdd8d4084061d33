//! Per-step reward network `r(s_t, a_t, p_fake)` and its maximum-entropy
//! IRL update.
//!
//! The network input is `[s_t ; e(a_t) ; p]` where `e` is an action
//! embedding owned by this module and `p` is the classifier's fake
//! probability for the whole trajectory. In [`RewardMode::DRead`] the `p`
//! input is fed as zero; its weight column still exists.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generator::Trajectory;
use crate::nn::{clip_global_norm, nested, Activation, AdamW, Dropout, Embedding, Mlp, Parameters, TensorRef};
use crate::parallel;
use crate::rng::{self, Rng};

pub const INIT_SCALE: f64 = 0.08;
/// Bound on the log importance weight `R(tau) - log q(tau)`.
pub const LOG_WEIGHT_CLAMP: f64 = 20.0;
const GRAD_CHUNK: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum RewardMode {
    /// The fake-probability channel is live.
    Read,
    /// The fake-probability channel is forced to zero.
    DRead,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardConfig {
    pub state_dim: usize,
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub hidden: usize,
    pub layers: usize,
    pub dropout: f64,
}

impl RewardConfig {
    pub fn new(state_dim: usize, vocab_size: usize) -> Self {
        RewardConfig {
            state_dim,
            vocab_size,
            embed_dim: 128,
            hidden: 128,
            layers: 3,
            dropout: 0.2,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.state_dim + self.embed_dim + 1
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RewardNet {
    pub config: RewardConfig,
    pub action_embedding: Embedding,
    pub mlp: Mlp,
}

impl Parameters for RewardNet {
    fn tensors(&self) -> Vec<TensorRef<'_>> {
        let mut out = nested("action_embedding", self.action_embedding.tensors());
        out.extend(nested("mlp", self.mlp.tensors()));
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = self.action_embedding.tensors_mut();
        out.extend(self.mlp.tensors_mut());
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryReward {
    pub total: f64,
    /// One entry per step; steps outside the active region are zero.
    pub per_step: Vec<f64>,
}

/// Inputs to one IRL update.
#[derive(Clone, Copy, Debug)]
pub struct IrlBatch<'a> {
    pub real: &'a [Trajectory],
    pub generated: &'a [Trajectory],
    /// `log q(tau_i)` of each generated trajectory under the current policy.
    pub gen_log_probs: &'a [f64],
    pub p_fake_real: &'a [f64],
    pub p_fake_gen: &'a [f64],
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct IrlStats {
    pub mean_real_reward: f64,
    pub mean_gen_reward: f64,
    pub effective_sample_size: f64,
    pub grad_norm: f64,
}

/// Self-normalized importance weights
/// `w_i ∝ exp(clamp(R_i - log q_i, -20, 20))`.
pub fn importance_weights(gen_rewards: &[f64], gen_log_probs: &[f64]) -> Result<Vec<f64>> {
    let z: Vec<f64> = gen_rewards
        .iter()
        .zip(gen_log_probs)
        .map(|(r, lq)| (r - lq).clamp(-LOG_WEIGHT_CLAMP, LOG_WEIGHT_CLAMP))
        .collect();
    let raw_sum: f64 = z.iter().map(|v| v.exp()).sum();
    if !(raw_sum.is_finite() && raw_sum > 0.0) {
        return Err(Error::DegenerateWeights);
    }
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    Ok(e.into_iter().map(|v| v / s).collect())
}

impl RewardNet {
    pub fn new(config: RewardConfig, rng: &mut Rng) -> Self {
        let action_embedding = Embedding::uniform(config.vocab_size, config.embed_dim, INIT_SCALE, rng);
        let mut widths = vec![config.input_dim()];
        widths.extend(std::iter::repeat_n(config.hidden, config.layers));
        widths.push(1);
        let mlp = Mlp::uniform(&widths, Activation::Tanh, Activation::Identity, INIT_SCALE, rng);
        RewardNet {
            config,
            action_embedding,
            mlp,
        }
    }

    fn input(&self, state: &[f64], action: usize, p_fake: f64, mode: RewardMode) -> Result<Vec<f64>> {
        if state.len() != self.config.state_dim {
            return Err(Error::Dimension {
                what: "reward state",
                expected: self.config.state_dim,
                actual: state.len(),
            });
        }
        if action >= self.config.vocab_size {
            return Err(Error::TokenOutOfRange {
                id: action,
                vocab_size: self.config.vocab_size,
            });
        }
        if !(0.0..=1.0).contains(&p_fake) {
            return Err(Error::InvalidArgument(format!("p_fake {p_fake} not in [0, 1]")));
        }
        let mut x = Vec::with_capacity(self.config.input_dim());
        x.extend_from_slice(state);
        x.extend_from_slice(self.action_embedding.row(action));
        x.push(match mode {
            RewardMode::Read => p_fake,
            RewardMode::DRead => 0.0,
        });
        Ok(x)
    }

    /// `r(s_t, a_t, p_fake)` with dropout disabled.
    pub fn step_reward(&self, state: &[f64], action: usize, p_fake: f64, mode: RewardMode) -> Result<f64> {
        let x = self.input(state, action, p_fake, mode)?;
        Ok(self.mlp.forward(&x)[0])
    }

    /// `R(tau) = sum_t r(s_t, a_t, p_fake)` over the active steps.
    pub fn trajectory_reward(&self, traj: &Trajectory, p_fake: f64, mode: RewardMode) -> Result<TrajectoryReward> {
        let mut per_step = vec![0.0; traj.len()];
        for (t, r) in per_step.iter_mut().enumerate().take(traj.active_len()) {
            *r = self.step_reward(&traj.states[t], traj.tokens[t], p_fake, mode)?;
        }
        Ok(TrajectoryReward {
            total: per_step.iter().sum(),
            per_step,
        })
    }

    /// `R(tau)` and, when `coef` is given, accumulation of `coef * dR/dphi`.
    fn reward_pass(
        &self,
        traj: &Trajectory,
        p_fake: f64,
        mode: RewardMode,
        mut dropout_rng: Option<Rng>,
        mut grad: Option<(&mut RewardNet, f64)>,
    ) -> Result<f64> {
        let mut total = 0.0;
        let sd = self.config.state_dim;
        let ed = self.config.embed_dim;
        for t in 0..traj.active_len() {
            let x = self.input(&traj.states[t], traj.tokens[t], p_fake, mode)?;
            let trace = match dropout_rng.as_mut() {
                Some(r) => {
                    let mut d = Dropout {
                        rate: self.config.dropout,
                        rng: r,
                    };
                    self.mlp.forward_trace(&x, Some(&mut d))
                }
                None => self.mlp.forward_trace(&x, None),
            };
            total += trace.output[0];
            if let Some((g, coef)) = grad.as_mut() {
                let dx = self.mlp.backward(&trace, &[*coef], &mut g.mlp);
                g.action_embedding.accumulate(traj.tokens[t], &dx[sd..sd + ed], 1.0);
            }
        }
        if !total.is_finite() {
            return Err(Error::NonFinite("trajectory reward".into()));
        }
        Ok(total)
    }

    fn validate(batch: &IrlBatch<'_>) -> Result<()> {
        if batch.real.is_empty() || batch.generated.is_empty() {
            return Err(Error::InvalidArgument("IRL update needs real and generated trajectories".into()));
        }
        for (what, len, expected) in [
            ("p_fake_real", batch.p_fake_real.len(), batch.real.len()),
            ("p_fake_gen", batch.p_fake_gen.len(), batch.generated.len()),
            ("gen_log_probs", batch.gen_log_probs.len(), batch.generated.len()),
        ] {
            if len != expected {
                return Err(Error::Dimension {
                    what,
                    expected,
                    actual: len,
                });
            }
        }
        Ok(())
    }

    fn dropout_stream(&self, seed: Option<u64>, label: &str, i: usize) -> Option<Rng> {
        seed.filter(|_| self.config.dropout > 0.0)
            .map(|s| rng::stream(s, label, i as u64))
    }

    /// Batch rewards of real and generated trajectories.
    fn batch_rewards(&self, batch: &IrlBatch<'_>, mode: RewardMode, dropout_seed: Option<u64>) -> Result<(Vec<f64>, Vec<f64>)> {
        let real = parallel::map_indices(batch.real.len(), |i| {
            let d = self.dropout_stream(dropout_seed, "irl-real", i);
            self.reward_pass(&batch.real[i], batch.p_fake_real[i], mode, d, None)
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
        let gen = parallel::map_indices(batch.generated.len(), |i| {
            let d = self.dropout_stream(dropout_seed, "irl-gen", i);
            self.reward_pass(&batch.generated[i], batch.p_fake_gen[i], mode, d, None)
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
        Ok((real, gen))
    }

    /// `mean_real R(tau) - log sum_i exp(clamp(R(tau_i) - log q_i))` with
    /// dropout disabled; the IRL log-likelihood up to a constant.
    pub fn irl_objective(&self, batch: &IrlBatch<'_>, mode: RewardMode) -> Result<f64> {
        Self::validate(batch)?;
        let (real, gen) = self.batch_rewards(batch, mode, None)?;
        let z: Vec<f64> = gen
            .iter()
            .zip(batch.gen_log_probs)
            .map(|(r, lq)| (r - lq).clamp(-LOG_WEIGHT_CLAMP, LOG_WEIGHT_CLAMP))
            .collect();
        Ok(real.iter().sum::<f64>() / real.len() as f64 - crate::nn::logsumexp(&z))
    }

    /// Ascent direction of the IRL objective:
    /// `mean_real dR - sum_i w_i dR(tau_i)`, with the weights held fixed.
    pub fn irl_gradient(&self, batch: &IrlBatch<'_>, mode: RewardMode, dropout_seed: Option<u64>) -> Result<(RewardNet, IrlStats)> {
        Self::validate(batch)?;
        let (real_r, gen_r) = self.batch_rewards(batch, mode, dropout_seed)?;
        let weights = importance_weights(&gen_r, batch.gen_log_probs)?;
        let n_real = batch.real.len();
        // (trajectory, p_fake, coefficient, dropout label, index)
        let mut jobs: Vec<(&Trajectory, f64, f64, &str, usize)> = Vec::with_capacity(n_real + weights.len());
        for i in 0..n_real {
            jobs.push((&batch.real[i], batch.p_fake_real[i], 1.0 / n_real as f64, "irl-real", i));
        }
        for (i, w) in weights.iter().enumerate() {
            jobs.push((&batch.generated[i], batch.p_fake_gen[i], -w, "irl-gen", i));
        }
        let grad = parallel::fold_chunks(
            &jobs,
            GRAD_CHUNK,
            || Ok(self.zeros_like()),
            |acc: &mut Result<RewardNet>, _, &(traj, p, coef, label, i)| {
                if let Ok(g) = acc {
                    let d = self.dropout_stream(dropout_seed, label, i);
                    if let Err(e) = self.reward_pass(traj, p, mode, d, Some((g, coef))) {
                        *acc = Err(e);
                    }
                }
            },
            |a, b| match (a.as_mut(), b) {
                (Ok(g), Ok(h)) => g.add_assign(&h),
                (Ok(_), Err(e)) => *a = Err(e),
                _ => {}
            },
        )?;
        let stats = IrlStats {
            mean_real_reward: real_r.iter().sum::<f64>() / n_real as f64,
            mean_gen_reward: gen_r.iter().sum::<f64>() / gen_r.len() as f64,
            effective_sample_size: 1.0 / weights.iter().map(|w| w * w).sum::<f64>(),
            grad_norm: grad.global_norm(),
        };
        Ok((grad, stats))
    }

    /// One ascent step on the IRL objective.
    pub fn irl_update(
        &mut self,
        opt: &mut AdamW,
        batch: &IrlBatch<'_>,
        mode: RewardMode,
        dropout_seed: Option<u64>,
        max_grad_norm: f64,
    ) -> Result<IrlStats> {
        let (mut grad, stats) = self.irl_gradient(batch, mode, dropout_seed)?;
        if !grad.all_finite() {
            return Err(Error::NonFinite("IRL gradient".into()));
        }
        clip_global_norm(&mut grad, max_grad_norm);
        grad.scale(-1.0);
        opt.step(self, &grad);
        if !self.all_finite() {
            return Err(Error::NonFinite("reward parameters after IRL update".into()));
        }
        Ok(stats)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::from_seed;

    fn micro(seed: u64) -> RewardNet {
        let config = RewardConfig {
            state_dim: 3,
            vocab_size: 5,
            embed_dim: 2,
            hidden: 4,
            layers: 2,
            dropout: 0.0,
        };
        RewardNet::new(config, &mut from_seed(seed))
    }

    fn traj(tokens: &[usize], finished: bool, seed: u64) -> Trajectory {
        use rand::Rng as _;
        let mut r = from_seed(seed);
        Trajectory {
            tokens: tokens.to_vec(),
            states: tokens.iter().map(|_| (0..3).map(|_| r.random_range(-1.0..1.0)).collect()).collect(),
            step_log_probs: vec![-1.0; tokens.len()],
            finished,
        }
    }

    #[test]
    fn dread_ignores_fake_probability() {
        let net = micro(1);
        let s = [0.1, -0.3, 0.5];
        let a = net.step_reward(&s, 2, 0.3, RewardMode::DRead).unwrap();
        let b = net.step_reward(&s, 2, 0.9, RewardMode::DRead).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn read_depends_on_fake_probability() {
        let net = micro(1);
        let s = [0.1, -0.3, 0.5];
        let a = net.step_reward(&s, 2, 0.0, RewardMode::Read).unwrap();
        let b = net.step_reward(&s, 2, 1.0, RewardMode::Read).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn zero_network_gives_zero_reward() {
        let mut net = micro(1);
        for t in net.tensors_mut() {
            t.fill(0.0);
        }
        assert_eq!(net.step_reward(&[1.0, 2.0, 3.0], 4, 0.7, RewardMode::Read).unwrap(), 0.0);
    }

    #[test]
    fn argument_validation() {
        let net = micro(1);
        assert!(matches!(
            net.step_reward(&[0.0; 2], 0, 0.5, RewardMode::Read),
            Err(Error::Dimension { .. })
        ));
        assert!(net.step_reward(&[0.0; 3], 5, 0.5, RewardMode::Read).is_err());
        assert!(net.step_reward(&[0.0; 3], 0, 1.5, RewardMode::Read).is_err());
    }

    #[test]
    fn trajectory_reward_sums_active_steps() {
        let net = micro(2);
        let single = traj(&[2], false, 1);
        let r = net.trajectory_reward(&single, 0.4, RewardMode::Read).unwrap();
        let direct = net.step_reward(&single.states[0], 2, 0.4, RewardMode::Read).unwrap();
        assert_eq!(r.total, direct);

        let immediate_eos = traj(&[4], true, 2);
        let r = net.trajectory_reward(&immediate_eos, 0.4, RewardMode::Read).unwrap();
        assert_eq!(r.total, 0.0);
        assert_eq!(r.per_step, vec![0.0]);
    }

    #[test]
    fn weights_normalize_and_clamp() {
        let w = importance_weights(&[1.0, 2.0, 100.0], &[-1.0, -1.0, -1.0]).unwrap();
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(w.iter().all(|&x| x >= 0.0));
        assert!(matches!(importance_weights(&[f64::NAN], &[0.0]), Err(Error::DegenerateWeights)));
    }

    #[test]
    fn identical_real_and_generated_give_zero_gradient() {
        let net = micro(3);
        let trajs = vec![traj(&[1, 2, 3], false, 4), traj(&[2, 2], false, 5)];
        // Equal R - log q across samples makes the weights exactly uniform.
        let rewards: Vec<f64> = trajs
            .iter()
            .map(|t| net.trajectory_reward(t, 0.5, RewardMode::Read).unwrap().total)
            .collect();
        let batch = IrlBatch {
            real: &trajs,
            generated: &trajs,
            gen_log_probs: &rewards,
            p_fake_real: &[0.5, 0.5],
            p_fake_gen: &[0.5, 0.5],
        };
        let (g, stats) = net.irl_gradient(&batch, RewardMode::Read, None).unwrap();
        assert!(g.global_norm() < 1e-15, "{}", g.global_norm());
        assert!((stats.effective_sample_size - 2.0).abs() < 1e-12);
    }

    #[test]
    fn empty_sets_are_rejected() {
        let net = micro(3);
        let t = vec![traj(&[1], false, 1)];
        let batch = IrlBatch {
            real: &t,
            generated: &[],
            gen_log_probs: &[],
            p_fake_real: &[0.0],
            p_fake_gen: &[],
        };
        assert!(net.irl_gradient(&batch, RewardMode::Read, None).is_err());
    }
}
