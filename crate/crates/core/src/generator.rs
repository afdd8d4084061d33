//! Autoregressive token policy: an embedding, one LSTM cell and a tanh
//! feed-forward head producing next-token logits.
//!
//! A trajectory of length `T` holds actions `a_1..a_T` (the emitted
//! tokens) and states `s_1..s_T`, where `s_t` is the LSTM hidden state
//! after reading `BOS, a_1, .., a_{t-1}` from the zero state.
//! Sampling stops after EOS or at `max_len` steps.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::corpus::{BOS, EOS};
use crate::error::{Error, Result};
use crate::nn::{
    clip_global_norm, entropy_from_log_probs, log_softmax, nested, softmax, Activation, AdamW, Dropout, Embedding,
    LstmCell, LstmTrace, Mlp, MlpTrace, Parameters, TensorRef,
};
use crate::parallel;
use crate::rng::{self, Rng};

pub const INIT_SCALE: f64 = 0.08;
const GRAD_CHUNK: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub state_dim: usize,
    pub ff_width: usize,
    pub ff_layers: usize,
    pub dropout: f64,
    pub bos: usize,
    pub eos: Option<usize>,
}

impl GeneratorConfig {
    pub fn new(vocab_size: usize) -> Self {
        GeneratorConfig {
            vocab_size,
            embed_dim: 128,
            state_dim: 128,
            ff_width: 128,
            ff_layers: 4,
            dropout: 0.1,
            bos: BOS,
            eos: Some(EOS),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Generator {
    pub config: GeneratorConfig,
    pub embedding: Embedding,
    pub lstm: LstmCell,
    pub head: Mlp,
}

impl Parameters for Generator {
    fn tensors(&self) -> Vec<TensorRef<'_>> {
        let mut out = nested("embedding", self.embedding.tensors());
        out.extend(nested("lstm", self.lstm.tensors()));
        out.extend(nested("head", self.head.tensors()));
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = self.embedding.tensors_mut();
        out.extend(self.lstm.tensors_mut());
        out.extend(self.head.tensors_mut());
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub tokens: Vec<usize>,
    pub states: Vec<Vec<f64>>,
    /// `log q(a_t | s_t)` under the untempered policy.
    pub step_log_probs: Vec<f64>,
    /// Whether the last action is EOS.
    pub finished: bool,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn actions(&self) -> &[usize] {
        &self.tokens
    }

    /// Number of leading steps that emit content; the terminating EOS step
    /// is not counted.
    pub fn active_len(&self) -> usize {
        if self.finished {
            self.tokens.len() - 1
        } else {
            self.tokens.len()
        }
    }

    pub fn log_prob(&self) -> f64 {
        self.step_log_probs.iter().sum()
    }
}

struct StepTrace {
    input: usize,
    lstm: LstmTrace,
    head: MlpTrace,
    log_probs: Vec<f64>,
}

struct SeqTrace {
    steps: Vec<StepTrace>,
}

/// Exponential moving average of mean returns.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Baseline {
    pub value: f64,
    pub decay: f64,
}

impl Baseline {
    pub fn new(decay: f64) -> Self {
        Baseline { value: 0.0, decay }
    }

    pub fn update(&mut self, mean_return: f64) {
        self.value = self.decay * self.value + (1.0 - self.decay) * mean_return;
    }
}

impl Default for Baseline {
    fn default() -> Self {
        Baseline::new(0.9)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PolicyGradientStats {
    pub mean_return: f64,
    /// Mean per-step entropy of the next-token distribution.
    pub mean_entropy: f64,
    /// Norm of the estimator before clipping.
    pub grad_norm: f64,
}

/// Per-trajectory term of the policy-gradient estimator.
pub struct TrajectoryGradient {
    pub grad: Generator,
    pub soft_return: f64,
    pub entropy_sum: f64,
}

impl Generator {
    pub fn new(config: GeneratorConfig, rng: &mut Rng) -> Self {
        let embedding = Embedding::uniform(config.vocab_size, config.embed_dim, INIT_SCALE, rng);
        let lstm = LstmCell::uniform(config.embed_dim, config.state_dim, INIT_SCALE, rng);
        let mut widths = vec![config.state_dim];
        widths.extend(std::iter::repeat_n(config.ff_width, config.ff_layers));
        widths.push(config.vocab_size);
        let head = Mlp::uniform(&widths, Activation::Tanh, Activation::Identity, INIT_SCALE, rng);
        Generator {
            config,
            embedding,
            lstm,
            head,
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::InvalidArgument("empty token sequence".into()));
        }
        match tokens.iter().find(|&&t| t >= self.vocab_size()) {
            Some(&id) => Err(Error::TokenOutOfRange {
                id,
                vocab_size: self.vocab_size(),
            }),
            None => Ok(()),
        }
    }

    fn zero_state(&self) -> (Vec<f64>, Vec<f64>) {
        (vec![0.0; self.config.state_dim], vec![0.0; self.config.state_dim])
    }

    fn forward_sequence(&self, tokens: &[usize], mut dropout: Option<&mut Dropout<'_>>) -> SeqTrace {
        let (mut h, mut c) = self.zero_state();
        let mut steps = Vec::with_capacity(tokens.len());
        for t in 0..tokens.len() {
            let input = if t == 0 { self.config.bos } else { tokens[t - 1] };
            let lstm = self.lstm.forward(self.embedding.row(input), &h, &c);
            let head = self.head.forward_trace(&lstm.h, dropout.as_deref_mut());
            let log_probs = log_softmax(&head.output);
            h.clone_from(&lstm.h);
            c.clone_from(&lstm.c);
            steps.push(StepTrace {
                input,
                lstm,
                head,
                log_probs,
            });
        }
        SeqTrace { steps }
    }

    /// Backpropagates per-step logit gradients through time.
    fn backward_sequence(&self, trace: &SeqTrace, dlogits: &[Vec<f64>], grad: &mut Generator) {
        let sd = self.config.state_dim;
        let mut dh_next = vec![0.0; sd];
        let mut dc_next = vec![0.0; sd];
        for (step, dl) in trace.steps.iter().zip(dlogits).rev() {
            let mut dh = if dl.iter().all(|&g| g == 0.0) {
                vec![0.0; sd]
            } else {
                self.head.backward(&step.head, dl, &mut grad.head)
            };
            dh.iter_mut().zip(&dh_next).for_each(|(a, b)| *a += b);
            let (dx, dh_prev, dc_prev) = self.lstm.backward(&step.lstm, &dh, &dc_next, &mut grad.lstm);
            grad.embedding.accumulate(step.input, &dx, 1.0);
            dh_next = dh_prev;
            dc_next = dc_prev;
        }
    }

    /// Gradient of `sum_t weights[t] * log q(tokens[t] | tokens[..t])`,
    /// returned with the value of that sum.
    pub fn log_prob_gradient(&self, tokens: &[usize], weights: &[f64]) -> Result<(Generator, f64)> {
        self.check_tokens(tokens)?;
        if weights.len() != tokens.len() {
            return Err(Error::Dimension {
                what: "per-step weights",
                expected: tokens.len(),
                actual: weights.len(),
            });
        }
        let trace = self.forward_sequence(tokens, None);
        let mut grad = self.zeros_like();
        let value = self.accumulate_weighted(&trace, tokens, weights, &mut grad);
        Ok((grad, value))
    }

    fn accumulate_weighted(&self, trace: &SeqTrace, tokens: &[usize], weights: &[f64], grad: &mut Generator) -> f64 {
        let mut value = 0.0;
        let dlogits: Vec<Vec<f64>> = trace
            .steps
            .iter()
            .zip(tokens)
            .zip(weights)
            .map(|((step, &a), &w)| {
                value += w * step.log_probs[a];
                if w == 0.0 {
                    return vec![0.0; step.log_probs.len()];
                }
                let mut d: Vec<f64> = step.log_probs.iter().map(|lp| -w * lp.exp()).collect();
                d[a] += w;
                d
            })
            .collect();
        self.backward_sequence(trace, &dlogits, grad);
        value
    }

    /// `sum_t log q(x_t | x_<t)` by teacher forcing, dropout disabled.
    pub fn trajectory_log_prob(&self, tokens: &[usize]) -> Result<f64> {
        self.check_tokens(tokens)?;
        let trace = self.forward_sequence(tokens, None);
        Ok(trace.steps.iter().zip(tokens).map(|(s, &a)| s.log_probs[a]).sum())
    }

    /// Log-probabilities of the next token after `prefix` (which may be empty).
    pub fn next_token_log_probs(&self, prefix: &[usize]) -> Result<Vec<f64>> {
        if let Some(&id) = prefix.iter().find(|&&t| t >= self.vocab_size()) {
            return Err(Error::TokenOutOfRange {
                id,
                vocab_size: self.vocab_size(),
            });
        }
        let (mut h, mut c) = self.zero_state();
        let mut input = self.config.bos;
        for &t in prefix {
            let step = self.lstm.forward(self.embedding.row(input), &h, &c);
            h = step.h;
            c = step.c;
            input = t;
        }
        let step = self.lstm.forward(self.embedding.row(input), &h, &c);
        Ok(log_softmax(&self.head.forward(&step.h)))
    }

    /// Replays `tokens` under teacher forcing, recording the states and
    /// per-step log-probabilities as a trajectory.
    pub fn teacher_force(&self, tokens: &[usize]) -> Result<Trajectory> {
        self.check_tokens(tokens)?;
        let trace = self.forward_sequence(tokens, None);
        Ok(Trajectory {
            tokens: tokens.to_vec(),
            states: trace.steps.iter().map(|s| s.lstm.h.clone()).collect(),
            step_log_probs: trace.steps.iter().zip(tokens).map(|(s, &a)| s.log_probs[a]).collect(),
            finished: self.config.eos.is_some() && tokens.last().copied() == self.config.eos,
        })
    }

    fn sample_one(&self, max_len: usize, temperature: f64, rng: &mut Rng) -> Trajectory {
        let (mut h, mut c) = self.zero_state();
        let mut input = self.config.bos;
        let mut traj = Trajectory {
            tokens: Vec::new(),
            states: Vec::new(),
            step_log_probs: Vec::new(),
            finished: false,
        };
        for _ in 0..max_len {
            let step = self.lstm.forward(self.embedding.row(input), &h, &c);
            let logits = self.head.forward(&step.h);
            let scaled: Vec<f64> = logits.iter().map(|l| l / temperature).collect();
            let probs = softmax(&scaled);
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut action = probs.len() - 1;
            for (i, p) in probs.iter().enumerate() {
                acc += p;
                if u < acc {
                    action = i;
                    break;
                }
            }
            let log_probs = log_softmax(&logits);
            traj.tokens.push(action);
            traj.states.push(step.h.clone());
            traj.step_log_probs.push(log_probs[action]);
            h = step.h;
            c = step.c;
            input = action;
            if Some(action) == self.config.eos {
                traj.finished = true;
                break;
            }
        }
        traj
    }

    /// Samples `n` trajectories from `softmax(logits / temperature)`,
    /// dropout disabled. Trajectory `i` draws from its own stream of `seed`,
    /// so the result does not depend on how the work is scheduled.
    pub fn sample_trajectories(&self, n: usize, max_len: usize, seed: u64, temperature: f64) -> Result<Vec<Trajectory>> {
        if n == 0 || max_len == 0 {
            return Err(Error::InvalidArgument("n and max_len must be >= 1".into()));
        }
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(Error::InvalidArgument(format!("temperature {temperature} must be > 0")));
        }
        Ok(parallel::map_indices(n, |i| {
            let mut rng = rng::stream(seed, "trajectory", i as u64);
            self.sample_one(max_len, temperature, &mut rng)
        }))
    }

    /// One trajectory's contribution to the policy-gradient estimator:
    /// `sum_t grad log q(a_t|s_t) * A_t` with
    /// `A_t = sum_{t' >= t} (r_t' - entropy_weight * log q(a_t'|s_t')) - baseline`.
    pub fn trajectory_policy_gradient(
        &self,
        traj: &Trajectory,
        rewards: &[f64],
        entropy_weight: f64,
        baseline: f64,
    ) -> Result<TrajectoryGradient> {
        self.check_tokens(&traj.tokens)?;
        if rewards.len() != traj.len() {
            return Err(Error::Dimension {
                what: "per-step rewards",
                expected: traj.len(),
                actual: rewards.len(),
            });
        }
        let trace = self.forward_sequence(&traj.tokens, None);
        let soft: Vec<f64> = trace
            .steps
            .iter()
            .zip(&traj.tokens)
            .zip(rewards)
            .map(|((s, &a), &r)| r - entropy_weight * s.log_probs[a])
            .collect();
        let mut to_go = vec![0.0; soft.len()];
        let mut acc = 0.0;
        for t in (0..soft.len()).rev() {
            acc += soft[t];
            to_go[t] = acc - baseline;
        }
        let entropy_sum = trace.steps.iter().map(|s| entropy_from_log_probs(&s.log_probs)).sum();
        let mut grad = self.zeros_like();
        self.accumulate_weighted(&trace, &traj.tokens, &to_go, &mut grad);
        Ok(TrajectoryGradient {
            grad,
            soft_return: acc,
            entropy_sum,
        })
    }

    /// Batch-mean policy-gradient estimate (an ascent direction), with the
    /// batch statistics. The returned norm is unclipped.
    pub fn policy_gradient(
        &self,
        trajectories: &[Trajectory],
        per_step_rewards: &[Vec<f64>],
        entropy_weight: f64,
        baseline: f64,
    ) -> Result<(Generator, PolicyGradientStats)> {
        if trajectories.is_empty() {
            return Err(Error::InvalidArgument("no trajectories".into()));
        }
        if per_step_rewards.len() != trajectories.len() {
            return Err(Error::Dimension {
                what: "reward rows",
                expected: trajectories.len(),
                actual: per_step_rewards.len(),
            });
        }
        if per_step_rewards.iter().flatten().any(|r| !r.is_finite()) {
            return Err(Error::NonFinite("per-step rewards".into()));
        }
        if entropy_weight.is_nan() || entropy_weight < 0.0 {
            return Err(Error::InvalidArgument("entropy_weight must be >= 0".into()));
        }
        struct Acc {
            grad: Option<Generator>,
            ret: f64,
            ent: f64,
            steps: usize,
            err: Option<Error>,
        }
        let pairs: Vec<(&Trajectory, &Vec<f64>)> = trajectories.iter().zip(per_step_rewards).collect();
        let acc = parallel::fold_chunks(
            &pairs,
            GRAD_CHUNK,
            || Acc {
                grad: None,
                ret: 0.0,
                ent: 0.0,
                steps: 0,
                err: None,
            },
            |acc, _, (traj, rewards)| {
                if acc.err.is_some() {
                    return;
                }
                match self.trajectory_policy_gradient(traj, rewards, entropy_weight, baseline) {
                    Ok(tg) => {
                        match &mut acc.grad {
                            Some(g) => g.add_assign(&tg.grad),
                            None => acc.grad = Some(tg.grad),
                        }
                        acc.ret += tg.soft_return;
                        acc.ent += tg.entropy_sum;
                        acc.steps += traj.len();
                    }
                    Err(e) => acc.err = Some(e),
                }
            },
            |a, b| {
                if a.err.is_none() {
                    a.err = b.err;
                }
                match (&mut a.grad, b.grad) {
                    (Some(g), Some(h)) => g.add_assign(&h),
                    (None, h) => a.grad = h,
                    _ => {}
                }
                a.ret += b.ret;
                a.ent += b.ent;
                a.steps += b.steps;
            },
        );
        if let Some(e) = acc.err {
            return Err(e);
        }
        let n = trajectories.len() as f64;
        let mut grad = acc.grad.expect("non-empty batch");
        grad.scale(1.0 / n);
        let stats = PolicyGradientStats {
            mean_return: acc.ret / n,
            mean_entropy: acc.ent / acc.steps.max(1) as f64,
            grad_norm: grad.global_norm(),
        };
        Ok((grad, stats))
    }

    /// Entropy-regularized policy-gradient ascent step. The estimator is
    /// clipped to `max_grad_norm`; a zero estimator leaves the parameters
    /// (and optimizer state) untouched. The baseline is updated from the
    /// batch's mean return after the step.
    pub fn policy_gradient_step(
        &mut self,
        opt: &mut AdamW,
        trajectories: &[Trajectory],
        per_step_rewards: &[Vec<f64>],
        entropy_weight: f64,
        baseline: &mut Baseline,
        max_grad_norm: f64,
    ) -> Result<PolicyGradientStats> {
        let (mut grad, stats) = self.policy_gradient(trajectories, per_step_rewards, entropy_weight, baseline.value)?;
        if !grad.all_finite() {
            return Err(Error::NonFinite("policy gradient".into()));
        }
        if !grad.is_zero() {
            clip_global_norm(&mut grad, max_grad_norm);
            grad.scale(-1.0);
            opt.step(self, &grad);
            if !self.all_finite() {
                return Err(Error::NonFinite("generator parameters after policy-gradient step".into()));
            }
        }
        baseline.update(stats.mean_return);
        Ok(stats)
    }

    /// Mean teacher-forced negative log-likelihood per token.
    pub fn mean_nll(&self, corpus: &[Vec<usize>]) -> Result<f64> {
        let per = parallel::map(corpus, |seq| self.trajectory_log_prob(seq));
        let mut total = 0.0;
        let mut count = 0usize;
        for (lp, seq) in per.into_iter().zip(corpus) {
            total -= lp?;
            count += seq.len();
        }
        Ok(total / count.max(1) as f64)
    }

    /// Maximum-likelihood training by teacher forcing over shuffled
    /// minibatches, with dropout active. Returns the corpus NLL per token
    /// (dropout off) measured after each epoch.
    pub fn mle_pretrain(
        &mut self,
        opt: &mut AdamW,
        corpus: &[Vec<usize>],
        epochs: usize,
        batch_size: usize,
        max_grad_norm: f64,
        seed: u64,
    ) -> Result<Vec<f64>> {
        if corpus.is_empty() {
            return Err(Error::InvalidArgument("empty pretraining corpus".into()));
        }
        for seq in corpus {
            self.check_tokens(seq)?;
        }
        let batch_size = batch_size.max(1);
        let mut curve = Vec::with_capacity(epochs);
        let mut step = 0u64;
        for epoch in 0..epochs {
            let mut order: Vec<usize> = (0..corpus.len()).collect();
            rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng::stream(seed, "pretrain-order", epoch as u64));
            for batch in order.chunks(batch_size) {
                let tokens: usize = batch.iter().map(|&i| corpus[i].len()).sum();
                let model = &*self;
                let mut grad = parallel::fold_chunks(
                    batch,
                    GRAD_CHUNK,
                    || model.zeros_like(),
                    |g, j, &i| {
                        let seq = &corpus[i];
                        let mut drng = rng::stream(seed, "pretrain-dropout", step.wrapping_mul(1 << 20) + j as u64);
                        let mut dropout = Dropout {
                            rate: model.config.dropout,
                            rng: &mut drng,
                        };
                        let trace = model.forward_sequence(seq, Some(&mut dropout));
                        model.accumulate_weighted(&trace, seq, &vec![1.0; seq.len()], g);
                    },
                    |a, b| a.add_assign(&b),
                );
                // ascent direction on log-likelihood -> descent on NLL
                grad.scale(-1.0 / tokens as f64);
                clip_global_norm(&mut grad, max_grad_norm);
                opt.step(self, &grad);
                step += 1;
            }
            if !self.all_finite() {
                return Err(Error::NonFinite("generator parameters during pretraining".into()));
            }
            curve.push(self.mean_nll(corpus)?);
        }
        Ok(curve)
    }
}
