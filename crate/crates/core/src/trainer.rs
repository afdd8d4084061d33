//! The adversarial training loop for the four variants.
//!
//! Each iteration runs, in order: draw the iteration's batches, sample the
//! generated set U′ (text or features), one classifier step, then the
//! variant's adversary updates (reward net then generator, or the feature
//! generator). Every random draw comes from a stream named by the master
//! seed, a fixed label and the iteration number, so a run can be resumed
//! from the iteration counter alone and all variants see the same split
//! and batch order.

use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, NamedTensor};
use crate::classifier::{
    ClassifierBatch, ClassifierHead, Encoder, EncoderConfig, FeatureTable, HeadConfig, Input, LossWeights, TextClassifier,
};
use crate::corpus::{DatasetSplit, Example, Vocabulary};
use crate::error::{Error, Result};
use crate::eval;
use crate::generator::{Baseline, Generator, GeneratorConfig, Trajectory};
use crate::nn::{clip_global_norm, nested, Activation, AdamW, AdamWConfig, Mlp, Parameters, TensorRef};
use crate::parallel;
use crate::reward::{IrlBatch, RewardConfig, RewardMode, RewardNet};
use crate::rng::{self, derive_seed};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "READ")]
    Read,
    #[serde(rename = "D_READ")]
    DRead,
    #[serde(rename = "GAN_FEATURE")]
    GanFeature,
    #[serde(rename = "BASELINE")]
    Baseline,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Read, Variant::DRead, Variant::GanFeature, Variant::Baseline];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Read => "READ",
            Variant::DRead => "D_READ",
            Variant::GanFeature => "GAN_FEATURE",
            Variant::Baseline => "BASELINE",
        }
    }

    pub fn generates_text(self) -> bool {
        matches!(self, Variant::Read | Variant::DRead)
    }

    pub fn adversarial(self) -> bool {
        self != Variant::Baseline
    }

    fn reward_mode(self) -> RewardMode {
        if self == Variant::DRead {
            RewardMode::DRead
        } else {
            RewardMode::Read
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = Variant::ALL.iter().map(|v| v.name()).collect();
                Error::InvalidArgument(format!("unknown variant {s:?}; expected one of {}", names.join(", ")))
            })
    }
}

/// Hyperparameters of one run. Field names double as configuration-file
/// keys.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub variant: Variant,
    pub seed: u64,
    pub label_fraction: f64,
    pub outer_iterations: u64,
    pub batch_size: usize,
    pub eval_every: u64,
    /// 0 keeps only the final checkpoint.
    pub checkpoint_every: u64,
    pub max_len: usize,
    pub min_freq: usize,

    pub lr_g: f64,
    pub lr_r: f64,
    pub lr_mc: f64,
    pub lr_feature_gen: f64,
    pub lr_pretrain: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,

    pub entropy_weight: f64,
    pub temperature: f64,
    pub baseline_decay: f64,
    pub pretrain_epochs: usize,

    pub gen_embed_dim: usize,
    pub gen_state_dim: usize,
    pub gen_ff_width: usize,
    pub gen_ff_layers: usize,
    pub gen_dropout: f64,

    pub reward_embed_dim: usize,
    pub reward_hidden: usize,
    pub reward_layers: usize,
    pub reward_dropout: f64,

    pub clf_embed_dim: usize,
    pub d: usize,
    pub clf_hidden: usize,

    pub noise_dim: usize,
    pub feature_gen_hidden: usize,

    pub weight_labeled: f64,
    pub weight_real: f64,
    pub weight_fake: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            variant: Variant::Read,
            seed: 1,
            label_fraction: 0.1,
            outer_iterations: 2000,
            batch_size: 32,
            eval_every: 50,
            checkpoint_every: 0,
            max_len: crate::corpus::DEFAULT_MAX_LEN,
            min_freq: 1,
            lr_g: 0.005,
            lr_r: 0.004,
            lr_mc: 5e-5,
            lr_feature_gen: 5e-5,
            lr_pretrain: 0.005,
            weight_decay: 0.01,
            grad_clip: 5.0,
            entropy_weight: 0.01,
            temperature: 1.0,
            baseline_decay: 0.9,
            pretrain_epochs: 5,
            gen_embed_dim: 128,
            gen_state_dim: 128,
            gen_ff_width: 128,
            gen_ff_layers: 4,
            gen_dropout: 0.1,
            reward_embed_dim: 128,
            reward_hidden: 128,
            reward_layers: 3,
            reward_dropout: 0.2,
            clf_embed_dim: 64,
            d: 64,
            clf_hidden: 64,
            noise_dim: 100,
            feature_gen_hidden: 64,
            weight_labeled: 1.0,
            weight_real: 1.0,
            weight_fake: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if !(self.label_fraction > 0.0 && self.label_fraction <= 1.0) {
            return bad("label_fraction must be in (0, 1]");
        }
        if self.batch_size == 0 || self.max_len == 0 || self.eval_every == 0 {
            return bad("batch_size, max_len and eval_every must be >= 1");
        }
        if self.min_freq == 0 {
            return bad("min_freq must be >= 1");
        }
        for (name, v) in [
            ("lr_g", self.lr_g),
            ("lr_r", self.lr_r),
            ("lr_mc", self.lr_mc),
            ("lr_feature_gen", self.lr_feature_gen),
            ("lr_pretrain", self.lr_pretrain),
            ("temperature", self.temperature),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(&format!("{name} must be > 0"));
            }
        }
        if !(self.weight_decay >= 0.0 && self.entropy_weight >= 0.0 && self.grad_clip >= 0.0) {
            return bad("weight_decay, entropy_weight and grad_clip must be >= 0");
        }
        if !(0.0..1.0).contains(&self.baseline_decay) {
            return bad("baseline_decay must be in [0, 1)");
        }
        if !(0.0..1.0).contains(&self.gen_dropout) || !(0.0..1.0).contains(&self.reward_dropout) {
            return bad("dropout rates must be in [0, 1)");
        }
        let dims = [
            self.gen_embed_dim,
            self.gen_state_dim,
            self.gen_ff_width,
            self.reward_embed_dim,
            self.reward_hidden,
            self.clf_embed_dim,
            self.d,
            self.clf_hidden,
            self.noise_dim,
            self.feature_gen_hidden,
        ];
        if dims.contains(&0) {
            return bad("layer widths must be >= 1");
        }
        Ok(())
    }

    fn loss_weights(&self) -> LossWeights {
        LossWeights {
            labeled: self.weight_labeled,
            real: self.weight_real,
            fake: self.weight_fake,
        }
    }

    pub fn generator_config(&self, vocab_size: usize) -> GeneratorConfig {
        GeneratorConfig {
            embed_dim: self.gen_embed_dim,
            state_dim: self.gen_state_dim,
            ff_width: self.gen_ff_width,
            ff_layers: self.gen_ff_layers,
            dropout: self.gen_dropout,
            ..GeneratorConfig::new(vocab_size)
        }
    }

    pub fn reward_config(&self, vocab_size: usize) -> RewardConfig {
        RewardConfig {
            state_dim: self.gen_state_dim,
            vocab_size,
            embed_dim: self.reward_embed_dim,
            hidden: self.reward_hidden,
            layers: self.reward_layers,
            dropout: self.reward_dropout,
        }
    }
}

/// Features supplied from files instead of the trainable encoder, keyed
/// by example id.
#[derive(Clone, Debug)]
pub struct PrecomputedFeatures {
    pub train: FeatureTable,
    pub test: FeatureTable,
}

/// Everything a run reads besides its configuration.
#[derive(Clone, Debug)]
pub struct TrainData {
    pub split: DatasetSplit,
    pub vocab: Vocabulary,
    pub labels: Vec<String>,
    pub features: Option<PrecomputedFeatures>,
}

/// Noise-to-feature MLP of the GAN_FEATURE variant.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureGenerator {
    pub mlp: Mlp,
}

impl Parameters for FeatureGenerator {
    fn tensors(&self) -> Vec<TensorRef<'_>> {
        nested("mlp", self.mlp.tensors())
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        self.mlp.tensors_mut()
    }
}

impl FeatureGenerator {
    pub fn new(noise_dim: usize, hidden: usize, d: usize, rng: &mut rng::Rng) -> Self {
        FeatureGenerator {
            mlp: Mlp::uniform(&[noise_dim, hidden, d], Activation::LeakyRelu(0.2), Activation::Identity, 0.08, rng),
        }
    }

    pub fn noise_dim(&self) -> usize {
        self.mlp.n_in()
    }

    pub fn generate(&self, noise: &[f64]) -> Vec<f64> {
        self.mlp.forward(noise)
    }
}

/// The part of the model that produces U′.
#[derive(Clone, Debug, PartialEq)]
#[allow(clippy::large_enum_variant)] // one per run
pub enum Adversary {
    None,
    Text {
        generator: Generator,
        opt_g: AdamW,
        reward: RewardNet,
        opt_r: AdamW,
        baseline: Baseline,
    },
    Features {
        generator: FeatureGenerator,
        opt: AdamW,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunState {
    /// Number of completed iterations.
    pub iteration: u64,
    pub classifier: TextClassifier,
    pub opt_c: AdamW,
    pub adversary: Adversary,
    pub best_accuracy: Option<f64>,
}

/// One line of `metrics.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub iteration: u64,
    pub variant: Variant,
    pub seed: u64,
    pub label_fraction: f64,
    pub loss_l: Option<f64>,
    pub loss_u: Option<f64>,
    pub loss_f: Option<f64>,
    pub mean_reward_real: Option<f64>,
    pub mean_reward_gen: Option<f64>,
    pub entropy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub test_accuracy: Option<f64>,
}

/// What one iteration did, for metrics and inspection.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct IterationReport {
    pub loss_l: Option<f64>,
    pub loss_u: Option<f64>,
    pub loss_f: Option<f64>,
    pub mean_reward_real: Option<f64>,
    pub mean_reward_gen: Option<f64>,
    pub entropy: Option<f64>,
    /// Encoded generated sequences as seen by the classifier.
    pub generated: Vec<Vec<usize>>,
    /// The fake-class channel fed to the reward for each generated sequence.
    pub p_fake_gen: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub iterations: u64,
    pub final_accuracy: f64,
    pub best_accuracy: f64,
    pub metrics_path: PathBuf,
    pub final_checkpoint: PathBuf,
}

/// Indices of one iteration's batches into the split.
struct Batches {
    labeled: Vec<usize>,
    /// Indices into `labeled ++ unlabeled`.
    real: Vec<usize>,
    /// Indices into `unlabeled`, or into `labeled` when U is empty.
    demos: Vec<usize>,
}

pub struct Trainer<'a> {
    pub config: TrainConfig,
    pub data: &'a TrainData,
}

fn draw(rng: &mut rng::Rng, n: usize, count: usize) -> Vec<usize> {
    (0..count).map(|_| rng.random_range(0..n)).collect()
}

impl<'a> Trainer<'a> {
    pub fn new(config: TrainConfig, data: &'a TrainData) -> Result<Self> {
        config.validate()?;
        let split = &data.split;
        if split.labeled.is_empty() {
            return Err(Error::InvalidArgument("labeled set is empty".into()));
        }
        if split.test.is_empty() {
            return Err(Error::InvalidArgument("test set is empty".into()));
        }
        if split.k < 2 {
            return Err(Error::InvalidArgument("need at least two classes".into()));
        }
        if let Some(f) = &data.features {
            if config.variant.generates_text() {
                return Err(Error::InvalidArgument(format!(
                    "{} generates text and needs the trainable encoder; precomputed features only support BASELINE and GAN_FEATURE",
                    config.variant
                )));
            }
            if f.train.d() != config.d || f.test.d() != config.d {
                return Err(Error::Dimension {
                    what: "precomputed feature width",
                    expected: config.d,
                    actual: if f.train.d() != config.d { f.train.d() } else { f.test.d() },
                });
            }
            for (table, set, name) in [
                (&f.train, split.labeled.iter().chain(&split.unlabeled).collect::<Vec<_>>(), "train"),
                (&f.test, split.test.iter().collect(), "test"),
            ] {
                if let Some(e) = set.iter().find(|e| table.get(e.id).is_none()) {
                    return Err(Error::InvalidArgument(format!("no {name} feature row for example id {}", e.id)));
                }
            }
        }
        Ok(Trainer { config, data })
    }

    fn input<'e>(&'e self, e: &'e Example, test: bool) -> Input<'e> {
        match &self.data.features {
            Some(f) => {
                let table = if test { &f.test } else { &f.train };
                Input::Features(table.get(e.id).expect("checked in Trainer::new"))
            }
            None => Input::Tokens(&e.tokens),
        }
    }

    fn real_example(&self, i: usize) -> &Example {
        let split = &self.data.split;
        if i < split.labeled.len() {
            &split.labeled[i]
        } else {
            &split.unlabeled[i - split.labeled.len()]
        }
    }

    fn demo_example(&self, i: usize) -> &Example {
        let split = &self.data.split;
        if split.unlabeled.is_empty() {
            &split.labeled[i]
        } else {
            &split.unlabeled[i]
        }
    }

    fn adam(&self, lr: f64) -> AdamW {
        AdamW::new(AdamWConfig::new(lr, self.config.weight_decay))
    }

    /// Freshly initialized models; generators are not yet pretrained.
    pub fn init_state(&self) -> RunState {
        let c = &self.config;
        let seed = c.seed;
        let vocab_size = self.data.vocab.len();
        let mut clf_rng = rng::stream(seed, "clf", 0);
        let encoder = self.data.features.is_none().then(|| {
            Encoder::new(
                EncoderConfig {
                    vocab_size,
                    embed_dim: c.clf_embed_dim,
                    d: c.d,
                },
                &mut clf_rng,
            )
        });
        let head = ClassifierHead::new(
            HeadConfig {
                d: c.d,
                hidden: c.clf_hidden,
                k: self.data.split.k,
            },
            &mut clf_rng,
        );
        let adversary = match c.variant {
            Variant::Read | Variant::DRead => Adversary::Text {
                generator: Generator::new(c.generator_config(vocab_size), &mut rng::stream(seed, "gen", 0)),
                opt_g: self.adam(c.lr_g),
                reward: RewardNet::new(c.reward_config(vocab_size), &mut rng::stream(seed, "reward", 0)),
                opt_r: self.adam(c.lr_r),
                baseline: Baseline::new(c.baseline_decay),
            },
            Variant::GanFeature => Adversary::Features {
                generator: FeatureGenerator::new(c.noise_dim, c.feature_gen_hidden, c.d, &mut rng::stream(seed, "gen", 0)),
                opt: self.adam(c.lr_feature_gen),
            },
            Variant::Baseline => Adversary::None,
        };
        RunState {
            iteration: 0,
            classifier: TextClassifier::new(encoder, head),
            opt_c: self.adam(c.lr_mc),
            adversary,
            best_accuracy: None,
        }
    }

    /// Maximum-likelihood warm start of the text generator on all real
    /// training texts. Returns the per-epoch NLL curve; empty for variants
    /// without a text generator.
    pub fn pretrain(&self, state: &mut RunState) -> Result<Vec<f64>> {
        let Adversary::Text { generator, .. } = &mut state.adversary else {
            return Ok(Vec::new());
        };
        let corpus: Vec<Vec<usize>> = self.data.split.real().map(|e| e.tokens.clone()).collect();
        let mut opt = self.adam(self.config.lr_pretrain);
        generator.mle_pretrain(
            &mut opt,
            &corpus,
            self.config.pretrain_epochs,
            self.config.batch_size,
            self.config.grad_clip,
            derive_seed(self.config.seed, "gen", u64::MAX),
        )
    }

    fn batches(&self, iteration: u64) -> Batches {
        let split = &self.data.split;
        let b = self.config.batch_size;
        let mut r = rng::stream(self.config.seed, "batch", iteration);
        let labeled = draw(&mut r, split.labeled.len(), b);
        let real = draw(&mut r, split.labeled.len() + split.unlabeled.len(), b);
        let n_demo = if split.unlabeled.is_empty() {
            split.labeled.len()
        } else {
            split.unlabeled.len()
        };
        let demos = draw(&mut r, n_demo, b);
        Batches { labeled, real, demos }
    }

    /// Runs iteration `state.iteration + 1`.
    pub fn train_iteration(&self, state: &mut RunState) -> Result<IterationReport> {
        let c = &self.config;
        let it = state.iteration + 1;
        let batches = self.batches(it);
        let gen_seed = derive_seed(c.seed, "gen", it);

        // U′
        let mut trajectories: Vec<Trajectory> = Vec::new();
        let mut generated: Vec<Vec<usize>> = Vec::new();
        let mut noise: Vec<Vec<f64>> = Vec::new();
        let mut fake_features: Vec<Vec<f64>> = Vec::new();
        match &state.adversary {
            Adversary::Text { generator, .. } => {
                trajectories = generator.sample_trajectories(c.batch_size, c.max_len, gen_seed, c.temperature)?;
                let vocab = &self.data.vocab;
                generated = trajectories
                    .iter()
                    .map(|t| vocab.encode(&vocab.decode(&t.tokens), c.max_len))
                    .collect();
            }
            Adversary::Features { generator, .. } => {
                let mut r = rng::from_seed(gen_seed);
                noise = (0..c.batch_size)
                    .map(|_| (0..generator.noise_dim()).map(|_| r.sample(StandardNormal)).collect())
                    .collect();
                fake_features = noise.iter().map(|z| generator.generate(z)).collect();
            }
            Adversary::None => {}
        }

        // classifier
        let split = &self.data.split;
        let mut batch = ClassifierBatch {
            labeled: batches
                .labeled
                .iter()
                .map(|&i| {
                    let e = &split.labeled[i];
                    (self.input(e, false), e.label.expect("labeled example"))
                })
                .collect(),
            ..Default::default()
        };
        if c.variant.adversarial() {
            batch.real = batches.real.iter().map(|&i| self.input(self.real_example(i), false)).collect();
            batch.fake = if c.variant.generates_text() {
                generated.iter().map(|t| Input::Tokens(t)).collect()
            } else {
                fake_features.iter().map(|f| Input::Features(f)).collect()
            };
        }
        let losses = state
            .classifier
            .classifier_step(&mut state.opt_c, &batch, c.loss_weights(), c.grad_clip)?;
        let mut report = IterationReport {
            loss_l: losses.loss_l,
            loss_u: losses.loss_u,
            loss_f: losses.loss_f,
            ..Default::default()
        };

        // adversary
        let classifier = &state.classifier;
        match &mut state.adversary {
            Adversary::Text {
                generator,
                opt_g,
                reward,
                opt_r,
                baseline,
            } => {
                let mode = c.variant.reward_mode();
                let demos: Vec<&Example> = batches.demos.iter().map(|&i| self.demo_example(i)).collect();
                let real_trajs = parallel::map(&demos, |e| generator.teacher_force(&e.tokens))
                    .into_iter()
                    .collect::<Result<Vec<_>>>()?;
                let (p_fake_real, p_fake_gen) = match mode {
                    RewardMode::Read => (
                        self.fake_probs(classifier, demos.iter().map(|e| e.tokens.as_slice()))?,
                        self.fake_probs(classifier, generated.iter().map(Vec::as_slice))?,
                    ),
                    RewardMode::DRead => (vec![0.0; demos.len()], vec![0.0; generated.len()]),
                };
                let gen_log_probs: Vec<f64> = trajectories.iter().map(Trajectory::log_prob).collect();
                let irl = reward.irl_update(
                    opt_r,
                    &IrlBatch {
                        real: &real_trajs,
                        generated: &trajectories,
                        gen_log_probs: &gen_log_probs,
                        p_fake_real: &p_fake_real,
                        p_fake_gen: &p_fake_gen,
                    },
                    mode,
                    Some(derive_seed(c.seed, "reward", it)),
                    c.grad_clip,
                )?;
                let reward_net = &*reward;
                let pairs: Vec<(&Trajectory, f64)> = trajectories.iter().zip(p_fake_gen.iter().copied()).collect();
                let mut per_step = parallel::map(&pairs, |(t, p)| reward_net.trajectory_reward(t, *p, mode).map(|r| r.per_step))
                    .into_iter()
                    .collect::<Result<Vec<_>>>()?;
                let active: Vec<usize> = trajectories.iter().map(Trajectory::active_len).collect();
                standardize_rewards(&mut per_step, &active);
                let pg = generator.policy_gradient_step(opt_g, &trajectories, &per_step, c.entropy_weight, baseline, c.grad_clip)?;
                report.mean_reward_real = Some(irl.mean_real_reward);
                report.mean_reward_gen = Some(irl.mean_gen_reward);
                report.entropy = Some(pg.mean_entropy);
                report.p_fake_gen = p_fake_gen;
            }
            Adversary::Features { generator, opt } => {
                let head = &classifier.head;
                let fg = &*generator;
                struct Acc {
                    grad: FeatureGenerator,
                    err: Option<Error>,
                }
                let n = noise.len() as f64;
                let acc = parallel::fold_chunks(
                    &noise,
                    8,
                    || Acc {
                        grad: fg.zeros_like(),
                        err: None,
                    },
                    |acc, _, z| {
                        if acc.err.is_some() {
                            return;
                        }
                        let trace = fg.mlp.forward_trace(z, None);
                        match head.fool_loss_input_grad(&trace.output) {
                            Ok((_, mut dh)) => {
                                dh.iter_mut().for_each(|g| *g /= n);
                                fg.mlp.backward(&trace, &dh, &mut acc.grad.mlp);
                            }
                            Err(e) => acc.err = Some(e),
                        }
                    },
                    |a, b| {
                        if a.err.is_none() {
                            a.err = b.err;
                        }
                        a.grad.add_assign(&b.grad);
                    },
                );
                if let Some(e) = acc.err {
                    return Err(e);
                }
                let mut grad = acc.grad;
                if !grad.all_finite() {
                    return Err(Error::NonFinite("feature generator gradient".into()));
                }
                clip_global_norm(&mut grad, c.grad_clip);
                opt.step(generator, &grad);
            }
            Adversary::None => {}
        }
        report.generated = generated;
        state.iteration = it;
        Ok(report)
    }

    fn fake_probs<'s>(&self, classifier: &TextClassifier, seqs: impl Iterator<Item = &'s [usize]>) -> Result<Vec<f64>> {
        let seqs: Vec<&[usize]> = seqs.collect();
        parallel::map(&seqs, |s| classifier.probs(Input::Tokens(s)).map(|p| p.p_fake()))
            .into_iter()
            .collect()
    }

    pub fn test_accuracy(&self, classifier: &TextClassifier) -> Result<f64> {
        let inputs: Vec<(Input<'_>, usize)> = self
            .data
            .split
            .test
            .iter()
            .map(|e| (self.input(e, true), e.label.expect("test example has a label")))
            .collect();
        eval::accuracy(classifier, &inputs)
    }

    fn record(&self, iteration: u64, report: Option<&IterationReport>, test_accuracy: Option<f64>) -> MetricsRecord {
        let r = report.cloned().unwrap_or_default();
        MetricsRecord {
            iteration,
            variant: self.config.variant,
            seed: self.config.seed,
            label_fraction: self.config.label_fraction,
            loss_l: r.loss_l,
            loss_u: r.loss_u,
            loss_f: r.loss_f,
            mean_reward_real: r.mean_reward_real,
            mean_reward_gen: r.mean_reward_gen,
            entropy: r.entropy,
            test_accuracy,
        }
    }

    /// Trains to `outer_iterations`, streaming metrics to
    /// `<outdir>/metrics.jsonl` and checkpoints to `<outdir>/ckpt-<iter>/`.
    /// With `resume`, continues from that checkpoint; metrics already in
    /// `outdir` past the checkpoint's iteration are discarded.
    pub fn run(&self, outdir: &Path, resume: Option<&Path>) -> Result<RunSummary> {
        fs::create_dir_all(outdir).map_err(|e| Error::io(outdir, e))?;
        let metrics_path = outdir.join("metrics.jsonl");
        let mut kept = String::new();
        let (mut state, mut last_acc) = match resume {
            Some(dir) => {
                let state = self.load_checkpoint(dir)?;
                if let Ok(existing) = fs::read_to_string(&metrics_path) {
                    for line in existing.lines() {
                        let rec: MetricsRecord = serde_json::from_str(line)?;
                        if rec.iteration <= state.iteration {
                            kept.push_str(line);
                            kept.push('\n');
                        }
                    }
                }
                let acc = state.best_accuracy;
                (state, acc)
            }
            None => {
                let mut state = self.init_state();
                self.pretrain(&mut state)?;
                (state, None)
            }
        };
        let mut out = fs::File::create(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?;
        out.write_all(kept.as_bytes()).map_err(|e| Error::io(&metrics_path, e))?;
        let mut emit = |rec: &MetricsRecord| -> Result<()> {
            let line = serde_json::to_string(rec)?;
            writeln!(out, "{line}").map_err(|e| Error::io(&metrics_path, e))
        };

        if resume.is_none() {
            let acc = self.test_accuracy(&state.classifier)?;
            state.best_accuracy = Some(acc);
            last_acc = Some(acc);
            emit(&self.record(0, None, Some(acc)))?;
        }
        let total = self.config.outer_iterations;
        let mut final_checkpoint = None;
        while state.iteration < total {
            let report = self.train_iteration(&mut state)?;
            let it = state.iteration;
            let acc = if it % self.config.eval_every == 0 || it == total {
                let acc = self.test_accuracy(&state.classifier)?;
                state.best_accuracy = Some(state.best_accuracy.map_or(acc, |b| b.max(acc)));
                last_acc = Some(acc);
                Some(acc)
            } else {
                None
            };
            emit(&self.record(it, Some(&report), acc))?;
            let every = self.config.checkpoint_every;
            if (every > 0 && it % every == 0) || it == total {
                let dir = outdir.join(format!("ckpt-{it}"));
                self.save_checkpoint(&state, &dir)?;
                final_checkpoint = Some(dir);
            }
        }
        let final_checkpoint = match final_checkpoint {
            Some(d) => d,
            None => {
                let dir = outdir.join(format!("ckpt-{}", state.iteration));
                self.save_checkpoint(&state, &dir)?;
                dir
            }
        };
        let final_accuracy = match last_acc {
            Some(a) if state.iteration == total || resume.is_none() => a,
            _ => self.test_accuracy(&state.classifier)?,
        };
        Ok(RunSummary {
            iterations: state.iteration,
            final_accuracy,
            best_accuracy: state.best_accuracy.unwrap_or(final_accuracy).max(final_accuracy),
            metrics_path,
            final_checkpoint,
        })
    }

    // -- checkpoints ---------------------------------------------------------

    fn opt_tensors(prefix: &str, opt: &AdamW, like: &impl Parameters) -> Vec<NamedTensor> {
        let mut out = vec![NamedTensor {
            name: format!("{prefix}step"),
            shape: vec![1],
            data: vec![opt.step as f64],
        }];
        out.extend(opt.state_tensors(like).into_iter().map(|(name, shape, data)| NamedTensor {
            name: format!("{prefix}{name}"),
            shape,
            data,
        }));
        out
    }

    fn load_opt(prefix: &str, opt: &mut AdamW, like: &impl Parameters, stored: &[NamedTensor]) -> Result<()> {
        let find = |name: &str| stored.iter().find(|t| t.name == name);
        let step = find(&format!("{prefix}step")).ok_or_else(|| Error::Checkpoint(format!("missing {prefix}step")))?;
        opt.step = step.data[0] as u64;
        opt.m.clear();
        opt.v.clear();
        if opt.step == 0 {
            return Ok(());
        }
        for t in like.tensors() {
            for (buf, kind) in [(&mut opt.m, "m"), (&mut opt.v, "v")] {
                let name = format!("{prefix}{kind}.{}", t.name);
                let src = find(&name).ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
                if src.data.len() != t.data.len() {
                    return Err(Error::Checkpoint(format!("tensor {name}: wrong length")));
                }
                buf.push(src.data.clone());
            }
        }
        Ok(())
    }

    pub fn state_tensors(&self, state: &RunState) -> Vec<NamedTensor> {
        let mut t = vec![NamedTensor {
            name: "run.scalars".into(),
            shape: vec![2],
            data: vec![state.iteration as f64, state.best_accuracy.unwrap_or(f64::NAN)],
        }];
        t.extend(checkpoint::param_tensors("classifier.", &state.classifier));
        t.extend(Self::opt_tensors("opt_c.", &state.opt_c, &state.classifier));
        match &state.adversary {
            Adversary::Text {
                generator,
                opt_g,
                reward,
                opt_r,
                baseline,
            } => {
                t.extend(checkpoint::param_tensors("generator.", generator));
                t.extend(Self::opt_tensors("opt_g.", opt_g, generator));
                t.extend(checkpoint::param_tensors("reward.", reward));
                t.extend(Self::opt_tensors("opt_r.", opt_r, reward));
                t.push(NamedTensor {
                    name: "baseline".into(),
                    shape: vec![1],
                    data: vec![baseline.value],
                });
            }
            Adversary::Features { generator, opt } => {
                t.extend(checkpoint::param_tensors("feature_gen.", generator));
                t.extend(Self::opt_tensors("opt_f.", opt, generator));
            }
            Adversary::None => {}
        }
        t
    }

    /// Writes the run state plus the configuration, vocabulary and label
    /// names needed to rebuild the models.
    pub fn save_checkpoint(&self, state: &RunState, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        checkpoint::save_tensors(dir, "state", &self.state_tensors(state))?;
        checkpoint::write_atomic(&dir.join("config.json"), serde_json::to_string_pretty(&self.config)?.as_bytes())?;
        checkpoint::write_atomic(&dir.join("labels.json"), serde_json::to_string(&self.data.labels)?.as_bytes())?;
        self.data.vocab.save(&dir.join("vocab.txt"))
    }

    pub fn load_checkpoint(&self, dir: &Path) -> Result<RunState> {
        let stored = checkpoint::load_tensors(dir, "state")?;
        let saved: TrainConfig = serde_json::from_slice(&fs::read(dir.join("config.json")).map_err(|e| Error::io(dir, e))?)?;
        if saved.variant != self.config.variant || saved.seed != self.config.seed {
            return Err(Error::Checkpoint(format!(
                "checkpoint is for {} seed {}, run is {} seed {}",
                saved.variant, saved.seed, self.config.variant, self.config.seed
            )));
        }
        let mut state = self.init_state();
        let scalars = stored
            .iter()
            .find(|t| t.name == "run.scalars")
            .ok_or_else(|| Error::Checkpoint("missing run.scalars".into()))?;
        state.iteration = scalars.data[0] as u64;
        state.best_accuracy = Some(scalars.data[1]).filter(|a| !a.is_nan());
        checkpoint::assign_params("classifier.", &mut state.classifier, &stored)?;
        Self::load_opt("opt_c.", &mut state.opt_c, &state.classifier, &stored)?;
        match &mut state.adversary {
            Adversary::Text {
                generator,
                opt_g,
                reward,
                opt_r,
                baseline,
            } => {
                checkpoint::assign_params("generator.", generator, &stored)?;
                Self::load_opt("opt_g.", opt_g, generator, &stored)?;
                checkpoint::assign_params("reward.", reward, &stored)?;
                Self::load_opt("opt_r.", opt_r, reward, &stored)?;
                baseline.value = stored
                    .iter()
                    .find(|t| t.name == "baseline")
                    .ok_or_else(|| Error::Checkpoint("missing baseline".into()))?
                    .data[0];
            }
            Adversary::Features { generator, opt } => {
                checkpoint::assign_params("feature_gen.", generator, &stored)?;
                Self::load_opt("opt_f.", opt, generator, &stored)?;
            }
            Adversary::None => {}
        }
        Ok(state)
    }
}

/// Shifts and scales the active per-step rewards of a batch to zero mean
/// and unit standard deviation (`std + 1e-8`); steps past `active[i]`
/// stay zero.
pub fn standardize_rewards(per_step: &mut [Vec<f64>], active: &[usize]) {
    let values = || per_step.iter().zip(active).flat_map(|(r, &a)| r[..a].iter().copied());
    let n = values().count();
    if n == 0 {
        return;
    }
    let mean = values().sum::<f64>() / n as f64;
    let var = values().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n as f64;
    let scale = 1.0 / (var.sqrt() + 1e-8);
    for (r, &a) in per_step.iter_mut().zip(active) {
        r[..a].iter_mut().for_each(|x| *x = (*x - mean) * scale);
    }
}

/// Reads the configuration stored beside a checkpoint.
pub fn checkpoint_config(dir: &Path) -> Result<TrainConfig> {
    let path = dir.join("config.json");
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    Ok(serde_json::from_slice(&bytes)?)
}

/// Finds the highest-numbered `ckpt-<iter>` directory in a run directory.
pub fn latest_checkpoint(outdir: &Path) -> Result<PathBuf> {
    let entries = fs::read_dir(outdir).map_err(|e| Error::io(outdir, e))?;
    let mut best: Option<(u64, PathBuf)> = None;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(outdir, e))?;
        let name = entry.file_name();
        if let Some(n) = name.to_str().and_then(|s| s.strip_prefix("ckpt-")).and_then(|s| s.parse::<u64>().ok()) {
            if entry.path().join("state.json").exists() && best.as_ref().is_none_or(|(b, _)| n > *b) {
                best = Some((n, entry.path()));
            }
        }
    }
    best.map(|(_, p)| p)
        .ok_or_else(|| Error::Checkpoint(format!("no checkpoint in {}", outdir.display())))
}
