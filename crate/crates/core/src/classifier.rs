//! Text encoder and (k+1)-way classifier head.
//!
//! The encoder mean-pools token embeddings over non-PAD positions and maps
//! the pooled vector through a tanh layer and a linear layer to a
//! `d`-dimensional feature. The head is one leaky-ReLU hidden layer followed
//! by `k + 1` logits; index `k` is the fake class.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::PAD;
use crate::error::{Error, Result};
use crate::nn::{clip_global_norm, logsumexp, nested, softmax, AdamW, Embedding, Linear, Parameters, TensorRef};
use crate::parallel;
use crate::rng::Rng;

pub const INIT_SCALE: f64 = 0.08;
pub const LEAKY_SLOPE: f64 = 0.2;
/// Floor applied inside every log.
pub const LOG_EPS: f64 = 1e-12;
const GRAD_CHUNK: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub d: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub embedding: Embedding,
    pub hidden: Linear,
    pub output: Linear,
}

impl Parameters for Encoder {
    fn tensors(&self) -> Vec<TensorRef<'_>> {
        let mut out = nested("embedding", self.embedding.tensors());
        out.extend(nested("hidden", self.hidden.tensors()));
        out.extend(nested("output", self.output.tensors()));
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = self.embedding.tensors_mut();
        out.extend(self.hidden.tensors_mut());
        out.extend(self.output.tensors_mut());
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub d: usize,
    pub hidden: usize,
    /// Number of task classes; the head emits `k + 1` logits.
    pub k: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierHead {
    pub config: HeadConfig,
    pub hidden: Linear,
    pub output: Linear,
}

impl Parameters for ClassifierHead {
    fn tensors(&self) -> Vec<TensorRef<'_>> {
        let mut out = nested("hidden", self.hidden.tensors());
        out.extend(nested("output", self.output.tensors()));
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = self.hidden.tensors_mut();
        out.extend(self.output.tensors_mut());
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureVector(pub Vec<f64>);

/// Probabilities over the `k` task classes followed by the fake class.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassProbs(Vec<f64>);

impl ClassProbs {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.len() < 2 {
            return Err(Error::InvalidArgument("need at least one task class plus fake".into()));
        }
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) || (probs.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!("not a probability vector: {probs:?}")));
        }
        Ok(ClassProbs(probs))
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn k(&self) -> usize {
        self.0.len() - 1
    }

    pub fn p_fake(&self) -> f64 {
        self.0[self.k()]
    }

    /// Argmax over the task classes only; ties go to the lowest index.
    pub fn task_argmax(&self) -> usize {
        let mut best = 0;
        for j in 1..self.k() {
            if self.0[j] > self.0[best] {
                best = j;
            }
        }
        best
    }
}

struct EncoderTrace {
    ids: Vec<usize>,
    pooled: Vec<f64>,
    hidden_out: Vec<f64>,
    h: Vec<f64>,
}

struct HeadTrace {
    h: Vec<f64>,
    pre: Vec<f64>,
    act: Vec<f64>,
    logits: Vec<f64>,
}

impl Encoder {
    pub fn new(config: EncoderConfig, rng: &mut Rng) -> Self {
        Encoder {
            embedding: Embedding::uniform(config.vocab_size, config.embed_dim, INIT_SCALE, rng),
            hidden: Linear::uniform(config.embed_dim, config.d, INIT_SCALE, rng),
            output: Linear::uniform(config.d, config.d, INIT_SCALE, rng),
            config,
        }
    }

    fn trace(&self, tokens: &[usize]) -> Result<EncoderTrace> {
        if tokens.is_empty() {
            return Err(Error::InvalidArgument("empty token sequence".into()));
        }
        if let Some(&id) = tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::TokenOutOfRange {
                id,
                vocab_size: self.config.vocab_size,
            });
        }
        let ids: Vec<usize> = tokens.iter().copied().filter(|&t| t != PAD).collect();
        if ids.is_empty() {
            return Err(Error::InvalidArgument("input consists only of PAD".into()));
        }
        let mut pooled = vec![0.0; self.config.embed_dim];
        for &id in &ids {
            pooled.iter_mut().zip(self.embedding.row(id)).for_each(|(p, e)| *p += e);
        }
        let inv = 1.0 / ids.len() as f64;
        pooled.iter_mut().for_each(|p| *p *= inv);
        let hidden_out: Vec<f64> = self.hidden.forward(&pooled).into_iter().map(f64::tanh).collect();
        let h = self.output.forward(&hidden_out);
        Ok(EncoderTrace {
            ids,
            pooled,
            hidden_out,
            h,
        })
    }

    fn backward(&self, trace: &EncoderTrace, dh: &[f64], grad: &mut Encoder) {
        let mut da = self.output.backward(&trace.hidden_out, dh, &mut grad.output);
        da.iter_mut().zip(&trace.hidden_out).for_each(|(g, a)| *g *= 1.0 - a * a);
        let dpooled = self.hidden.backward(&trace.pooled, &da, &mut grad.hidden);
        let inv = 1.0 / trace.ids.len() as f64;
        for &id in &trace.ids {
            grad.embedding.accumulate(id, &dpooled, inv);
        }
    }

    /// `d`-dimensional feature of a token sequence; PAD positions are
    /// excluded from pooling.
    pub fn encode(&self, tokens: &[usize]) -> Result<FeatureVector> {
        Ok(FeatureVector(self.trace(tokens)?.h))
    }
}

fn leaky(z: f64) -> f64 {
    if z > 0.0 {
        z
    } else {
        LEAKY_SLOPE * z
    }
}

impl ClassifierHead {
    pub fn new(config: HeadConfig, rng: &mut Rng) -> Self {
        ClassifierHead {
            hidden: Linear::uniform(config.d, config.hidden, INIT_SCALE, rng),
            output: Linear::uniform(config.hidden, config.k + 1, INIT_SCALE, rng),
            config,
        }
    }

    fn trace(&self, h: &[f64]) -> Result<HeadTrace> {
        if h.len() != self.config.d {
            return Err(Error::Dimension {
                what: "classifier input",
                expected: self.config.d,
                actual: h.len(),
            });
        }
        let pre = self.hidden.forward(h);
        let act: Vec<f64> = pre.iter().map(|&z| leaky(z)).collect();
        let logits = self.output.forward(&act);
        Ok(HeadTrace {
            h: h.to_vec(),
            pre,
            act,
            logits,
        })
    }

    fn backward(&self, trace: &HeadTrace, dlogits: &[f64], grad: &mut ClassifierHead) -> Vec<f64> {
        let mut da = self.output.backward(&trace.act, dlogits, &mut grad.output);
        da.iter_mut()
            .zip(&trace.pre)
            .for_each(|(g, &z)| *g *= if z > 0.0 { 1.0 } else { LEAKY_SLOPE });
        self.hidden.backward(&trace.h, &da, &mut grad.hidden)
    }

    pub fn logits(&self, h: &[f64]) -> Result<Vec<f64>> {
        Ok(self.trace(h)?.logits)
    }

    pub fn classify(&self, h: &FeatureVector) -> Result<ClassProbs> {
        Ok(ClassProbs(softmax(&self.logits(&h.0)?)))
    }

    /// Non-saturating generator loss `-log(1 - p_fake)` for a synthetic
    /// feature, and its gradient with respect to that feature.
    pub fn fool_loss_input_grad(&self, h: &[f64]) -> Result<(f64, Vec<f64>)> {
        let trace = self.trace(h)?;
        let (loss, dlogits) = real_loss_grad(&trace.logits, self.config.k);
        let mut scratch = self.zeros_like();
        Ok((loss, self.backward(&trace, &dlogits, &mut scratch)))
    }
}

// -- losses -----------------------------------------------------------------

/// `-log(p_y / sum_{j<k} p_j)`, the task-class likelihood conditioned on the
/// input being real.
pub fn loss_labeled(probs: &ClassProbs, y: usize) -> Result<f64> {
    let k = probs.k();
    if y >= k {
        return Err(Error::InvalidArgument(format!("label {y} >= k = {k}")));
    }
    let p = probs.probs();
    let real: f64 = p[..k].iter().sum();
    if real <= 0.0 {
        return Ok(-LOG_EPS.ln());
    }
    Ok(-(p[y] / real).max(LOG_EPS).ln())
}

/// `-log(1 - p_fake)`.
pub fn loss_unlabeled_real(probs: &ClassProbs) -> f64 {
    -(1.0 - probs.p_fake()).max(LOG_EPS).ln()
}

/// `-log(p_fake)`.
pub fn loss_fake(probs: &ClassProbs) -> f64 {
    -probs.p_fake().max(LOG_EPS).ln()
}

fn clamp_log(log_p: f64) -> (f64, bool) {
    let floor = LOG_EPS.ln();
    if log_p < floor {
        (-floor, true)
    } else {
        (-log_p, false)
    }
}

fn labeled_loss_grad(logits: &[f64], y: usize, k: usize) -> (f64, Vec<f64>) {
    let lse_task = logsumexp(&logits[..k]);
    let (loss, clamped) = clamp_log(logits[y] - lse_task);
    let mut d = vec![0.0; k + 1];
    if !clamped {
        for j in 0..k {
            d[j] = (logits[j] - lse_task).exp();
        }
        d[y] -= 1.0;
    }
    (loss, d)
}

fn real_loss_grad(logits: &[f64], k: usize) -> (f64, Vec<f64>) {
    let lse_all = logsumexp(logits);
    let lse_task = logsumexp(&logits[..k]);
    let (loss, clamped) = clamp_log(lse_task - lse_all);
    let mut d = vec![0.0; k + 1];
    if !clamped {
        for j in 0..k {
            d[j] = (logits[j] - lse_all).exp() - (logits[j] - lse_task).exp();
        }
        d[k] = (logits[k] - lse_all).exp();
    }
    (loss, d)
}

fn fake_loss_grad(logits: &[f64], k: usize) -> (f64, Vec<f64>) {
    let lse_all = logsumexp(logits);
    let (loss, clamped) = clamp_log(logits[k] - lse_all);
    let mut d = vec![0.0; k + 1];
    if !clamped {
        for j in 0..=k {
            d[j] = (logits[j] - lse_all).exp();
        }
        d[k] -= 1.0;
    }
    (loss, d)
}

// -- encoder + head ---------------------------------------------------------

/// Input to the classifier: token ids for the trainable encoder, or a
/// precomputed feature that bypasses it.
#[derive(Clone, Copy, Debug)]
pub enum Input<'a> {
    Tokens(&'a [usize]),
    Features(&'a [f64]),
}

/// Encoder `M` (absent when features are precomputed) and head `C`.
#[derive(Clone, Debug, PartialEq)]
pub struct TextClassifier {
    pub encoder: Option<Encoder>,
    pub head: ClassifierHead,
}

impl Parameters for TextClassifier {
    fn tensors(&self) -> Vec<TensorRef<'_>> {
        let mut out = match &self.encoder {
            Some(e) => nested("encoder", e.tensors()),
            None => Vec::new(),
        };
        out.extend(nested("head", self.head.tensors()));
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = match &mut self.encoder {
            Some(e) => e.tensors_mut(),
            None => Vec::new(),
        };
        out.extend(self.head.tensors_mut());
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub labeled: f64,
    pub real: f64,
    pub fake: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            labeled: 1.0,
            real: 1.0,
            fake: 1.0,
        }
    }
}

/// One classifier update's inputs: labeled pairs (`L_l`), real texts from
/// `L ∪ U` (`L_u`) and generated inputs (`L_f`). Either of the last two may
/// be empty.
#[derive(Clone, Debug, Default)]
pub struct ClassifierBatch<'a> {
    pub labeled: Vec<(Input<'a>, usize)>,
    pub real: Vec<Input<'a>>,
    pub fake: Vec<Input<'a>>,
}

/// Batch-mean losses; `None` when the corresponding set was empty.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub loss_l: Option<f64>,
    pub loss_u: Option<f64>,
    pub loss_f: Option<f64>,
    pub total: f64,
}

enum Term {
    Labeled(usize),
    Real,
    Fake,
}

impl TextClassifier {
    pub fn new(encoder: Option<Encoder>, head: ClassifierHead) -> Self {
        TextClassifier { encoder, head }
    }

    pub fn k(&self) -> usize {
        self.head.config.k
    }

    fn encode_input(&self, input: Input<'_>) -> Result<(Option<EncoderTrace>, Vec<f64>)> {
        match input {
            Input::Features(f) => Ok((None, f.to_vec())),
            Input::Tokens(t) => {
                let enc = self
                    .encoder
                    .as_ref()
                    .ok_or_else(|| Error::InvalidArgument("token input requires a trainable encoder".into()))?;
                let trace = enc.trace(t)?;
                let h = trace.h.clone();
                Ok((Some(trace), h))
            }
        }
    }

    pub fn features(&self, input: Input<'_>) -> Result<FeatureVector> {
        Ok(FeatureVector(self.encode_input(input)?.1))
    }

    pub fn probs(&self, input: Input<'_>) -> Result<ClassProbs> {
        let (_, h) = self.encode_input(input)?;
        Ok(ClassProbs(softmax(&self.head.logits(&h)?)))
    }

    pub fn predict(&self, input: Input<'_>) -> Result<usize> {
        Ok(self.probs(input)?.task_argmax())
    }

    /// Adds `coef * dL/dparams` of one term and returns the unscaled loss.
    fn term_gradient(&self, input: Input<'_>, term: &Term, coef: f64, grad: &mut TextClassifier) -> Result<f64> {
        let (enc_trace, h) = self.encode_input(input)?;
        let trace = self.head.trace(&h)?;
        let k = self.k();
        let (loss, mut dlogits) = match *term {
            Term::Labeled(y) => {
                if y >= k {
                    return Err(Error::InvalidArgument(format!("label {y} >= k = {k}")));
                }
                labeled_loss_grad(&trace.logits, y, k)
            }
            Term::Real => real_loss_grad(&trace.logits, k),
            Term::Fake => fake_loss_grad(&trace.logits, k),
        };
        dlogits.iter_mut().for_each(|g| *g *= coef);
        let dh = self.head.backward(&trace, &dlogits, &mut grad.head);
        if let (Some(et), Some(enc), Some(genc)) = (enc_trace, &self.encoder, grad.encoder.as_mut()) {
            enc.backward(&et, &dh, genc);
        }
        Ok(loss)
    }

    /// Weighted loss `w_l L_l + w_u L_u + w_f L_f` and its gradient.
    pub fn loss_and_gradient(&self, batch: &ClassifierBatch<'_>, weights: LossWeights) -> Result<(TextClassifier, LossBreakdown)> {
        let mut jobs: Vec<(Input<'_>, Term, f64, usize)> = Vec::new();
        let nl = batch.labeled.len();
        let nu = batch.real.len();
        let nf = batch.fake.len();
        for &(input, y) in &batch.labeled {
            jobs.push((input, Term::Labeled(y), weights.labeled / nl as f64, 0));
        }
        for &input in &batch.real {
            jobs.push((input, Term::Real, weights.real / nu as f64, 1));
        }
        for &input in &batch.fake {
            jobs.push((input, Term::Fake, weights.fake / nf as f64, 2));
        }
        if jobs.is_empty() {
            return Err(Error::InvalidArgument("empty classifier batch".into()));
        }
        struct Acc {
            grad: TextClassifier,
            sums: [f64; 3],
            err: Option<Error>,
        }
        // Inputs are plain references; rebuild them per job inside the fold.
        let acc = parallel::fold_chunks(
            &jobs,
            GRAD_CHUNK,
            || Acc {
                grad: self.zeros_like(),
                sums: [0.0; 3],
                err: None,
            },
            |acc, _, (input, term, coef, slot)| {
                if acc.err.is_some() {
                    return;
                }
                match self.term_gradient(*input, term, *coef, &mut acc.grad) {
                    Ok(loss) => acc.sums[*slot] += loss,
                    Err(e) => acc.err = Some(e),
                }
            },
            |a, b| {
                if a.err.is_none() {
                    a.err = b.err;
                }
                a.grad.add_assign(&b.grad);
                for i in 0..3 {
                    a.sums[i] += b.sums[i];
                }
            },
        );
        if let Some(e) = acc.err {
            return Err(e);
        }
        let mean = |s: f64, n: usize| (n > 0).then(|| s / n as f64);
        let loss_l = mean(acc.sums[0], nl);
        let loss_u = mean(acc.sums[1], nu);
        let loss_f = mean(acc.sums[2], nf);
        let total = weights.labeled * loss_l.unwrap_or(0.0)
            + weights.real * loss_u.unwrap_or(0.0)
            + weights.fake * loss_f.unwrap_or(0.0);
        Ok((
            acc.grad,
            LossBreakdown {
                loss_l,
                loss_u,
                loss_f,
                total,
            },
        ))
    }

    /// One descent step on the weighted classifier loss; gradients reach
    /// the encoder for token inputs and stop at the head for features.
    pub fn classifier_step(
        &mut self,
        opt: &mut AdamW,
        batch: &ClassifierBatch<'_>,
        weights: LossWeights,
        max_grad_norm: f64,
    ) -> Result<LossBreakdown> {
        let (mut grad, losses) = self.loss_and_gradient(batch, weights)?;
        if !losses.total.is_finite() || !grad.all_finite() {
            return Err(Error::NonFinite(format!("classifier loss {losses:?}")));
        }
        clip_global_norm(&mut grad, max_grad_norm);
        opt.step(self, &grad);
        if !self.all_finite() {
            return Err(Error::NonFinite("classifier parameters after update".into()));
        }
        Ok(losses)
    }
}

// -- precomputed features -----------------------------------------------------

/// Externally computed features keyed by example id, read from
/// `id<TAB>f_1,...,f_d` lines.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureTable {
    d: usize,
    rows: BTreeMap<usize, Vec<f64>>,
}

impl FeatureTable {
    pub fn parse(content: &str, path: &Path) -> Result<Self> {
        let mut rows = BTreeMap::new();
        let mut d = None;
        for (i, line) in content.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let err = |m: String| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: m,
            };
            let (id, feats) = line.split_once('\t').ok_or_else(|| err("expected id<TAB>features".into()))?;
            let id: usize = id.trim().parse().map_err(|_| err(format!("bad id {id:?}")))?;
            let values = feats
                .split(',')
                .map(|v| v.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| err(format!("bad feature value: {e}")))?;
            if values.iter().any(|v| !v.is_finite()) {
                return Err(err("non-finite feature".into()));
            }
            match d {
                None => d = Some(values.len()),
                Some(d) if d != values.len() => {
                    return Err(err(format!("expected {d} features, found {}", values.len())))
                }
                _ => {}
            }
            if rows.insert(id, values).is_some() {
                return Err(err(format!("duplicate id {id}")));
            }
        }
        let d = d.ok_or_else(|| Error::NoExamples(path.to_path_buf()))?;
        Ok(FeatureTable { d, rows })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let content = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&content, path)
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn get(&self, id: usize) -> Option<&[f64]> {
        self.rows.get(&id).map(Vec::as_slice)
    }
}
