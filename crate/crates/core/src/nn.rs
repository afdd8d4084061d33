//! Dense layers, embeddings, an LSTM cell and AdamW, with explicit
//! forward traces and hand-written backward passes in `f64`.
//!
//! Every parameter container implements [`Parameters`], which exposes its
//! tensors in a fixed order. Gradients are stored in a value of the same
//! type (see [`Parameters::zeros_like`]), so the optimizer, gradient
//! clipping, checkpointing and finite-difference checks all walk parameters
//! and gradients in lockstep.

use rand::Rng as _;

use crate::rng::Rng;

/// Borrowed view of one named parameter tensor.
pub struct TensorRef<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a [f64],
}

pub trait Parameters: Clone {
    fn tensors(&self) -> Vec<TensorRef<'_>>;

    /// Mutable tensors in the same order as [`Parameters::tensors`].
    fn tensors_mut(&mut self) -> Vec<&mut [f64]>;

    fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.fill(0.0);
        }
        z
    }

    fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.data.len()).sum()
    }

    fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for t in self.tensors() {
            out.extend_from_slice(t.data);
        }
        out
    }

    /// Overwrites every parameter from a flat vector produced by `flatten`.
    fn assign_flat(&mut self, flat: &[f64]) {
        let mut offset = 0;
        for t in self.tensors_mut() {
            let n = t.len();
            t.copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        assert_eq!(offset, flat.len(), "flat parameter length mismatch");
    }

    fn add_assign(&mut self, other: &Self) {
        self.add_scaled(other, 1.0);
    }

    fn add_scaled(&mut self, other: &Self, scale: f64) {
        let theirs = other.tensors();
        for (mine, t) in self.tensors_mut().into_iter().zip(theirs) {
            for (a, b) in mine.iter_mut().zip(t.data) {
                *a += scale * b;
            }
        }
    }

    fn scale(&mut self, s: f64) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|x| *x *= s);
        }
    }

    fn global_norm(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|t| t.data.iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    fn all_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|t| t.data.iter().all(|x| x.is_finite()))
    }

    fn is_zero(&self) -> bool {
        self.tensors()
            .iter()
            .all(|t| t.data.iter().all(|&x| x == 0.0))
    }
}

/// Prefixes and collects the tensors of a sub-component.
pub(crate) fn nested<'a>(prefix: &str, inner: Vec<TensorRef<'a>>) -> Vec<TensorRef<'a>> {
    inner
        .into_iter()
        .map(|t| TensorRef {
            name: format!("{prefix}.{}", t.name),
            ..t
        })
        .collect()
}

fn uniform_vec(n: usize, scale: f64, rng: &mut Rng) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-scale..scale)).collect()
}

// -- linear -----------------------------------------------------------------

/// Affine map `y = W x + b`, with `W` stored row-major as `n_out x n_in`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub n_in: usize,
    pub n_out: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Linear {
    pub fn uniform(n_in: usize, n_out: usize, scale: f64, rng: &mut Rng) -> Self {
        Linear {
            n_in,
            n_out,
            weight: uniform_vec(n_in * n_out, scale, rng),
            bias: uniform_vec(n_out, scale, rng),
        }
    }

    pub fn zeros(n_in: usize, n_out: usize) -> Self {
        Linear {
            n_in,
            n_out,
            weight: vec![0.0; n_in * n_out],
            bias: vec![0.0; n_out],
        }
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.n_in);
        let mut y = self.bias.clone();
        for (yo, row) in y.iter_mut().zip(self.weight.chunks_exact(self.n_in)) {
            *yo += dot(row, x);
        }
        y
    }

    /// Accumulates `dL/dW`, `dL/db` into `grad` and returns `dL/dx`.
    pub fn backward(&self, x: &[f64], dy: &[f64], grad: &mut Linear) -> Vec<f64> {
        let mut dx = vec![0.0; self.n_in];
        for (o, &g) in dy.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            grad.bias[o] += g;
            let row = &self.weight[o * self.n_in..(o + 1) * self.n_in];
            let grow = &mut grad.weight[o * self.n_in..(o + 1) * self.n_in];
            for ((gw, d), (&xi, &w)) in grow.iter_mut().zip(dx.iter_mut()).zip(x.iter().zip(row)) {
                *gw += g * xi;
                *d += g * w;
            }
        }
        dx
    }
}

impl Parameters for Linear {
    fn tensors(&self) -> Vec<TensorRef<'_>> {
        vec![
            TensorRef {
                name: "weight".into(),
                shape: vec![self.n_out, self.n_in],
                data: &self.weight,
            },
            TensorRef {
                name: "bias".into(),
                shape: vec![self.n_out],
                data: &self.bias,
            },
        ]
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        vec![&mut self.weight, &mut self.bias]
    }
}

// -- embedding --------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct Embedding {
    pub n: usize,
    pub dim: usize,
    pub table: Vec<f64>,
}

impl Embedding {
    pub fn uniform(n: usize, dim: usize, scale: f64, rng: &mut Rng) -> Self {
        Embedding {
            n,
            dim,
            table: uniform_vec(n * dim, scale, rng),
        }
    }

    pub fn row(&self, id: usize) -> &[f64] {
        &self.table[id * self.dim..(id + 1) * self.dim]
    }

    pub fn accumulate(&mut self, id: usize, grad: &[f64], scale: f64) {
        let row = &mut self.table[id * self.dim..(id + 1) * self.dim];
        for (r, g) in row.iter_mut().zip(grad) {
            *r += scale * g;
        }
    }
}

impl Parameters for Embedding {
    fn tensors(&self) -> Vec<TensorRef<'_>> {
        vec![TensorRef {
            name: "table".into(),
            shape: vec![self.n, self.dim],
            data: &self.table,
        }]
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        vec![&mut self.table]
    }
}

// -- activations ------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    Identity,
    Tanh,
    LeakyRelu(f64),
}

impl Activation {
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Identity => z,
            Activation::Tanh => z.tanh(),
            Activation::LeakyRelu(slope) => {
                if z > 0.0 {
                    z
                } else {
                    slope * z
                }
            }
        }
    }

    /// Derivative given the pre-activation `z` and output `y`.
    pub fn derivative(self, z: f64, y: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Tanh => 1.0 - y * y,
            Activation::LeakyRelu(slope) => {
                if z > 0.0 {
                    1.0
                } else {
                    slope
                }
            }
        }
    }
}

/// Dot product with four independent partial sums.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

pub fn logsumexp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let lse = logsumexp(logits);
    logits.iter().map(|l| l - lse).collect()
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let s: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / s).collect()
}

/// Shannon entropy (nats) of the distribution given by log-probabilities.
pub fn entropy_from_log_probs(log_probs: &[f64]) -> f64 {
    -log_probs
        .iter()
        .map(|&lp| if lp == f64::NEG_INFINITY { 0.0 } else { lp.exp() * lp })
        .sum::<f64>()
}

// -- multilayer perceptron --------------------------------------------------

/// Stack of [`Linear`] layers. Every layer except the last is followed by
/// `hidden` and (in training mode) inverted dropout; the last layer's
/// output is passed through `output`.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub hidden: Activation,
    pub output: Activation,
}

/// Inverted-dropout settings for one forward pass.
pub struct Dropout<'a> {
    pub rate: f64,
    pub rng: &'a mut Rng,
}

#[derive(Clone, Debug)]
pub struct MlpTrace {
    inputs: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
    post: Vec<Vec<f64>>,
    masks: Vec<Option<Vec<f64>>>,
    pub output: Vec<f64>,
}

impl Mlp {
    pub fn uniform(
        widths: &[usize],
        hidden: Activation,
        output: Activation,
        scale: f64,
        rng: &mut Rng,
    ) -> Self {
        let layers = widths
            .windows(2)
            .map(|w| Linear::uniform(w[0], w[1], scale, rng))
            .collect();
        Mlp {
            layers,
            hidden,
            output,
        }
    }

    pub fn n_in(&self) -> usize {
        self.layers[0].n_in
    }

    pub fn n_out(&self) -> usize {
        self.layers.last().map(|l| l.n_out).unwrap_or(0)
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        self.forward_trace(x, None).output
    }

    pub fn forward_trace(&self, x: &[f64], mut dropout: Option<&mut Dropout<'_>>) -> MlpTrace {
        let n = self.layers.len();
        let mut trace = MlpTrace {
            inputs: Vec::with_capacity(n),
            pre: Vec::with_capacity(n),
            post: Vec::with_capacity(n),
            masks: Vec::with_capacity(n),
            output: Vec::new(),
        };
        let mut a = x.to_vec();
        for (l, layer) in self.layers.iter().enumerate() {
            let z = layer.forward(&a);
            let act = if l + 1 == n { self.output } else { self.hidden };
            let y: Vec<f64> = z.iter().map(|&v| act.apply(v)).collect();
            let mut next = y.clone();
            let mask = match dropout.as_deref_mut() {
                Some(d) if l + 1 < n && d.rate > 0.0 => {
                    let keep = 1.0 - d.rate;
                    let m: Vec<f64> = (0..y.len())
                        .map(|_| {
                            if d.rng.random::<f64>() < keep {
                                1.0 / keep
                            } else {
                                0.0
                            }
                        })
                        .collect();
                    next.iter_mut().zip(&m).for_each(|(v, k)| *v *= k);
                    Some(m)
                }
                _ => None,
            };
            trace.inputs.push(std::mem::replace(&mut a, next));
            trace.pre.push(z);
            trace.post.push(y);
            trace.masks.push(mask);
        }
        trace.output = a;
        trace
    }

    /// Accumulates parameter gradients into `grad`; returns `dL/dx`.
    pub fn backward(&self, trace: &MlpTrace, dy: &[f64], grad: &mut Mlp) -> Vec<f64> {
        let n = self.layers.len();
        let mut d = dy.to_vec();
        for l in (0..n).rev() {
            if let Some(mask) = &trace.masks[l] {
                d.iter_mut().zip(mask).for_each(|(g, k)| *g *= k);
            }
            let act = if l + 1 == n { self.output } else { self.hidden };
            for ((g, &z), &y) in d.iter_mut().zip(&trace.pre[l]).zip(&trace.post[l]) {
                *g *= act.derivative(z, y);
            }
            d = self.layers[l].backward(&trace.inputs[l], &d, &mut grad.layers[l]);
        }
        d
    }
}

impl Parameters for Mlp {
    fn tensors(&self) -> Vec<TensorRef<'_>> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| nested(&format!("layer{i}"), l.tensors()))
            .collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.tensors_mut())
            .collect()
    }
}

// -- LSTM -------------------------------------------------------------------

/// Single LSTM cell; gate pre-activations are `W [x; h_prev] + b` with the
/// rows ordered input, forget, candidate, output.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmCell {
    pub n_in: usize,
    pub n_hidden: usize,
    pub gates: Linear,
}

#[derive(Clone, Debug)]
pub struct LstmTrace {
    input: Vec<f64>,
    i: Vec<f64>,
    f: Vec<f64>,
    g: Vec<f64>,
    o: Vec<f64>,
    c_prev: Vec<f64>,
    tanh_c: Vec<f64>,
    pub h: Vec<f64>,
    pub c: Vec<f64>,
}

impl LstmCell {
    pub fn uniform(n_in: usize, n_hidden: usize, scale: f64, rng: &mut Rng) -> Self {
        LstmCell {
            n_in,
            n_hidden,
            gates: Linear::uniform(n_in + n_hidden, 4 * n_hidden, scale, rng),
        }
    }

    pub fn forward(&self, x: &[f64], h_prev: &[f64], c_prev: &[f64]) -> LstmTrace {
        let hd = self.n_hidden;
        let mut input = Vec::with_capacity(self.n_in + hd);
        input.extend_from_slice(x);
        input.extend_from_slice(h_prev);
        let z = self.gates.forward(&input);
        let i: Vec<f64> = z[..hd].iter().map(|&v| sigmoid(v)).collect();
        let f: Vec<f64> = z[hd..2 * hd].iter().map(|&v| sigmoid(v)).collect();
        let g: Vec<f64> = z[2 * hd..3 * hd].iter().map(|&v| v.tanh()).collect();
        let o: Vec<f64> = z[3 * hd..].iter().map(|&v| sigmoid(v)).collect();
        let c: Vec<f64> = (0..hd).map(|j| f[j] * c_prev[j] + i[j] * g[j]).collect();
        let tanh_c: Vec<f64> = c.iter().map(|v| v.tanh()).collect();
        let h: Vec<f64> = (0..hd).map(|j| o[j] * tanh_c[j]).collect();
        LstmTrace {
            input,
            i,
            f,
            g,
            o,
            c_prev: c_prev.to_vec(),
            tanh_c,
            h,
            c,
        }
    }

    /// Given `dL/dh` and `dL/dc` at this step's outputs, accumulates gate
    /// gradients and returns `(dL/dx, dL/dh_prev, dL/dc_prev)`.
    pub fn backward(
        &self,
        trace: &LstmTrace,
        dh: &[f64],
        dc: &[f64],
        grad: &mut LstmCell,
    ) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let hd = self.n_hidden;
        let mut dz = vec![0.0; 4 * hd];
        let mut dc_prev = vec![0.0; hd];
        for j in 0..hd {
            let (i, f, g, o, tc) = (trace.i[j], trace.f[j], trace.g[j], trace.o[j], trace.tanh_c[j]);
            let d_o = dh[j] * tc;
            let dct = dc[j] + dh[j] * o * (1.0 - tc * tc);
            let di = dct * g;
            let dg = dct * i;
            let df = dct * trace.c_prev[j];
            dc_prev[j] = dct * f;
            dz[j] = di * i * (1.0 - i);
            dz[hd + j] = df * f * (1.0 - f);
            dz[2 * hd + j] = dg * (1.0 - g * g);
            dz[3 * hd + j] = d_o * o * (1.0 - o);
        }
        let dinput = self.gates.backward(&trace.input, &dz, &mut grad.gates);
        let dx = dinput[..self.n_in].to_vec();
        let dh_prev = dinput[self.n_in..].to_vec();
        (dx, dh_prev, dc_prev)
    }
}

impl Parameters for LstmCell {
    fn tensors(&self) -> Vec<TensorRef<'_>> {
        nested("gates", self.gates.tensors())
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        self.gates.tensors_mut()
    }
}

// -- optimization -----------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamWConfig {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        AdamWConfig {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
        }
    }
}

/// Adam with decoupled weight decay. Moment buffers are allocated lazily
/// from the first gradient seen.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        AdamW {
            config,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// One descent step on `params` along `grad`.
    pub fn step<P: Parameters>(&mut self, params: &mut P, grad: &P) {
        let grads = grad.tensors();
        if self.m.is_empty() {
            self.m = grads.iter().map(|t| vec![0.0; t.data.len()]).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (((p, g), m), v) in params
            .tensors_mut()
            .into_iter()
            .zip(grads)
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            for k in 0..p.len() {
                let gk = g.data[k];
                m[k] = c.beta1 * m[k] + (1.0 - c.beta1) * gk;
                v[k] = c.beta2 * v[k] + (1.0 - c.beta2) * gk * gk;
                p[k] -= c.lr * c.weight_decay * p[k];
                p[k] -= c.lr * (m[k] / bc1) / ((v[k] / bc2).sqrt() + c.eps);
            }
        }
    }

    /// Moment buffers as named tensors for checkpointing.
    pub fn state_tensors<P: Parameters>(&self, like: &P) -> Vec<(String, Vec<usize>, Vec<f64>)> {
        let mut out = Vec::new();
        if self.m.is_empty() {
            return out;
        }
        for ((t, m), v) in like.tensors().iter().zip(&self.m).zip(&self.v) {
            out.push((format!("m.{}", t.name), t.shape.clone(), m.clone()));
            out.push((format!("v.{}", t.name), t.shape.clone(), v.clone()));
        }
        out
    }
}

/// Rescales `grad` in place so its global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm<P: Parameters>(grad: &mut P, max_norm: f64) -> f64 {
    let norm = grad.global_norm();
    if max_norm > 0.0 && norm > max_norm {
        grad.scale(max_norm / norm);
    }
    norm
}
