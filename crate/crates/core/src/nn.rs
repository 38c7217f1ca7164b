//! Minimal feedforward-network engine with exact reverse-mode gradients
//! with respect to both parameters and inputs.
//!
//! Input gradients are what perturbation crafting differentiates through,
//! so they are first-class here rather than an afterthought.

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

const MODEL_MAGIC: &[u8; 4] = b"MLPB";
const MODEL_VERSION: u32 = 1;

/// Hidden-layer nonlinearity.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Relu,
}

/// Output head applied to the last layer's affine output (the "logits").
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Head {
    Linear,
    Softmax,
    /// Componentwise tanh, for bounded continuous outputs.
    TanhBounded,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Relu => z.max(0.0),
        }
    }

    /// Derivative expressed through the activation value `a = apply(z)`.
    fn deriv_from_output(self, a: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - a * a,
            Activation::Relu => {
                if a > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

/// Per-dimension affine input normalizer: `x_norm = (x - mean) / std`.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    pub fn identity(dim: usize) -> Self {
        Normalizer {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    pub fn new(mean: Vec<f64>, std: Vec<f64>) -> Result<Self> {
        if mean.len() != std.len() {
            return Err(Error::DimensionMismatch {
                expected: mean.len(),
                got: std.len(),
                what: "normalizer mean/std",
            });
        }
        if std.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::Invalid("normalizer std must be finite and > 0".into()));
        }
        Ok(Normalizer { mean, std })
    }

    pub fn normalize(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.mean.iter().zip(self.std.iter()))
            .map(|(&v, (&m, &s))| (v - m) / s)
            .collect()
    }

    pub fn denormalize(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.mean.iter().zip(self.std.iter()))
            .map(|(&v, (&m, &s))| v * s + m)
            .collect()
    }
}

/// Gradients of a scalar loss with respect to network parameters and input.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub d_params: Vec<f64>,
    pub d_input: Vec<f64>,
}

/// Fully-connected network with a flat parameter vector.
///
/// Parameter layout per layer: row-major weight matrix (fan_out x fan_in)
/// followed by fan_out biases, layers concatenated in order.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub sizes: Vec<usize>,
    pub activation: Activation,
    pub head: Head,
    pub params: Vec<f64>,
    pub normalizer: Normalizer,
}

/// Number of parameters implied by a topology.
pub fn param_count(sizes: &[usize]) -> usize {
    sizes
        .windows(2)
        .map(|w| (w[0] + 1) * w[1])
        .sum()
}

impl Mlp {
    /// Xavier-uniform initialization from an explicit seed; biases start at zero.
    pub fn new_seeded(
        sizes: Vec<usize>,
        activation: Activation,
        head: Head,
        seed: u64,
    ) -> Result<Self> {
        if sizes.len() < 2 || sizes.iter().any(|&s| s == 0) {
            return Err(Error::Invalid(format!("bad topology {sizes:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::with_capacity(param_count(&sizes));
        for w in sizes.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for _ in 0..fan_in * fan_out {
                params.push(rng.gen_range(-limit..limit));
            }
            for _ in 0..fan_out {
                params.push(0.0);
            }
        }
        let input_dim = sizes[0];
        Ok(Mlp {
            sizes,
            activation,
            head,
            params,
            normalizer: Normalizer::identity(input_dim),
        })
    }

    pub fn with_normalizer(mut self, normalizer: Normalizer) -> Result<Self> {
        if normalizer.mean.len() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                got: normalizer.mean.len(),
                what: "normalizer dimension",
            });
        }
        self.normalizer = normalizer;
        Ok(self)
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                got: x.len(),
                what: "network input",
            });
        }
        Ok(())
    }

    /// Activations of every layer on the normalized input, logits last.
    /// `acts[0]` is the normalized input.
    fn forward_trace(&self, x: &[f64]) -> Vec<Vec<f64>> {
        let mut acts = Vec::with_capacity(self.sizes.len());
        acts.push(self.normalizer.normalize(x));
        let n_layers = self.sizes.len() - 1;
        let mut offset = 0;
        for l in 0..n_layers {
            let (fan_in, fan_out) = (self.sizes[l], self.sizes[l + 1]);
            let weights = &self.params[offset..offset + fan_in * fan_out];
            let biases = &self.params[offset + fan_in * fan_out..offset + (fan_in + 1) * fan_out];
            let input = &acts[l];
            let mut out = Vec::with_capacity(fan_out);
            for o in 0..fan_out {
                let row = &weights[o * fan_in..(o + 1) * fan_in];
                let mut z = biases[o];
                for (w, v) in row.iter().zip(input.iter()) {
                    z += w * v;
                }
                if l + 1 < n_layers {
                    z = self.activation.apply(z);
                }
                out.push(z);
            }
            acts.push(out);
            offset += (fan_in + 1) * fan_out;
        }
        acts
    }

    /// Pre-head affine output of the last layer.
    pub fn forward_logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        Ok(self.forward_trace(x).pop().unwrap())
    }

    /// Head output: linear logits, softmax probabilities, or tanh-bounded values.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        let logits = self.forward_logits(x)?;
        Ok(self.apply_head(&logits))
    }

    pub fn apply_head(&self, logits: &[f64]) -> Vec<f64> {
        match self.head {
            Head::Linear => logits.to_vec(),
            Head::Softmax => softmax(logits),
            Head::TanhBounded => logits.iter().map(|z| z.tanh()).collect(),
        }
    }

    /// Reverse-mode gradients for upstream given with respect to the head output.
    pub fn backward(&self, x: &[f64], upstream: &[f64]) -> Result<Gradients> {
        self.backward_impl(x, upstream, true)
    }

    /// Reverse-mode gradients for upstream given with respect to the pre-head
    /// logits. Identical to `backward` for a linear head; used by losses
    /// defined directly on logits (margin losses, cross-entropy shortcuts).
    pub fn backward_logits(&self, x: &[f64], upstream: &[f64]) -> Result<Gradients> {
        self.backward_impl(x, upstream, false)
    }

    fn backward_impl(&self, x: &[f64], upstream: &[f64], through_head: bool) -> Result<Gradients> {
        self.check_input(x)?;
        if upstream.len() != self.output_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.output_dim(),
                got: upstream.len(),
                what: "upstream gradient",
            });
        }
        let acts = self.forward_trace(x);
        let n_layers = self.sizes.len() - 1;
        let logits = &acts[n_layers];

        // Gradient with respect to the logits.
        let mut delta: Vec<f64> = if through_head {
            match self.head {
                Head::Linear => upstream.to_vec(),
                Head::Softmax => {
                    // J_softmax^T u = p .* u - p * (p . u)
                    let p = softmax(logits);
                    let dot: f64 = p.iter().zip(upstream.iter()).map(|(a, b)| a * b).sum();
                    p.iter()
                        .zip(upstream.iter())
                        .map(|(&pi, &ui)| pi * (ui - dot))
                        .collect()
                }
                Head::TanhBounded => logits
                    .iter()
                    .zip(upstream.iter())
                    .map(|(&z, &u)| u * (1.0 - z.tanh() * z.tanh()))
                    .collect(),
            }
        } else {
            upstream.to_vec()
        };

        let mut d_params = vec![0.0; self.params.len()];
        let layer_offsets: Vec<usize> = {
            let mut offs = Vec::with_capacity(n_layers);
            let mut off = 0;
            for l in 0..n_layers {
                offs.push(off);
                off += (self.sizes[l] + 1) * self.sizes[l + 1];
            }
            offs
        };

        for l in (0..n_layers).rev() {
            let (fan_in, fan_out) = (self.sizes[l], self.sizes[l + 1]);
            let offset = layer_offsets[l];
            let input = &acts[l];
            let weights = &self.params[offset..offset + fan_in * fan_out];

            for o in 0..fan_out {
                let d = delta[o];
                let w_row = &mut d_params[offset + o * fan_in..offset + (o + 1) * fan_in];
                for (dw, v) in w_row.iter_mut().zip(input.iter()) {
                    *dw += d * v;
                }
                d_params[offset + fan_in * fan_out + o] += d;
            }

            let mut d_prev = vec![0.0; fan_in];
            for o in 0..fan_out {
                let d = delta[o];
                let row = &weights[o * fan_in..(o + 1) * fan_in];
                for (dp, w) in d_prev.iter_mut().zip(row.iter()) {
                    *dp += d * w;
                }
            }
            if l > 0 {
                for (dp, a) in d_prev.iter_mut().zip(acts[l].iter()) {
                    *dp *= self.activation.deriv_from_output(*a);
                }
            }
            delta = d_prev;
        }

        // Chain through the input normalizer.
        let d_input = delta
            .iter()
            .zip(self.normalizer.std.iter())
            .map(|(&d, &s)| d / s)
            .collect();
        Ok(Gradients {
            d_params,
            d_input,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut file = std::fs::File::create(path)?;
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(MODEL_MAGIC);
        buf.extend_from_slice(&MODEL_VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.sizes.len() as u32).to_le_bytes());
        for &s in &self.sizes {
            buf.extend_from_slice(&(s as u32).to_le_bytes());
        }
        buf.push(match self.activation {
            Activation::Tanh => 0,
            Activation::Relu => 1,
        });
        buf.push(match self.head {
            Head::Linear => 0,
            Head::Softmax => 1,
            Head::TanhBounded => 2,
        });
        for v in self.normalizer.mean.iter().chain(self.normalizer.std.iter()) {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        buf.extend_from_slice(&(self.params.len() as u64).to_le_bytes());
        for v in &self.params {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        file.write_all(&buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        let mut cur = Cursor { bytes: &bytes, pos: 0 };

        let magic = cur.take(4)?;
        if magic != MODEL_MAGIC {
            return Err(Error::ModelFormat("bad magic bytes".into()));
        }
        let version = u32::from_le_bytes(cur.take(4)?.try_into().unwrap());
        if version != MODEL_VERSION {
            return Err(Error::ModelFormat(format!(
                "unsupported model version {version} (expected {MODEL_VERSION})"
            )));
        }
        let n_sizes = u32::from_le_bytes(cur.take(4)?.try_into().unwrap()) as usize;
        if n_sizes < 2 || n_sizes > 64 {
            return Err(Error::ModelFormat(format!("implausible layer count {n_sizes}")));
        }
        let mut sizes = Vec::with_capacity(n_sizes);
        for _ in 0..n_sizes {
            sizes.push(u32::from_le_bytes(cur.take(4)?.try_into().unwrap()) as usize);
        }
        if sizes.iter().any(|&s| s == 0) {
            return Err(Error::ModelFormat("zero-width layer".into()));
        }
        let activation = match cur.take(1)?[0] {
            0 => Activation::Tanh,
            1 => Activation::Relu,
            b => return Err(Error::ModelFormat(format!("unknown activation tag {b}"))),
        };
        let head = match cur.take(1)?[0] {
            0 => Head::Linear,
            1 => Head::Softmax,
            2 => Head::TanhBounded,
            b => return Err(Error::ModelFormat(format!("unknown head tag {b}"))),
        };
        let input_dim = sizes[0];
        let mut mean = Vec::with_capacity(input_dim);
        let mut std = Vec::with_capacity(input_dim);
        for _ in 0..input_dim {
            mean.push(f64::from_le_bytes(cur.take(8)?.try_into().unwrap()));
        }
        for _ in 0..input_dim {
            std.push(f64::from_le_bytes(cur.take(8)?.try_into().unwrap()));
        }
        let n_params = u64::from_le_bytes(cur.take(8)?.try_into().unwrap()) as usize;
        if n_params != param_count(&sizes) {
            return Err(Error::DimensionMismatch {
                expected: param_count(&sizes),
                got: n_params,
                what: "stored parameter count vs topology",
            });
        }
        let mut params = Vec::with_capacity(n_params);
        for _ in 0..n_params {
            params.push(f64::from_le_bytes(cur.take(8)?.try_into().unwrap()));
        }
        let normalizer = Normalizer::new(mean, std)?;
        Ok(Mlp {
            sizes,
            activation,
            head,
            params,
            normalizer,
        })
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::ModelFormat("truncated model file".into()));
        }
        let slice = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|&e| e / sum).collect()
}

/// Optimizer selection and hyperparameters.
#[derive(Debug, Clone)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub kind: OptimizerKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

/// Adam moment buffers; empty until the first step.
#[derive(Debug, Clone, Default)]
pub struct OptState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// One optimizer update, in place. Rejects non-finite gradients.
pub fn optimizer_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut OptState,
    cfg: &OptimizerConfig,
) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::DimensionMismatch {
            expected: params.len(),
            got: grads.len(),
            what: "gradient vector",
        });
    }
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFiniteGradient);
    }
    match cfg.kind {
        OptimizerKind::Sgd => {
            for (p, g) in params.iter_mut().zip(grads.iter()) {
                *p -= cfg.lr * g;
            }
        }
        OptimizerKind::Adam => {
            if state.m.is_empty() {
                state.m = vec![0.0; params.len()];
                state.v = vec![0.0; params.len()];
                state.t = 0;
            }
            state.t += 1;
            let bc1 = 1.0 - ADAM_BETA1.powi(state.t as i32);
            let bc2 = 1.0 - ADAM_BETA2.powi(state.t as i32);
            for i in 0..params.len() {
                state.m[i] = ADAM_BETA1 * state.m[i] + (1.0 - ADAM_BETA1) * grads[i];
                state.v[i] = ADAM_BETA2 * state.v[i] + (1.0 - ADAM_BETA2) * grads[i] * grads[i];
                let m_hat = state.m[i] / bc1;
                let v_hat = state.v[i] / bc2;
                params[i] -= cfg.lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
            }
        }
    }
    Ok(())
}
