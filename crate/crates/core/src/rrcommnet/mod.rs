//! The recognition network: a strided spatio-temporal convolution encoder,
//! spatially pooled and channel-standardized feature sequence, one
//! multi-head self-attention block with classification and location
//! embeddings, a position-wise feed-forward network and a linear
//! classifier read from the classification position.

mod train;

use rand::{Rng, SeedableRng};
use rand::seq::index::sample;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{Chunk, DatasetError};
use crate::nn::{Conv3dSpec, Graph, NnError, ParamStore, Scalar, Tensor, Var};

pub use train::{train, EpochStats, TrainOptions, TrainOutcome};

/// Epsilon of the per-time-step channel standardization.
pub const CHANNEL_EPS: f64 = 1e-5;
/// Epsilon of the standardization after each residual connection.
pub const RESIDUAL_EPS: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("chunk is {got:?} but the model expects {want:?}")]
    ShapeMismatch { got: [usize; 4], want: [usize; 4] },
    #[error("class {0} has no training clips")]
    TooFewInstances(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Input chunk length in frames before skipping.
    pub t: usize,
    /// Keep only even frames of each chunk.
    pub skip: bool,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// Output channels of each encoder block; the last is `d_model`.
    pub encoder_widths: Vec<usize>,
    /// Temporal stride of each encoder block. Every block halves H and W.
    pub temporal_strides: Vec<usize>,
    pub heads: usize,
    pub pffn_hidden: usize,
    pub num_classes: usize,
    pub mask_rate: f64,
    pub dropout: f64,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub lr_decay_every: usize,
    pub lr_decay_factor: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            t: 16,
            skip: false,
            height: 32,
            width: 32,
            channels: 3,
            encoder_widths: vec![8, 16, 64],
            temporal_strides: vec![1, 2, 2],
            heads: 4,
            pffn_hidden: 256,
            num_classes: 15,
            mask_rate: 0.1,
            dropout: 0.1,
            batch_size: 8,
            lr: 1e-4,
            weight_decay: 0.01,
            epochs: 60,
            lr_decay_every: 80,
            lr_decay_factor: 0.1,
        }
    }
}

impl ModelConfig {
    /// Full-scale configuration: 64-frame chunks, 112x112 crops, d_model 512.
    pub fn full_scale() -> Self {
        ModelConfig {
            t: 64,
            height: 112,
            width: 112,
            encoder_widths: vec![64, 128, 512],
            pffn_hidden: 2048,
            epochs: 200,
            ..ModelConfig::default()
        }
    }

    pub fn skip_variant(&self) -> Self {
        ModelConfig {
            skip: true,
            ..self.clone()
        }
    }

    pub fn d_model(&self) -> usize {
        *self.encoder_widths.last().unwrap_or(&0)
    }

    pub fn d_k(&self) -> usize {
        self.d_model() / self.heads.max(1)
    }

    /// Frames the encoder actually receives.
    pub fn frames_in(&self) -> usize {
        if self.skip {
            self.t.div_ceil(2)
        } else {
            self.t
        }
    }

    /// Length of the pooled feature sequence.
    pub fn t_prime(&self) -> usize {
        self.temporal_strides
            .iter()
            .fold(self.frames_in(), |n, &s| (n - 1) / s.max(1) + 1)
    }

    /// Sequence length seen by attention, classification position included.
    pub fn seq_len(&self) -> usize {
        self.t_prime() + 1
    }

    pub fn masked_count(&self) -> usize {
        (self.mask_rate * self.seq_len() as f64 + 1e-9).floor() as usize
    }

    pub fn input_shape(&self) -> [usize; 4] {
        [self.channels, self.frames_in(), self.height, self.width]
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::InvalidConfig(m.to_string()));
        if self.t == 0 || self.height == 0 || self.width == 0 || self.channels == 0 {
            return bad("t, height, width and channels must be positive");
        }
        if self.encoder_widths.is_empty() || self.encoder_widths.contains(&0) {
            return bad("encoder widths must be non-empty and positive");
        }
        if self.temporal_strides.len() != self.encoder_widths.len() || self.temporal_strides.contains(&0) {
            return bad("one positive temporal stride per encoder block");
        }
        if self.heads == 0 || self.d_k() == 0 {
            return bad("need d_model >= heads >= 1");
        }
        if !(0.0..1.0).contains(&self.mask_rate) || !(0.0..1.0).contains(&self.dropout) {
            return bad("mask_rate and dropout must lie in [0, 1)");
        }
        if self.num_classes < 2 || self.pffn_hidden == 0 || self.batch_size == 0 {
            return bad("num_classes >= 2, pffn_hidden >= 1, batch_size >= 1");
        }
        Ok(())
    }

    /// Freshly initialized parameters, all drawn from normal distributions.
    pub fn init_params(&self, seed: u64) -> Result<ParamStore<f32>, ModelError> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let normal = |shape: &[usize], std: f64, rng: &mut ChaCha8Rng| {
            let dist = Normal::new(0.0, std).expect("finite std");
            Tensor::from_fn(shape, |_| dist.sample(rng) as f32)
        };
        let mut cin = self.channels;
        for (i, &cout) in self.encoder_widths.iter().enumerate() {
            let fan_in = (cin * 27) as f64;
            p.insert(&format!("enc.{i}.w"), normal(&[cout, cin, 3, 3, 3], (2.0 / fan_in).sqrt(), &mut rng))?;
            p.insert(&format!("enc.{i}.b"), Tensor::zeros(&[cout]))?;
            cin = cout;
        }
        let (d, dk) = (self.d_model(), self.d_k());
        p.insert("cls", normal(&[1, d], 0.02, &mut rng))?;
        p.insert("loc", normal(&[self.seq_len(), d], 0.02, &mut rng))?;
        let proj_std = (1.0 / d as f64).sqrt();
        for h in 0..self.heads {
            for kind in ["q", "k", "v"] {
                p.insert(&format!("attn.{h}.{kind}"), normal(&[d, dk], proj_std, &mut rng))?;
            }
        }
        p.insert("ffn.w1", normal(&[d, self.pffn_hidden], (2.0 / d as f64).sqrt(), &mut rng))?;
        p.insert("ffn.b1", Tensor::zeros(&[self.pffn_hidden]))?;
        p.insert("ffn.w2", normal(&[self.pffn_hidden, d], (1.0 / self.pffn_hidden as f64).sqrt(), &mut rng))?;
        p.insert("ffn.b2", Tensor::zeros(&[d]))?;
        p.insert("head.w", normal(&[d, self.num_classes], proj_std, &mut rng))?;
        p.insert("head.b", Tensor::zeros(&[self.num_classes]))?;
        Ok(p)
    }

    /// Checks that `params` has every tensor this config needs, with the
    /// right shape.
    pub fn check_params<T: Scalar>(&self, params: &ParamStore<T>) -> Result<(), ModelError> {
        let want = self.init_params(0)?;
        for (name, t) in want.names().iter().zip(want.tensors()) {
            let got = params.get(name)?;
            if got.shape() != t.shape() {
                return Err(ModelError::InvalidConfig(format!(
                    "parameter {name} has shape {:?}, config needs {:?}",
                    got.shape(),
                    t.shape()
                )));
            }
        }
        Ok(())
    }
}

/// Intermediate values of one attention pass.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionTrace {
    /// Raw scores `QK^T / sqrt(d_k)`, one `L x L` matrix per head.
    pub a_self: Vec<Tensor<f64>>,
    /// Softmax of the scores over keys, after masking in train mode.
    pub a_weights: Vec<Tensor<f64>>,
    /// Concatenated weighted value sums, `L x (heads * d_k)`.
    pub attended: Tensor<f64>,
    /// Key positions whose weights were zeroed.
    pub masked: Vec<usize>,
}

/// Handles to intermediate nodes of a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardVars {
    pub pooled: Var,
    pub features: Var,
    pub a_self: Vec<Var>,
    pub a_weights: Vec<Var>,
    pub attended: Var,
    pub masked: Vec<usize>,
    pub logits: Var,
}

impl ForwardVars {
    pub fn trace<T: Scalar>(&self, g: &Graph<T>) -> AttentionTrace {
        AttentionTrace {
            a_self: self.a_self.iter().map(|&v| g.value(v).cast()).collect(),
            a_weights: self.a_weights.iter().map(|&v| g.value(v).cast()).collect(),
            attended: g.value(self.attended).cast(),
            masked: self.masked.clone(),
        }
    }
}

/// Source of randomness for masking and dropout. Eval mode uses none.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut ChaCha8Rng),
}

impl Mode<'_> {
    pub fn is_train(&self) -> bool {
        matches!(self, Mode::Train(_))
    }
}

fn dropout<T: Scalar>(g: &mut Graph<T>, x: Var, rate: f64, mode: &mut Mode) -> Result<Var, NnError> {
    let Mode::Train(rng) = mode else { return Ok(x) };
    if rate == 0.0 {
        return Ok(x);
    }
    let keep = T::of(1.0 / (1.0 - rate));
    let shape = g.value(x).shape().to_vec();
    let mask = Tensor::from_fn(&shape, |_| if rng.random::<f64>() < rate { T::zero() } else { keep });
    g.mul_const(x, mask)
}

/// Encoder blocks: strided 3x3x3 convolution and ReLU. Returns the pooled
/// sequence before and after channel standardization.
pub fn encode_vars<T: Scalar>(
    g: &mut Graph<T>,
    params: &ParamStore<T>,
    config: &ModelConfig,
    input: Var,
) -> Result<(Var, Var), ModelError> {
    let mut x = input;
    for (i, &ts) in config.temporal_strides.iter().enumerate() {
        let w = params.var(g, &format!("enc.{i}.w"))?;
        let b = params.var(g, &format!("enc.{i}.b"))?;
        let spec = Conv3dSpec {
            stride: [ts, 2, 2],
            pad: [1, 1, 1],
        };
        let y = g.conv3d(x, w, b, spec)?;
        x = g.relu(y);
    }
    let pooled = g.mean_pool_hw(x)?;
    let features = g.standardize_rows(pooled, T::of(CHANNEL_EPS));
    Ok((pooled, features))
}

/// Multi-head self-attention over `[cls; features] + loc`. Returns the
/// per-head score and weight nodes, the concatenated head outputs, the
/// embedded input sequence and the masked key positions.
#[allow(clippy::type_complexity)]
pub fn attend_vars<T: Scalar>(
    g: &mut Graph<T>,
    params: &ParamStore<T>,
    config: &ModelConfig,
    features: Var,
    mode: &mut Mode,
) -> Result<(Vec<Var>, Vec<Var>, Var, Var, Vec<usize>), ModelError> {
    let cls = params.var(g, "cls")?;
    let seq = g.concat_rows(&[cls, features])?;
    let loc = params.var(g, "loc")?;
    let len = g.value(seq).shape()[0];
    if g.value(loc).shape()[0] != len {
        return Err(ModelError::InvalidConfig(format!(
            "sequence of {len} positions but {} location embeddings",
            g.value(loc).shape()[0]
        )));
    }
    let x = g.add(seq, loc)?;
    let masked = match mode {
        Mode::Train(rng) => {
            let mut idx = sample(&mut **rng, len, config.masked_count().min(len)).into_vec();
            idx.sort_unstable();
            idx
        }
        Mode::Eval => Vec::new(),
    };
    let mask = (!masked.is_empty()).then(|| {
        Tensor::from_fn(&[len, len], |i| if masked.contains(&(i % len)) { T::zero() } else { T::one() })
    });
    let scale = T::of(1.0 / (config.d_k() as f64).sqrt());
    let (mut scores, mut weights, mut heads) = (Vec::new(), Vec::new(), Vec::new());
    for h in 0..config.heads {
        let q = params.var(g, &format!("attn.{h}.q"))?;
        let k = params.var(g, &format!("attn.{h}.k"))?;
        let v = params.var(g, &format!("attn.{h}.v"))?;
        let q = g.matmul(x, q)?;
        let k = g.matmul(x, k)?;
        let v = g.matmul(x, v)?;
        let kt = g.transpose(k)?;
        let raw = g.matmul(q, kt)?;
        let a_self = g.scale(raw, scale);
        let mut a_w = g.softmax_rows(a_self);
        if let Some(m) = &mask {
            a_w = g.mul_const(a_w, m.clone())?;
        }
        heads.push(g.matmul(a_w, v)?);
        scores.push(a_self);
        weights.push(a_w);
    }
    let attended = g.concat_cols(&heads)?;
    Ok((scores, weights, attended, x, masked))
}

/// Position-wise `max(0, x W1 + b1) W2 + b2`.
pub fn pffn_vars<T: Scalar>(g: &mut Graph<T>, params: &ParamStore<T>, x: Var) -> Result<Var, ModelError> {
    let w1 = params.var(g, "ffn.w1")?;
    let b1 = params.var(g, "ffn.b1")?;
    let w2 = params.var(g, "ffn.w2")?;
    let b2 = params.var(g, "ffn.b2")?;
    let h = g.matmul(x, w1)?;
    let h = g.add_row(h, b1)?;
    let h = g.relu(h);
    let y = g.matmul(h, w2)?;
    Ok(g.add_row(y, b2)?)
}

/// Records a full forward pass for one chunk given as a `[C, T, H, W]`
/// tensor.
pub fn forward_vars<T: Scalar>(
    g: &mut Graph<T>,
    params: &ParamStore<T>,
    config: &ModelConfig,
    input: Tensor<T>,
    mode: &mut Mode,
) -> Result<ForwardVars, ModelError> {
    let want = config.input_shape();
    if input.shape() != want {
        let s = input.shape();
        let got = [0, 1, 2, 3].map(|i| s.get(i).copied().unwrap_or(0));
        return Err(ModelError::ShapeMismatch { got, want });
    }
    let x = g.input(input);
    let (pooled, features) = encode_vars(g, params, config, x)?;
    let (a_self, a_weights, attended, embedded, masked) = attend_vars(g, params, config, features, mode)?;
    let eps = T::of(RESIDUAL_EPS);
    let y = if config.heads * config.d_k() == config.d_model() {
        let a = dropout(g, attended, config.dropout, mode)?;
        let r = g.add(embedded, a)?;
        g.standardize_rows(r, eps)
    } else {
        attended
    };
    let f = pffn_vars(g, params, y)?;
    let f = dropout(g, f, config.dropout, mode)?;
    let z = if g.value(f).shape() == g.value(y).shape() {
        let r = g.add(y, f)?;
        g.standardize_rows(r, eps)
    } else {
        f
    };
    // The classifier is position-wise; only the classification position is read.
    let w = params.var(g, "head.w")?;
    let b = params.var(g, "head.b")?;
    let all = g.matmul(z, w)?;
    let all = g.add_row(all, b)?;
    let logits = g.select_row(all, 0)?;
    Ok(ForwardVars {
        pooled,
        features,
        a_self,
        a_weights,
        attended,
        masked,
        logits,
    })
}

/// The network with fixed parameters, for inference.
#[derive(Debug, Clone)]
pub struct RrCommNet {
    pub config: ModelConfig,
    pub params: ParamStore<f32>,
}

impl RrCommNet {
    pub fn new(config: ModelConfig, params: ParamStore<f32>) -> Result<Self, ModelError> {
        config.check_params(&params)?;
        Ok(RrCommNet { config, params })
    }

    pub fn init(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        let params = config.init_params(seed)?;
        Ok(RrCommNet { config, params })
    }

    /// Logits for a preprocessed chunk (already cropped and normalized).
    pub fn logits(&self, chunk: &Chunk) -> Result<Vec<f32>, ModelError> {
        let mut g = Graph::new();
        let fv = forward_vars(&mut g, &self.params, &self.config, checked_input(&self.config, chunk)?, &mut Mode::Eval)?;
        Ok(g.value(fv.logits).data().to_vec())
    }

    /// Logits for several chunks. Each is computed on its own tape, so
    /// results never depend on batch composition.
    pub fn logits_batch(&self, chunks: &[Chunk]) -> Result<Vec<Vec<f32>>, ModelError> {
        chunks.iter().map(|c| self.logits(c)).collect()
    }

    /// Encoder output before and after channel standardization, `T' x C'`.
    pub fn encode(&self, chunk: &Chunk) -> Result<(Tensor<f32>, Tensor<f32>), ModelError> {
        let mut g = Graph::new();
        let x = g.input(checked_input(&self.config, chunk)?);
        let (pooled, features) = encode_vars(&mut g, &self.params, &self.config, x)?;
        Ok((g.value(pooled).clone(), g.value(features).clone()))
    }

    /// Attention pass over a given feature sequence.
    pub fn attend(&self, features: &Tensor<f32>, train: Option<u64>) -> Result<AttentionTrace, ModelError> {
        let mut g = Graph::new();
        let f = g.input(features.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(train.unwrap_or(0));
        let mut mode = match train {
            Some(_) => Mode::Train(&mut rng),
            None => Mode::Eval,
        };
        let (a_self, a_weights, attended, _, masked) = attend_vars(&mut g, &self.params, &self.config, f, &mut mode)?;
        Ok(ForwardVars {
            pooled: f,
            features: f,
            a_self,
            a_weights,
            attended,
            masked,
            logits: f,
        }
        .trace(&g))
    }
}

fn checked_input(config: &ModelConfig, chunk: &Chunk) -> Result<Tensor<f32>, ModelError> {
    let got = [chunk.c, chunk.t, chunk.h, chunk.w];
    if got != config.input_shape() {
        return Err(ModelError::ShapeMismatch {
            got,
            want: config.input_shape(),
        });
    }
    chunk_tensor(chunk)
}

/// A chunk as the `[C, T, H, W]` tensor the encoder consumes.
pub fn chunk_tensor(chunk: &Chunk) -> Result<Tensor<f32>, ModelError> {
    Ok(Tensor::new(&[chunk.c, chunk.t, chunk.h, chunk.w], chunk.to_channels_first())?)
}
