//! Streaming SVDF encoder/decoder network.
//!
//! An SVDF node factors a 2-D convolution kernel into a feature filter over
//! the input dimension and a time filter over the last `memory` frames:
//!
//! ```text
//! y_n(t) = act( sum_{tau=0}^{T-1} beta_n[tau] * (alpha_n . x_{t-tau}) + b_n )
//! ```
//!
//! with `x_t = 0` for `t < 0`. Because the feature projection `alpha_n . x_t`
//! only depends on the current frame, streaming keeps a ring buffer of the
//! last `T` projections per layer and does one dot product per node per
//! frame. Batch and streaming paths share the same accumulation order, so
//! they agree to the last bit.
//!
//! All parameters live in one flat vector in declaration order (per SVDF
//! layer: feature filters, time filters, bias; per projection: weight, bias),
//! which is also the checkpoint order and the gradient layout.

use std::fs;
use std::io::{self, Read};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::frontend::{FeatureSequence, FEATURE_DIM};
use crate::matrix::{axpy, dot, Matrix};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"KWSF";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: String, got: String },
    #[error("stream state does not belong to this model")]
    StateMismatch,
    #[error("bad checkpoint: {0}")]
    Checkpoint(String),
    #[error("I/O error: {0}")]
    Io(#[from] io::Error),
    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

fn shape_err(expected: impl ToString, got: impl ToString) -> ModelError {
    ModelError::Shape {
        expected: expected.to_string(),
        got: got.to_string(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SvdfLayerConfig {
    pub nodes: usize,
    pub input_dim: usize,
    pub memory: usize,
    pub activation: Activation,
}

/// Linear bottleneck projection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProjectionConfig {
    pub input_dim: usize,
    pub output_dim: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerConfig {
    Svdf(SvdfLayerConfig),
    Projection(ProjectionConfig),
}

impl LayerConfig {
    pub fn input_dim(&self) -> usize {
        match self {
            LayerConfig::Svdf(c) => c.input_dim,
            LayerConfig::Projection(c) => c.input_dim,
        }
    }

    pub fn output_dim(&self) -> usize {
        match self {
            LayerConfig::Svdf(c) => c.nodes,
            LayerConfig::Projection(c) => c.output_dim,
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            LayerConfig::Svdf(c) => c.nodes * (c.input_dim + c.memory + 1),
            LayerConfig::Projection(c) => c.output_dim * c.input_dim + c.output_dim,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub layers: Vec<LayerConfig>,
    /// Number of phoneme-like units predicted by the encoder head.
    pub encoder_output_dim: usize,
    pub decoder_output_dim: usize,
    /// Number of layers belonging to the encoder; its last layer's output is
    /// the encoder logits.
    pub split_index: usize,
}

fn svdf(nodes: usize, input_dim: usize, memory: usize, activation: Activation) -> LayerConfig {
    LayerConfig::Svdf(SvdfLayerConfig {
        nodes,
        input_dim,
        memory,
        activation,
    })
}

fn proj(input_dim: usize, output_dim: usize) -> LayerConfig {
    LayerConfig::Projection(ProjectionConfig {
        input_dim,
        output_dim,
    })
}

impl ModelConfig {
    /// Seven SVDF layers and three bottleneck projections.
    ///
    /// Encoder: SVDF, proj, SVDF, SVDF, proj, SVDF(units). Decoder: SVDF,
    /// proj, SVDF, SVDF(2). The encoder's last SVDF is linear and its output
    /// is read as the encoder logits; the decoder's last SVDF is linear and
    /// yields the two decoder logits.
    pub fn encoder_decoder(nodes: usize, memory: usize, bottleneck: usize, units: usize) -> Self {
        use Activation::{None as Linear, Relu};
        Self {
            layers: vec![
                svdf(nodes, FEATURE_DIM, memory, Relu),
                proj(nodes, bottleneck),
                svdf(nodes, bottleneck, memory, Relu),
                svdf(nodes, nodes, memory, Relu),
                proj(nodes, bottleneck),
                svdf(units, bottleneck, memory, Linear),
                svdf(nodes, units, memory, Relu),
                proj(nodes, bottleneck),
                svdf(nodes, bottleneck, memory, Relu),
                svdf(2, nodes, memory, Linear),
            ],
            encoder_output_dim: units,
            decoder_output_dim: 2,
            split_index: 6,
        }
    }

    /// Fast configuration for desk-scale experiments (about 24k parameters).
    pub fn desk() -> Self {
        Self::encoder_decoder(64, 8, 24, 16)
    }

    /// Configuration sized to the roughly 320k-parameter production budget.
    pub fn full_scale() -> Self {
        Self::encoder_decoder(256, 32, 128, 40)
    }

    pub fn output_dim(&self) -> usize {
        self.encoder_output_dim + self.decoder_output_dim
    }

    pub fn param_count(&self) -> usize {
        param_count(self)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let err = |m: String| Err(ModelError::Config(m));
        if self.layers.is_empty() {
            return err("no layers".into());
        }
        if self.decoder_output_dim != 2 {
            return err(format!("decoder_output_dim must be 2, got {}", self.decoder_output_dim));
        }
        if self.layers[0].input_dim() != FEATURE_DIM {
            return err(format!(
                "first layer input_dim must be {FEATURE_DIM}, got {}",
                self.layers[0].input_dim()
            ));
        }
        for (i, l) in self.layers.iter().enumerate() {
            let counts_ok = match l {
                LayerConfig::Svdf(c) => c.nodes >= 1 && c.input_dim >= 1 && c.memory >= 1,
                LayerConfig::Projection(c) => c.input_dim >= 1 && c.output_dim >= 1,
            };
            if !counts_ok {
                return err(format!("layer {i} has a zero dimension"));
            }
            if i > 0 && self.layers[i - 1].output_dim() != l.input_dim() {
                return err(format!(
                    "layer {i} expects input {} but layer {} outputs {}",
                    l.input_dim(),
                    i - 1,
                    self.layers[i - 1].output_dim()
                ));
            }
        }
        if self.split_index == 0 || self.split_index >= self.layers.len() {
            return err(format!("split_index {} out of range", self.split_index));
        }
        if self.layers[self.split_index - 1].output_dim() != self.encoder_output_dim {
            return err(format!(
                "encoder output layer has {} units, config says {}",
                self.layers[self.split_index - 1].output_dim(),
                self.encoder_output_dim
            ));
        }
        if self.layers.last().map(LayerConfig::output_dim) != Some(2) {
            return err("last layer must output 2 logits".into());
        }
        Ok(())
    }
}

/// Total trainable parameters: `N (F + T + 1)` per SVDF layer and
/// `out * in + out` per projection.
pub fn param_count(config: &ModelConfig) -> usize {
    config.layers.iter().map(LayerConfig::param_count).sum()
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct SvdfLayout {
    nodes: usize,
    input_dim: usize,
    memory: usize,
    activation: Activation,
    feature: usize,
    time: usize,
    bias: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct ProjLayout {
    input_dim: usize,
    output_dim: usize,
    weight: usize,
    bias: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Layout {
    Svdf(SvdfLayout),
    Proj(ProjLayout),
}

fn build_layout(config: &ModelConfig) -> Vec<Layout> {
    let mut offset = 0;
    config
        .layers
        .iter()
        .map(|l| match *l {
            LayerConfig::Svdf(c) => {
                let feature = offset;
                let time = feature + c.nodes * c.input_dim;
                let bias = time + c.nodes * c.memory;
                offset = bias + c.nodes;
                Layout::Svdf(SvdfLayout {
                    nodes: c.nodes,
                    input_dim: c.input_dim,
                    memory: c.memory,
                    activation: c.activation,
                    feature,
                    time,
                    bias,
                })
            }
            LayerConfig::Projection(c) => {
                let weight = offset;
                let bias = weight + c.output_dim * c.input_dim;
                offset = bias + c.output_dim;
                Layout::Proj(ProjLayout {
                    input_dim: c.input_dim,
                    output_dim: c.output_dim,
                    weight,
                    bias,
                })
            }
        })
        .collect()
}

/// Name, shape and offset of one parameter tensor.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorInfo {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub offset: usize,
    pub is_bias: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KwsModel {
    config: ModelConfig,
    params: Vec<f64>,
    layout: Vec<Layout>,
}

/// Parameter gradients, laid out like [`KwsModel::params`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub values: Vec<f64>,
}

impl Gradients {
    pub fn zeros_like(model: &KwsModel) -> Self {
        Self {
            values: vec![0.0; model.params.len()],
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += b;
        }
    }

    pub fn scale(&mut self, k: f64) {
        self.values.iter_mut().for_each(|v| *v *= k);
    }
}

/// Glorot-uniform weights, zero biases.
pub fn init_model<R: Rng>(config: &ModelConfig, rng: &mut R) -> Result<KwsModel, ModelError> {
    config.validate()?;
    let mut model = KwsModel {
        config: config.clone(),
        params: vec![0.0; param_count(config)],
        layout: build_layout(config),
    };
    for t in model.tensors() {
        if t.is_bias {
            continue;
        }
        let s = glorot_limit(t.rows, t.cols);
        for v in &mut model.params[t.offset..t.offset + t.rows * t.cols] {
            *v = rng.gen_range(-s..s);
        }
    }
    Ok(model)
}

/// `sqrt(6 / (fan_in + fan_out))` for a `rows x cols` tensor.
pub fn glorot_limit(rows: usize, cols: usize) -> f64 {
    (6.0 / (rows + cols) as f64).sqrt()
}

/// Per-layer activations kept for the backward pass.
pub struct ForwardCache {
    /// `acts[0]` is the input, `acts[i + 1]` the output of layer `i`.
    acts: Vec<Matrix>,
    /// Feature-filter projections of each SVDF layer.
    inner: Vec<Option<Matrix>>,
}

impl KwsModel {
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self, ModelError> {
        init_model(config, &mut crate::seed::rng(seed, &[0x1417]))
    }

    /// Builds a model around an existing parameter vector.
    pub fn from_params(config: ModelConfig, params: Vec<f64>) -> Result<Self, ModelError> {
        config.validate()?;
        let expected = param_count(&config);
        if params.len() != expected {
            return Err(shape_err(expected, params.len()));
        }
        let layout = build_layout(&config);
        Ok(Self {
            config,
            params,
            layout,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn tensors(&self) -> Vec<TensorInfo> {
        let mut out = Vec::new();
        for (i, l) in self.layout.iter().enumerate() {
            let mut push = |name: &str, rows, cols, offset, is_bias| {
                out.push(TensorInfo {
                    name: format!("layer{i}.{name}"),
                    rows,
                    cols,
                    offset,
                    is_bias,
                })
            };
            match *l {
                Layout::Svdf(s) => {
                    push("feature_filter", s.nodes, s.input_dim, s.feature, false);
                    push("time_filter", s.nodes, s.memory, s.time, false);
                    push("bias", s.nodes, 1, s.bias, true);
                }
                Layout::Proj(p) => {
                    push("weight", p.output_dim, p.input_dim, p.weight, false);
                    push("bias", p.output_dim, 1, p.bias, true);
                }
            }
        }
        out
    }

    fn check_input(&self, feats: &Matrix) -> Result<(), ModelError> {
        let want = self.config.layers[0].input_dim();
        if feats.cols() != want {
            return Err(shape_err(format!("{want} feature columns"), feats.cols()));
        }
        Ok(())
    }

    /// Logits `T x (N + 2)`: encoder logits followed by decoder logits.
    pub fn forward_batch(&self, feats: &FeatureSequence) -> Result<Matrix, ModelError> {
        self.forward_matrix(&feats.vectors)
    }

    pub fn forward_matrix(&self, input: &Matrix) -> Result<Matrix, ModelError> {
        let cache = self.forward_with_cache(input)?;
        Ok(self.logits_from_cache(&cache))
    }

    pub fn logits_from_cache(&self, cache: &ForwardCache) -> Matrix {
        Matrix::hstack(
            &cache.acts[self.config.split_index],
            cache.acts.last().expect("at least one layer"),
        )
    }

    /// Encoder and decoder logits as separate matrices.
    pub fn head_logits(&self, cache: &ForwardCache) -> (Matrix, Matrix) {
        (
            cache.acts[self.config.split_index].clone(),
            cache.acts.last().expect("at least one layer").clone(),
        )
    }

    pub fn forward_with_cache(&self, input: &Matrix) -> Result<ForwardCache, ModelError> {
        self.check_input(input)?;
        let frames = input.rows();
        let mut acts = Vec::with_capacity(self.layout.len() + 1);
        let mut inner = Vec::with_capacity(self.layout.len());
        acts.push(input.clone());
        for l in &self.layout {
            let x = acts.last().expect("input pushed");
            match *l {
                Layout::Svdf(s) => {
                    let alpha = &self.params[s.feature..s.time];
                    let beta = &self.params[s.time..s.bias];
                    let bias = &self.params[s.bias..s.bias + s.nodes];
                    let mut a = Matrix::zeros(frames, s.nodes);
                    for t in 0..frames {
                        let xt = x.row(t);
                        let at = a.row_mut(t);
                        for (n, v) in at.iter_mut().enumerate() {
                            *v = dot(&alpha[n * s.input_dim..(n + 1) * s.input_dim], xt);
                        }
                    }
                    let mut y = Matrix::zeros(frames, s.nodes);
                    for t in 0..frames {
                        let taps = s.memory.min(t + 1);
                        let yt = y.row_mut(t);
                        for (n, out) in yt.iter_mut().enumerate() {
                            let bn = &beta[n * s.memory..(n + 1) * s.memory];
                            let mut acc = 0.0;
                            for (tau, b) in bn.iter().enumerate().take(taps) {
                                acc += b * a.get(t - tau, n);
                            }
                            *out = activate(acc + bias[n], s.activation);
                        }
                    }
                    inner.push(Some(a));
                    acts.push(y);
                }
                Layout::Proj(p) => {
                    let w = &self.params[p.weight..p.bias];
                    let b = &self.params[p.bias..p.bias + p.output_dim];
                    let mut y = Matrix::zeros(frames, p.output_dim);
                    for t in 0..frames {
                        let xt = x.row(t);
                        for (o, out) in y.row_mut(t).iter_mut().enumerate() {
                            *out = dot(&w[o * p.input_dim..(o + 1) * p.input_dim], xt) + b[o];
                        }
                    }
                    inner.push(None);
                    acts.push(y);
                }
            }
        }
        Ok(ForwardCache { acts, inner })
    }

    /// Exact reverse-mode gradients of `sum(upstream * logits)`.
    pub fn backward(&self, feats: &FeatureSequence, upstream: &Matrix) -> Result<Gradients, ModelError> {
        let cache = self.forward_with_cache(&feats.vectors)?;
        self.backward_from_cache(&cache, upstream)
    }

    pub fn backward_from_cache(&self, cache: &ForwardCache, upstream: &Matrix) -> Result<Gradients, ModelError> {
        let frames = cache.acts[0].rows();
        let width = self.config.output_dim();
        if upstream.rows() != frames || upstream.cols() != width {
            return Err(shape_err(
                format!("{frames}x{width} upstream gradient"),
                format!("{}x{}", upstream.rows(), upstream.cols()),
            ));
        }
        let n_enc = self.config.encoder_output_dim;
        let mut grads = vec![0.0; self.params.len()];
        let mut d_out = upstream.columns(n_enc, width);
        let split = self.config.split_index;
        for li in (0..self.layout.len()).rev() {
            if li + 1 == split {
                let enc = upstream.columns(0, n_enc);
                for (d, e) in d_out.as_mut_slice().iter_mut().zip(enc.as_slice()) {
                    *d += e;
                }
            }
            let x = &cache.acts[li];
            let y = &cache.acts[li + 1];
            let need_input_grad = li > 0;
            let mut d_in = Matrix::zeros(if need_input_grad { frames } else { 0 }, x.cols());
            match self.layout[li] {
                Layout::Svdf(s) => {
                    let a = cache.inner[li].as_ref().expect("svdf cache");
                    let alpha = &self.params[s.feature..s.time];
                    let beta = &self.params[s.time..s.bias];
                    // d_out becomes dZ in place
                    if s.activation == Activation::Relu {
                        for (d, &v) in d_out.as_mut_slice().iter_mut().zip(y.as_slice()) {
                            if v <= 0.0 {
                                *d = 0.0;
                            }
                        }
                    }
                    let (g_alpha, rest) = grads[s.feature..s.bias + s.nodes].split_at_mut(s.time - s.feature);
                    let (g_beta, g_bias) = rest.split_at_mut(s.bias - s.time);
                    let mut d_a = Matrix::zeros(frames, s.nodes);
                    for t in 0..frames {
                        let dz = d_out.row(t);
                        let taps = s.memory.min(t + 1);
                        for n in 0..s.nodes {
                            let g = dz[n];
                            if g == 0.0 {
                                continue;
                            }
                            g_bias[n] += g;
                            let bn = &beta[n * s.memory..(n + 1) * s.memory];
                            let gb = &mut g_beta[n * s.memory..(n + 1) * s.memory];
                            for tau in 0..taps {
                                gb[tau] += g * a.get(t - tau, n);
                                let cur = d_a.get(t - tau, n);
                                d_a.set(t - tau, n, cur + g * bn[tau]);
                            }
                        }
                    }
                    for t in 0..frames {
                        let xt = x.row(t);
                        let da = d_a.row(t);
                        for (n, &g) in da.iter().enumerate() {
                            if g == 0.0 {
                                continue;
                            }
                            axpy(g, xt, &mut g_alpha[n * s.input_dim..(n + 1) * s.input_dim]);
                            if need_input_grad {
                                axpy(g, &alpha[n * s.input_dim..(n + 1) * s.input_dim], d_in.row_mut(t));
                            }
                        }
                    }
                }
                Layout::Proj(p) => {
                    let w = &self.params[p.weight..p.bias];
                    let (g_w, g_b) = grads[p.weight..p.bias + p.output_dim].split_at_mut(p.bias - p.weight);
                    for t in 0..frames {
                        let xt = x.row(t);
                        for (o, &g) in d_out.row(t).iter().enumerate() {
                            if g == 0.0 {
                                continue;
                            }
                            g_b[o] += g;
                            axpy(g, xt, &mut g_w[o * p.input_dim..(o + 1) * p.input_dim]);
                            if need_input_grad {
                                axpy(g, &w[o * p.input_dim..(o + 1) * p.input_dim], d_in.row_mut(t));
                            }
                        }
                    }
                }
            }
            d_out = d_in;
        }
        Ok(Gradients { values: grads })
    }

    pub fn stream_init(&self) -> StreamState {
        StreamState {
            rings: self
                .layout
                .iter()
                .map(|l| match *l {
                    Layout::Svdf(s) => Some(Ring {
                        nodes: s.nodes,
                        memory: s.memory,
                        data: vec![0.0; s.nodes * s.memory],
                        cursor: 0,
                    }),
                    Layout::Proj(_) => None,
                })
                .collect(),
            frames_seen: 0,
        }
    }

    /// Processes one 120-dim frame and returns its `N + 2` logits.
    pub fn forward_stream(&self, state: &mut StreamState, x_t: &[f64]) -> Result<Vec<f64>, ModelError> {
        if !state.matches(&self.layout) {
            return Err(ModelError::StateMismatch);
        }
        let want = self.config.layers[0].input_dim();
        if x_t.len() != want {
            return Err(shape_err(format!("{want}-dim frame"), x_t.len()));
        }
        let mut cur = x_t.to_vec();
        let mut encoder = Vec::new();
        for (li, l) in self.layout.iter().enumerate() {
            cur = match *l {
                Layout::Svdf(s) => {
                    let ring = state.rings[li].as_mut().expect("checked by matches");
                    let alpha = &self.params[s.feature..s.time];
                    let beta = &self.params[s.time..s.bias];
                    let bias = &self.params[s.bias..s.bias + s.nodes];
                    let slot = ring.cursor;
                    for n in 0..s.nodes {
                        ring.data[slot * s.nodes + n] =
                            dot(&alpha[n * s.input_dim..(n + 1) * s.input_dim], &cur);
                    }
                    let taps = s.memory.min(state.frames_seen + 1);
                    let out = (0..s.nodes)
                        .map(|n| {
                            let bn = &beta[n * s.memory..(n + 1) * s.memory];
                            let mut acc = 0.0;
                            for (tau, b) in bn.iter().enumerate().take(taps) {
                                let idx = (slot + s.memory - tau) % s.memory;
                                acc += b * ring.data[idx * s.nodes + n];
                            }
                            activate(acc + bias[n], s.activation)
                        })
                        .collect();
                    ring.cursor = (slot + 1) % s.memory;
                    out
                }
                Layout::Proj(p) => {
                    let w = &self.params[p.weight..p.bias];
                    let b = &self.params[p.bias..p.bias + p.output_dim];
                    (0..p.output_dim)
                        .map(|o| dot(&w[o * p.input_dim..(o + 1) * p.input_dim], &cur) + b[o])
                        .collect()
                }
            };
            if li + 1 == self.config.split_index {
                encoder = cur.clone();
            }
        }
        state.frames_seen += 1;
        encoder.extend_from_slice(&cur);
        Ok(encoder)
    }

    // -- checkpoint ---------------------------------------------------------

    /// `KWSF`, version (u32 LE), config block (u32 LE length + JSON), then
    /// every parameter as an f32 LE in declaration order.
    pub fn to_checkpoint_bytes(&self) -> Vec<u8> {
        let config = serde_json::to_vec(&self.config).expect("config serializes");
        let mut out = Vec::with_capacity(12 + config.len() + 4 * self.params.len());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(config.len() as u32).to_le_bytes());
        out.extend_from_slice(&config);
        for &p in &self.params {
            out.extend_from_slice(&(p as f32).to_le_bytes());
        }
        out
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Self, ModelError> {
        let bad = |m: &str| ModelError::Checkpoint(m.to_string());
        let mut r = bytes;
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|_| bad("truncated header"))?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(bad("wrong magic"));
        }
        let version = read_u32(&mut r).ok_or_else(|| bad("truncated header"))?;
        if version != CHECKPOINT_VERSION {
            return Err(ModelError::Checkpoint(format!("unsupported version {version}")));
        }
        let len = read_u32(&mut r).ok_or_else(|| bad("truncated header"))? as usize;
        if r.len() < len {
            return Err(bad("truncated config block"));
        }
        let config: ModelConfig = serde_json::from_slice(&r[..len])?;
        r = &r[len..];
        let count = param_count(&config);
        if r.len() != 4 * count {
            return Err(ModelError::Checkpoint(format!(
                "expected {count} parameters, found {} bytes",
                r.len()
            )));
        }
        let params = r
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
            .collect();
        Self::from_params(config, params)
    }

    /// Writes `path` and a `<path>.json` sidecar describing it.
    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        fs::write(path, self.to_checkpoint_bytes())?;
        let mut sidecar = path.as_os_str().to_owned();
        sidecar.push(".json");
        fs::write(sidecar, serde_json::to_vec_pretty(&self.describe())?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        Self::from_checkpoint_bytes(&fs::read(path)?)
    }

    pub fn describe(&self) -> serde_json::Value {
        serde_json::json!({
            "format": "KWSF",
            "format_version": CHECKPOINT_VERSION,
            "param_count": self.params.len(),
            "dtype": "f32-le",
            "config": self.config,
            "tensors": self.tensors(),
        })
    }
}

fn read_u32(r: &mut &[u8]) -> Option<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).ok()?;
    Some(u32::from_le_bytes(b))
}

#[inline]
fn activate(v: f64, act: Activation) -> f64 {
    match act {
        Activation::Relu => v.max(0.0),
        Activation::None => v,
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Ring {
    nodes: usize,
    memory: usize,
    /// `memory x nodes`, slot-major.
    data: Vec<f64>,
    cursor: usize,
}

/// Per-stream ring buffers; one per audio stream.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamState {
    rings: Vec<Option<Ring>>,
    frames_seen: usize,
}

impl StreamState {
    pub fn frames_seen(&self) -> usize {
        self.frames_seen
    }

    fn matches(&self, layout: &[Layout]) -> bool {
        self.rings.len() == layout.len()
            && self.rings.iter().zip(layout).all(|(r, l)| match (r, l) {
                (Some(r), Layout::Svdf(s)) => r.nodes == s.nodes && r.memory == s.memory,
                (None, Layout::Proj(_)) => true,
                _ => false,
            })
    }
}
