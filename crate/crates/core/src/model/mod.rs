//! A small feed-forward network over encoded branch features.
//!
//! Input is the encoder's dense vector concatenated with three embedding
//! rows (taken callee, not-taken callee, file). Hidden layers use ReLU; the
//! single output unit uses a sigmoid. Gradients are derived by hand.

mod io;
mod train;

pub use io::{load_model, read_model, save_model, write_model, MODEL_MAGIC};
pub use train::{adagrad_step, train, EpochStats, TrainingExample};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::features::{EncodedExample, Encoder, RawFeatures};

/// Probabilities are clamped to `[CE_EPSILON, 1 - CE_EPSILON]` inside the
/// cross-entropy.
pub const CE_EPSILON: f64 = 1e-7;

/// Logits are clamped to this magnitude so the sigmoid never rounds to
/// exactly 0 or 1.
const LOGIT_LIMIT: f64 = 30.0;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model spec: {0}")]
    InvalidSpec(String),
    #[error("input layout mismatch: expected {expected} dense values, got {actual}")]
    LayoutMismatch { expected: usize, actual: usize },
    #[error("embedding index {index} out of range for table of {rows} rows")]
    EmbeddingOutOfRange { index: usize, rows: usize },
    #[error("cannot train on an empty dataset")]
    EmptyDataset,
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("not a model file or unsupported version: {0}")]
    VersionMismatch(String),
    #[error("corrupt model file in section [{0}]")]
    CorruptModel(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    Mae,
    Mse,
    CrossEntropy,
}

impl LossKind {
    pub fn name(self) -> &'static str {
        match self {
            LossKind::Mae => "mae",
            LossKind::Mse => "mse",
            LossKind::CrossEntropy => "ce",
        }
    }

    pub fn from_name(s: &str) -> Option<LossKind> {
        match s {
            "mae" => Some(LossKind::Mae),
            "mse" => Some(LossKind::Mse),
            "ce" => Some(LossKind::CrossEntropy),
            _ => None,
        }
    }
}

/// Per-example loss of a prediction against a probability label.
pub fn loss(kind: LossKind, pred: f64, label: f64) -> f64 {
    match kind {
        LossKind::Mae => (pred - label).abs(),
        LossKind::Mse => (pred - label) * (pred - label),
        LossKind::CrossEntropy => {
            let p = pred.clamp(CE_EPSILON, 1.0 - CE_EPSILON);
            -(label * p.ln() + (1.0 - label) * (1.0 - p).ln())
        }
    }
}

/// Derivative of [`loss`] with respect to the pre-sigmoid logit.
fn loss_grad_logit(kind: LossKind, logit: f64, label: f64) -> f64 {
    if logit.abs() >= LOGIT_LIMIT {
        return 0.0;
    }
    let p = sigmoid(logit);
    match kind {
        LossKind::Mae => {
            let s = if p > label {
                1.0
            } else if p < label {
                -1.0
            } else {
                0.0
            };
            s * p * (1.0 - p)
        }
        LossKind::Mse => 2.0 * (p - label) * p * (1.0 - p),
        LossKind::CrossEntropy => {
            if !(CE_EPSILON..=1.0 - CE_EPSILON).contains(&p) {
                0.0
            } else {
                p - label
            }
        }
    }
}

pub fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub hidden_layers: usize,
    pub hidden_width: usize,
    pub callee_embed_dim: usize,
    pub file_embed_dim: usize,
    pub loss: LossKind,
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub adagrad_epsilon: f64,
    /// Starting value of every Adagrad accumulator.
    pub adagrad_initial_accumulator: f64,
    pub seed: u64,
    /// Weight each example's loss by its sample count.
    pub weighted: bool,
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec {
            hidden_layers: 5,
            hidden_width: 64,
            callee_embed_dim: 8,
            file_embed_dim: 8,
            loss: LossKind::CrossEntropy,
            batch_size: 200,
            epochs: 100,
            learning_rate: 0.05,
            adagrad_epsilon: 1e-8,
            adagrad_initial_accumulator: 0.1,
            seed: 0,
            weighted: false,
        }
    }
}

impl ModelSpec {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::InvalidSpec(m.to_string()));
        if self.hidden_layers > 5 {
            return bad("hidden_layers must be at most 5");
        }
        if self.hidden_width == 0 {
            return bad("hidden_width must be positive");
        }
        if self.callee_embed_dim == 0 || self.file_embed_dim == 0 {
            return bad("embedding dimensions must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(self.adagrad_epsilon > 0.0 && self.adagrad_epsilon.is_finite()) {
            return bad("adagrad_epsilon must be positive");
        }
        if !(self.adagrad_initial_accumulator >= 0.0 && self.adagrad_initial_accumulator.is_finite()) {
            return bad("adagrad_initial_accumulator must be nonnegative");
        }
        Ok(())
    }
}

/// A fully connected layer. Weights are stored input-major: `w[j * out + i]`
/// connects input `j` to output `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

impl Dense {
    fn zeros(inputs: usize, outputs: usize) -> Self {
        Dense {
            inputs,
            outputs,
            w: vec![0.0; inputs * outputs],
            b: vec![0.0; outputs],
        }
    }

    /// Weight from input `j` to output `i`.
    pub fn weight(&self, i: usize, j: usize) -> f64 {
        self.w[j * self.outputs + i]
    }
}

/// Everything learnable, also reused as the shape of gradients and Adagrad
/// accumulators.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub layers: Vec<Dense>,
    pub callee_embed: Vec<f64>,
    pub file_embed: Vec<f64>,
}

impl Params {
    fn zeros_like(other: &Params) -> Params {
        Params {
            layers: other.layers.iter().map(|l| Dense::zeros(l.inputs, l.outputs)).collect(),
            callee_embed: vec![0.0; other.callee_embed.len()],
            file_embed: vec![0.0; other.file_embed.len()],
        }
    }

    fn fill_zero(&mut self) {
        for t in self.tensors_mut() {
            t.fill(0.0);
        }
    }

    /// All parameter tensors in a fixed order.
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::with_capacity(2 * self.layers.len() + 2);
        for l in &self.layers {
            out.push(&l.w);
            out.push(&l.b);
        }
        out.push(&self.callee_embed);
        out.push(&self.file_embed);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::with_capacity(2 * self.layers.len() + 2);
        for l in &mut self.layers {
            out.push(&mut l.w);
            out.push(&mut l.b);
        }
        out.push(&mut self.callee_embed);
        out.push(&mut self.file_embed);
        out
    }

    pub fn len(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub spec: ModelSpec,
    pub encoder: Encoder,
    pub params: Params,
    /// Adagrad sums of squared gradients, starting at
    /// `spec.adagrad_initial_accumulator`. Only meaningful during training
    /// and not persisted.
    pub accum: Params,
}

fn glorot(rng: &mut ChaCha8Rng, layer: &mut Dense) {
    let limit = (6.0 / (layer.inputs + layer.outputs) as f64).sqrt();
    for w in &mut layer.w {
        *w = rng.random_range(-limit..limit);
    }
}

impl Model {
    /// Glorot-uniform weights, zero biases and U(-0.05, 0.05) embeddings,
    /// drawn from a generator seeded with `spec.seed`.
    pub fn init(spec: ModelSpec, encoder: Encoder) -> Result<Model, ModelError> {
        spec.validate()?;
        let mut params = Model::zero_params(&spec, &encoder);
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        for layer in &mut params.layers {
            glorot(&mut rng, layer);
        }
        for e in params.callee_embed.iter_mut().chain(params.file_embed.iter_mut()) {
            *e = rng.random_range(-0.05..0.05);
        }
        let mut accum = Params::zeros_like(&params);
        for t in accum.tensors_mut() {
            t.fill(spec.adagrad_initial_accumulator);
        }
        Ok(Model {
            spec,
            encoder,
            params,
            accum,
        })
    }

    pub(crate) fn zero_params(spec: &ModelSpec, encoder: &Encoder) -> Params {
        let input = Model::input_len_for(spec, encoder);
        let mut layers = Vec::with_capacity(spec.hidden_layers + 1);
        let mut prev = input;
        for _ in 0..spec.hidden_layers {
            layers.push(Dense::zeros(prev, spec.hidden_width));
            prev = spec.hidden_width;
        }
        layers.push(Dense::zeros(prev, 1));
        Params {
            layers,
            callee_embed: vec![0.0; encoder.callee_table_size() * spec.callee_embed_dim],
            file_embed: vec![0.0; encoder.file_table_size() * spec.file_embed_dim],
        }
    }

    fn input_len_for(spec: &ModelSpec, encoder: &Encoder) -> usize {
        encoder.dense_len() + 2 * spec.callee_embed_dim + spec.file_embed_dim
    }

    pub fn input_len(&self) -> usize {
        Model::input_len_for(&self.spec, &self.encoder)
    }

    fn check(&self, ex: &EncodedExample) -> Result<(), ModelError> {
        let expected = self.encoder.dense_len();
        if ex.dense.len() != expected {
            return Err(ModelError::LayoutMismatch {
                expected,
                actual: ex.dense.len(),
            });
        }
        let tables = [
            self.encoder.callee_table_size(),
            self.encoder.callee_table_size(),
            self.encoder.file_table_size(),
        ];
        for (&index, &rows) in ex.embed.iter().zip(&tables) {
            if index >= rows {
                return Err(ModelError::EmbeddingOutOfRange { index, rows });
            }
        }
        Ok(())
    }

    /// Taken probability of one encoded example, strictly inside (0, 1).
    pub fn forward(&self, ex: &EncodedExample) -> Result<f64, ModelError> {
        self.check(ex)?;
        let mut ws = Workspace::new(&self.params);
        Ok(sigmoid(self.forward_ws(ex, &mut ws)))
    }

    /// Encodes with the stored encoder, then runs the network. Output order
    /// follows input order.
    pub fn predict_batch(&self, examples: &[RawFeatures]) -> Result<Vec<f64>, ModelError> {
        let mut ws = Workspace::new(&self.params);
        examples
            .iter()
            .map(|r| {
                let ex = self.encoder.encode(r);
                self.check(&ex)?;
                Ok(sigmoid(self.forward_ws(&ex, &mut ws)))
            })
            .collect()
    }

    pub fn predict_encoded(&self, examples: &[EncodedExample]) -> Result<Vec<f64>, ModelError> {
        let mut ws = Workspace::new(&self.params);
        examples
            .iter()
            .map(|ex| {
                self.check(ex)?;
                Ok(sigmoid(self.forward_ws(ex, &mut ws)))
            })
            .collect()
    }

    /// Fills `ws.acts` and returns the clamped output logit.
    fn forward_ws(&self, ex: &EncodedExample, ws: &mut Workspace) -> f64 {
        let p = &self.params;
        let x = &mut ws.acts[0];
        x.clear();
        x.extend_from_slice(&ex.dense);
        let cd = self.spec.callee_embed_dim;
        let fd = self.spec.file_embed_dim;
        x.extend_from_slice(&p.callee_embed[ex.embed[0] * cd..(ex.embed[0] + 1) * cd]);
        x.extend_from_slice(&p.callee_embed[ex.embed[1] * cd..(ex.embed[1] + 1) * cd]);
        x.extend_from_slice(&p.file_embed[ex.embed[2] * fd..(ex.embed[2] + 1) * fd]);

        let last = p.layers.len() - 1;
        for (k, layer) in p.layers.iter().enumerate() {
            let (before, after) = ws.acts.split_at_mut(k + 1);
            let input = &before[k];
            let out = &mut after[0];
            out.clear();
            out.extend_from_slice(&layer.b);
            for (j, &xj) in input.iter().enumerate() {
                if xj == 0.0 {
                    continue;
                }
                let row = &layer.w[j * layer.outputs..(j + 1) * layer.outputs];
                for (o, &w) in out.iter_mut().zip(row) {
                    *o += xj * w;
                }
            }
            if k != last {
                for o in out.iter_mut() {
                    if *o < 0.0 {
                        *o = 0.0;
                    }
                }
            }
        }
        ws.acts[last + 1][0].clamp(-LOGIT_LIMIT, LOGIT_LIMIT)
    }

    /// Accumulates `scale * dL/dparams` of one example into `grads` and
    /// returns the example's loss.
    fn backward_one(&self, ex: &EncodedExample, label: f64, scale: f64, grads: &mut Params, ws: &mut Workspace) -> f64 {
        let z = self.forward_ws(ex, ws);
        let kind = self.spec.loss;
        let l = loss(kind, sigmoid(z), label);
        let dz = loss_grad_logit(kind, z, label) * scale;
        if dz == 0.0 {
            return l;
        }

        let layers = &self.params.layers;
        let n = layers.len();
        ws.delta.clear();
        ws.delta.push(dz);
        for k in (0..n).rev() {
            let layer = &layers[k];
            let input = &ws.acts[k];
            let g = &mut grads.layers[k];
            for (gb, &d) in g.b.iter_mut().zip(&ws.delta) {
                *gb += d;
            }
            let need_input_grad = k > 0 || input.len() > ex.dense.len();
            let first_needed = if k > 0 { 0 } else { ex.dense.len() };
            ws.next_delta.clear();
            ws.next_delta.resize(layer.inputs, 0.0);
            for (j, &xj) in input.iter().enumerate() {
                let range = j * layer.outputs..(j + 1) * layer.outputs;
                if xj != 0.0 {
                    for (gw, &d) in g.w[range.clone()].iter_mut().zip(&ws.delta) {
                        *gw += xj * d;
                    }
                }
                if need_input_grad && j >= first_needed && (k == 0 || xj > 0.0) {
                    // ReLU derivative of the previous layer is folded in:
                    // inputs that were clamped to zero pass no gradient.
                    let w = &layer.w[range];
                    ws.next_delta[j] = w.iter().zip(&ws.delta).map(|(a, b)| a * b).sum();
                }
            }
            std::mem::swap(&mut ws.delta, &mut ws.next_delta);
        }

        // `delta` now holds dL/dinput; scatter the embedding slices.
        let dense = ex.dense.len();
        let cd = self.spec.callee_embed_dim;
        let fd = self.spec.file_embed_dim;
        let d = &ws.delta;
        for (slot, base) in [(0, dense), (1, dense + cd)] {
            let row = ex.embed[slot] * cd;
            for t in 0..cd {
                grads.callee_embed[row + t] += d[base + t];
            }
        }
        let row = ex.embed[2] * fd;
        for t in 0..fd {
            grads.file_embed[row + t] += d[dense + 2 * cd + t];
        }
        l
    }

    /// Mean-over-batch gradient. `weights`, when given, scales each
    /// example's loss before averaging.
    pub fn backward(&self, batch: &[(&EncodedExample, f64)], weights: Option<&[f64]>) -> Result<(Params, f64), ModelError> {
        let mut grads = Params::zeros_like(&self.params);
        let mut ws = Workspace::new(&self.params);
        let loss = self.backward_into(batch, weights, &mut grads, &mut ws)?;
        Ok((grads, loss))
    }

    fn backward_into(
        &self,
        batch: &[(&EncodedExample, f64)],
        weights: Option<&[f64]>,
        grads: &mut Params,
        ws: &mut Workspace,
    ) -> Result<f64, ModelError> {
        assert!(!batch.is_empty(), "empty batch");
        grads.fill_zero();
        let inv = 1.0 / batch.len() as f64;
        let mut total = 0.0;
        for (i, (ex, label)) in batch.iter().enumerate() {
            self.check(ex)?;
            let w = weights.map_or(1.0, |w| w[i]);
            total += w * self.backward_one(ex, *label, w * inv, grads, ws);
        }
        Ok(total * inv)
    }

    /// Mean loss over `data` under the current parameters.
    pub fn mean_loss(&self, data: &[(&EncodedExample, f64)]) -> Result<f64, ModelError> {
        let mut ws = Workspace::new(&self.params);
        let mut total = 0.0;
        for (ex, label) in data {
            self.check(ex)?;
            total += loss(self.spec.loss, sigmoid(self.forward_ws(ex, &mut ws)), *label);
        }
        Ok(total / data.len().max(1) as f64)
    }
}

/// Scratch buffers for one forward/backward pass.
struct Workspace {
    acts: Vec<Vec<f64>>,
    delta: Vec<f64>,
    next_delta: Vec<f64>,
}

impl Workspace {
    fn new(params: &Params) -> Self {
        Workspace {
            acts: vec![Vec::new(); params.layers.len() + 1],
            delta: Vec::new(),
            next_delta: Vec::new(),
        }
    }
}
