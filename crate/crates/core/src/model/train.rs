//! Adagrad and the epoch loop.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Model, ModelError, ModelSpec, Params, Workspace};
use crate::features::{EncodedExample, Encoder};

/// One training row: encoded input, probability label and loss weight.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingExample {
    pub input: EncodedExample,
    pub label: f64,
    /// Only used when `ModelSpec::weighted` is set.
    pub weight: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean training loss over the epoch's batches, measured before each
    /// batch's update.
    pub train_loss: f64,
    pub valid_loss: Option<f64>,
}

/// `G += g^2; theta -= lr * g / (sqrt(G) + eps)`, elementwise over every
/// tensor.
pub fn adagrad_step(params: &mut Params, accum: &mut Params, grads: &Params, lr: f64, eps: f64) {
    let p = params.tensors_mut();
    let a = accum.tensors_mut();
    let g = grads.tensors();
    assert_eq!(p.len(), g.len(), "gradient shape mismatch");
    for ((p, a), g) in p.into_iter().zip(a).zip(g) {
        assert_eq!(p.len(), g.len(), "gradient shape mismatch");
        for ((p, a), &g) in p.iter_mut().zip(a.iter_mut()).zip(g) {
            if g == 0.0 {
                continue;
            }
            *a += g * g;
            *p -= lr * g / (a.sqrt() + eps);
        }
    }
}

/// Trains a freshly initialized model for exactly `spec.epochs` epochs and
/// returns the final-epoch model with its per-epoch history.
pub fn train(
    spec: ModelSpec,
    encoder: Encoder,
    train_set: &[TrainingExample],
    valid_set: &[TrainingExample],
) -> Result<(Model, Vec<EpochStats>), ModelError> {
    if train_set.is_empty() {
        return Err(ModelError::EmptyDataset);
    }
    let mut model = Model::init(spec, encoder)?;
    for ex in train_set.iter().chain(valid_set) {
        model.check(&ex.input)?;
    }

    let spec = model.spec.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(1);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut grads = Params::zeros_like(&model.params);
    let mut ws = Workspace::new(&model.params);
    let valid: Vec<(&EncodedExample, f64)> = valid_set.iter().map(|e| (&e.input, e.label)).collect();
    let mut history = Vec::with_capacity(spec.epochs);
    let mut batch: Vec<(&EncodedExample, f64)> = Vec::with_capacity(spec.batch_size);
    let mut weights: Vec<f64> = Vec::with_capacity(spec.batch_size);

    for epoch in 0..spec.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(spec.batch_size) {
            batch.clear();
            weights.clear();
            for &i in chunk {
                batch.push((&train_set[i].input, train_set[i].label));
                weights.push(train_set[i].weight);
            }
            let w = spec.weighted.then_some(&weights[..]);
            loss_sum += model.backward_into(&batch, w, &mut grads, &mut ws)?;
            batches += 1;
            adagrad_step(&mut model.params, &mut model.accum, &grads, spec.learning_rate, spec.adagrad_epsilon);
        }
        let valid_loss = if valid.is_empty() {
            None
        } else {
            Some(model.mean_loss(&valid)?)
        };
        history.push(EpochStats {
            epoch: epoch + 1,
            train_loss: loss_sum / batches as f64,
            valid_loss,
        });
    }
    Ok((model, history))
}
