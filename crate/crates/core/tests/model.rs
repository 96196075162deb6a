mod common;

use bplab::features::{EncodedExample, Encoder};
use bplab::model::{
    read_model, train, write_model, LossKind, Model, ModelError, ModelSpec, Params, TrainingExample,
};
use common::{random_encoded, toy_encoder};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_spec(seed: u64, hidden_layers: usize, loss: LossKind) -> ModelSpec {
    ModelSpec {
        hidden_layers,
        hidden_width: 8,
        callee_embed_dim: 3,
        file_embed_dim: 2,
        loss,
        batch_size: 16,
        epochs: 10,
        seed,
        ..Default::default()
    }
}

fn encoder(seed: u64) -> Encoder {
    toy_encoder(&mut ChaCha8Rng::seed_from_u64(seed), 60).0
}

fn zero_all(model: &mut Model) {
    for t in model.params.tensors_mut() {
        t.fill(0.0);
    }
}

fn flat(p: &Params) -> Vec<f64> {
    p.tensors().iter().flat_map(|t| t.iter().copied()).collect()
}

fn set_flat(p: &mut Params, k: usize, v: f64) {
    let mut k = k;
    for t in p.tensors_mut() {
        if k < t.len() {
            t[k] = v;
            return;
        }
        k -= t.len();
    }
    panic!("index out of range");
}

#[test]
fn zero_parameters_predict_one_half() {
    let enc = encoder(1);
    let mut model = Model::init(small_spec(1, 2, LossKind::CrossEntropy), enc.clone()).unwrap();
    zero_all(&mut model);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..10 {
        assert_eq!(model.forward(&random_encoded(&mut rng, &enc)).unwrap(), 0.5);
    }
}

#[test]
fn single_affine_layer_with_logit_two() {
    let enc = encoder(1);
    let mut model = Model::init(small_spec(1, 0, LossKind::CrossEntropy), enc.clone()).unwrap();
    assert_eq!(model.params.layers.len(), 1);
    assert_eq!(model.params.layers[0].outputs, 1);
    assert_eq!(model.params.layers[0].inputs, model.input_len());
    zero_all(&mut model);
    model.params.layers[0].b[0] = 2.0;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let p = model.forward(&random_encoded(&mut rng, &enc)).unwrap();
    assert!((p - 0.8808).abs() < 1e-4, "{p}");
}

#[test]
fn outputs_stay_strictly_inside_unit_interval() {
    let enc = encoder(1);
    let mut model = Model::init(small_spec(1, 0, LossKind::CrossEntropy), enc.clone()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for sign in [1.0, -1.0] {
        zero_all(&mut model);
        model.params.layers[0].b[0] = sign * 1e6;
        let p = model.forward(&random_encoded(&mut rng, &enc)).unwrap();
        assert!(p > 0.0 && p < 1.0, "{p}");
    }
}

#[test]
fn layout_mismatch_is_reported() {
    let enc = encoder(1);
    let model = Model::init(small_spec(1, 1, LossKind::CrossEntropy), enc.clone()).unwrap();
    let ex = EncodedExample {
        dense: vec![0.0; enc.dense_len() + 1],
        embed: [0, 0, 0],
    };
    assert!(matches!(model.forward(&ex), Err(ModelError::LayoutMismatch { .. })));
}

#[test]
fn init_is_deterministic_and_validates() {
    let enc = encoder(1);
    let a = Model::init(small_spec(9, 3, LossKind::Mse), enc.clone()).unwrap();
    let b = Model::init(small_spec(9, 3, LossKind::Mse), enc.clone()).unwrap();
    assert_eq!(write_model(&a), write_model(&b));
    let c = Model::init(small_spec(10, 3, LossKind::Mse), enc.clone()).unwrap();
    assert_ne!(flat(&a.params), flat(&c.params));

    // Glorot bounds and embedding range.
    for l in &a.params.layers {
        let limit = (6.0 / (l.inputs + l.outputs) as f64).sqrt();
        assert!(l.w.iter().all(|w| w.abs() <= limit));
        assert!(l.b.iter().all(|&b| b == 0.0));
    }
    assert!(a.params.callee_embed.iter().chain(&a.params.file_embed).all(|e| e.abs() <= 0.05));

    let mut bad = small_spec(1, 2, LossKind::Mse);
    bad.hidden_width = 0;
    assert!(matches!(Model::init(bad, enc), Err(ModelError::InvalidSpec(_))));
}

/// Central finite differences of the mean batch loss for every parameter.
fn max_relative_gradient_error(model: &Model, batch: &[(&EncodedExample, f64)]) -> f64 {
    let (grads, _) = model.backward(batch, None).unwrap();
    let analytic = flat(&grads);
    let base = flat(&model.params);
    let h = 1e-5;
    let mut probe = model.clone();
    let mut worst: f64 = 0.0;
    for k in 0..base.len() {
        set_flat(&mut probe.params, k, base[k] + h);
        let up = probe.mean_loss(batch).unwrap();
        set_flat(&mut probe.params, k, base[k] - h);
        let down = probe.mean_loss(batch).unwrap();
        set_flat(&mut probe.params, k, base[k]);
        let numeric = (up - down) / (2.0 * h);
        let a = analytic[k];
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-7);
        worst = worst.max(err);
    }
    worst
}

#[test]
fn gradients_match_finite_differences() {
    let enc = encoder(5);
    for loss in [LossKind::Mae, LossKind::Mse, LossKind::CrossEntropy] {
        for seed in 0..20u64 {
            let mut model = Model::init(small_spec(seed, 2, loss), enc.clone()).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
            // Nonzero biases keep dead-unit pre-activations off the ReLU kink.
            for l in &mut model.params.layers {
                l.b.iter_mut().for_each(|b| *b = rng.random_range(-0.1..0.1));
            }
            let inputs: Vec<EncodedExample> = (0..4).map(|_| random_encoded(&mut rng, &enc)).collect();
            let batch: Vec<(&EncodedExample, f64)> =
                inputs.iter().map(|x| (x, rng.random_range(0.0..1.0))).collect();
            let err = max_relative_gradient_error(&model, &batch);
            assert!(err <= 1e-4, "loss {:?} seed {seed}: relative error {err}", loss);
        }
    }
}

#[test]
fn no_hidden_layers_is_logistic_regression() {
    let enc = encoder(6);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for seed in 0..5 {
        let model = Model::init(small_spec(seed, 0, LossKind::CrossEntropy), enc.clone()).unwrap();
        let inputs: Vec<EncodedExample> = (0..6).map(|_| random_encoded(&mut rng, &enc)).collect();
        let batch: Vec<(&EncodedExample, f64)> = inputs.iter().map(|x| (x, rng.random_range(0.0..1.0))).collect();
        let (grads, _) = model.backward(&batch, None).unwrap();

        // Closed form: mean of (p - y) * x over the batch, where x is the
        // concatenated input vector.
        let layer = &model.params.layers[0];
        let mut expected_w = vec![0.0; layer.inputs];
        let mut expected_b = 0.0;
        let cd = model.spec.callee_embed_dim;
        let fd = model.spec.file_embed_dim;
        for (ex, y) in &batch {
            let p = model.forward(ex).unwrap();
            let mut x = ex.dense.clone();
            x.extend_from_slice(&model.params.callee_embed[ex.embed[0] * cd..][..cd]);
            x.extend_from_slice(&model.params.callee_embed[ex.embed[1] * cd..][..cd]);
            x.extend_from_slice(&model.params.file_embed[ex.embed[2] * fd..][..fd]);
            for (e, xi) in expected_w.iter_mut().zip(&x) {
                *e += (p - y) * xi / batch.len() as f64;
            }
            expected_b += (p - y) / batch.len() as f64;
        }
        for (g, e) in grads.layers[0].w.iter().zip(&expected_w) {
            assert!((g - e).abs() <= 1e-12, "{g} vs {e}");
        }
        assert!((grads.layers[0].b[0] - expected_b).abs() <= 1e-12);
    }
}

#[test]
fn duplicated_batch_gives_same_gradient() {
    let enc = encoder(8);
    let model = Model::init(small_spec(3, 2, LossKind::CrossEntropy), enc.clone()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let inputs: Vec<EncodedExample> = (0..5).map(|_| random_encoded(&mut rng, &enc)).collect();
    let batch: Vec<(&EncodedExample, f64)> = inputs.iter().map(|x| (x, rng.random_range(0.0..1.0))).collect();
    let doubled: Vec<_> = batch.iter().chain(&batch).copied().collect();
    let (a, _) = model.backward(&batch, None).unwrap();
    let (b, _) = model.backward(&doubled, None).unwrap();
    for (x, y) in flat(&a).iter().zip(flat(&b)) {
        assert!((x - y).abs() <= 1e-12 * x.abs().max(1.0));
    }
}

#[test]
fn unreferenced_embedding_rows_get_no_gradient() {
    let enc = encoder(10);
    assert!(enc.callee_table_size() > 2 && enc.file_table_size() > 2);
    let model = Model::init(small_spec(4, 2, LossKind::Mse), enc.clone()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut ex = random_encoded(&mut rng, &enc);
    ex.embed = [1, 1, 2];
    let (g, _) = model.backward(&[(&ex, 0.9)], None).unwrap();
    let cd = model.spec.callee_embed_dim;
    let fd = model.spec.file_embed_dim;
    for row in 0..enc.callee_table_size() {
        let nonzero = g.callee_embed[row * cd..(row + 1) * cd].iter().any(|&v| v != 0.0);
        assert_eq!(nonzero, row == 1, "callee row {row}");
    }
    for row in 0..enc.file_table_size() {
        let nonzero = g.file_embed[row * fd..(row + 1) * fd].iter().any(|&v| v != 0.0);
        assert_eq!(nonzero, row == 2, "file row {row}");
    }
}

/// Label 1 exactly when the first dense value is positive.
fn separable_set(enc: &Encoder, n: usize, seed: u64) -> Vec<TrainingExample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let input = random_encoded(&mut rng, enc);
            let label = if input.dense[0] > 0.0 { 1.0 } else { 0.0 };
            TrainingExample {
                input,
                label,
                weight: 1.0,
            }
        })
        .collect()
}

#[test]
fn zero_epochs_returns_initial_model() {
    let enc = encoder(12);
    let data = separable_set(&enc, 50, 1);
    let mut spec = small_spec(5, 2, LossKind::CrossEntropy);
    spec.epochs = 0;
    let (trained, history) = train(spec.clone(), enc.clone(), &data, &[]).unwrap();
    assert!(history.is_empty());
    assert_eq!(trained, Model::init(spec, enc).unwrap());
}

#[test]
fn empty_training_set_is_rejected() {
    let enc = encoder(12);
    let err = train(small_spec(1, 1, LossKind::Mse), enc, &[], &[]).unwrap_err();
    assert!(matches!(err, ModelError::EmptyDataset));
}

#[test]
fn training_is_deterministic() {
    let enc = encoder(13);
    let data = separable_set(&enc, 70, 2);
    let valid = separable_set(&enc, 20, 3);
    let spec = small_spec(6, 2, LossKind::CrossEntropy);
    let (m1, h1) = train(spec.clone(), enc.clone(), &data, &valid).unwrap();
    let (m2, h2) = train(spec, enc, &data, &valid).unwrap();
    assert_eq!(h1, h2);
    assert_eq!(write_model(&m1), write_model(&m2));
    assert_eq!(h1.len(), 10);
    assert!(h1.iter().all(|h| h.valid_loss.is_some()));
}

#[test]
fn separable_toy_set_is_learned() {
    let enc = encoder(14);
    let data = separable_set(&enc, 400, 4);
    for seed in 0..3 {
        let mut spec = small_spec(seed, 2, LossKind::CrossEntropy);
        spec.epochs = 100;
        spec.batch_size = 200;
        let pairs: Vec<(&EncodedExample, f64)> = data.iter().map(|e| (&e.input, e.label)).collect();
        let initial = Model::init(spec.clone(), enc.clone()).unwrap().mean_loss(&pairs).unwrap();
        let (model, _) = train(spec, enc.clone(), &data, &[]).unwrap();
        let fin = model.mean_loss(&pairs).unwrap();
        assert!(fin < 0.1, "seed {seed}: final CE {fin}");
        assert!(fin < initial);
    }
}

#[test]
fn accumulators_never_decrease() {
    let enc = encoder(15);
    let data = separable_set(&enc, 90, 5);
    let mut prev: Option<Vec<f64>> = None;
    for epochs in 0..5 {
        let mut spec = small_spec(7, 2, LossKind::Mae);
        spec.epochs = epochs;
        let (m, _) = train(spec, enc.clone(), &data, &[]).unwrap();
        let acc = flat(&m.accum);
        assert!(acc.iter().all(|&a| a >= 0.0));
        if let Some(p) = &prev {
            assert!(p.iter().zip(&acc).all(|(a, b)| b >= a));
        }
        prev = Some(acc);
    }
}

#[test]
fn weighted_training_differs_from_unweighted() {
    let enc = encoder(16);
    let mut data = separable_set(&enc, 60, 6);
    for (i, e) in data.iter_mut().enumerate() {
        e.weight = (i % 5 + 1) as f64;
    }
    let spec = small_spec(8, 1, LossKind::CrossEntropy);
    let (a, _) = train(spec.clone(), enc.clone(), &data, &[]).unwrap();
    let weighted = ModelSpec { weighted: true, ..spec };
    let (b, _) = train(weighted, enc, &data, &[]).unwrap();
    assert_ne!(flat(&a.params), flat(&b.params));
}

#[test]
fn save_and_load_reproduce_predictions_exactly() {
    let enc = encoder(17);
    let data = separable_set(&enc, 80, 7);
    let (model, _) = train(small_spec(9, 3, LossKind::CrossEntropy), enc.clone(), &data, &[]).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.bpmodel");
    bplab::model::save_model(&model, &path).unwrap();
    let loaded = bplab::model::load_model(&path).unwrap();
    assert_eq!(loaded.params, model.params);
    assert_eq!(loaded.encoder, model.encoder);
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    for _ in 0..100 {
        let ex = random_encoded(&mut rng, &enc);
        assert_eq!(
            model.forward(&ex).unwrap().to_bits(),
            loaded.forward(&ex).unwrap().to_bits()
        );
    }
    assert_eq!(write_model(&loaded), write_model(&model));
}

#[test]
fn wrong_magic_and_truncation_are_detected() {
    let enc = encoder(19);
    let model = Model::init(small_spec(1, 1, LossKind::Mse), enc).unwrap();
    let text = write_model(&model);
    let swapped = text.replacen("BPMODEL v1", "BPMODEL v0", 1);
    assert!(matches!(read_model(&swapped), Err(ModelError::VersionMismatch(_))));
    assert!(matches!(read_model("hello\n"), Err(ModelError::VersionMismatch(_))));

    let first_line = text.find('\n').unwrap() + 1;
    for cut in (first_line..text.len() - 1).step_by(37) {
        match read_model(&text[..cut]) {
            Err(ModelError::CorruptModel(_)) => {}
            other => panic!("cut at {cut}: {:?}", other.map(|_| ())),
        }
    }
}

#[test]
fn corrupted_section_is_named() {
    let enc = encoder(20);
    let model = Model::init(small_spec(1, 1, LossKind::Mse), enc).unwrap();
    let text = write_model(&model);
    let broken = text.replacen("hidden_width=8", "hidden_width=eight", 1);
    match read_model(&broken) {
        Err(ModelError::CorruptModel(s)) => assert_eq!(s, "spec"),
        other => panic!("{:?}", other.map(|_| ())),
    }
}

#[test]
fn predict_batch_preserves_order() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let (enc, raws) = toy_encoder(&mut rng, 40);
    let model = Model::init(small_spec(2, 2, LossKind::CrossEntropy), enc.clone()).unwrap();
    let preds = model.predict_batch(&raws).unwrap();
    assert!(preds.iter().all(|&p| p > 0.0 && p < 1.0));

    let mut rev = raws.clone();
    rev.reverse();
    let mut rev_preds = model.predict_batch(&rev).unwrap();
    rev_preds.reverse();
    assert_eq!(preds, rev_preds);

    let single = model.predict_batch(&raws[3..4]).unwrap();
    assert_eq!(single[0], model.forward(&enc.encode(&raws[3])).unwrap());
}
