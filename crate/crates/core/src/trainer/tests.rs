use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::network::{ActivationKind, LayerParams, LayerSpec};
use crate::tensor::Tensor;

fn toy_spec() -> NetworkSpec {
    NetworkSpec {
        name: "toy".into(),
        input_shape: vec![4],
        layers: vec![
            LayerSpec::Dense { inputs: 4, outputs: 8 },
            LayerSpec::BatchNorm { features: 8 },
            LayerSpec::Activation(ActivationKind::Relu),
            LayerSpec::Dropout { rate: 0.1 },
            LayerSpec::Dense { inputs: 8, outputs: 2 },
        ],
    }
}

/// Two Gaussian blobs, linearly separable.
fn blobs(n: usize, seed: u64) -> Dataset<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
    let inputs = Tensor::from_fn(&[n, 4], |i| {
        let centre = if labels[i / 4] == 0 { -1.0 } else { 1.0 };
        centre + rng.gen_range(-0.5..0.5)
    });
    Dataset::new(inputs, labels, 2).unwrap()
}

fn blob_splits() -> Splits<f64> {
    Splits { train: blobs(200, 1), val: blobs(50, 2), test: blobs(50, 3) }
}

fn small_config(seed: u64) -> TrainConfig {
    TrainConfig { epochs: 4, batch_size: 20, schedule: LrSchedule::constant(0.01), seed, ..TrainConfig::default() }
}

fn weight_bits(p: &Parameters<f64>) -> Vec<u64> {
    p.trainable().iter().flat_map(|(_, s)| s.iter().map(|v| v.to_bits()).collect::<Vec<_>>()).collect()
}

#[test]
fn adam_zero_gradient_fresh_moments() {
    let (mut m, mut v) = (0.0f64, 0.0f64);
    let d = adam_update(&mut m, &mut v, 0.0, 1, &AdamConfig::default(), 1e-3).unwrap();
    assert_eq!(d, 0.0);
}

#[test]
fn adam_first_step_is_minus_eta() {
    let (mut m, mut v) = (0.0f64, 0.0f64);
    let eta = 1e-3;
    let d = adam_update(&mut m, &mut v, 1.0, 1, &AdamConfig::default(), eta).unwrap();
    // m̂ = 1, v̂ = 1, so the step is η / (1 + ε).
    assert!((d + eta / (1.0 + 1e-8)).abs() < 1e-15);
    assert!((d + eta).abs() <= 1e-6 * eta);
}

#[test]
fn adam_constant_gradient_converges_to_eta() {
    let (mut m, mut v) = (0.0f64, 0.0f64);
    let mut d = 0.0;
    for t in 1..=5000 {
        d = adam_update(&mut m, &mut v, 0.37, t, &AdamConfig::default(), 1e-2).unwrap();
    }
    assert!((d + 1e-2).abs() < 1e-6, "{d}");
    assert!(adam_update(&mut m, &mut v, 1.0, 0, &AdamConfig::default(), 1e-2).is_err());
}

#[test]
fn schedule_decays_at_epoch() {
    let s = LrSchedule::default();
    assert_eq!(s.eta(0), 1e-3);
    assert_eq!(s.eta(39), 1e-3);
    assert!((s.eta(40) - 1e-4).abs() < 1e-18);
}

#[test]
fn config_validation() {
    assert!(TrainConfig::default().validate().is_ok());
    assert!(TrainConfig { batch_size: 0, ..TrainConfig::default() }.validate().is_err());
    assert!(TrainConfig { validation_fraction: 1.0, ..TrainConfig::default() }.validate().is_err());
    assert_ne!(TrainConfig::default().digest(), small_config(0).digest());
}

fn metric(epoch: usize, val_err: f64) -> EpochMetrics {
    EpochMetrics { epoch, train_loss: 0.0, val_err, test_err: 0.0 }
}

#[test]
fn best_epoch_is_argmin_of_validation() {
    assert_eq!(select_best_epoch(&[metric(1, 0.03), metric(2, 0.01), metric(3, 0.02)]), Some(1));
    assert_eq!(select_best_epoch(&[metric(1, 0.3), metric(2, 0.2), metric(3, 0.1)]), Some(2));
    assert_eq!(select_best_epoch(&[metric(1, 0.2), metric(2, 0.1), metric(3, 0.1)]), Some(1));
    assert_eq!(select_best_epoch(&[]), None);
}

#[test]
fn sgd_step_on_one_parameter() {
    let spec = NetworkSpec { name: "one".into(), input_shape: vec![1], layers: vec![LayerSpec::Dense { inputs: 1, outputs: 1 }] };
    let params = Parameters {
        layers: vec![LayerParams::Dense { weights: Tensor::new(vec![1, 1], vec![0.3f64]).unwrap(), bias: vec![0.0] }],
    };
    let mut state = TrainState::from_parameters(&spec, ModelVariant::Lightnn1, params, 0.1).unwrap();
    let config = TrainConfig { optimizer: OptimizerKind::Sgd, rounding: RoundingMode::Nearest, ..TrainConfig::default() };
    let x = Tensor::new(vec![1, 1], vec![1.0]).unwrap();
    let loss = train_minibatch(&mut state, &x, &[0], &config, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    // w_c = 0.25, score 0.25, loss (1 − 0.25)², ∂l/∂w_c = −2 · 0.75 · x = −1.5.
    assert_eq!(loss, 0.5625);
    let w = state.params.layers[0].weights().unwrap().data()[0];
    assert_eq!(w, 0.3 - 0.1 * -1.5);
    assert_eq!(state.step, 1);
}

#[test]
fn zero_gradient_leaves_real_weights_untouched() {
    let spec = NetworkSpec { name: "sep".into(), input_shape: vec![2], layers: vec![LayerSpec::Dense { inputs: 2, outputs: 2 }] };
    let w = vec![1.9, -1.9, 0.3, 0.3];
    let params = Parameters {
        layers: vec![LayerParams::Dense { weights: Tensor::new(vec![2, 2], w.clone()).unwrap(), bias: vec![0.0; 2] }],
    };
    for rounding in [RoundingMode::Nearest, RoundingMode::Stochastic] {
        let mut state = TrainState::from_parameters(&spec, ModelVariant::Lightnn2, params.clone(), 1e-2).unwrap();
        let before = weight_bits(&state.params);
        let config = TrainConfig { rounding, ..TrainConfig::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let constrained = constrain_weights(&state.params, state.variant, rounding, &mut rng.clone()).unwrap();
        assert_ne!(constrained.layers[0].weights().unwrap().data(), &w[..]);
        let x = Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap();
        let loss = train_minibatch(&mut state, &x, &[0], &config, &mut rng).unwrap();
        assert_eq!(loss, 0.0);
        assert_eq!(weight_bits(&state.params), before);
    }
}

#[test]
fn zero_learning_rate_keeps_weights_bit_identical() {
    let spec = toy_spec();
    let data = blobs(100, 5);
    for variant in [ModelVariant::Lightnn2, ModelVariant::Lightnn1Bin, ModelVariant::BinaryNet] {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut state = TrainState::<f64>::init(&spec, variant, 6, 0.0, &mut rng).unwrap();
        let before = weight_bits(&state.params);
        let config = TrainConfig { schedule: LrSchedule::constant(0.0), ..TrainConfig::default() };
        for step in 0..100 {
            let rows: Vec<usize> = (0..10).map(|i| (step * 10 + i) % 100).collect();
            let x = data.inputs.gather_rows(&rows).unwrap();
            let labels: Vec<usize> = rows.iter().map(|&r| data.labels[r]).collect();
            train_minibatch(&mut state, &x, &labels, &config, &mut rng).unwrap();
        }
        assert_eq!(state.step, 100);
        assert_eq!(weight_bits(&state.params), before, "{variant}");
    }
}

#[test]
fn conventional_constraint_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let state = TrainState::<f64>::init(&toy_spec(), ModelVariant::Conventional, 7, 1e-3, &mut rng).unwrap();
    let c = constrain_weights(&state.params, ModelVariant::Conventional, RoundingMode::Stochastic, &mut rng).unwrap();
    assert_eq!(c, state.params);
    assert_eq!(finalize(&state).unwrap().decoded_parameters().unwrap(), state.params);
}

#[test]
fn clipping_keeps_weights_in_codebook_range() {
    let splits = blob_splits();
    for (variant, limit) in [(ModelVariant::Lightnn1, 1.0), (ModelVariant::Lightnn2, 2.0), (ModelVariant::BinaryConnect, 1.0)] {
        let config = TrainConfig { schedule: LrSchedule::constant(5.0), optimizer: OptimizerKind::Sgd, ..small_config(8) };
        let out = run_training(&splits, &toy_spec(), variant, &config).unwrap();
        for (role, s) in out.best.params.trainable() {
            if role == ParamRole::Weight {
                assert!(s.iter().all(|w| w.abs() <= limit), "{variant}");
            }
        }
    }
}

#[test]
fn finalize_is_idempotent_and_on_codebook() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let state = TrainState::<f64>::init(&toy_spec(), ModelVariant::Lightnn1, 9, 1e-3, &mut rng).unwrap();
    let once = finalize(&state).unwrap();
    let again = TrainState::from_parameters(&state.spec, state.variant, once.decoded_parameters().unwrap(), 1e-3).unwrap();
    assert_eq!(finalize(&again).unwrap(), once);
    assert_eq!(once.decoded_parameters().unwrap(), finalized_parameters(&state).unwrap());
}

#[test]
fn training_is_deterministic_and_learns() {
    let splits = blob_splits();
    for variant in [ModelVariant::Conventional, ModelVariant::Lightnn2, ModelVariant::BinaryNet] {
        let a = run_training(&splits, &toy_spec(), variant, &small_config(11)).unwrap();
        let b = run_training(&splits, &toy_spec(), variant, &small_config(11)).unwrap();
        assert_eq!(a.metrics, b.metrics);
        assert_eq!(a.best, b.best);
        assert_eq!(a.metrics.len(), 4);
        assert!(a.best_metrics().val_err <= 0.1, "{variant}: {:?}", a.metrics);
        assert_eq!(Some(a.best_epoch - 1), select_best_epoch(&a.metrics));
    }
}

#[test]
fn empty_split_is_rejected() {
    let mut splits = blob_splits();
    splits.val = splits.val.range(0, 0).unwrap_or_else(|_| Dataset {
        inputs: Tensor::zeros(&[1, 4]),
        labels: vec![],
        classes: 2,
    });
    assert!(run_training(&splits, &toy_spec(), ModelVariant::Lightnn1, &small_config(0)).is_err());
}

#[test]
fn non_finite_loss_aborts() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut state = TrainState::<f64>::init(&toy_spec(), ModelVariant::Conventional, 12, 1e-3, &mut rng).unwrap();
    let x = Tensor::from_fn(&[2, 4], |i| if i == 0 { f64::INFINITY } else { 1.0 });
    let err = train_minibatch(&mut state, &x, &[0, 1], &TrainConfig::default(), &mut rng).unwrap_err();
    assert!(matches!(err, Error::NonFiniteLoss { step: 1, .. }));
}

#[test]
fn metrics_csv_round_trip() {
    let m = vec![metric(1, 0.5), EpochMetrics { epoch: 2, train_loss: 1.25, val_err: 0.0172, test_err: 0.02 }];
    let mut buf = Vec::new();
    write_metrics_csv(&mut buf, &m).unwrap();
    let text = String::from_utf8(buf.clone()).unwrap();
    assert!(text.starts_with("epoch,train_loss,val_err,test_err\n"));
    assert_eq!(read_metrics_csv(&buf[..]).unwrap(), m);
}

#[test]
fn checkpoint_round_trip_and_digest_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let state = TrainState::<f32>::init(&toy_spec(), ModelVariant::Lightnn2Bin, 13, 1e-3, &mut rng).unwrap();
    let ckpt = Checkpoint::new(&TrainConfig::default(), 3, state);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt.json");
    ckpt.save(&path).unwrap();
    assert_eq!(Checkpoint::<f32>::load(&path).unwrap(), ckpt);

    let mut tampered = ckpt.clone();
    tampered.config.epochs = 7;
    assert!(Checkpoint::<f32>::from_json(&tampered.to_json().unwrap()).is_err());
}
