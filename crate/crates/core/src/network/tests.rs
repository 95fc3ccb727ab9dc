use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::tensor::Tensor;
use crate::variant::ModelVariant;

fn toy_spec(kind: ActivationKind) -> NetworkSpec {
    NetworkSpec {
        name: "toy".into(),
        input_shape: vec![4],
        layers: vec![
            LayerSpec::Dense { inputs: 4, outputs: 4 },
            LayerSpec::BatchNorm { features: 4 },
            LayerSpec::Activation(kind),
            LayerSpec::Dense { inputs: 4, outputs: 2 },
        ],
    }
}

fn conv_spec() -> NetworkSpec {
    NetworkSpec {
        name: "toy-conv".into(),
        input_shape: vec![2, 6, 6],
        layers: vec![
            LayerSpec::Conv2D { in_ch: 2, out_ch: 3, kh: 3, kw: 3, stride: 1, pad: 1 },
            LayerSpec::BatchNorm { features: 3 },
            LayerSpec::Activation(ActivationKind::Relu),
            LayerSpec::MaxPool { window: 2, stride: 2 },
            LayerSpec::Flatten,
            LayerSpec::Dense { inputs: 27, outputs: 3 },
        ],
    }
}

fn loss_of(spec: &NetworkSpec, p: &Parameters<f64>, x: &Tensor<f64>, labels: &[usize]) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let trace = forward(spec, p, x, Mode::Train, &mut rng).unwrap();
    hinge_loss(trace.scores(), labels).unwrap().0
}

/// Central differences over every trainable value.
fn check_gradients(spec: &NetworkSpec, p: &Parameters<f64>, x: &Tensor<f64>, labels: &[usize]) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let trace = forward(spec, p, x, Mode::Train, &mut rng).unwrap();
    let (_, ds) = hinge_loss(trace.scores(), labels).unwrap();
    let grads = backward(spec, p, &trace, &ds).unwrap();
    let analytic: Vec<f64> = grads.trainable().iter().flat_map(|(_, s)| s.to_vec()).collect();

    let h = 1e-3;
    let mut worst: f64 = 0.0;
    let count = analytic.len();
    for idx in 0..count {
        let bump = |delta: f64| {
            let mut q = p.clone();
            let mut seen = 0;
            for (_, s) in q.trainable_mut() {
                if idx < seen + s.len() {
                    s[idx - seen] += delta;
                    break;
                }
                seen += s.len();
            }
            loss_of(spec, &q, x, labels)
        };
        let num = (bump(h) - bump(-h)) / (2.0 * h);
        let a = analytic[idx];
        let rel = (a - num).abs() / a.abs().max(num.abs()).max(1e-4);
        worst = worst.max(rel);
    }
    worst
}

#[test]
fn single_dense_score() {
    let spec = NetworkSpec { name: "d".into(), input_shape: vec![2], layers: vec![LayerSpec::Dense { inputs: 2, outputs: 1 }] };
    let p = Parameters {
        layers: vec![LayerParams::Dense { weights: Tensor::new(vec![2, 1], vec![1.0f32, -1.0]).unwrap(), bias: vec![0.0] }],
    };
    let x = Tensor::new(vec![1, 2], vec![3.0f32, 1.0]).unwrap();
    assert_eq!(predict(&spec, &p, &x).unwrap().data(), &[2.0]);
}

#[test]
fn htanh_and_sign_values() {
    assert_eq!(htanh(-2.0f32), -1.0);
    assert_eq!(htanh(0.3f32), 0.3);
    assert_eq!(htanh(5.0f32), 1.0);
    assert_eq!(sign(0.0f32), 1.0);
    assert_eq!(sign(-0.0f32), 1.0);
    assert_eq!(sign(-1e-9f32), -1.0);
}

#[test]
fn straight_through_gate() {
    assert_eq!(activation_grad(ActivationKind::HtanhSign, 2.0f32), 0.0);
    assert_eq!(activation_grad(ActivationKind::HtanhSign, 0.5f32), 1.0);
    assert_eq!(activation_grad(ActivationKind::HtanhSign, -1.0f32), 1.0);
    assert_eq!(activation_grad(ActivationKind::Relu, 0.0f32), 0.0);
    assert_eq!(activation_grad(ActivationKind::Relu, 0.1f32), 1.0);
}

#[test]
fn binarized_hidden_layer_is_plus_minus_one_in_test_mode() {
    let spec = NetworkSpec::preset("mnist-1hidden").unwrap().for_variant(ModelVariant::BinaryNet);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let p = Parameters::<f32>::init(&spec, &mut rng).unwrap();
    let x = Tensor::from_fn(&[3, 1, 28, 28], |_| rng.gen_range(0.0..1.0));
    let trace = forward(&spec, &p, &x, Mode::Test, &mut rng).unwrap();
    let act = spec.layers.iter().position(|l| matches!(l, LayerSpec::Activation(_))).unwrap();
    assert!(trace.layer_output(act).data().iter().all(|&v| v == 1.0 || v == -1.0));
}

#[test]
fn train_mode_uses_htanh() {
    let spec = toy_spec(ActivationKind::HtanhSign);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let p = Parameters::<f32>::init(&spec, &mut rng).unwrap();
    let x = Tensor::from_fn(&[8, 4], |_| rng.gen_range(-1.0..1.0));
    let trace = forward(&spec, &p, &x, Mode::Train, &mut rng).unwrap();
    let pre = trace.layer_output(1);
    let post = trace.layer_output(2);
    for (&a, &b) in pre.data().iter().zip(post.data()) {
        assert_eq!(b, htanh(a));
    }
}

#[test]
fn test_mode_is_deterministic() {
    let spec = NetworkSpec::preset("mnist-1hidden").unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let p = Parameters::<f32>::init(&spec, &mut rng).unwrap();
    let x = Tensor::from_fn(&[4, 1, 28, 28], |_| rng.gen_range(0.0..1.0));
    let a = forward(&spec, &p, &x, Mode::Test, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    let b = forward(&spec, &p, &x, Mode::Test, &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
    assert_eq!(a.scores(), b.scores());
    assert_eq!(a.scores(), &predict(&spec, &p, &x).unwrap());
}

#[test]
fn dropout_only_in_train_mode() {
    let spec = NetworkSpec { name: "d".into(), input_shape: vec![1000], layers: vec![LayerSpec::Dropout { rate: 0.5 }] };
    let p = Parameters::<f32> { layers: vec![LayerParams::None] };
    let x = Tensor::from_fn(&[1, 1000], |_| 1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let train = forward(&spec, &p, &x, Mode::Train, &mut rng).unwrap();
    let zeros = train.scores().data().iter().filter(|&&v| v == 0.0).count();
    assert!((400..600).contains(&zeros));
    assert!(train.scores().data().iter().all(|&v| v == 0.0 || v == 2.0));
    assert_eq!(predict(&spec, &p, &x).unwrap(), x);
}

#[test]
fn zero_upstream_gradient_gives_zero_gradients() {
    let spec = toy_spec(ActivationKind::Relu);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let p = Parameters::<f32>::init(&spec, &mut rng).unwrap();
    let x = Tensor::from_fn(&[6, 4], |_| rng.gen_range(-1.0..1.0));
    let trace = forward(&spec, &p, &x, Mode::Train, &mut rng).unwrap();
    let g = backward(&spec, &p, &trace, &Tensor::zeros(trace.scores().shape())).unwrap();
    assert!(g.trainable().iter().all(|(_, s)| s.iter().all(|&v| v == 0.0)));
}

#[test]
fn toy_net_gradients_match_finite_differences() {
    for kind in [ActivationKind::Relu, ActivationKind::HtanhSign] {
        let spec = toy_spec(kind);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let p = Parameters::<f64>::init(&spec, &mut rng).unwrap();
        let x = Tensor::from_fn(&[8, 4], |_| rng.gen_range(-1.0..1.0));
        let labels: Vec<usize> = (0..8).map(|i| i % 2).collect();
        let worst = check_gradients(&spec, &p, &x, &labels);
        assert!(worst < 1e-3, "{kind:?}: {worst}");
    }
}

#[test]
fn conv_net_gradients_match_finite_differences() {
    let spec = conv_spec();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let p = Parameters::<f64>::init(&spec, &mut rng).unwrap();
    let x = Tensor::from_fn(&[3, 2, 6, 6], |_| rng.gen_range(-1.0..1.0));
    let worst = check_gradients(&spec, &p, &x, &[0, 1, 2]);
    assert!(worst < 1e-3, "{worst}");
}

#[test]
fn input_gradient_matches_finite_differences() {
    let spec = conv_spec();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let p = Parameters::<f64>::init(&spec, &mut rng).unwrap();
    let x = Tensor::from_fn(&[2, 2, 6, 6], |_| rng.gen_range(-1.0..1.0));
    let labels = [1, 2];
    let trace = forward(&spec, &p, &x, Mode::Train, &mut rng).unwrap();
    let (_, ds) = hinge_loss(trace.scores(), &labels).unwrap();
    let (_, dx) = backward_with_input(&spec, &p, &trace, &ds).unwrap();
    let h = 1e-4;
    for i in (0..x.len()).step_by(7) {
        let (mut xp, mut xm) = (x.clone(), x.clone());
        xp.data_mut()[i] += h;
        xm.data_mut()[i] -= h;
        let num = (loss_of(&spec, &p, &xp, &labels) - loss_of(&spec, &p, &xm, &labels)) / (2.0 * h);
        let a = dx.data()[i];
        assert!((a - num).abs() / a.abs().max(num.abs()).max(1e-4) < 1e-3, "{i}: {a} vs {num}");
    }
}

#[test]
fn backward_needs_training_trace_for_batch_norm() {
    let spec = toy_spec(ActivationKind::Relu);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let p = Parameters::<f32>::init(&spec, &mut rng).unwrap();
    let x = Tensor::from_fn(&[2, 4], |_| 1.0);
    let trace = forward(&spec, &p, &x, Mode::Test, &mut rng).unwrap();
    assert!(backward(&spec, &p, &trace, &Tensor::zeros(&[2, 2])).is_err());
}

#[test]
fn forward_rejects_wrong_input_shape() {
    let spec = toy_spec(ActivationKind::Relu);
    let p = Parameters::<f32>::init(&spec, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert!(matches!(predict(&spec, &p, &Tensor::zeros(&[2, 5])), Err(crate::Error::Shape(_))));
}
