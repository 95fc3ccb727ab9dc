use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::network::{predict, ActivationKind, BatchNormParams, LayerParams, LayerSpec, NetworkSpec, Parameters};
use crate::quantization::{Codebook, CodebookSpec, Sign, WeightCode};
use crate::tensor::Tensor;
use crate::variant::ModelVariant;

fn code(sign: Sign, exps: &[u8]) -> WeightCode {
    WeightCode::new(sign, exps).unwrap()
}

/// Initialised parameters with non-trivial batch-norm statistics.
fn random_params(spec: &NetworkSpec, rng: &mut ChaCha8Rng) -> Parameters<f32> {
    let mut p = Parameters::<f32>::init(spec, rng).unwrap();
    for l in &mut p.layers {
        if let LayerParams::BatchNorm(bn) = l {
            for i in 0..bn.features() {
                bn.gamma[i] = rng.gen_range(0.5..1.5);
                bn.beta[i] = rng.gen_range(-0.5..0.5);
                bn.running_mean[i] = rng.gen_range(-0.3..0.3);
                bn.running_var[i] = rng.gen_range(0.2..2.0);
            }
        }
    }
    p
}

fn model_for(variant: ModelVariant, seed: u64) -> (NetworkSpec, QuantizedModel<f32>, ChaCha8Rng) {
    let spec = NetworkSpec::preset("mnist-1hidden").unwrap().for_variant(variant);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = random_params(&spec, &mut rng);
    let model = QuantizedModel::from_parameters(&spec, &p, variant).unwrap();
    (spec, model, rng)
}

fn images(rng: &mut ChaCha8Rng, n: usize) -> Tensor<f32> {
    // Sparse, MNIST-like: most pixels zero.
    Tensor::from_fn(&[n, 1, 28, 28], |_| if rng.gen_bool(0.8) { 0.0 } else { rng.gen_range(0.0..1.0) })
}

fn bits(t: &Tensor<f32>) -> Vec<u32> {
    t.data().iter().map(|v| v.to_bits()).collect()
}

#[test]
fn shift_add_examples() {
    assert_eq!(shift_add_dot(&[code(Sign::Plus, &[1])], &[8.0f32]).unwrap(), 4.0);
    assert_eq!(shift_add_dot(&[code(Sign::Plus, &[1, 2])], &[8.0f32]).unwrap(), 6.0);
    assert_eq!(shift_add_dot(&[code(Sign::Minus, &[0, 3])], &[8.0f32]).unwrap(), -9.0);
    assert!(shift_add_dot(&[code(Sign::Plus, &[1])], &[1.0f32, 2.0]).is_err());
}

proptest! {
    #[test]
    fn shift_add_matches_decoded_dot(seed in any::<u64>(), k in 1u8..=2) {
        let cb = Codebook::new(CodebookSpec::k_ones(k)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let codes: Vec<WeightCode> = (0..64).map(|_| cb.codes()[rng.gen_range(0..cb.codes().len())]).collect();
        let x: Vec<f32> = (0..64).map(|_| rng.gen_range(-10.0f32..10.0)).collect();
        let mut reference = 0.0f32;
        for (c, &v) in codes.iter().zip(&x) {
            reference += v * c.value() as f32;
        }
        prop_assert_eq!(shift_add_dot(&codes, &x).unwrap().to_bits(), reference.to_bits());
    }
}

#[test]
fn float_path_matches_network_forward_bitwise() {
    for (i, &variant) in ModelVariant::ALL.iter().enumerate() {
        let (spec, model, mut rng) = model_for(variant, i as u64);
        let x = images(&mut rng, 8);
        let reference = predict(&spec, &model.decoded_parameters().unwrap(), &x).unwrap();
        assert_eq!(bits(&infer_float(&model, &x).unwrap()), bits(&reference), "{variant}");
    }
}

#[test]
fn float_path_matches_forward_on_conv_net() {
    let spec = NetworkSpec {
        name: "conv".into(),
        input_shape: vec![1, 8, 8],
        layers: vec![
            LayerSpec::Conv2D { in_ch: 1, out_ch: 3, kh: 3, kw: 3, stride: 1, pad: 1 },
            LayerSpec::BatchNorm { features: 3 },
            LayerSpec::Activation(ActivationKind::Relu),
            LayerSpec::MaxPool { window: 2, stride: 2 },
            LayerSpec::Flatten,
            LayerSpec::Dense { inputs: 48, outputs: 4 },
        ],
    };
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for variant in [ModelVariant::Conventional, ModelVariant::Lightnn2, ModelVariant::BinaryConnect] {
        let p = random_params(&spec, &mut rng);
        let model = QuantizedModel::from_parameters(&spec, &p, variant).unwrap();
        let x = Tensor::from_fn(&[3, 1, 8, 8], |_| rng.gen_range(-1.0..1.0));
        let reference = predict(&spec, &model.decoded_parameters().unwrap(), &x).unwrap();
        assert_eq!(bits(&infer_float(&model, &x).unwrap()), bits(&reference));
    }
}

#[test]
fn binarized_hidden_activations_are_plus_minus_one() {
    let (_, model, mut rng) = model_for(ModelVariant::Lightnn1Bin, 9);
    let x = images(&mut rng, 4);
    let outputs = infer_float_trace(&model, &x).unwrap();
    let act = model.layers.iter().position(|l| matches!(l, QuantizedLayer::Activation(_))).unwrap();
    assert!(outputs[act].data().iter().all(|&v| v == 1.0 || v == -1.0));
}

#[test]
fn zero_input_scores_come_from_batch_norm_shift() {
    let spec = NetworkSpec {
        name: "toy".into(),
        input_shape: vec![2],
        layers: vec![
            LayerSpec::Dense { inputs: 2, outputs: 2 },
            LayerSpec::BatchNorm { features: 2 },
            LayerSpec::Activation(ActivationKind::Relu),
            LayerSpec::Dense { inputs: 2, outputs: 1 },
        ],
    };
    let mut bn = BatchNormParams::<f32>::new(2);
    bn.beta = vec![0.5, -0.25];
    let p = Parameters {
        layers: vec![
            LayerParams::Dense { weights: Tensor::new(vec![2, 2], vec![1.0, -0.5, 0.25, 1.0]).unwrap(), bias: vec![0.0; 2] },
            LayerParams::BatchNorm(bn),
            LayerParams::None,
            LayerParams::Dense { weights: Tensor::new(vec![2, 1], vec![1.0, 1.0]).unwrap(), bias: vec![0.0] },
        ],
    };
    let model = QuantizedModel::from_parameters(&spec, &p, ModelVariant::Lightnn1).unwrap();
    let scores = infer_float(&model, &Tensor::zeros(&[1, 2])).unwrap();
    // relu(0.5) + relu(-0.25)
    assert_eq!(scores.data(), &[0.5]);
}

#[test]
fn fold_identity_and_agreement() {
    let mut bn = BatchNormParams::<f32>::new(3);
    bn.epsilon = 0.0;
    let m = QuantizedModel {
        variant: ModelVariant::Lightnn1,
        name: "bn".into(),
        input_shape: vec![3],
        layers: vec![QuantizedLayer::BatchNorm(bn)],
    };
    let folded = fold_batchnorm(&m).unwrap();
    assert_eq!(folded.layers[0], QuantizedLayer::ScaleShift { scale: vec![1.0; 3], shift: vec![0.0; 3] });

    for variant in [ModelVariant::Lightnn2, ModelVariant::Lightnn1Bin] {
        let (_, model, mut rng) = model_for(variant, 21);
        let folded = fold_batchnorm(&model).unwrap();
        let x = images(&mut rng, 16);
        let a = infer_float_trace(&model, &x).unwrap();
        let b = infer_float_trace(&folded, &x).unwrap();
        let bn = model.layers.iter().position(|l| matches!(l, QuantizedLayer::BatchNorm(_))).unwrap();
        for (&u, &v) in a[bn].data().iter().zip(b[bn].data()) {
            assert!((u - v).abs() <= 1e-5 * u.abs().max(1.0), "{u} vs {v}");
        }
        for (l, f) in model.layers.iter().zip(&folded.layers) {
            assert_eq!(l.weights(), f.weights());
        }
    }
}

#[test]
fn fold_rejects_zero_variance() {
    let mut bn = BatchNormParams::<f32>::new(2);
    bn.running_var[1] = 0.0;
    let m = QuantizedModel { variant: ModelVariant::Lightnn1, name: "bn".into(), input_shape: vec![2], layers: vec![QuantizedLayer::BatchNorm(bn)] };
    assert!(matches!(fold_batchnorm(&m), Err(crate::Error::ZeroVariance { layer: 0 })));
}

#[test]
fn fixed_format_validation() {
    assert!(FixedPointFormat::new(12, 8).is_ok());
    assert!(FixedPointFormat::new(12, 11).is_err());
    assert!(FixedPointFormat::new(12, 0).is_err());
    assert!(FixedPointFormat::new(40, 8).is_err());
    assert_eq!(FixedPointFormat::with_default_frac(12).unwrap(), FixedPointFormat::Q4_8);
    let q = FixedPointFormat::Q4_8;
    assert_eq!(q.quantize(1.0), 256);
    assert_eq!(q.quantize(-0.001), -1);
    assert_eq!(q.quantize(100.0), 2047);
    assert_eq!(q.quantize(-100.0), -2048);
}

fn single_dense(variant: ModelVariant, weights: LayerWeights<f32>, inputs: usize, outputs: usize) -> QuantizedModel<f32> {
    QuantizedModel {
        variant,
        name: "d".into(),
        input_shape: vec![inputs],
        layers: vec![QuantizedLayer::Dense { inputs, outputs, weights, bias: vec![0.0; outputs] }],
    }
}

#[test]
fn fixed_shift_example() {
    let m = single_dense(ModelVariant::Lightnn1, LayerWeights::Codes(vec![code(Sign::Plus, &[2])]), 1, 1);
    let out = infer_fixed(&m, &Tensor::new(vec![1, 1], vec![1.0f32]).unwrap(), FixedPointFormat::Q4_8, FixedOptions::default()).unwrap();
    assert_eq!(out.raw, vec![64]);
    assert_eq!(out.trace.kernel.mults, 0);
    // Arithmetic shift rounds toward negative infinity.
    let out = infer_fixed(&m, &Tensor::new(vec![1, 1], vec![-1.0f32 / 256.0]).unwrap(), FixedPointFormat::Q4_8, FixedOptions::default()).unwrap();
    assert_eq!(out.raw, vec![-1]);
}

#[test]
fn fixed_conventional_needs_quantize_first() {
    let m = single_dense(ModelVariant::Conventional, LayerWeights::Raw(vec![0.5]), 1, 1);
    let x = Tensor::new(vec![1, 1], vec![1.0f32]).unwrap();
    assert!(matches!(
        infer_fixed(&m, &x, FixedPointFormat::Q4_8, FixedOptions::default()),
        Err(crate::Error::Unsupported(_))
    ));
    let out = infer_fixed(&m, &x, FixedPointFormat::Q4_8, FixedOptions { quantize_first: true }).unwrap();
    assert_eq!(out.raw, vec![128]);
    assert!(out.trace.kernel.mults > 0);
}

#[test]
fn fixed_kernel_uses_only_shifts_adds_compares() {
    for variant in [ModelVariant::Lightnn2, ModelVariant::Lightnn1, ModelVariant::BinaryNet] {
        let (_, model, mut rng) = model_for(variant, 31);
        let out = infer_fixed(&model, &images(&mut rng, 2), FixedPointFormat::Q4_8, FixedOptions::default()).unwrap();
        assert_eq!(out.trace.kernel.mults, 0, "{variant}");
        assert!(out.trace.kernel.adds > 0);
    }
}

#[test]
fn wide_fixed_agrees_with_float() {
    for variant in [ModelVariant::Lightnn2, ModelVariant::Lightnn1Bin] {
        let (_, model, mut rng) = model_for(variant, 41);
        let x = images(&mut rng, 50);
        let float = argmax_rows(&infer_float(&model, &x).unwrap());
        let out = infer_fixed(&model, &x, FixedPointFormat::Q16_16, FixedOptions::default()).unwrap();
        let agree = float.iter().zip(out.predictions()).filter(|(a, b)| **a == *b).count();
        assert!(agree >= 48, "{variant}: {agree}/50");
    }
}

#[test]
fn popcount_example() {
    let w = [code(Sign::Plus, &[0]), code(Sign::Minus, &[0]), code(Sign::Plus, &[0])];
    let m = QuantizedModel {
        variant: ModelVariant::BinaryNet,
        name: "b".into(),
        input_shape: vec![3],
        layers: vec![
            QuantizedLayer::Activation(ActivationKind::HtanhSign),
            QuantizedLayer::Dense { inputs: 3, outputs: 1, weights: LayerWeights::Codes(w.to_vec()), bias: vec![0.0] },
        ],
    };
    let scores = infer_binary_fast(&m, &Tensor::new(vec![1, 3], vec![0.5f32, 2.0, 1.0]).unwrap()).unwrap();
    assert_eq!(scores.data(), &[1.0]);
    assert_eq!(xnor_popcount_dot(&[0b111], &[0b101], 3), 1);
}

#[test]
fn binary_fast_matches_float_path() {
    for variant in [ModelVariant::BinaryNet, ModelVariant::Lightnn1Bin, ModelVariant::Lightnn2Bin] {
        let (_, model, mut rng) = model_for(variant, 51);
        let x = images(&mut rng, 20);
        assert_eq!(bits(&infer_binary_fast(&model, &x).unwrap()), bits(&infer_float(&model, &x).unwrap()), "{variant}");
    }
}

#[test]
fn binary_fast_rejects_relu_variants() {
    let (_, model, mut rng) = model_for(ModelVariant::Lightnn1, 61);
    assert!(matches!(infer_binary_fast(&model, &images(&mut rng, 1)), Err(crate::Error::Unsupported(_))));
}

#[test]
fn finalized_lightnn1_weights_are_single_powers_of_two() {
    let (_, model, _) = model_for(ModelVariant::Lightnn1, 71);
    for (v, _) in model.weight_histogram() {
        let m = -v.abs().log2();
        assert!(m.fract() == 0.0 && (0.0..=7.0).contains(&m), "{v}");
    }
}
