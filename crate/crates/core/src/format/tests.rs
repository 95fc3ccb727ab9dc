use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::costmodel::storage_bits;
use crate::inference::fold_batchnorm;
use crate::network::{LayerParams, NetworkSpec, Parameters};

fn model(preset: &str, variant: ModelVariant, seed: u64) -> (NetworkSpec, QuantizedModel<f32>) {
    let spec = NetworkSpec::preset(preset).unwrap().for_variant(variant);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = Parameters::<f32>::init(&spec, &mut rng).unwrap();
    for l in &mut p.layers {
        if let LayerParams::BatchNorm(bn) = l {
            for v in bn.running_var.iter_mut() {
                *v = rng.gen_range(0.1..2.0);
            }
            for v in bn.beta.iter_mut() {
                *v = rng.gen_range(-1.0..1.0);
            }
        }
    }
    let m = QuantizedModel::from_parameters(&spec, &p, variant).unwrap();
    (spec, m)
}

fn floats_bitwise(a: &[f32], b: &[f32]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}

#[test]
fn pack_bits_examples() {
    assert_eq!(pack_bits(&[1, 0, 1, 1], 1), vec![0b1101]);
    assert_eq!(pack_bits(&[0x3, 0xa, 0xf], 4), vec![0xa3, 0x0f]);
    assert_eq!(unpack_bits(&[0xa3, 0x0f], 3, 4), vec![0x3, 0xa, 0xf]);
    assert_eq!(packed_len(9, 1), 2);
}

#[test]
fn round_trip_is_bit_exact_for_every_variant() {
    for v in ModelVariant::ALL {
        for preset in ["mnist-1hidden", "mnist-2conv"] {
            let (_, m) = model(preset, v, 3);
            let bytes = to_bytes(&m).unwrap();
            let back = from_bytes(&bytes).unwrap();
            assert_eq!(back, m, "{v} {preset}");
            assert_eq!(to_bytes(&back).unwrap(), bytes);
            for (a, b) in m.layers.iter().zip(&back.layers) {
                if let (Some(LayerWeights::Raw(x)), Some(LayerWeights::Raw(y))) = (a.weights(), b.weights()) {
                    assert!(floats_bitwise(x, y));
                }
            }
        }
    }
}

#[test]
fn header_layout() {
    let (_, m) = model("mnist-1hidden", ModelVariant::Lightnn2Bin, 1);
    let bytes = to_bytes(&m).unwrap();
    assert_eq!(&bytes[..4], b"LNN1");
    assert_eq!(bytes[4], 1);
    assert_eq!(bytes[5], 4);
    assert_eq!(u16::from_le_bytes([bytes[6], bytes[7]]) as usize, m.layers.len());
}

#[test]
fn file_size_tracks_storage_bits() {
    for v in ModelVariant::ALL {
        let (spec, m) = model("mnist-1hidden", v, 2);
        let bytes = to_bytes(&m).unwrap();
        let info = inspect(&bytes).unwrap();
        assert_eq!(info.storage_bits, storage_bits(&spec, v));
        // layer sizes are whole bytes at every width, so the rest is structure
        let payload_bits = storage_bits(&spec, v);
        let overhead = bytes.len() as u64 * 8 - payload_bits;
        // two batch norms: 100 hidden features and 10 output features
        let bn_bits = 4 * (100 + 10) * 32 + 2 * 2 * 32;
        let structure = 8 + 1 + 4 + 3 * 4 + 4 + spec.name.len() as u64;
        let records = 1 + 1 + 8 + 1 + 4 + 1 + 4 + 1 + 4 + 1 + 8 + 1 + 4;
        assert_eq!(overhead, bn_bits + (structure + records) * 8, "{v}");
    }
}

#[test]
fn inspect_reports_lightnn1_storage() {
    let (_, m) = model("mnist-1hidden", ModelVariant::Lightnn1, 5);
    let info = inspect(&to_bytes(&m).unwrap()).unwrap();
    assert_eq!(info.storage_bits, 321_120);
    assert_eq!(info.layers.last().unwrap().output_shape, vec![10]);
    let total: u64 = info.histogram.iter().map(|h| h.1).sum();
    assert_eq!(total, 79_400);
    assert!(info.histogram.iter().all(|(v, _)| v.abs().log2().fract() == 0.0));
}

#[test]
fn folded_models_round_trip() {
    let (_, m) = model("mnist-2conv", ModelVariant::Lightnn1Bin, 9);
    let folded = fold_batchnorm(&m).unwrap();
    assert_eq!(from_bytes(&to_bytes(&folded).unwrap()).unwrap(), folded);
}

#[test]
fn corrupted_inputs_are_rejected_with_offsets() {
    let (_, m) = model("mnist-1hidden", ModelVariant::Lightnn2, 4);
    let bytes = to_bytes(&m).unwrap();

    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(from_bytes(&bad), Err(Error::Format { offset: 0, .. })));

    let mut bad = bytes.clone();
    bad[4] = 2;
    assert!(matches!(from_bytes(&bad), Err(Error::Format { offset: 4, .. })));

    let mut bad = bytes.clone();
    bad[5] = 7;
    assert!(matches!(from_bytes(&bad), Err(Error::Format { offset: 5, .. })));

    let cut = &bytes[..bytes.len() - 3];
    assert!(matches!(from_bytes(cut), Err(Error::Format { .. })));

    let mut long = bytes.clone();
    long.push(0);
    assert!(matches!(from_bytes(&long), Err(Error::Format { .. })));

    // a k = 2 code with the reserved top bit set
    let first_weight = HEADER_BYTES + 1 + 4 + 3 * 4 + 4 + m.name.len() + 1 + 1 + 8;
    let mut bad = bytes.clone();
    bad[first_weight] |= 0x80;
    match from_bytes(&bad) {
        Err(Error::Format { offset, .. }) => assert_eq!(offset as usize, first_weight),
        other => panic!("{other:?}"),
    }
}

#[test]
fn save_and_load() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.lnn");
    let (_, m) = model("mnist-1hidden", ModelVariant::BinaryNet, 6);
    save(&m, &path).unwrap();
    assert_eq!(load(&path).unwrap(), m);
    assert!(matches!(load(&dir.path().join("missing.lnn")), Err(Error::Io { .. })));
}

proptest! {
    #[test]
    fn pack_unpack_round_trip(values in proptest::collection::vec(any::<u8>(), 0..64), width in 0usize..3) {
        let bits = [1u32, 4, 8][width];
        let mask = ((1u16 << bits) - 1) as u8;
        let vals: Vec<u8> = values.iter().map(|v| v & mask).collect();
        let packed = pack_bits(&vals, bits);
        prop_assert_eq!(packed.len(), packed_len(vals.len(), bits));
        prop_assert_eq!(unpack_bits(&packed, vals.len(), bits), vals);
    }

    #[test]
    fn random_bytes_never_panic(bytes in proptest::collection::vec(any::<u8>(), 0..200)) {
        let mut v = b"LNN1\x01\x02\x02\x00".to_vec();
        v.extend_from_slice(&bytes);
        let _ = from_bytes(&v);
        let _ = from_bytes(&bytes);
    }
}
