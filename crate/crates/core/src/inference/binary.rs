//! Integer kernels for Dense layers whose inputs are all `±1`.
//!
//! Binary weights use XNOR/popcount: with `d` sign disagreements over `n`
//! inputs the dot product is `n − 2d`. k-ones weights accumulate signed
//! integer multiples of `2^-m_max`. Both sums are exact in floating point
//! too, so the results match the float path bit for bit.

use super::float::{apply_float_layer, check_model_input};
use super::model::{LayerWeights, QuantizedLayer, QuantizedModel};
use crate::error::{Error, Result};
use crate::network::ActivationKind;
use crate::quantization::{CodebookKind, WeightCode};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Bits of `+1` entries, packed LSB-first into 64-bit words.
fn pack_signs(signs: impl Iterator<Item = bool>, n: usize) -> Vec<u64> {
    let mut words = vec![0u64; n.div_ceil(64)];
    for (i, plus) in signs.enumerate() {
        if plus {
            words[i / 64] |= 1 << (i % 64);
        }
    }
    words
}

/// Popcount dot product of `±1` vectors given as packed `+1` bits.
pub fn xnor_popcount_dot(a: &[u64], b: &[u64], n: usize) -> i64 {
    let disagreements: u32 = a.iter().zip(b).map(|(x, y)| (x ^ y).count_ones()).sum();
    n as i64 - 2 * disagreements as i64
}

fn binary_dense<T: Scalar>(x: &Tensor<T>, inputs: usize, outputs: usize, codes: &[WeightCode], bias: &[T]) -> Result<Tensor<T>> {
    let columns: Vec<Vec<u64>> = (0..outputs)
        .map(|j| pack_signs((0..inputs).map(|k| !codes[k * outputs + j].sign().is_negative()), inputs))
        .collect();
    let mut out = Vec::with_capacity(x.len() / inputs * outputs);
    for row in x.data().chunks_exact(inputs) {
        let a = pack_signs(row.iter().map(|&v| v > T::zero()), inputs);
        for (col, &b) in columns.iter().zip(bias) {
            out.push(T::narrow(xnor_popcount_dot(&a, col, inputs) as f64) + b);
        }
    }
    Tensor::new(vec![x.len() / inputs, outputs], out)
}

fn k_ones_dense<T: Scalar>(
    x: &Tensor<T>,
    inputs: usize,
    outputs: usize,
    codes: &[WeightCode],
    bias: &[T],
    scale: u8,
) -> Result<Tensor<T>> {
    let units: Vec<i64> = codes
        .iter()
        .map(|c| {
            let u = c.scaled_magnitude(scale) as i64;
            if c.sign().is_negative() {
                -u
            } else {
                u
            }
        })
        .collect();
    let unit = (-(scale as f64)).exp2();
    let mut out = Vec::with_capacity(x.len() / inputs * outputs);
    let mut acc = vec![0i64; outputs];
    for row in x.data().chunks_exact(inputs) {
        acc.iter_mut().for_each(|a| *a = 0);
        for (&v, col) in row.iter().zip(units.chunks_exact(outputs)) {
            if v > T::zero() {
                acc.iter_mut().zip(col).for_each(|(a, &u)| *a += u);
            } else {
                acc.iter_mut().zip(col).for_each(|(a, &u)| *a -= u);
            }
        }
        out.extend(acc.iter().zip(bias).map(|(&a, &b)| T::narrow(a as f64 * unit) + b));
    }
    Tensor::new(vec![x.len() / inputs, outputs], out)
}

/// Scores using integer kernels on every Dense layer fed by binarized
/// activations; other layers (including the first, which sees real inputs)
/// run on the float path.
pub fn infer_binary_fast<T: Scalar>(model: &QuantizedModel<T>, input: &Tensor<T>) -> Result<Tensor<T>> {
    if !model.variant.binary_activations() {
        return Err(Error::Unsupported(format!(
            "binary fast path needs binarized activations, not {}",
            model.variant
        )));
    }
    let spec = model
        .codebook_spec()
        .ok_or_else(|| Error::Unsupported(format!("{} has no weight codebook", model.variant)))?;
    check_model_input(model, input)?;
    let mut x = input.clone();
    let mut plus_minus = false;
    for layer in &model.layers {
        let fast = match layer {
            QuantizedLayer::Dense { inputs, outputs, weights: LayerWeights::Codes(codes), bias } if plus_minus => {
                if x.shape() != [x.shape()[0], *inputs] {
                    return Err(Error::Shape(format!("dense expects {inputs} inputs, got {:?}", x.shape())));
                }
                Some(match spec.kind {
                    CodebookKind::Binary => binary_dense(&x, *inputs, *outputs, codes, bias)?,
                    CodebookKind::KOnes => k_ones_dense(&x, *inputs, *outputs, codes, bias, spec.m_max)?,
                })
            }
            _ => None,
        };
        x = match fast {
            Some(y) => y,
            None => apply_float_layer(layer, &x)?,
        };
        plus_minus = match layer {
            QuantizedLayer::Activation(ActivationKind::HtanhSign) => true,
            QuantizedLayer::Dropout { .. } | QuantizedLayer::Flatten | QuantizedLayer::MaxPool { .. } => plus_minus,
            _ => false,
        };
    }
    Ok(x)
}
