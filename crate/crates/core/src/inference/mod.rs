//! Multiplication-free deployment engine over finalized models.

mod binary;
mod fixed;
mod float;
mod model;

pub use binary::{infer_binary_fast, xnor_popcount_dot};
pub use fixed::{infer_fixed, FixedOptions, FixedOutput, FixedPointFormat, FixedTrace, OpTrace};
pub use float::{infer_float, infer_float_trace, shift_add_dot, shift_add_term};
pub use model::{fold_batchnorm, layer_label, LayerWeights, ModelSummary, QuantizedLayer, QuantizedModel};

use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Row-wise argmax; the first maximum wins.
pub fn argmax_rows<T: Scalar>(scores: &Tensor<T>) -> Vec<usize> {
    let classes = scores.shape().last().copied().unwrap_or(1);
    scores
        .data()
        .chunks_exact(classes)
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

#[cfg(test)]
mod tests;
