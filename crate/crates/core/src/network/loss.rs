use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Multi-class squared hinge with one-vs-rest targets `y ∈ {−1, +1}`:
/// `mean_b Σ_j max(0, 1 − y_j·s_j)²`. Returns the loss and `∂loss/∂scores`.
pub fn hinge_loss<T: Scalar>(scores: &Tensor<T>, labels: &[usize]) -> Result<(T, Tensor<T>)> {
    let &[batch, classes] = scores.shape() else {
        return Err(Error::Shape(format!("scores must be [B, classes], got {:?}", scores.shape())));
    };
    if labels.len() != batch {
        return Err(Error::Shape(format!("{} labels for batch of {batch}", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::Shape(format!("label {bad} with {classes} classes")));
    }
    let b = T::narrow(batch as f64);
    let two = T::narrow(2.0);
    let mut total = T::zero();
    let mut grad = Vec::with_capacity(scores.len());
    for (row, &label) in scores.data().chunks_exact(classes).zip(labels) {
        for (j, &s) in row.iter().enumerate() {
            let y = if j == label { T::one() } else { -T::one() };
            let margin = T::one() - y * s;
            if margin > T::zero() {
                total += margin * margin;
                grad.push(-two * y * margin / b);
            } else {
                grad.push(T::zero());
            }
        }
    }
    Ok((total / b, Tensor::new(scores.shape().to_vec(), grad)?))
}
