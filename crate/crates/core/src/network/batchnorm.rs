//! Batch normalisation over the feature axis of `[B × F × …]` tensors.

use super::params::BatchNormParams;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Values kept from a training-mode forward pass.
#[derive(Clone, Debug)]
pub struct BatchNormCache<T> {
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

fn layout<T: Scalar>(x: &Tensor<T>, features: usize) -> Result<(usize, usize)> {
    let shape = x.shape();
    if shape.is_empty() || shape[0] == 0 {
        return Err(Error::EmptyBatch);
    }
    if shape.get(1) != Some(&features) {
        return Err(Error::Shape(format!("batch norm over {features} features, input {shape:?}")));
    }
    Ok((shape[0], shape[2..].iter().product()))
}

/// Test-time normalisation of one value. Shared with the inference engine so
/// both paths round identically.
#[inline]
pub fn normalize_test<T: Scalar>(x: T, mean: T, inv_std: T, gamma: T, beta: T) -> T {
    (x - mean) * inv_std * gamma + beta
}

pub fn inv_std<T: Scalar>(var: T, epsilon: T) -> T {
    T::one() / (var + epsilon).sqrt()
}

/// Normalises with running statistics.
pub fn batchnorm_forward_test<T: Scalar>(x: &Tensor<T>, p: &BatchNormParams<T>) -> Result<Tensor<T>> {
    let f = p.features();
    let (_, spatial) = layout(x, f)?;
    let inv: Vec<T> = p.running_var.iter().map(|&v| inv_std(v, p.epsilon)).collect();
    let mut out = x.clone();
    for (i, y) in out.data_mut().iter_mut().enumerate() {
        let c = (i / spatial) % f;
        *y = normalize_test(*y, p.running_mean[c], inv[c], p.gamma[c], p.beta[c]);
    }
    Ok(out)
}

/// Normalises with batch statistics (biased variance).
pub fn batchnorm_forward_train<T: Scalar>(
    x: &Tensor<T>,
    p: &BatchNormParams<T>,
) -> Result<(Tensor<T>, BatchNormCache<T>)> {
    let f = p.features();
    let (batch, spatial) = layout(x, f)?;
    let n = T::narrow((batch * spatial) as f64);
    let data = x.data();

    let mut mean = vec![T::zero(); f];
    for (i, &v) in data.iter().enumerate() {
        mean[(i / spatial) % f] += v;
    }
    mean.iter_mut().for_each(|m| *m /= n);

    let mut var = vec![T::zero(); f];
    for (i, &v) in data.iter().enumerate() {
        let c = (i / spatial) % f;
        let d = v - mean[c];
        var[c] += d * d;
    }
    var.iter_mut().for_each(|v| *v /= n);

    let inv: Vec<T> = var.iter().map(|&v| inv_std(v, p.epsilon)).collect();
    let mut xhat = Vec::with_capacity(data.len());
    let mut out = Vec::with_capacity(data.len());
    for (i, &v) in data.iter().enumerate() {
        let c = (i / spatial) % f;
        let h = (v - mean[c]) * inv[c];
        xhat.push(h);
        out.push(h * p.gamma[c] + p.beta[c]);
    }
    Ok((Tensor::new(x.shape().to_vec(), out)?, BatchNormCache { xhat, inv_std: inv, mean, var }))
}

/// Exponential moving average of the batch statistics; the variance is
/// bias-corrected by `n / (n - 1)`.
pub fn update_running<T: Scalar>(p: &mut BatchNormParams<T>, cache: &BatchNormCache<T>, samples: usize) {
    let m = p.momentum;
    let correction = if samples > 1 { T::narrow(samples as f64 / (samples - 1) as f64) } else { T::one() };
    for c in 0..p.features() {
        p.running_mean[c] = m * p.running_mean[c] + (T::one() - m) * cache.mean[c];
        p.running_var[c] = m * p.running_var[c] + (T::one() - m) * cache.var[c] * correction;
    }
}

/// Returns `(dx, dgamma, dbeta)` for a training-mode forward pass.
pub fn batchnorm_backward<T: Scalar>(
    dy: &Tensor<T>,
    cache: &BatchNormCache<T>,
    p: &BatchNormParams<T>,
) -> Result<(Tensor<T>, Vec<T>, Vec<T>)> {
    let f = p.features();
    let (batch, spatial) = layout(dy, f)?;
    let n = T::narrow((batch * spatial) as f64);
    let g = dy.data();

    let mut dgamma = vec![T::zero(); f];
    let mut dbeta = vec![T::zero(); f];
    for (i, &d) in g.iter().enumerate() {
        let c = (i / spatial) % f;
        dgamma[c] += d * cache.xhat[i];
        dbeta[c] += d;
    }
    // dxhat = dy·γ, so Σdxhat = γ·dbeta and Σ(dxhat·xhat) = γ·dgamma.
    let mut dx = Vec::with_capacity(g.len());
    for (i, &d) in g.iter().enumerate() {
        let c = (i / spatial) % f;
        let gamma = p.gamma[c];
        let v = n * d * gamma - gamma * dbeta[c] - cache.xhat[i] * gamma * dgamma[c];
        dx.push(v * cache.inv_std[c] / n);
    }
    Ok((Tensor::new(dy.shape().to_vec(), dx)?, dgamma, dbeta))
}
