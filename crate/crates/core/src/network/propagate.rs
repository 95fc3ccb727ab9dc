//! Hand-written forward and backward passes.

use rand::Rng;

use super::batchnorm::{
    batchnorm_backward, batchnorm_forward_test, batchnorm_forward_train, update_running, BatchNormCache,
};
use super::params::{LayerParams, Parameters};
use super::spec::{ActivationKind, LayerSpec, NetworkSpec};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{conv2d, matmul, matmul_at, matmul_bt, maxpool, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Test,
}

#[derive(Clone, Debug)]
enum Cache<T> {
    None,
    BatchNorm(BatchNormCache<T>),
    Dropout(Vec<T>),
    MaxPool(Vec<usize>),
}

/// Everything the backward pass needs from a forward pass.
#[derive(Clone, Debug)]
pub struct ForwardTrace<T> {
    /// `inputs[i]` is the batched input of layer `i`.
    pub inputs: Vec<Tensor<T>>,
    pub output: Tensor<T>,
    caches: Vec<Cache<T>>,
    pub mode: Mode,
}

impl<T: Scalar> ForwardTrace<T> {
    pub fn scores(&self) -> &Tensor<T> {
        &self.output
    }

    /// Output of layer `i`.
    pub fn layer_output(&self, i: usize) -> &Tensor<T> {
        self.inputs.get(i + 1).unwrap_or(&self.output)
    }

    /// Folds this pass's batch statistics into the running statistics.
    pub fn update_running_stats(&self, params: &mut Parameters<T>) {
        for (i, cache) in self.caches.iter().enumerate() {
            if let (Cache::BatchNorm(c), LayerParams::BatchNorm(bn)) = (cache, &mut params.layers[i]) {
                let shape = self.inputs[i].shape();
                let samples = shape[0] * shape[2..].iter().product::<usize>();
                update_running(bn, c, samples);
            }
        }
    }
}

#[inline]
/// NaN passes through so a diverged run is detected downstream.
pub fn relu<T: Scalar>(x: T) -> T {
    if x > T::zero() || x.is_nan() {
        x
    } else {
        T::zero()
    }
}

#[inline]
pub fn htanh<T: Scalar>(x: T) -> T {
    if x.is_nan() {
        return x;
    }
    x.max(-T::one()).min(T::one())
}

/// `sign(x)` with `sign(0) = +1`.
#[inline]
pub fn sign<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one()
    } else {
        -T::one()
    }
}

pub fn activate<T: Scalar>(kind: ActivationKind, mode: Mode, x: T) -> T {
    match (kind, mode) {
        (ActivationKind::Relu, _) => relu(x),
        (ActivationKind::HtanhSign, Mode::Train) => htanh(x),
        (ActivationKind::HtanhSign, Mode::Test) => sign(x),
    }
}

/// Local derivative used by the backward pass; straight-through for the
/// binarised activation (passes where `|x| ≤ 1`).
pub fn activation_grad<T: Scalar>(kind: ActivationKind, x: T) -> T {
    let pass = match kind {
        ActivationKind::Relu => x > T::zero(),
        ActivationKind::HtanhSign => x.abs() <= T::one(),
    };
    if pass {
        T::one()
    } else {
        T::zero()
    }
}

/// Batched dense layer: `x[B × in] · W + b`.
pub fn dense_forward<T: Scalar>(x: &Tensor<T>, weights: &Tensor<T>, bias: &[T]) -> Result<Tensor<T>> {
    let mut y = matmul(x, weights)?;
    let out = bias.len();
    for row in y.data_mut().chunks_exact_mut(out) {
        for (v, &b) in row.iter_mut().zip(bias) {
            *v += b;
        }
    }
    Ok(y)
}

fn conv_forward<T: Scalar>(x: &Tensor<T>, kernels: &Tensor<T>, bias: &[T], stride: usize, pad: usize) -> Result<Tensor<T>> {
    let batch = x.shape()[0];
    let per = x.len() / batch;
    let sample_shape = &x.shape()[1..];
    let mut data = Vec::new();
    let mut out_shape = Vec::new();
    for b in 0..batch {
        let xs = Tensor::new(sample_shape.to_vec(), x.data()[b * per..(b + 1) * per].to_vec())?;
        let mut y = conv2d(&xs, kernels, stride, pad)?;
        let spatial = y.len() / bias.len();
        for (i, v) in y.data_mut().iter_mut().enumerate() {
            *v += bias[i / spatial];
        }
        out_shape = y.shape().to_vec();
        data.extend(y.into_data());
    }
    let mut shape = vec![batch];
    shape.extend(out_shape);
    Tensor::new(shape, data)
}

fn pool_forward<T: Scalar>(x: &Tensor<T>, window: usize, stride: usize) -> Result<(Tensor<T>, Vec<usize>)> {
    let batch = x.shape()[0];
    let per = x.len() / batch;
    let mut data = Vec::new();
    let mut indices = Vec::new();
    let mut out_shape = Vec::new();
    for b in 0..batch {
        let xs = Tensor::new(x.shape()[1..].to_vec(), x.data()[b * per..(b + 1) * per].to_vec())?;
        let (y, idx) = maxpool(&xs, window, stride)?;
        indices.extend(idx.into_iter().map(|i| i + b * per));
        out_shape = y.shape().to_vec();
        data.extend(y.into_data());
    }
    let mut shape = vec![batch];
    shape.extend(out_shape);
    Ok((Tensor::new(shape, data)?, indices))
}

fn apply_layer<T: Scalar, R: Rng + ?Sized>(
    layer: &LayerSpec,
    params: &LayerParams<T>,
    x: &Tensor<T>,
    mode: Mode,
    rng: &mut R,
) -> Result<(Tensor<T>, Cache<T>)> {
    let mismatch = || Error::Shape(format!("parameters do not match layer {layer:?}"));
    Ok(match (layer, params) {
        (LayerSpec::Dense { .. }, LayerParams::Dense { weights, bias }) => {
            (dense_forward(x, weights, bias)?, Cache::None)
        }
        (LayerSpec::Conv2D { stride, pad, .. }, LayerParams::Conv { kernels, bias }) => {
            (conv_forward(x, kernels, bias, *stride, *pad)?, Cache::None)
        }
        (LayerSpec::BatchNorm { .. }, LayerParams::BatchNorm(bn)) => match mode {
            Mode::Train => {
                let (y, cache) = batchnorm_forward_train(x, bn)?;
                (y, Cache::BatchNorm(cache))
            }
            Mode::Test => (batchnorm_forward_test(x, bn)?, Cache::None),
        },
        (LayerSpec::MaxPool { window, stride }, LayerParams::None) => {
            let (y, idx) = pool_forward(x, *window, *stride)?;
            (y, Cache::MaxPool(idx))
        }
        (LayerSpec::Activation(kind), LayerParams::None) => (x.map(|v| activate(*kind, mode, v)), Cache::None),
        (LayerSpec::Dropout { rate }, LayerParams::None) => {
            if mode == Mode::Test || *rate == 0.0 {
                (x.clone(), Cache::None)
            } else {
                let keep = 1.0 - *rate;
                let scale = T::narrow(1.0 / keep as f64);
                let mask: Vec<T> =
                    (0..x.len()).map(|_| if rng.gen::<f32>() < keep { scale } else { T::zero() }).collect();
                let y = Tensor::new(x.shape().to_vec(), x.data().iter().zip(&mask).map(|(&a, &m)| a * m).collect())?;
                (y, Cache::Dropout(mask))
            }
        }
        (LayerSpec::Flatten, LayerParams::None) => {
            let batch = x.shape()[0];
            (x.clone().reshape(&[batch, x.len() / batch])?, Cache::None)
        }
        _ => return Err(mismatch()),
    })
}

fn check_batch<T: Scalar>(spec: &NetworkSpec, params: &Parameters<T>, batch: &Tensor<T>) -> Result<()> {
    params.check(spec)?;
    if batch.shape().len() < 2 || batch.shape()[1..] != spec.input_shape[..] {
        return Err(Error::Shape(format!(
            "batch {:?} does not match input shape {:?}",
            batch.shape(),
            spec.input_shape
        )));
    }
    Ok(())
}

/// Runs a batch `[B × input_shape…]` through the network. Weights must
/// already be constrained; this module never quantizes.
pub fn forward<T: Scalar, R: Rng + ?Sized>(
    spec: &NetworkSpec,
    params: &Parameters<T>,
    batch: &Tensor<T>,
    mode: Mode,
    rng: &mut R,
) -> Result<ForwardTrace<T>> {
    check_batch(spec, params, batch)?;
    let mut inputs = Vec::with_capacity(spec.layers.len());
    let mut caches = Vec::with_capacity(spec.layers.len());
    let mut x = batch.clone();
    for (layer, p) in spec.layers.iter().zip(&params.layers) {
        let (y, cache) = apply_layer(layer, p, &x, mode, rng)?;
        inputs.push(x);
        caches.push(cache);
        x = y;
    }
    Ok(ForwardTrace { inputs, output: x, caches, mode })
}

/// Test-mode scores without keeping intermediates.
pub fn predict<T: Scalar>(spec: &NetworkSpec, params: &Parameters<T>, batch: &Tensor<T>) -> Result<Tensor<T>> {
    check_batch(spec, params, batch)?;
    let mut rng = rand::rngs::mock::StepRng::new(0, 0);
    let mut x = batch.clone();
    for (layer, p) in spec.layers.iter().zip(&params.layers) {
        x = apply_layer(layer, p, &x, Mode::Test, &mut rng)?.0;
    }
    Ok(x)
}

/// Gradients with respect to the (constrained) parameters used in `trace`.
pub fn backward<T: Scalar>(
    spec: &NetworkSpec,
    params: &Parameters<T>,
    trace: &ForwardTrace<T>,
    dscores: &Tensor<T>,
) -> Result<Parameters<T>> {
    Ok(backward_impl(spec, params, trace, dscores, false)?.0)
}

/// Like [`backward`], also returning the gradient with respect to the input batch.
pub fn backward_with_input<T: Scalar>(
    spec: &NetworkSpec,
    params: &Parameters<T>,
    trace: &ForwardTrace<T>,
    dscores: &Tensor<T>,
) -> Result<(Parameters<T>, Tensor<T>)> {
    let (g, dx) = backward_impl(spec, params, trace, dscores, true)?;
    Ok((g, dx.expect("input gradient requested")))
}

fn backward_impl<T: Scalar>(
    spec: &NetworkSpec,
    params: &Parameters<T>,
    trace: &ForwardTrace<T>,
    dscores: &Tensor<T>,
    need_input_grad: bool,
) -> Result<(Parameters<T>, Option<Tensor<T>>)> {
    if dscores.shape() != trace.output.shape() {
        return Err(Error::Shape(format!("dscores {:?} vs scores {:?}", dscores.shape(), trace.output.shape())));
    }
    let mut grads = params.zeros_like();
    let mut g = dscores.clone();
    // Nothing below the first layer with parameters needs a gradient.
    let first_trainable = params.layers.iter().position(|l| !matches!(l, LayerParams::None)).unwrap_or(0);
    for i in (0..spec.layers.len()).rev() {
        let x = &trace.inputs[i];
        let want_dx = i > first_trainable || need_input_grad;
        if !want_dx && i < first_trainable {
            break;
        }
        let dx = match (&spec.layers[i], &params.layers[i], &trace.caches[i], &mut grads.layers[i]) {
            (LayerSpec::Dense { .. }, LayerParams::Dense { weights, .. }, _, LayerParams::Dense { weights: dw, bias: db }) => {
                *dw = matmul_at(x, &g)?;
                for row in g.data().chunks_exact(db.len()) {
                    for (d, &v) in db.iter_mut().zip(row) {
                        *d += v;
                    }
                }
                if want_dx {
                    matmul_bt(&g, weights)?
                } else {
                    g.clone()
                }
            }
            (
                LayerSpec::Conv2D { stride, pad, .. },
                LayerParams::Conv { kernels, .. },
                _,
                LayerParams::Conv { kernels: dk, bias: db },
            ) => conv_backward(x, kernels, &g, *stride, *pad, dk, db, want_dx)?,
            (LayerSpec::BatchNorm { .. }, LayerParams::BatchNorm(bn), Cache::BatchNorm(cache), LayerParams::BatchNorm(gbn)) => {
                let (dx, dgamma, dbeta) = batchnorm_backward(&g, cache, bn)?;
                gbn.gamma = dgamma;
                gbn.beta = dbeta;
                dx
            }
            (LayerSpec::BatchNorm { .. }, ..) => {
                return Err(Error::Network("backward through batch norm needs a training-mode trace".into()))
            }
            (LayerSpec::Activation(kind), ..) => x.zip_map(&g, |a, d| d * activation_grad(*kind, a))?,
            (LayerSpec::Dropout { .. }, _, Cache::Dropout(mask), _) => {
                Tensor::new(g.shape().to_vec(), g.data().iter().zip(mask).map(|(&d, &m)| d * m).collect())?
            }
            (LayerSpec::Dropout { .. }, ..) => g.clone(),
            (LayerSpec::MaxPool { .. }, _, Cache::MaxPool(idx), _) => {
                let mut dx = Tensor::zeros(x.shape());
                for (&j, &d) in idx.iter().zip(g.data()) {
                    dx.data_mut()[j] += d;
                }
                dx
            }
            (LayerSpec::Flatten, ..) => g.clone().reshape(x.shape())?,
            (layer, ..) => return Err(Error::Network(format!("cannot backpropagate through {layer:?}"))),
        };
        g = dx;
    }
    Ok((grads, need_input_grad.then_some(g)))
}

#[allow(clippy::too_many_arguments)]
fn conv_backward<T: Scalar>(
    x: &Tensor<T>,
    kernels: &Tensor<T>,
    g: &Tensor<T>,
    stride: usize,
    pad: usize,
    dk: &mut Tensor<T>,
    db: &mut [T],
    want_dx: bool,
) -> Result<Tensor<T>> {
    let &[batch, c, h, w] = x.shape() else {
        return Err(Error::Shape(format!("conv input {:?}", x.shape())));
    };
    let &[f, _, kh, kw] = kernels.shape() else {
        return Err(Error::Shape(format!("kernels {:?}", kernels.shape())));
    };
    let &[_, _, oh, ow] = g.shape() else {
        return Err(Error::Shape(format!("conv grad {:?}", g.shape())));
    };
    let mut dx = Tensor::zeros(x.shape());
    let (xd, kd, gd) = (x.data(), kernels.data(), g.data());
    for b in 0..batch {
        for fi in 0..f {
            for oy in 0..oh {
                for ox in 0..ow {
                    let d = gd[((b * f + fi) * oh + oy) * ow + ox];
                    db[fi] += d;
                    if d == T::zero() {
                        continue;
                    }
                    for ci in 0..c {
                        for ky in 0..kh {
                            let Some(iy) = (oy * stride + ky).checked_sub(pad).filter(|&y| y < h) else {
                                continue;
                            };
                            for kx in 0..kw {
                                let Some(ix) = (ox * stride + kx).checked_sub(pad).filter(|&v| v < w) else {
                                    continue;
                                };
                                let xi = ((b * c + ci) * h + iy) * w + ix;
                                let ki = ((fi * c + ci) * kh + ky) * kw + kx;
                                dk.data_mut()[ki] += d * xd[xi];
                                if want_dx {
                                    dx.data_mut()[xi] += d * kd[ki];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(dx)
}
