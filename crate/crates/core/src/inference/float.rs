use super::model::{LayerWeights, QuantizedLayer, QuantizedModel};
use crate::error::{Error, Result};
use crate::network::{activate, batchnorm_forward_test, dense_forward, Mode};
use crate::quantization::WeightCode;
use crate::scalar::Scalar;
use crate::tensor::{maxpool, window_output, Tensor};

/// `code · x` as shifts and adds: `sign · (x·2^-m1 + x·2^-m2 + …)`, where
/// each scaling only moves the exponent.
#[inline]
pub fn shift_add_term<T: Scalar>(code: &WeightCode, x: T) -> T {
    let mut exps = code.exponents().iter();
    let first = exps.next().map_or(T::zero(), |&m| x.scale_pow2(-(m as i32)));
    let magnitude = exps.fold(first, |acc, &m| acc + x.scale_pow2(-(m as i32)));
    if code.sign().is_negative() {
        -magnitude
    } else {
        magnitude
    }
}

/// Shift-add inner product, accumulated from zero in index order.
pub fn shift_add_dot<T: Scalar>(codes: &[WeightCode], x: &[T]) -> Result<T> {
    if codes.len() != x.len() {
        return Err(Error::Shape(format!("{} codes for {} activations", codes.len(), x.len())));
    }
    let mut acc = T::zero();
    for (c, &v) in codes.iter().zip(x) {
        acc += shift_add_term(c, v);
    }
    Ok(acc)
}

fn check_input<T: Scalar>(model: &QuantizedModel<T>, input: &Tensor<T>) -> Result<()> {
    if input.rank() < 2 || input.shape()[1..] != model.input_shape[..] {
        return Err(Error::Shape(format!(
            "batch {:?} does not match input shape {:?}",
            input.shape(),
            model.input_shape
        )));
    }
    Ok(())
}

/// Dense layer with coded weights; same loop order and zero skipping as
/// [`crate::tensor::matmul`], so the result matches the multiply path bitwise.
fn dense_codes<T: Scalar>(x: &Tensor<T>, codes: &[WeightCode], outputs: usize, bias: &[T]) -> Result<Tensor<T>> {
    let &[batch, inputs] = x.shape() else {
        return Err(Error::Shape(format!("dense input must be [B, n], got {:?}", x.shape())));
    };
    if codes.len() != inputs * outputs {
        return Err(Error::Shape(format!("{} codes for a {inputs}x{outputs} layer", codes.len())));
    }
    let mut out = vec![T::zero(); batch * outputs];
    for (row, acc) in x.data().chunks_exact(inputs).zip(out.chunks_exact_mut(outputs)) {
        for (&v, col) in row.iter().zip(codes.chunks_exact(outputs)) {
            if v == T::zero() {
                continue;
            }
            for (a, c) in acc.iter_mut().zip(col) {
                *a += shift_add_term(c, v);
            }
        }
        for (a, &b) in acc.iter_mut().zip(bias) {
            *a += b;
        }
    }
    Tensor::new(vec![batch, outputs], out)
}

/// Batched convolution with a per-weight term function; mirrors
/// [`crate::tensor::conv2d`] loop order.
#[allow(clippy::too_many_arguments)]
fn conv_with<T: Scalar>(
    x: &Tensor<T>,
    out_ch: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    bias: &[T],
    term: impl Fn(T, usize) -> T,
) -> Result<Tensor<T>> {
    let &[batch, c, h, w] = x.shape() else {
        return Err(Error::Shape(format!("conv input must be [B, C, H, W], got {:?}", x.shape())));
    };
    let oh = window_output(h, kh, stride, pad)?;
    let ow = window_output(w, kw, stride, pad)?;
    let data = x.data();
    let mut out = Vec::with_capacity(batch * out_ch * oh * ow);
    for b in 0..batch {
        let sample = &data[b * c * h * w..(b + 1) * c * h * w];
        for f in 0..out_ch {
            let base = f * c * kh * kw;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = T::zero();
                    for ci in 0..c {
                        for ky in 0..kh {
                            let Some(iy) = (oy * stride + ky).checked_sub(pad).filter(|&y| y < h) else {
                                continue;
                            };
                            for kx in 0..kw {
                                let Some(ix) = (ox * stride + kx).checked_sub(pad).filter(|&v| v < w) else {
                                    continue;
                                };
                                acc += term(sample[(ci * h + iy) * w + ix], base + (ci * kh + ky) * kw + kx);
                            }
                        }
                    }
                    out.push(acc);
                }
            }
        }
    }
    let spatial = oh * ow;
    for (i, v) in out.iter_mut().enumerate() {
        *v += bias[(i / spatial) % out_ch];
    }
    Tensor::new(vec![batch, out_ch, oh, ow], out)
}

/// One layer of the float path.
pub(crate) fn apply_float_layer<T: Scalar>(layer: &QuantizedLayer<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    match layer {
        QuantizedLayer::Dense { inputs, outputs, weights, bias } => match weights {
            LayerWeights::Raw(w) => dense_forward(x, &Tensor::new(vec![*inputs, *outputs], w.clone())?, bias),
            LayerWeights::Codes(codes) => dense_codes(x, codes, *outputs, bias),
        },
        QuantizedLayer::Conv { in_ch, out_ch, kh, kw, stride, pad, weights, bias } => {
            if x.shape().get(1) != Some(in_ch) {
                return Err(Error::Shape(format!("conv expects {in_ch} channels, got {:?}", x.shape())));
            }
            match weights {
                LayerWeights::Raw(w) => conv_with(x, *out_ch, *kh, *kw, *stride, *pad, bias, |v, i| v * w[i]),
                LayerWeights::Codes(c) => {
                    conv_with(x, *out_ch, *kh, *kw, *stride, *pad, bias, |v, i| shift_add_term(&c[i], v))
                }
            }
        }
        QuantizedLayer::BatchNorm(bn) => batchnorm_forward_test(x, bn),
        QuantizedLayer::ScaleShift { scale, shift } => {
            let channels = scale.len();
            if x.shape().get(1) != Some(&channels) {
                return Err(Error::Shape(format!("scale/shift over {channels} channels, input {:?}", x.shape())));
            }
            let spatial: usize = x.shape()[2..].iter().product();
            let mut y = x.clone();
            for (i, v) in y.data_mut().iter_mut().enumerate() {
                let c = (i / spatial) % channels;
                *v = *v * scale[c] + shift[c];
            }
            Ok(y)
        }
        QuantizedLayer::MaxPool { window, stride } => {
            let batch = x.shape()[0];
            let per = x.len() / batch;
            let mut data = Vec::new();
            let mut shape = Vec::new();
            for b in 0..batch {
                let xs = Tensor::new(x.shape()[1..].to_vec(), x.data()[b * per..(b + 1) * per].to_vec())?;
                let (y, _) = maxpool(&xs, *window, *stride)?;
                shape = y.shape().to_vec();
                data.extend(y.into_data());
            }
            shape.insert(0, batch);
            Tensor::new(shape, data)
        }
        QuantizedLayer::Activation(kind) => Ok(x.map(|v| activate(*kind, Mode::Test, v))),
        QuantizedLayer::Dropout { .. } => Ok(x.clone()),
        QuantizedLayer::Flatten => {
            let batch = x.shape()[0];
            x.clone().reshape(&[batch, x.len() / batch])
        }
    }
}

/// Every layer's output, last one being the class scores.
pub fn infer_float_trace<T: Scalar>(model: &QuantizedModel<T>, input: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
    check_input(model, input)?;
    let mut outputs: Vec<Tensor<T>> = Vec::with_capacity(model.layers.len());
    for layer in &model.layers {
        let x = outputs.last().unwrap_or(input);
        let y = apply_float_layer(layer, x)?;
        outputs.push(y);
    }
    Ok(outputs)
}

/// Class scores from the shift-add float path.
pub fn infer_float<T: Scalar>(model: &QuantizedModel<T>, input: &Tensor<T>) -> Result<Tensor<T>> {
    check_input(model, input)?;
    let mut x = input.clone();
    for layer in &model.layers {
        x = apply_float_layer(layer, &x)?;
    }
    Ok(x)
}

pub(crate) fn check_model_input<T: Scalar>(model: &QuantizedModel<T>, input: &Tensor<T>) -> Result<()> {
    check_input(model, input)
}
