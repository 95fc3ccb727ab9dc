//! Integer inference over two's-complement fixed-point values.
//!
//! Activations are stored in the format; accumulators are wide (`i64`, or
//! `i128` for the multiply path) and only narrowed, with saturation, when a
//! value is stored as the input of the next weighted layer. Batch-norm scale
//! and shift are quantized to the same fractional precision but kept wide.
//! The final scores are not narrowed.

use serde::{Deserialize, Serialize};

use super::float::check_model_input;
use super::model::{LayerWeights, QuantizedLayer, QuantizedModel};
use crate::error::{Error, Result};
use crate::network::{inv_std, ActivationKind};
use crate::quantization::WeightCode;
use crate::scalar::Scalar;
use crate::tensor::{window_output, Tensor};
use crate::variant::ModelVariant;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FixedPointFormat {
    pub total_bits: u32,
    pub frac_bits: u32,
}

impl FixedPointFormat {
    /// 12-bit default: 4 integer bits (sign included) and 8 fractional bits.
    pub const Q4_8: FixedPointFormat = FixedPointFormat { total_bits: 12, frac_bits: 8 };
    pub const Q16_16: FixedPointFormat = FixedPointFormat { total_bits: 32, frac_bits: 16 };

    pub fn new(total_bits: u32, frac_bits: u32) -> Result<Self> {
        let err = |reason: &'static str| Err(Error::FixedFormat { total_bits, frac_bits, reason: reason.into() });
        if total_bits > 32 {
            return err("at most 32 bits are supported");
        }
        if frac_bits == 0 || frac_bits >= total_bits {
            return err("need 0 < frac_bits < total_bits");
        }
        if total_bits < frac_bits + 2 {
            return err("range must cover [-2, 2)");
        }
        Ok(FixedPointFormat { total_bits, frac_bits })
    }

    /// Q4.8 for 12 bits, Q16.16 for 32 bits, an even split otherwise.
    pub fn with_default_frac(total_bits: u32) -> Result<Self> {
        match total_bits {
            12 => Ok(Self::Q4_8),
            32 => Ok(Self::Q16_16),
            n => Self::new(n, n / 2),
        }
    }

    pub fn max_raw(&self) -> i64 {
        (1i64 << (self.total_bits - 1)) - 1
    }

    pub fn min_raw(&self) -> i64 {
        -(1i64 << (self.total_bits - 1))
    }

    pub fn one(&self) -> i64 {
        1i64 << self.frac_bits
    }

    pub fn saturate(&self, v: i64) -> i64 {
        v.clamp(self.min_raw(), self.max_raw())
    }

    /// `⌊x · 2^frac⌋`, saturated to the format.
    pub fn quantize(&self, x: f64) -> i64 {
        self.saturate(quantize_wide(x, self.frac_bits))
    }

    pub fn to_real(&self, raw: i64) -> f64 {
        raw as f64 / self.one() as f64
    }
}

/// `⌊x · 2^frac⌋` without narrowing.
fn quantize_wide(x: f64, frac_bits: u32) -> i64 {
    (x * (frac_bits as f64).exp2()).floor() as i64
}

/// Primitive operation counts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpTrace {
    pub shifts: u64,
    pub adds: u64,
    pub compares: u64,
    pub mults: u64,
}

impl OpTrace {
    pub fn total(&self) -> u64 {
        self.shifts + self.adds + self.compares + self.mults
    }
}

/// Operations split between the weight kernels (Dense/Conv accumulation) and
/// everything else (bias, batch norm, activations, pooling).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FixedTrace {
    pub kernel: OpTrace,
    pub epilogue: OpTrace,
    pub images: u64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct FixedOptions {
    /// Allow the conventional variant by quantizing its raw weights to the format.
    pub quantize_first: bool,
}

#[derive(Clone, Debug)]
pub struct FixedOutput {
    pub format: FixedPointFormat,
    pub classes: usize,
    /// Raw scores `[B × classes]` at `frac_bits` precision.
    pub raw: Vec<i64>,
    pub trace: FixedTrace,
}

impl FixedOutput {
    pub fn scores(&self) -> Tensor<f64> {
        let data = self.raw.iter().map(|&r| self.format.to_real(r)).collect();
        Tensor::new(vec![self.raw.len() / self.classes, self.classes], data).expect("scores shape")
    }

    /// Argmax per row; the first maximum wins.
    pub fn predictions(&self) -> Vec<usize> {
        self.raw.chunks_exact(self.classes).map(argmax_i64).collect()
    }
}

fn argmax_i64(row: &[i64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

enum FixedWeights {
    Codes(Vec<WeightCode>),
    Raw(Vec<i64>),
}

enum FixedLayer {
    Dense { inputs: usize, outputs: usize, weights: FixedWeights, bias: Vec<i64> },
    Conv { in_ch: usize, out_ch: usize, kh: usize, kw: usize, stride: usize, pad: usize, weights: FixedWeights, bias: Vec<i64> },
    ScaleShift { scale: Vec<i64>, shift: Vec<i64> },
    MaxPool { window: usize, stride: usize },
    Activation(ActivationKind),
    Flatten,
    Passthrough,
}

fn compile<T: Scalar>(model: &QuantizedModel<T>, fmt: FixedPointFormat, opts: FixedOptions) -> Result<Vec<FixedLayer>> {
    if model.variant == ModelVariant::Conventional && !opts.quantize_first {
        return Err(Error::Unsupported(
            "fixed-point inference of a conventional model needs quantize_first".into(),
        ));
    }
    let f = fmt.frac_bits;
    let wide = |v: &[T]| v.iter().map(|x| quantize_wide(x.widen(), f)).collect::<Vec<i64>>();
    let weights = |w: &LayerWeights<T>| match w {
        LayerWeights::Codes(c) => FixedWeights::Codes(c.clone()),
        LayerWeights::Raw(r) => FixedWeights::Raw(r.iter().map(|x| fmt.quantize(x.widen())).collect()),
    };
    model
        .layers
        .iter()
        .map(|l| {
            Ok(match l {
                QuantizedLayer::Dense { inputs, outputs, weights: w, bias } => {
                    FixedLayer::Dense { inputs: *inputs, outputs: *outputs, weights: weights(w), bias: wide(bias) }
                }
                QuantizedLayer::Conv { in_ch, out_ch, kh, kw, stride, pad, weights: w, bias } => FixedLayer::Conv {
                    in_ch: *in_ch,
                    out_ch: *out_ch,
                    kh: *kh,
                    kw: *kw,
                    stride: *stride,
                    pad: *pad,
                    weights: weights(w),
                    bias: wide(bias),
                },
                QuantizedLayer::BatchNorm(bn) => {
                    let scale: Vec<f64> = bn
                        .gamma
                        .iter()
                        .zip(&bn.running_var)
                        .map(|(&g, &v)| (g * inv_std(v, bn.epsilon)).widen())
                        .collect();
                    let shift: Vec<f64> =
                        bn.beta.iter().zip(&bn.running_mean).zip(&scale).map(|((&b, &m), &s)| b.widen() - m.widen() * s).collect();
                    FixedLayer::ScaleShift {
                        scale: scale.iter().map(|&s| quantize_wide(s, f)).collect(),
                        shift: shift.iter().map(|&s| quantize_wide(s, f)).collect(),
                    }
                }
                QuantizedLayer::ScaleShift { scale, shift } => {
                    FixedLayer::ScaleShift { scale: wide(scale), shift: wide(shift) }
                }
                QuantizedLayer::MaxPool { window, stride } => FixedLayer::MaxPool { window: *window, stride: *stride },
                QuantizedLayer::Activation(kind) => FixedLayer::Activation(*kind),
                QuantizedLayer::Dropout { .. } => FixedLayer::Passthrough,
                QuantizedLayer::Flatten => FixedLayer::Flatten,
            })
        })
        .collect()
}

/// Applies one weight to a fixed-point activation, adding into `acc`
/// (which carries `2·frac` fractional bits on the multiply path).
#[inline]
fn apply_weight(weights: &FixedWeights, idx: usize, x: i64, acc: &mut i128, ops: &mut OpTrace) {
    match weights {
        FixedWeights::Codes(codes) => {
            let code = &codes[idx];
            let mut term = 0i64;
            for &m in code.exponents() {
                term += x >> m;
            }
            ops.shifts += code.exponents().len() as u64;
            ops.adds += code.exponents().len() as u64 - 1;
            if code.sign().is_negative() {
                *acc -= term as i128;
            } else {
                *acc += term as i128;
            }
            ops.adds += 1;
        }
        FixedWeights::Raw(w) => {
            *acc += x as i128 * w[idx] as i128;
            ops.mults += 1;
            ops.adds += 1;
        }
    }
}

/// Brings a finished accumulator back to `frac` fractional bits.
#[inline]
fn finish(weights: &FixedWeights, acc: i128, frac: u32, ops: &mut OpTrace) -> i64 {
    match weights {
        FixedWeights::Codes(_) => acc as i64,
        FixedWeights::Raw(_) => {
            ops.shifts += 1;
            (acc >> frac) as i64
        }
    }
}

fn run_sample(layers: &[FixedLayer], fmt: FixedPointFormat, input: &[f64], shape: &[usize], trace: &mut FixedTrace) -> Result<Vec<i64>> {
    let mut x: Vec<i64> = input.iter().map(|&v| fmt.quantize(v)).collect();
    let mut shape = shape.to_vec();
    let f = fmt.frac_bits;
    for layer in layers {
        match layer {
            FixedLayer::Dense { inputs, outputs, weights, bias } => {
                if x.len() != *inputs {
                    return Err(Error::Shape(format!("dense expects {inputs} inputs, got {}", x.len())));
                }
                x.iter_mut().for_each(|v| *v = fmt.saturate(*v));
                let mut acc = vec![0i128; *outputs];
                for (k, &v) in x.iter().enumerate() {
                    for (j, a) in acc.iter_mut().enumerate() {
                        apply_weight(weights, k * outputs + j, v, a, &mut trace.kernel);
                    }
                }
                x = acc
                    .into_iter()
                    .zip(bias)
                    .map(|(a, &b)| finish(weights, a, f, &mut trace.kernel) + b)
                    .collect();
                trace.epilogue.adds += *outputs as u64;
                shape = vec![*outputs];
            }
            FixedLayer::Conv { in_ch, out_ch, kh, kw, stride, pad, weights, bias } => {
                let &[c, h, w] = shape.as_slice() else {
                    return Err(Error::Shape(format!("conv input must be [C, H, W], got {shape:?}")));
                };
                if c != *in_ch {
                    return Err(Error::Shape(format!("conv expects {in_ch} channels, got {c}")));
                }
                x.iter_mut().for_each(|v| *v = fmt.saturate(*v));
                let oh = window_output(h, *kh, *stride, *pad)?;
                let ow = window_output(w, *kw, *stride, *pad)?;
                let mut out = Vec::with_capacity(out_ch * oh * ow);
                for fi in 0..*out_ch {
                    let base = fi * c * kh * kw;
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut acc = 0i128;
                            for ci in 0..c {
                                for ky in 0..*kh {
                                    let Some(iy) = (oy * stride + ky).checked_sub(*pad).filter(|&y| y < h) else {
                                        continue;
                                    };
                                    for kx in 0..*kw {
                                        let Some(ix) = (ox * stride + kx).checked_sub(*pad).filter(|&v| v < w) else {
                                            continue;
                                        };
                                        let idx = base + (ci * kh + ky) * kw + kx;
                                        apply_weight(weights, idx, x[(ci * h + iy) * w + ix], &mut acc, &mut trace.kernel);
                                    }
                                }
                            }
                            out.push(finish(weights, acc, f, &mut trace.kernel) + bias[fi]);
                        }
                    }
                }
                trace.epilogue.adds += out.len() as u64;
                x = out;
                shape = vec![*out_ch, oh, ow];
            }
            FixedLayer::ScaleShift { scale, shift } => {
                let channels = scale.len();
                let spatial = x.len() / channels;
                for (i, v) in x.iter_mut().enumerate() {
                    let c = i / spatial;
                    *v = ((*v as i128 * scale[c] as i128) >> f) as i64 + shift[c];
                }
                trace.epilogue.mults += x.len() as u64;
                trace.epilogue.shifts += x.len() as u64;
                trace.epilogue.adds += x.len() as u64;
            }
            FixedLayer::Activation(kind) => {
                let one = fmt.one();
                for v in x.iter_mut() {
                    *v = match kind {
                        ActivationKind::Relu => (*v).max(0),
                        ActivationKind::HtanhSign => {
                            if *v >= 0 {
                                one
                            } else {
                                -one
                            }
                        }
                    };
                }
                trace.epilogue.compares += x.len() as u64;
            }
            FixedLayer::MaxPool { window, stride } => {
                let &[c, h, w] = shape.as_slice() else {
                    return Err(Error::Shape(format!("pool input must be [C, H, W], got {shape:?}")));
                };
                let oh = window_output(h, *window, *stride, 0)?;
                let ow = window_output(w, *window, *stride, 0)?;
                let mut out = Vec::with_capacity(c * oh * ow);
                for ci in 0..c {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut best = i64::MIN;
                            for ky in 0..*window {
                                for kx in 0..*window {
                                    best = best.max(x[(ci * h + oy * stride + ky) * w + ox * stride + kx]);
                                }
                            }
                            out.push(best);
                        }
                    }
                }
                trace.epilogue.compares += (out.len() * (window * window - 1)) as u64;
                x = out;
                shape = vec![c, oh, ow];
            }
            FixedLayer::Flatten => shape = vec![x.len()],
            FixedLayer::Passthrough => {}
        }
    }
    Ok(x)
}

/// Fixed-point inference. Weights are applied by arithmetic right shifts
/// (k-ones), sign selection (binary), or format-quantized multiplies
/// (conventional, only with `quantize_first`).
pub fn infer_fixed<T: Scalar>(
    model: &QuantizedModel<T>,
    input: &Tensor<T>,
    fmt: FixedPointFormat,
    opts: FixedOptions,
) -> Result<FixedOutput> {
    let fmt = FixedPointFormat::new(fmt.total_bits, fmt.frac_bits)?;
    check_model_input(model, input)?;
    let layers = compile(model, fmt, opts)?;
    let classes = model.classes()?;
    let batch = input.shape()[0];
    let per = input.len() / batch;
    let mut trace = FixedTrace::default();
    let mut raw = Vec::with_capacity(batch * classes);
    for b in 0..batch {
        let sample: Vec<f64> = input.data()[b * per..(b + 1) * per].iter().map(|v| v.widen()).collect();
        let scores = run_sample(&layers, fmt, &sample, &model.input_shape, &mut trace)?;
        if scores.len() != classes {
            return Err(Error::Shape(format!("{} scores for {classes} classes", scores.len())));
        }
        raw.extend(scores);
    }
    trace.images = batch as u64;
    Ok(FixedOutput { format: fmt, classes, raw, trace })
}
