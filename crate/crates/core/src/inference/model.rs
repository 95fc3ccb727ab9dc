use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{inv_std, ActivationKind, BatchNormParams, LayerParams, LayerSpec, NetworkSpec, Parameters};
use crate::quantization::{binarize, Codebook, CodebookSpec, WeightCode};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::variant::{ModelVariant, WeightConstraint};

/// Weights of one Dense or Conv layer, in the same flat order as
/// [`Parameters`] (`[in × out]` or `[out_ch × in_ch × kh × kw]`).
#[derive(Clone, Debug, PartialEq)]
pub enum LayerWeights<T> {
    Raw(Vec<T>),
    Codes(Vec<WeightCode>),
}

impl<T: Scalar> LayerWeights<T> {
    pub fn len(&self) -> usize {
        match self {
            LayerWeights::Raw(w) => w.len(),
            LayerWeights::Codes(c) => c.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn decoded(&self) -> Vec<T> {
        match self {
            LayerWeights::Raw(w) => w.clone(),
            LayerWeights::Codes(c) => c.iter().map(|code| T::narrow(code.value())).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum QuantizedLayer<T> {
    Dense { inputs: usize, outputs: usize, weights: LayerWeights<T>, bias: Vec<T> },
    Conv { in_ch: usize, out_ch: usize, kh: usize, kw: usize, stride: usize, pad: usize, weights: LayerWeights<T>, bias: Vec<T> },
    MaxPool { window: usize, stride: usize },
    BatchNorm(BatchNormParams<T>),
    /// Folded batch norm: `y = x · scale + shift` per channel.
    ScaleShift { scale: Vec<T>, shift: Vec<T> },
    Activation(ActivationKind),
    Dropout { rate: f32 },
    Flatten,
}

impl<T: Scalar> QuantizedLayer<T> {
    pub fn weights(&self) -> Option<&LayerWeights<T>> {
        match self {
            QuantizedLayer::Dense { weights, .. } | QuantizedLayer::Conv { weights, .. } => Some(weights),
            _ => None,
        }
    }

    pub fn bias(&self) -> Option<&[T]> {
        match self {
            QuantizedLayer::Dense { bias, .. } | QuantizedLayer::Conv { bias, .. } => Some(bias),
            _ => None,
        }
    }

    /// Spec equivalent, or `None` for a folded scale/shift layer.
    pub fn spec(&self) -> Option<LayerSpec> {
        Some(match *self {
            QuantizedLayer::Dense { inputs, outputs, .. } => LayerSpec::Dense { inputs, outputs },
            QuantizedLayer::Conv { in_ch, out_ch, kh, kw, stride, pad, .. } => {
                LayerSpec::Conv2D { in_ch, out_ch, kh, kw, stride, pad }
            }
            QuantizedLayer::MaxPool { window, stride } => LayerSpec::MaxPool { window, stride },
            QuantizedLayer::BatchNorm(ref bn) => LayerSpec::BatchNorm { features: bn.features() },
            QuantizedLayer::ScaleShift { .. } => return None,
            QuantizedLayer::Activation(kind) => LayerSpec::Activation(kind),
            QuantizedLayer::Dropout { rate } => LayerSpec::Dropout { rate },
            QuantizedLayer::Flatten => LayerSpec::Flatten,
        })
    }
}

/// A finalized network ready for deployment: weight codes (or raw weights
/// for the conventional variant) plus full-precision biases and batch norm.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedModel<T> {
    pub variant: ModelVariant,
    pub name: String,
    pub input_shape: Vec<usize>,
    pub layers: Vec<QuantizedLayer<T>>,
}

/// Summary of a model's layer graph, without payloads.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSummary {
    pub variant: ModelVariant,
    pub layers: Vec<String>,
    pub weights: u64,
    pub biases: u64,
}

impl<T: Scalar> QuantizedModel<T> {
    /// Projects every weight with round-to-nearest (binarize for binary
    /// variants, identity for conventional).
    pub fn from_parameters(spec: &NetworkSpec, params: &Parameters<T>, variant: ModelVariant) -> Result<Self> {
        params.check(spec)?;
        let codebook = variant.codebook().map(Codebook::new).transpose()?;
        let project = |w: &Tensor<T>| -> Result<LayerWeights<T>> {
            match (variant.weight_constraint(), &codebook) {
                (WeightConstraint::None, _) => Ok(LayerWeights::Raw(w.data().to_vec())),
                (WeightConstraint::Binary, _) => {
                    Ok(LayerWeights::Codes(w.data().iter().map(|x| binarize(x.widen())).collect::<Result<_>>()?))
                }
                (WeightConstraint::KOnes(_), Some(cb)) => Ok(LayerWeights::Codes(
                    w.data().iter().map(|x| cb.approx_nearest(x.widen())).collect::<Result<_>>()?,
                )),
                (WeightConstraint::KOnes(k), None) => Err(Error::InvalidCodebook(format!("no codebook for k = {k}"))),
            }
        };
        let mut layers = Vec::with_capacity(spec.layers.len());
        for (layer, p) in spec.layers.iter().zip(&params.layers) {
            layers.push(match (layer, p) {
                (&LayerSpec::Dense { inputs, outputs }, LayerParams::Dense { weights, bias }) => {
                    QuantizedLayer::Dense { inputs, outputs, weights: project(weights)?, bias: bias.clone() }
                }
                (&LayerSpec::Conv2D { in_ch, out_ch, kh, kw, stride, pad }, LayerParams::Conv { kernels, bias }) => {
                    QuantizedLayer::Conv {
                        in_ch,
                        out_ch,
                        kh,
                        kw,
                        stride,
                        pad,
                        weights: project(kernels)?,
                        bias: bias.clone(),
                    }
                }
                (LayerSpec::BatchNorm { .. }, LayerParams::BatchNorm(bn)) => QuantizedLayer::BatchNorm(bn.clone()),
                (&LayerSpec::MaxPool { window, stride }, _) => QuantizedLayer::MaxPool { window, stride },
                (&LayerSpec::Activation(kind), _) => QuantizedLayer::Activation(kind),
                (&LayerSpec::Dropout { rate }, _) => QuantizedLayer::Dropout { rate },
                (LayerSpec::Flatten, _) => QuantizedLayer::Flatten,
                _ => return Err(Error::Shape(format!("parameters do not match layer {layer:?}"))),
            });
        }
        let model = QuantizedModel { variant, name: spec.name.clone(), input_shape: spec.input_shape.clone(), layers };
        model.validate()?;
        Ok(model)
    }

    pub fn codebook_spec(&self) -> Option<CodebookSpec> {
        self.variant.codebook()
    }

    /// Checks that layer shapes compose and that codes fit the variant.
    pub fn validate(&self) -> Result<()> {
        let mut shape = self.input_shape.clone();
        let cb = self.codebook_spec();
        for (i, layer) in self.layers.iter().enumerate() {
            match (layer.weights(), cb) {
                (Some(LayerWeights::Codes(codes)), Some(spec)) => {
                    for c in codes {
                        c.check(&spec)?;
                    }
                }
                (Some(LayerWeights::Raw(_)), None) | (None, _) => {}
                (Some(_), _) => {
                    return Err(Error::Network(format!(
                        "layer {i} weight representation does not match variant {}",
                        self.variant
                    )))
                }
            }
            shape = match layer {
                QuantizedLayer::ScaleShift { scale, shift } => {
                    if scale.len() != shift.len() || shape.get(0) != Some(&scale.len()) {
                        return Err(Error::Shape(format!("scale/shift of {} channels on {shape:?}", scale.len())));
                    }
                    shape
                }
                _ => {
                    let spec = layer.spec().expect("only scale/shift lacks a spec");
                    let (w, b) = spec.parameter_counts();
                    let (wl, bl) = (layer.weights().map_or(0, |w| w.len()), layer.bias().map_or(0, |b| b.len()));
                    if wl as u64 != w || bl as u64 != b {
                        return Err(Error::Shape(format!("layer {i} holds {wl} weights and {bl} biases for {spec:?}")));
                    }
                    if let QuantizedLayer::BatchNorm(bn) = layer {
                        let f = bn.features();
                        if [bn.beta.len(), bn.running_mean.len(), bn.running_var.len()].iter().any(|&l| l != f) {
                            return Err(Error::Shape(format!("batch norm layer {i} has ragged vectors")));
                        }
                    }
                    spec.output_shape(&shape)?
                }
            };
        }
        Ok(())
    }

    /// The layer graph as a [`NetworkSpec`]; fails once batch norm is folded.
    pub fn network_spec(&self) -> Result<NetworkSpec> {
        let layers = self
            .layers
            .iter()
            .map(|l| l.spec().ok_or_else(|| Error::Unsupported("folded model has no network spec".into())))
            .collect::<Result<_>>()?;
        Ok(NetworkSpec { name: self.name.clone(), input_shape: self.input_shape.clone(), layers })
    }

    /// Parameters with every weight code decoded back to a real value.
    pub fn decoded_parameters(&self) -> Result<Parameters<T>> {
        let layers = self
            .layers
            .iter()
            .map(|l| match l {
                QuantizedLayer::Dense { inputs, outputs, weights, bias } => Ok(LayerParams::Dense {
                    weights: Tensor::new(vec![*inputs, *outputs], weights.decoded())?,
                    bias: bias.clone(),
                }),
                QuantizedLayer::Conv { in_ch, out_ch, kh, kw, weights, bias, .. } => Ok(LayerParams::Conv {
                    kernels: Tensor::new(vec![*out_ch, *in_ch, *kh, *kw], weights.decoded())?,
                    bias: bias.clone(),
                }),
                QuantizedLayer::BatchNorm(bn) => Ok(LayerParams::BatchNorm(bn.clone())),
                QuantizedLayer::ScaleShift { .. } => Err(Error::Unsupported("folded model has no parameters".into())),
                _ => Ok(LayerParams::None),
            })
            .collect::<Result<_>>()?;
        Ok(Parameters { layers })
    }

    pub fn weight_count(&self) -> u64 {
        self.layers.iter().map(|l| l.weights().map_or(0, |w| w.len() as u64)).sum()
    }

    pub fn bias_count(&self) -> u64 {
        self.layers.iter().map(|l| l.bias().map_or(0, |b| b.len() as u64)).sum()
    }

    /// Number of output classes.
    pub fn classes(&self) -> Result<usize> {
        let mut shape = self.input_shape.clone();
        for l in &self.layers {
            if let Some(s) = l.spec() {
                shape = s.output_shape(&shape)?;
            }
        }
        Ok(shape.iter().product())
    }

    /// Count of every weight value, ascending by value.
    pub fn weight_histogram(&self) -> Vec<(f64, u64)> {
        let mut values: Vec<f64> = self
            .layers
            .iter()
            .filter_map(|l| l.weights())
            .flat_map(|w| w.decoded().into_iter().map(|v| v.widen()))
            .collect();
        values.sort_by(f64::total_cmp);
        let mut out: Vec<(f64, u64)> = Vec::new();
        for v in values {
            match out.last_mut() {
                Some((last, n)) if *last == v => *n += 1,
                _ => out.push((v, 1)),
            }
        }
        out
    }

    pub fn summary(&self) -> ModelSummary {
        ModelSummary {
            variant: self.variant,
            layers: self.layers.iter().map(layer_label).collect(),
            weights: self.weight_count(),
            biases: self.bias_count(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> QuantizedModel<U> {
        let c = |v: &[T]| v.iter().map(|&x| U::narrow(x.widen())).collect::<Vec<U>>();
        let w = |w: &LayerWeights<T>| match w {
            LayerWeights::Raw(v) => LayerWeights::Raw(c(v)),
            LayerWeights::Codes(codes) => LayerWeights::Codes(codes.clone()),
        };
        let layers = self
            .layers
            .iter()
            .map(|l| match l {
                QuantizedLayer::Dense { inputs, outputs, weights, bias } => {
                    QuantizedLayer::Dense { inputs: *inputs, outputs: *outputs, weights: w(weights), bias: c(bias) }
                }
                QuantizedLayer::Conv { in_ch, out_ch, kh, kw, stride, pad, weights, bias } => QuantizedLayer::Conv {
                    in_ch: *in_ch,
                    out_ch: *out_ch,
                    kh: *kh,
                    kw: *kw,
                    stride: *stride,
                    pad: *pad,
                    weights: w(weights),
                    bias: c(bias),
                },
                QuantizedLayer::BatchNorm(bn) => QuantizedLayer::BatchNorm(BatchNormParams {
                    gamma: c(&bn.gamma),
                    beta: c(&bn.beta),
                    running_mean: c(&bn.running_mean),
                    running_var: c(&bn.running_var),
                    momentum: U::narrow(bn.momentum.widen()),
                    epsilon: U::narrow(bn.epsilon.widen()),
                }),
                QuantizedLayer::ScaleShift { scale, shift } => {
                    QuantizedLayer::ScaleShift { scale: c(scale), shift: c(shift) }
                }
                QuantizedLayer::MaxPool { window, stride } => QuantizedLayer::MaxPool { window: *window, stride: *stride },
                QuantizedLayer::Activation(k) => QuantizedLayer::Activation(*k),
                QuantizedLayer::Dropout { rate } => QuantizedLayer::Dropout { rate: *rate },
                QuantizedLayer::Flatten => QuantizedLayer::Flatten,
            })
            .collect();
        QuantizedModel { variant: self.variant, name: self.name.clone(), input_shape: self.input_shape.clone(), layers }
    }
}

pub fn layer_label<T: Scalar>(layer: &QuantizedLayer<T>) -> String {
    match layer {
        QuantizedLayer::Dense { inputs, outputs, .. } => format!("dense {inputs}x{outputs}"),
        QuantizedLayer::Conv { in_ch, out_ch, kh, kw, stride, pad, .. } => {
            format!("conv {out_ch}x{in_ch}x{kh}x{kw} stride {stride} pad {pad}")
        }
        QuantizedLayer::MaxPool { window, stride } => format!("maxpool {window} stride {stride}"),
        QuantizedLayer::BatchNorm(bn) => format!("batchnorm {}", bn.features()),
        QuantizedLayer::ScaleShift { scale, .. } => format!("scale_shift {}", scale.len()),
        QuantizedLayer::Activation(ActivationKind::Relu) => "relu".into(),
        QuantizedLayer::Activation(ActivationKind::HtanhSign) => "sign".into(),
        QuantizedLayer::Dropout { rate } => format!("dropout {rate}"),
        QuantizedLayer::Flatten => "flatten".into(),
    }
}

/// Replaces every batch-norm layer with its per-channel affine form
/// `scale = γ / √(var + ε)`, `shift = β − mean · scale`. Weight codes are
/// left untouched.
pub fn fold_batchnorm<T: Scalar>(model: &QuantizedModel<T>) -> Result<QuantizedModel<T>> {
    let mut out = model.clone();
    for (i, layer) in out.layers.iter_mut().enumerate() {
        if let QuantizedLayer::BatchNorm(bn) = layer {
            if bn.running_var.iter().any(|&v| v == T::zero()) {
                return Err(Error::ZeroVariance { layer: i });
            }
            let scale: Vec<T> =
                bn.gamma.iter().zip(&bn.running_var).map(|(&g, &v)| g * inv_std(v, bn.epsilon)).collect();
            let shift = bn.beta.iter().zip(&bn.running_mean).zip(&scale).map(|((&b, &m), &s)| b - m * s).collect();
            *layer = QuantizedLayer::ScaleShift { scale, shift };
        }
    }
    Ok(out)
}
