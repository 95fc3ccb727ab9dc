use rand::Rng;
use serde::{Deserialize, Serialize};

use super::spec::{LayerSpec, NetworkSpec};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const BN_MOMENTUM: f64 = 0.9;
pub const BN_EPSILON: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchNormParams<T> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub momentum: T,
    pub epsilon: T,
}

impl<T: Scalar> BatchNormParams<T> {
    pub fn new(features: usize) -> Self {
        BatchNormParams {
            gamma: vec![T::one(); features],
            beta: vec![T::zero(); features],
            running_mean: vec![T::zero(); features],
            running_var: vec![T::one(); features],
            momentum: T::narrow(BN_MOMENTUM),
            epsilon: T::narrow(BN_EPSILON),
        }
    }

    pub fn features(&self) -> usize {
        self.gamma.len()
    }
}

/// Parameters of one layer. Dense weights are stored `[inputs × outputs]`,
/// convolution kernels `[out_ch × in_ch × kh × kw]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", bound(deserialize = "T: Scalar + serde::de::DeserializeOwned"))]
pub enum LayerParams<T> {
    None,
    Dense { weights: Tensor<T>, bias: Vec<T> },
    Conv { kernels: Tensor<T>, bias: Vec<T> },
    BatchNorm(BatchNormParams<T>),
}

impl<T: Scalar> LayerParams<T> {
    pub fn weights(&self) -> Option<&Tensor<T>> {
        match self {
            LayerParams::Dense { weights, .. } => Some(weights),
            LayerParams::Conv { kernels, .. } => Some(kernels),
            _ => None,
        }
    }

    pub fn weights_mut(&mut self) -> Option<&mut Tensor<T>> {
        match self {
            LayerParams::Dense { weights, .. } => Some(weights),
            LayerParams::Conv { kernels, .. } => Some(kernels),
            _ => None,
        }
    }

    pub fn bias(&self) -> Option<&[T]> {
        match self {
            LayerParams::Dense { bias, .. } | LayerParams::Conv { bias, .. } => Some(bias),
            _ => None,
        }
    }
}

/// What a trainable slice is; weights are the only role ever quantized.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamRole {
    Weight,
    Bias,
    Gamma,
    Beta,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound(deserialize = "T: Scalar + serde::de::DeserializeOwned"))]
pub struct Parameters<T> {
    pub layers: Vec<LayerParams<T>>,
}

impl<T: Scalar> Parameters<T> {
    /// Uniform Glorot initialisation for weights, zero biases, identity batch norm.
    pub fn init<R: Rng + ?Sized>(spec: &NetworkSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let layers = spec
            .layers
            .iter()
            .map(|layer| match *layer {
                LayerSpec::Dense { inputs, outputs } => {
                    let limit = glorot_limit::<T>(inputs, outputs);
                    LayerParams::Dense {
                        weights: Tensor::from_fn(&[inputs, outputs], |_| rng.gen_range(-limit..limit)),
                        bias: vec![T::zero(); outputs],
                    }
                }
                LayerSpec::Conv2D { in_ch, out_ch, kh, kw, .. } => {
                    let limit = glorot_limit::<T>(in_ch * kh * kw, out_ch * kh * kw);
                    LayerParams::Conv {
                        kernels: Tensor::from_fn(&[out_ch, in_ch, kh, kw], |_| rng.gen_range(-limit..limit)),
                        bias: vec![T::zero(); out_ch],
                    }
                }
                LayerSpec::BatchNorm { features } => LayerParams::BatchNorm(BatchNormParams::new(features)),
                _ => LayerParams::None,
            })
            .collect();
        Ok(Parameters { layers })
    }

    /// Same structure with every value zero (gradient and moment buffers).
    pub fn zeros_like(&self) -> Self {
        let zero = |v: &[T]| vec![T::zero(); v.len()];
        let layers = self
            .layers
            .iter()
            .map(|l| match l {
                LayerParams::None => LayerParams::None,
                LayerParams::Dense { weights, bias } => {
                    LayerParams::Dense { weights: Tensor::zeros(weights.shape()), bias: zero(bias) }
                }
                LayerParams::Conv { kernels, bias } => {
                    LayerParams::Conv { kernels: Tensor::zeros(kernels.shape()), bias: zero(bias) }
                }
                LayerParams::BatchNorm(bn) => LayerParams::BatchNorm(BatchNormParams {
                    gamma: zero(&bn.gamma),
                    beta: zero(&bn.beta),
                    running_mean: zero(&bn.running_mean),
                    running_var: zero(&bn.running_var),
                    momentum: bn.momentum,
                    epsilon: bn.epsilon,
                }),
            })
            .collect();
        Parameters { layers }
    }

    /// Every trainable slice in a fixed order.
    pub fn trainable(&self) -> Vec<(ParamRole, &[T])> {
        let mut out = Vec::new();
        for l in &self.layers {
            match l {
                LayerParams::None => {}
                LayerParams::Dense { weights, bias } => {
                    out.push((ParamRole::Weight, weights.data()));
                    out.push((ParamRole::Bias, &bias[..]));
                }
                LayerParams::Conv { kernels, bias } => {
                    out.push((ParamRole::Weight, kernels.data()));
                    out.push((ParamRole::Bias, &bias[..]));
                }
                LayerParams::BatchNorm(bn) => {
                    out.push((ParamRole::Gamma, &bn.gamma[..]));
                    out.push((ParamRole::Beta, &bn.beta[..]));
                }
            }
        }
        out
    }

    pub fn trainable_mut(&mut self) -> Vec<(ParamRole, &mut [T])> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            match l {
                LayerParams::None => {}
                LayerParams::Dense { weights, bias } => {
                    out.push((ParamRole::Weight, weights.data_mut()));
                    out.push((ParamRole::Bias, &mut bias[..]));
                }
                LayerParams::Conv { kernels, bias } => {
                    out.push((ParamRole::Weight, kernels.data_mut()));
                    out.push((ParamRole::Bias, &mut bias[..]));
                }
                LayerParams::BatchNorm(bn) => {
                    out.push((ParamRole::Gamma, &mut bn.gamma[..]));
                    out.push((ParamRole::Beta, &mut bn.beta[..]));
                }
            }
        }
        out
    }

    /// Applies `f` to every weight, leaving biases and batch norm untouched.
    pub fn map_weights(&self, mut f: impl FnMut(T) -> T) -> Self {
        let mut out = self.clone();
        for l in &mut out.layers {
            if let Some(w) = l.weights_mut() {
                for x in w.data_mut() {
                    *x = f(*x);
                }
            }
        }
        out
    }

    /// Checks that the parameters fit the spec layer by layer.
    pub fn check(&self, spec: &NetworkSpec) -> Result<()> {
        if self.layers.len() != spec.layers.len() {
            return Err(Error::Shape(format!(
                "{} parameter layers for {} spec layers",
                self.layers.len(),
                spec.layers.len()
            )));
        }
        for (i, (l, p)) in spec.layers.iter().zip(&self.layers).enumerate() {
            let ok = match (l, p) {
                (LayerSpec::Dense { inputs, outputs }, LayerParams::Dense { weights, bias }) => {
                    weights.shape() == [*inputs, *outputs] && bias.len() == *outputs
                }
                (LayerSpec::Conv2D { in_ch, out_ch, kh, kw, .. }, LayerParams::Conv { kernels, bias }) => {
                    kernels.shape() == [*out_ch, *in_ch, *kh, *kw] && bias.len() == *out_ch
                }
                (LayerSpec::BatchNorm { features }, LayerParams::BatchNorm(bn)) => {
                    bn.gamma.len() == *features
                        && bn.beta.len() == *features
                        && bn.running_mean.len() == *features
                        && bn.running_var.len() == *features
                }
                (s, LayerParams::None) => !s.has_weights() && !matches!(s, LayerSpec::BatchNorm { .. }),
                _ => false,
            };
            if !ok {
                return Err(Error::Shape(format!("parameters of layer {i} do not match {l:?}")));
            }
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> Parameters<U> {
        let c = |v: &[T]| v.iter().map(|&x| U::narrow(x.widen())).collect::<Vec<U>>();
        let layers = self
            .layers
            .iter()
            .map(|l| match l {
                LayerParams::None => LayerParams::None,
                LayerParams::Dense { weights, bias } => LayerParams::Dense { weights: weights.cast(), bias: c(bias) },
                LayerParams::Conv { kernels, bias } => LayerParams::Conv { kernels: kernels.cast(), bias: c(bias) },
                LayerParams::BatchNorm(bn) => LayerParams::BatchNorm(BatchNormParams {
                    gamma: c(&bn.gamma),
                    beta: c(&bn.beta),
                    running_mean: c(&bn.running_mean),
                    running_var: c(&bn.running_var),
                    momentum: U::narrow(bn.momentum.widen()),
                    epsilon: U::narrow(bn.epsilon.widen()),
                }),
            })
            .collect();
        Parameters { layers }
    }
}

fn glorot_limit<T: Scalar>(fan_in: usize, fan_out: usize) -> T {
    T::narrow((6.0 / (fan_in + fan_out) as f64).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn init_respects_glorot_limit() {
        let spec = NetworkSpec::preset("mnist-1hidden").unwrap();
        let p = Parameters::<f32>::init(&spec, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        p.check(&spec).unwrap();
        let limit = (6.0f32 / 884.0).sqrt();
        let w = p.layers[1].weights().unwrap();
        assert!(w.data().iter().all(|x| x.abs() <= limit));
        assert!(p.layers[1].bias().unwrap().iter().all(|&b| b == 0.0));
    }

    #[test]
    fn trainable_slices_cover_every_parameter() {
        let spec = NetworkSpec::preset("mnist-1hidden").unwrap();
        let p = Parameters::<f32>::init(&spec, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let total: usize = p.trainable().iter().map(|(_, s)| s.len()).sum();
        // batch-norm gamma and beta for the hidden and output layers
        assert_eq!(total as u64, spec.parameter_count() + 2 * (100 + 10));
    }
}
