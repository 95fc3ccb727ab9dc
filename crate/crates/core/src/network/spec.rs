use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::window_output;
use crate::variant::ModelVariant;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActivationKind {
    Relu,
    /// Hard tanh while training, sign at test time.
    HtanhSign,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerSpec {
    Dense {
        inputs: usize,
        outputs: usize,
    },
    Conv2D {
        in_ch: usize,
        out_ch: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        pad: usize,
    },
    MaxPool {
        window: usize,
        stride: usize,
    },
    BatchNorm {
        features: usize,
    },
    Activation(ActivationKind),
    Dropout {
        rate: f32,
    },
    Flatten,
}

impl LayerSpec {
    pub fn has_weights(&self) -> bool {
        matches!(self, LayerSpec::Dense { .. } | LayerSpec::Conv2D { .. })
    }

    /// `(weights, biases)` owned by this layer.
    pub fn parameter_counts(&self) -> (u64, u64) {
        match *self {
            LayerSpec::Dense { inputs, outputs } => ((inputs * outputs) as u64, outputs as u64),
            LayerSpec::Conv2D { in_ch, out_ch, kh, kw, .. } => ((out_ch * in_ch * kh * kw) as u64, out_ch as u64),
            _ => (0, 0),
        }
    }

    /// Per-sample output shape for a per-sample input shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let bad = |msg: String| Err(Error::Network(msg));
        match *self {
            LayerSpec::Dense { inputs, outputs } => {
                if input != [inputs] {
                    return bad(format!("dense layer expects [{inputs}], got {input:?}"));
                }
                Ok(vec![outputs])
            }
            LayerSpec::Conv2D { in_ch, out_ch, kh, kw, stride, pad } => {
                let &[c, h, w] = input else {
                    return bad(format!("conv layer expects [C, H, W], got {input:?}"));
                };
                if c != in_ch {
                    return bad(format!("conv layer expects {in_ch} channels, got {c}"));
                }
                Ok(vec![out_ch, window_output(h, kh, stride, pad)?, window_output(w, kw, stride, pad)?])
            }
            LayerSpec::MaxPool { window, stride } => {
                let &[c, h, w] = input else {
                    return bad(format!("max-pool expects [C, H, W], got {input:?}"));
                };
                Ok(vec![c, window_output(h, window, stride, 0)?, window_output(w, window, stride, 0)?])
            }
            LayerSpec::BatchNorm { features } => {
                if input.first() != Some(&features) {
                    return bad(format!("batch norm over {features} features, input {input:?}"));
                }
                Ok(input.to_vec())
            }
            LayerSpec::Dropout { rate } => {
                if !(0.0..1.0).contains(&rate) {
                    return bad(format!("dropout rate {rate} outside [0, 1)"));
                }
                Ok(input.to_vec())
            }
            LayerSpec::Activation(_) => Ok(input.to_vec()),
            LayerSpec::Flatten => Ok(vec![input.iter().product()]),
        }
    }
}

/// A layer graph with its per-sample input shape.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub name: String,
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
}

pub const PRESETS: [&str; 5] = ["mnist-1hidden", "mnist-2conv", "mnist-3hidden", "cifar-3conv", "cifar-6conv"];

impl NetworkSpec {
    /// Per-sample shapes: entry `i` is the input of layer `i`, the last entry
    /// the network output.
    pub fn shapes(&self) -> Result<Vec<Vec<usize>>> {
        let mut shapes = vec![self.input_shape.clone()];
        for layer in &self.layers {
            let next = layer.output_shape(shapes.last().unwrap())?;
            shapes.push(next);
        }
        Ok(shapes)
    }

    pub fn validate(&self) -> Result<()> {
        let shapes = self.shapes()?;
        if shapes.last().map(|s| s.len()) != Some(1) {
            return Err(Error::Network("network must end in a flat score vector".into()));
        }
        Ok(())
    }

    pub fn classes(&self) -> Result<usize> {
        Ok(self.shapes()?.last().unwrap()[0])
    }

    pub fn input_len(&self) -> usize {
        self.input_shape.iter().product()
    }

    pub fn weight_count(&self) -> u64 {
        self.layers.iter().map(|l| l.parameter_counts().0).sum()
    }

    pub fn bias_count(&self) -> u64 {
        self.layers.iter().map(|l| l.parameter_counts().1).sum()
    }

    /// Weights plus biases; batch-norm statistics are not counted.
    pub fn parameter_count(&self) -> u64 {
        self.weight_count() + self.bias_count()
    }

    /// Rewrites every activation layer to the variant's activation kind.
    pub fn for_variant(mut self, variant: ModelVariant) -> Self {
        for layer in &mut self.layers {
            if let LayerSpec::Activation(kind) = layer {
                *kind = variant.activation();
            }
        }
        self
    }

    /// Fully connected net for flat feature vectors, with the same
    /// dense/batch-norm/ReLU/dropout blocks as the MNIST presets.
    pub fn mlp(name: &str, inputs: usize, hidden: &[usize], classes: usize) -> Result<Self> {
        let mut layers = Vec::new();
        let mut width = inputs;
        for &h in hidden {
            layers.extend([
                LayerSpec::Dense { inputs: width, outputs: h },
                LayerSpec::BatchNorm { features: h },
                LayerSpec::Activation(ActivationKind::Relu),
                LayerSpec::Dropout { rate: 0.2 },
            ]);
            width = h;
        }
        layers.extend([LayerSpec::Dense { inputs: width, outputs: classes }, LayerSpec::BatchNorm { features: classes }]);
        let spec = NetworkSpec { name: name.to_string(), input_shape: vec![inputs], layers };
        spec.validate()?;
        Ok(spec)
    }

    pub fn preset(name: &str) -> Result<Self> {
        use ActivationKind::Relu;
        use LayerSpec::*;
        const DROPOUT: f32 = 0.2;

        let dense_block = |inputs, outputs| {
            vec![Dense { inputs, outputs }, BatchNorm { features: outputs }, Activation(Relu), Dropout { rate: DROPOUT }]
        };
        let conv_block = |in_ch, out_ch, k, pad| {
            vec![
                Conv2D { in_ch, out_ch, kh: k, kw: k, stride: 1, pad },
                BatchNorm { features: out_ch },
                Activation(Relu),
            ]
        };
        let pool = MaxPool { window: 2, stride: 2 };

        let (input_shape, layers): (Vec<usize>, Vec<LayerSpec>) = match name {
            "mnist-1hidden" => {
                let mut l = vec![Flatten];
                l.extend(dense_block(784, 100));
                l.push(Dense { inputs: 100, outputs: 10 });
                (vec![1, 28, 28], l)
            }
            // LeNet from the Caffe examples.
            "mnist-2conv" => {
                let mut l = conv_block(1, 20, 5, 0);
                l.push(pool.clone());
                l.extend(conv_block(20, 50, 5, 0));
                l.push(pool.clone());
                l.push(Flatten);
                l.extend(dense_block(800, 500));
                l.push(Dense { inputs: 500, outputs: 10 });
                (vec![1, 28, 28], l)
            }
            "mnist-3hidden" => {
                let mut l = vec![Flatten];
                l.extend(dense_block(784, 4096));
                l.extend(dense_block(4096, 4096));
                l.extend(dense_block(4096, 4096));
                l.push(Dense { inputs: 4096, outputs: 10 });
                (vec![1, 28, 28], l)
            }
            // Best-effort shapes; parameter count differs from the published one.
            "cifar-3conv" => {
                let mut l = conv_block(3, 32, 5, 2);
                l.push(pool.clone());
                l.extend(conv_block(32, 32, 5, 2));
                l.push(pool.clone());
                l.extend(conv_block(32, 64, 5, 2));
                l.push(pool.clone());
                l.push(Flatten);
                l.push(Dense { inputs: 1024, outputs: 10 });
                (vec![3, 32, 32], l)
            }
            // Best-effort shapes; parameter count differs from the published one.
            "cifar-6conv" => {
                let mut l = Vec::new();
                for (i, (cin, cout)) in [(3, 128), (128, 128), (128, 256), (256, 256), (256, 512), (512, 512)]
                    .into_iter()
                    .enumerate()
                {
                    l.extend(conv_block(cin, cout, 3, 1));
                    if i % 2 == 1 {
                        l.push(pool.clone());
                    }
                }
                l.push(Flatten);
                l.extend(dense_block(8192, 1024));
                l.extend(dense_block(1024, 1024));
                l.push(Dense { inputs: 1024, outputs: 10 });
                (vec![3, 32, 32], l)
            }
            other => return Err(Error::UnknownPreset(other.to_string())),
        };
        // Scores are batch-normalized too. Without it the ±1 sums of the
        // binary-activation variants dwarf the hinge margin.
        let mut layers = layers;
        layers.push(BatchNorm { features: 10 });
        let spec = NetworkSpec { name: name.to_string(), input_shape, layers };
        spec.validate()?;
        Ok(spec)
    }
}
