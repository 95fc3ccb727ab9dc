//! The packed `LNN1` model file.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "LNN1" | version u8 | variant id u8 | layer count u16
//! input record: tag 0 | rank u32 | dims u32… | name length u32 | name bytes
//! per layer:    tag u8 | shape u32… | weights | biases f32… | extra f32…
//! ```
//!
//! Weight codes are packed LSB-first at the variant's bit width and padded
//! to a whole byte per layer; conventional weights are raw `f32`.

use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::fsutil::write_atomic;
use crate::inference::{layer_label, LayerWeights, QuantizedLayer, QuantizedModel};
use crate::network::{ActivationKind, BatchNormParams};
use crate::quantization::{decode, encode, CodebookSpec};
use crate::scalar::Scalar;
use crate::variant::ModelVariant;

pub const MAGIC: &[u8; 4] = b"LNN1";
pub const VERSION: u8 = 1;
pub const HEADER_BYTES: usize = 8;

const TAG_INPUT: u8 = 0;
const TAG_DENSE: u8 = 1;
const TAG_CONV: u8 = 2;
const TAG_MAXPOOL: u8 = 3;
const TAG_BATCHNORM: u8 = 4;
const TAG_ACTIVATION: u8 = 5;
const TAG_DROPOUT: u8 = 6;
const TAG_FLATTEN: u8 = 7;
const TAG_SCALE_SHIFT: u8 = 8;

/// Bytes taken by `n` weights packed at `bits` each.
pub fn packed_len(n: usize, bits: u32) -> usize {
    (n * bits as usize).div_ceil(8)
}

/// Packs small codes LSB-first, `bits` per value.
pub fn pack_bits(values: &[u8], bits: u32) -> Vec<u8> {
    let mut out = vec![0u8; packed_len(values.len(), bits)];
    for (i, &v) in values.iter().enumerate() {
        let pos = i * bits as usize;
        // widths divide 8, so a value never straddles a byte
        out[pos / 8] |= v << (pos % 8);
    }
    out
}

pub fn unpack_bits(bytes: &[u8], n: usize, bits: u32) -> Vec<u8> {
    let mask = ((1u16 << bits) - 1) as u8;
    (0..n)
        .map(|i| {
            let pos = i * bits as usize;
            (bytes[pos / 8] >> (pos % 8)) & mask
        })
        .collect()
}

fn u32_of(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Shape(format!("{what} {v} does not fit in 32 bits")))
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    fn ints(&mut self, vs: &[usize]) -> Result<()> {
        for &v in vs {
            self.buf.extend_from_slice(&u32_of(v, "shape value")?.to_le_bytes());
        }
        Ok(())
    }

    fn floats<T: Scalar>(&mut self, vs: &[T]) {
        for v in vs {
            self.buf.extend_from_slice(&(v.widen() as f32).to_le_bytes());
        }
    }

    fn weights<T: Scalar>(&mut self, w: &LayerWeights<T>, cb: Option<CodebookSpec>) -> Result<()> {
        match (w, cb) {
            (LayerWeights::Raw(v), None) => {
                self.floats(v);
                Ok(())
            }
            (LayerWeights::Codes(codes), Some(spec)) => {
                let bits = spec.bits_per_weight()?;
                let raw = codes.iter().map(|c| encode(c, &spec)).collect::<Result<Vec<u8>>>()?;
                self.buf.extend_from_slice(&pack_bits(&raw, bits));
                Ok(())
            }
            _ => Err(Error::Network("weight representation does not match the variant".into())),
        }
    }
}

/// Serializes a model. Values are stored as `f32`.
pub fn to_bytes<T: Scalar>(model: &QuantizedModel<T>) -> Result<Vec<u8>> {
    model.validate()?;
    let count = u16::try_from(model.layers.len()).map_err(|_| Error::Network("more than 65535 layers".into()))?;
    let cb = model.codebook_spec();
    let mut w = Writer { buf: Vec::new() };
    w.buf.extend_from_slice(MAGIC);
    w.u8(VERSION);
    w.u8(model.variant.id());
    w.buf.extend_from_slice(&count.to_le_bytes());

    w.u8(TAG_INPUT);
    w.ints(&[model.input_shape.len()])?;
    w.ints(&model.input_shape)?;
    w.ints(&[model.name.len()])?;
    w.buf.extend_from_slice(model.name.as_bytes());

    for layer in &model.layers {
        match layer {
            QuantizedLayer::Dense { inputs, outputs, weights, bias } => {
                w.u8(TAG_DENSE);
                w.ints(&[*inputs, *outputs])?;
                w.weights(weights, cb)?;
                w.floats(bias);
            }
            QuantizedLayer::Conv { in_ch, out_ch, kh, kw, stride, pad, weights, bias } => {
                w.u8(TAG_CONV);
                w.ints(&[*in_ch, *out_ch, *kh, *kw, *stride, *pad])?;
                w.weights(weights, cb)?;
                w.floats(bias);
            }
            QuantizedLayer::MaxPool { window, stride } => {
                w.u8(TAG_MAXPOOL);
                w.ints(&[*window, *stride])?;
            }
            QuantizedLayer::BatchNorm(bn) => {
                w.u8(TAG_BATCHNORM);
                w.ints(&[bn.features()])?;
                w.floats(&bn.gamma);
                w.floats(&bn.beta);
                w.floats(&bn.running_mean);
                w.floats(&bn.running_var);
                w.floats(&[bn.momentum, bn.epsilon]);
            }
            QuantizedLayer::ScaleShift { scale, shift } => {
                w.u8(TAG_SCALE_SHIFT);
                w.ints(&[scale.len()])?;
                w.floats(scale);
                w.floats(shift);
            }
            QuantizedLayer::Activation(kind) => {
                w.u8(TAG_ACTIVATION);
                w.ints(&[activation_id(*kind)])?;
            }
            QuantizedLayer::Dropout { rate } => {
                w.u8(TAG_DROPOUT);
                w.buf.extend_from_slice(&rate.to_bits().to_le_bytes());
            }
            QuantizedLayer::Flatten => w.u8(TAG_FLATTEN),
        }
    }
    Ok(w.buf)
}

fn activation_id(kind: ActivationKind) -> usize {
    match kind {
        ActivationKind::Relu => 0,
        ActivationKind::HtanhSign => 1,
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(
                self.bytes.len() as u64,
                format!("truncated {what}: need {n} bytes at offset {}", self.pos),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn ints(&mut self, n: usize, what: &str) -> Result<Vec<usize>> {
        (0..n).map(|_| self.u32(what).map(|v| v as usize)).collect()
    }

    /// Reads a count and rejects sizes the remaining bytes cannot hold.
    fn count(&mut self, what: &str, bytes_each: usize) -> Result<usize> {
        let at = self.pos;
        let n = self.u32(what)? as usize;
        if n.saturating_mul(bytes_each) > self.bytes.len() - self.pos {
            return Err(Error::format(at as u64, format!("{what} {n} exceeds the file")));
        }
        Ok(n)
    }

    fn floats(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| Error::format(self.pos as u64, "size overflow"))?, what)?;
        Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }

    fn weights(&mut self, n: usize, cb: Option<CodebookSpec>) -> Result<LayerWeights<f32>> {
        match cb {
            None => Ok(LayerWeights::Raw(self.floats(n, "weights")?)),
            Some(spec) => {
                let bits = spec.bits_per_weight()?;
                let at = self.pos;
                let len = packed_len(n, bits);
                let raw = unpack_bits(self.take(len, "weight codes")?, n, bits);
                let codes = raw
                    .iter()
                    .enumerate()
                    .map(|(i, &b)| {
                        decode(b, &spec)
                            .map_err(|e| Error::format((at + i * bits as usize / 8) as u64, format!("weight {i}: {e}")))
                    })
                    .collect::<Result<_>>()?;
                Ok(LayerWeights::Codes(codes))
            }
        }
    }
}

/// Parses a packed model; every structural problem is reported with the
/// byte offset where it was found.
pub fn from_bytes(bytes: &[u8]) -> Result<QuantizedModel<f32>> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::format(0, format!("bad magic {magic:02x?}")));
    }
    let version = r.u8("version")?;
    if version != VERSION {
        return Err(Error::format(4, format!("unsupported version {version}")));
    }
    let vid = r.u8("variant id")?;
    let variant = ModelVariant::from_id(vid).ok_or_else(|| Error::format(5, format!("unknown variant id {vid}")))?;
    let count = u16::from_le_bytes(r.take(2, "layer count")?.try_into().unwrap()) as usize;
    let cb = variant.codebook();

    let at = r.pos;
    if r.u8("input tag")? != TAG_INPUT {
        return Err(Error::format(at as u64, "missing input record"));
    }
    let rank = r.count("input rank", 4)?;
    let input_shape = r.ints(rank, "input shape")?;
    let name_len = r.count("name length", 1)?;
    let at = r.pos;
    let name = String::from_utf8(r.take(name_len, "name")?.to_vec())
        .map_err(|_| Error::format(at as u64, "model name is not UTF-8"))?;

    let mut layers = Vec::with_capacity(count);
    for i in 0..count {
        let at = r.pos;
        let tag = r.u8("layer tag")?;
        let layer = match tag {
            TAG_DENSE => {
                let s = r.ints(2, "dense shape")?;
                let n = s[0].checked_mul(s[1]).ok_or_else(|| Error::format(at as u64, "dense size overflow"))?;
                let weights = r.weights(n, cb)?;
                QuantizedLayer::Dense { inputs: s[0], outputs: s[1], weights, bias: r.floats(s[1], "bias")? }
            }
            TAG_CONV => {
                let s = r.ints(6, "conv shape")?;
                let n = [s[0], s[2], s[3]]
                    .iter()
                    .try_fold(s[1], |a, &b| a.checked_mul(b))
                    .ok_or_else(|| Error::format(at as u64, "conv size overflow"))?;
                let weights = r.weights(n, cb)?;
                QuantizedLayer::Conv {
                    in_ch: s[0],
                    out_ch: s[1],
                    kh: s[2],
                    kw: s[3],
                    stride: s[4],
                    pad: s[5],
                    weights,
                    bias: r.floats(s[1], "bias")?,
                }
            }
            TAG_MAXPOOL => {
                let s = r.ints(2, "pool shape")?;
                QuantizedLayer::MaxPool { window: s[0], stride: s[1] }
            }
            TAG_BATCHNORM => {
                let f = r.count("batch-norm features", 16)?;
                let gamma = r.floats(f, "gamma")?;
                let beta = r.floats(f, "beta")?;
                let running_mean = r.floats(f, "running mean")?;
                let running_var = r.floats(f, "running variance")?;
                let me = r.floats(2, "momentum and epsilon")?;
                QuantizedLayer::BatchNorm(BatchNormParams {
                    gamma,
                    beta,
                    running_mean,
                    running_var,
                    momentum: me[0],
                    epsilon: me[1],
                })
            }
            TAG_SCALE_SHIFT => {
                let f = r.count("scale/shift features", 8)?;
                QuantizedLayer::ScaleShift { scale: r.floats(f, "scale")?, shift: r.floats(f, "shift")? }
            }
            TAG_ACTIVATION => match r.u32("activation kind")? {
                0 => QuantizedLayer::Activation(ActivationKind::Relu),
                1 => QuantizedLayer::Activation(ActivationKind::HtanhSign),
                k => return Err(Error::format((r.pos - 4) as u64, format!("unknown activation kind {k}"))),
            },
            TAG_DROPOUT => QuantizedLayer::Dropout { rate: f32::from_bits(r.u32("dropout rate")?) },
            TAG_FLATTEN => QuantizedLayer::Flatten,
            t => return Err(Error::format(at as u64, format!("unknown tag {t} for layer {i}"))),
        };
        layers.push(layer);
    }
    if r.pos != bytes.len() {
        return Err(Error::format(r.pos as u64, format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    let model = QuantizedModel { variant, name, input_shape, layers };
    model.validate().map_err(|e| Error::format(HEADER_BYTES as u64, e.to_string()))?;
    Ok(model)
}

pub fn save<T: Scalar>(model: &QuantizedModel<T>, path: &Path) -> Result<()> {
    write_atomic(path, &to_bytes(model)?)
}

pub fn load(path: &Path) -> Result<QuantizedModel<f32>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

/// Weight bits at the variant's width plus 32-bit biases.
pub fn model_storage_bits<T: Scalar>(model: &QuantizedModel<T>) -> u64 {
    model.weight_count() * model.variant.bits_per_weight() as u64 + model.bias_count() * 32
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LayerInfo {
    pub label: String,
    pub output_shape: Vec<usize>,
    pub weights: u64,
    pub biases: u64,
}

/// What `inspect` reports about a packed file.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PackedInfo {
    pub version: u8,
    pub variant: ModelVariant,
    pub name: String,
    pub input_shape: Vec<usize>,
    pub file_bytes: u64,
    pub layers: Vec<LayerInfo>,
    pub storage_bits: u64,
    pub histogram: Vec<(f64, u64)>,
}

pub fn inspect(bytes: &[u8]) -> Result<PackedInfo> {
    let model = from_bytes(bytes)?;
    let mut shape = model.input_shape.clone();
    let mut layers = Vec::with_capacity(model.layers.len());
    for l in &model.layers {
        if let Some(spec) = l.spec() {
            shape = spec.output_shape(&shape)?;
        }
        layers.push(LayerInfo {
            label: layer_label(l),
            output_shape: shape.clone(),
            weights: l.weights().map_or(0, |w| w.len() as u64),
            biases: l.bias().map_or(0, |b| b.len() as u64),
        });
    }
    Ok(PackedInfo {
        version: VERSION,
        variant: model.variant,
        name: model.name.clone(),
        input_shape: model.input_shape.clone(),
        file_bytes: bytes.len() as u64,
        layers,
        storage_bits: model_storage_bits(&model),
        histogram: model.weight_histogram(),
    })
}

#[cfg(test)]
mod tests;
