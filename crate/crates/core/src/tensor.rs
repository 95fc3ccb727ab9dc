//! Dense row-major arrays.
//!
//! Every reduction accumulates from `+0` in ascending index order of the
//! reduced dimension, so results are bit-reproducible and equal to the naive
//! loop nests. Zero operands may be skipped: starting from `+0`, adding a
//! signed zero never changes a running sum.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(
    try_from = "RawTensor<T>",
    bound(deserialize = "T: Scalar + serde::de::DeserializeOwned")
)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

#[derive(Deserialize)]
struct RawTensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> TryFrom<RawTensor<T>> for Tensor<T> {
    type Error = Error;

    fn try_from(raw: RawTensor<T>) -> Result<Self> {
        Tensor::new(raw.shape, raw.data)
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Shape(format!("zero-sized dimension in {shape:?}")));
        }
        if expected != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor { shape: shape.to_vec(), data: vec![T::zero(); shape.iter().product()] }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: (0..n).map(&mut f).collect() }
    }

    pub fn from_f64(shape: &[usize], values: &[f64]) -> Result<Self> {
        Tensor::new(shape.to_vec(), values.iter().map(|&v| T::narrow(v)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::Shape(format!("cannot reshape {:?} to {shape:?}", self.shape)));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&x| f(x)).collect() }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::Shape(format!("{:?} vs {:?}", self.shape, other.shape)));
        }
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Tensor { shape: self.shape.clone(), data })
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Rows `[start, end)` along the leading dimension.
    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Self> {
        let rows = self.shape[0];
        if start >= end || end > rows {
            return Err(Error::Shape(format!("rows {start}..{end} of {rows}")));
        }
        let stride = self.data.len() / rows;
        let mut shape = self.shape.clone();
        shape[0] = end - start;
        Ok(Tensor { shape, data: self.data[start * stride..end * stride].to_vec() })
    }

    /// Gathers the listed rows along the leading dimension.
    pub fn gather_rows(&self, rows: &[usize]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let stride = self.data.len() / self.shape[0];
        let mut data = Vec::with_capacity(rows.len() * stride);
        for &r in rows {
            if r >= self.shape[0] {
                return Err(Error::Shape(format!("row {r} out of {}", self.shape[0])));
            }
            data.extend_from_slice(&self.data[r * stride..(r + 1) * stride]);
        }
        let mut shape = self.shape.clone();
        shape[0] = rows.len();
        Ok(Tensor { shape, data })
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&x| U::narrow(x.widen())).collect() }
    }
}

fn dims2<T>(t: &Tensor<T>, what: &str) -> Result<(usize, usize)> {
    match t.shape[..] {
        [r, c] => Ok((r, c)),
        _ => Err(Error::Shape(format!("{what} must be rank 2, got {:?}", t.shape))),
    }
}

fn dims3<T>(t: &Tensor<T>, what: &str) -> Result<(usize, usize, usize)> {
    match t.shape[..] {
        [a, b, c] => Ok((a, b, c)),
        _ => Err(Error::Shape(format!("{what} must be rank 3, got {:?}", t.shape))),
    }
}

/// `a[M×K] · b[K×N]`.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = dims2(a, "lhs")?;
    let (k2, n) = dims2(b, "rhs")?;
    if k != k2 {
        return Err(Error::Shape(format!("matmul inner dimensions {k} vs {k2}")));
    }
    let mut out = vec![T::zero(); m * n];
    for (a_row, c_row) in a.data.chunks_exact(k).zip(out.chunks_exact_mut(n)) {
        for (&x, b_row) in a_row.iter().zip(b.data.chunks_exact(n)) {
            if x == T::zero() {
                continue;
            }
            for (c, &w) in c_row.iter_mut().zip(b_row) {
                *c += x * w;
            }
        }
    }
    Ok(Tensor { shape: vec![m, n], data: out })
}

/// `aᵀ · b` for `a[K×M]`, `b[K×N]`, reducing over `K` in order.
pub fn matmul_at<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (k, m) = dims2(a, "lhs")?;
    let (k2, n) = dims2(b, "rhs")?;
    if k != k2 {
        return Err(Error::Shape(format!("matmul_at leading dimensions {k} vs {k2}")));
    }
    let mut out = vec![T::zero(); m * n];
    for (a_row, b_row) in a.data.chunks_exact(m).zip(b.data.chunks_exact(n)) {
        for (&x, c_row) in a_row.iter().zip(out.chunks_exact_mut(n)) {
            if x == T::zero() {
                continue;
            }
            for (c, &g) in c_row.iter_mut().zip(b_row) {
                *c += x * g;
            }
        }
    }
    Ok(Tensor { shape: vec![m, n], data: out })
}

/// `a · bᵀ` for `a[M×K]`, `b[N×K]`.
pub fn matmul_bt<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = dims2(a, "lhs")?;
    let (n, k2) = dims2(b, "rhs")?;
    if k != k2 {
        return Err(Error::Shape(format!("matmul_bt inner dimensions {k} vs {k2}")));
    }
    let mut out = Vec::with_capacity(m * n);
    for a_row in a.data.chunks_exact(k) {
        for b_row in b.data.chunks_exact(k) {
            let mut acc = T::zero();
            for (&x, &y) in a_row.iter().zip(b_row) {
                acc += x * y;
            }
            out.push(acc);
        }
    }
    Ok(Tensor { shape: vec![m, n], data: out })
}

/// Output spatial size of a sliding window, if it tiles the input exactly.
pub fn window_output(size: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize> {
    let padded = size + 2 * pad;
    if stride == 0 || kernel == 0 || kernel > padded || (padded - kernel) % stride != 0 {
        return Err(Error::Shape(format!(
            "window {kernel} stride {stride} pad {pad} does not tile size {size}"
        )));
    }
    Ok((padded - kernel) / stride + 1)
}

/// Cross-correlation of `input[C×H×W]` with `kernels[F×C×kh×kw]`, zero padded.
pub fn conv2d<T: Scalar>(input: &Tensor<T>, kernels: &Tensor<T>, stride: usize, pad: usize) -> Result<Tensor<T>> {
    let (c, h, w) = dims3(input, "conv input")?;
    let [f, kc, kh, kw] = kernels.shape[..] else {
        return Err(Error::Shape(format!("kernels must be rank 4, got {:?}", kernels.shape)));
    };
    if kc != c {
        return Err(Error::Shape(format!("kernel channels {kc} vs input channels {c}")));
    }
    let oh = window_output(h, kh, stride, pad)?;
    let ow = window_output(w, kw, stride, pad)?;
    let mut out = Vec::with_capacity(f * oh * ow);
    for fi in 0..f {
        let kern = &kernels.data[fi * c * kh * kw..(fi + 1) * c * kh * kw];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = T::zero();
                for ci in 0..c {
                    for ky in 0..kh {
                        let Some(iy) = (oy * stride + ky).checked_sub(pad).filter(|&y| y < h) else {
                            continue;
                        };
                        for kx in 0..kw {
                            let Some(ix) = (ox * stride + kx).checked_sub(pad).filter(|&x| x < w) else {
                                continue;
                            };
                            acc += input.data[(ci * h + iy) * w + ix] * kern[(ci * kh + ky) * kw + kx];
                        }
                    }
                }
                out.push(acc);
            }
        }
    }
    Ok(Tensor { shape: vec![f, oh, ow], data: out })
}

/// Max pooling over `input[C×H×W]`; returns the flat input index of each
/// maximum (first occurrence wins).
pub fn maxpool<T: Scalar>(input: &Tensor<T>, window: usize, stride: usize) -> Result<(Tensor<T>, Vec<usize>)> {
    let (c, h, w) = dims3(input, "pool input")?;
    let oh = window_output(h, window, stride, 0)?;
    let ow = window_output(w, window, stride, 0)?;
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut idx = Vec::with_capacity(c * oh * ow);
    for ci in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = (ci * h + oy * stride) * w + ox * stride;
                for ky in 0..window {
                    for kx in 0..window {
                        let i = (ci * h + oy * stride + ky) * w + ox * stride + kx;
                        if input.data[i] > input.data[best] {
                            best = i;
                        }
                    }
                }
                out.push(input.data[best]);
                idx.push(best);
            }
        }
    }
    Ok((Tensor { shape: vec![c, oh, ow], data: out }, idx))
}
