//! k-ones weight codebooks.
//!
//! A k-ones weight is `±(2^-m1 + … + 2^-mk)` with every `m` in
//! `[m_min, m_max]`; repeated exponents are allowed, so `2^-m + 2^-m` is a
//! legal k = 2 code. Binary codebooks hold only `±1`.
//!
//! Every codebook value is an integer multiple of `2^-m_max`, so all
//! comparisons below are exact in `f64`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest supported number of power-of-two terms per weight.
pub const MAX_TERMS: usize = 4;

/// Largest exponent the packed encodings can hold (three bits).
pub const MAX_ENCODED_EXPONENT: u8 = 7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CodebookKind {
    Binary,
    KOnes,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CodebookSpec {
    pub kind: CodebookKind,
    pub k: u8,
    pub m_min: u8,
    pub m_max: u8,
}

impl CodebookSpec {
    pub const fn binary() -> Self {
        CodebookSpec { kind: CodebookKind::Binary, k: 1, m_min: 0, m_max: 0 }
    }

    /// `k` terms with exponents `0..=7`.
    pub const fn k_ones(k: u8) -> Self {
        CodebookSpec { kind: CodebookKind::KOnes, k, m_min: 0, m_max: MAX_ENCODED_EXPONENT }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kind == CodebookKind::Binary {
            return Ok(());
        }
        if self.k == 0 || self.k as usize > MAX_TERMS {
            return Err(Error::InvalidCodebook(format!("k = {} not in 1..={MAX_TERMS}", self.k)));
        }
        if self.m_min > self.m_max {
            return Err(Error::InvalidCodebook(format!(
                "m_min {} exceeds m_max {}",
                self.m_min, self.m_max
            )));
        }
        Ok(())
    }

    /// Width of one packed weight: 1 (binary), 4 (k = 1) or 8 (k = 2, the
    /// 7-bit code padded to a byte).
    pub fn bits_per_weight(&self) -> Result<u32> {
        match (self.kind, self.k) {
            (CodebookKind::Binary, _) => Ok(1),
            (CodebookKind::KOnes, 1) => Ok(4),
            (CodebookKind::KOnes, 2) => Ok(8),
            (CodebookKind::KOnes, k) => Err(Error::Unsupported(format!("no packed encoding for k = {k}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Sign {
    Minus,
    Plus,
}

impl Sign {
    pub fn of(w: f64) -> Sign {
        if w < 0.0 {
            Sign::Minus
        } else {
            Sign::Plus
        }
    }

    pub fn is_negative(self) -> bool {
        self == Sign::Minus
    }

    pub fn factor(self) -> f64 {
        match self {
            Sign::Plus => 1.0,
            Sign::Minus => -1.0,
        }
    }
}

/// One quantized weight: a sign plus the non-decreasing exponent list.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct WeightCode {
    sign: Sign,
    len: u8,
    exponents: [u8; MAX_TERMS],
}

impl WeightCode {
    /// Builds a code, sorting the exponents.
    pub fn new(sign: Sign, exponents: &[u8]) -> Result<Self> {
        if exponents.is_empty() || exponents.len() > MAX_TERMS {
            return Err(Error::InvalidCode(format!("{} exponents", exponents.len())));
        }
        let mut buf = [0u8; MAX_TERMS];
        buf[..exponents.len()].copy_from_slice(exponents);
        buf[..exponents.len()].sort_unstable();
        Ok(WeightCode { sign, len: exponents.len() as u8, exponents: buf })
    }

    pub fn unit(sign: Sign) -> Self {
        WeightCode { sign, len: 1, exponents: [0; MAX_TERMS] }
    }

    pub fn sign(&self) -> Sign {
        self.sign
    }

    pub fn exponents(&self) -> &[u8] {
        &self.exponents[..self.len as usize]
    }

    pub fn value(&self) -> f64 {
        let magnitude: f64 = self.exponents().iter().map(|&m| (-(m as f64)).exp2()).sum();
        self.sign.factor() * magnitude
    }

    /// `|value| · 2^scale` as an integer; exact when `scale ≥` every exponent.
    pub fn scaled_magnitude(&self, scale: u8) -> u64 {
        self.exponents().iter().map(|&m| 1u64 << (scale - m)).sum()
    }

    /// Checks the code against a codebook's shape constraints.
    pub fn check(&self, spec: &CodebookSpec) -> Result<()> {
        match spec.kind {
            CodebookKind::Binary => {
                if self.exponents() != [0] {
                    return Err(Error::InvalidCode(format!("binary code must be ±1, got {self:?}")));
                }
            }
            CodebookKind::KOnes => {
                if self.len != spec.k {
                    return Err(Error::InvalidCode(format!(
                        "expected {} exponents, got {}",
                        spec.k, self.len
                    )));
                }
                for &m in self.exponents() {
                    if m < spec.m_min || m > spec.m_max {
                        return Err(Error::ExponentOutOfRange {
                            exponent: m as i32,
                            min: spec.m_min as i32,
                            max: spec.m_max as i32,
                        });
                    }
                }
            }
        }
        Ok(())
    }
}

impl std::fmt::Debug for WeightCode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = if self.sign.is_negative() { '-' } else { '+' };
        write!(f, "{s}{:?}", self.exponents())
    }
}

/// Stochastic-rounding bracket of a clamped weight.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RoundingNeighbors {
    pub w_l: f64,
    pub w_h: f64,
    /// Probability of rounding up to `w_h`.
    pub p: f64,
}

/// Ascending, deduplicated list of every representable value.
pub fn codebook_values(spec: &CodebookSpec) -> Vec<f64> {
    Codebook::new(*spec).map(|cb| cb.values).unwrap_or_default()
}

/// Precomputed codebook: sorted values with their canonical codes.
#[derive(Clone, Debug)]
pub struct Codebook {
    spec: CodebookSpec,
    values: Vec<f64>,
    codes: Vec<WeightCode>,
    /// `2^m_max`; every value is an integer multiple of its inverse.
    scale: f64,
    /// For grid cell `u + max_units`, the index of the largest value `≤ u / scale`.
    cell_floor: Vec<u16>,
}

impl Codebook {
    pub fn new(spec: CodebookSpec) -> Result<Self> {
        spec.validate()?;
        let mut magnitudes: Vec<(f64, [u8; MAX_TERMS])> = Vec::new();
        match spec.kind {
            CodebookKind::Binary => magnitudes.push((1.0, [0; MAX_TERMS])),
            CodebookKind::KOnes => {
                let mut current = [spec.m_min; MAX_TERMS];
                collect_multisets(&spec, 0, &mut current, &mut magnitudes);
            }
        }
        // Keep the first multiset for each value; exponents are enumerated in
        // lexicographic order so the canonical code is the smallest one.
        magnitudes.sort_by(|a, b| a.0.total_cmp(&b.0));
        magnitudes.dedup_by(|a, b| a.0 == b.0);

        let k = match spec.kind {
            CodebookKind::Binary => 1,
            CodebookKind::KOnes => spec.k as usize,
        };
        let mut values = Vec::with_capacity(magnitudes.len() * 2);
        let mut codes = Vec::with_capacity(magnitudes.len() * 2);
        for (mag, exps) in magnitudes.iter().rev() {
            values.push(-mag);
            codes.push(WeightCode::new(Sign::Minus, &exps[..k])?);
        }
        for (mag, exps) in &magnitudes {
            values.push(*mag);
            codes.push(WeightCode::new(Sign::Plus, &exps[..k])?);
        }
        let scale = (spec.m_max as f64).exp2();
        let max_units = (values[values.len() - 1] * scale) as i64;
        let cell_floor = (-max_units..=max_units)
            .map(|u| (values.partition_point(|&v| v <= u as f64 / scale) - 1) as u16)
            .collect();
        Ok(Codebook { spec, values, codes, scale, cell_floor })
    }

    pub fn spec(&self) -> &CodebookSpec {
        &self.spec
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn codes(&self) -> &[WeightCode] {
        &self.codes
    }

    pub fn max_magnitude(&self) -> f64 {
        *self.values.last().expect("codebook is never empty")
    }

    pub fn min_magnitude(&self) -> f64 {
        self.values[self.values.len() / 2]
    }

    /// Index of a member value, if `v` is representable.
    pub fn index_of(&self, v: f64) -> Option<usize> {
        self.values.binary_search_by(|x| x.total_cmp(&v)).ok()
    }

    /// Indices of the bracketing values of `w` after clamping to the range;
    /// both are the same index when `w` is a member.
    #[inline]
    fn bracket(&self, w: f64) -> (usize, usize, f64) {
        let last = self.values.len() - 1;
        let w = w.clamp(self.values[0], self.values[last]);
        // Shift to a non-negative grid position so truncation is a floor. The
        // addition can round up onto the next grid line; step back if so.
        let cell = (w * self.scale + (self.cell_floor.len() / 2) as f64) as usize;
        let mut lo = self.cell_floor[cell] as usize;
        lo -= (self.values[lo] > w) as usize;
        let hi = lo + (self.values[lo] != w) as usize;
        (lo, hi, w)
    }

    pub fn neighbors(&self, w: f64) -> RoundingNeighbors {
        let (lo, hi, w) = self.bracket(w);
        let (w_l, w_h) = (self.values[lo], self.values[hi]);
        let p = if w_h > w_l { (w - w_l) / (w_h - w_l) } else { 0.0 };
        RoundingNeighbors { w_l, w_h, p }
    }

    /// Index of the nearest value; ties go to the larger magnitude, and to the
    /// positive value when magnitudes are equal (only at `w = 0`).
    #[inline]
    pub fn nearest_index(&self, w: f64) -> usize {
        let (lo, hi, w) = self.bracket(w);
        let (w_l, w_h) = (self.values[lo], self.values[hi]);
        let mid = 0.5 * (w_l + w_h);
        let up = (w > mid) | ((w == mid) & (w_h.abs() >= w_l.abs()));
        lo + up as usize * (hi - lo)
    }

    /// Index chosen by stochastic rounding given a uniform draw `u ∈ [0, 1)`.
    #[inline]
    pub fn stochastic_index(&self, w: f64, u: f64) -> usize {
        let (lo, hi, w) = self.bracket(w);
        let (w_l, w_h) = (self.values[lo], self.values[hi]);
        // u < p with p = (w − w_l)/(w_h − w_l); members keep `lo`.
        lo + (u * (w_h - w_l) < w - w_l) as usize * (hi - lo)
    }

    pub fn approx_nearest(&self, w: f64) -> Result<WeightCode> {
        finite(w)?;
        Ok(self.codes[self.nearest_index(w)])
    }

    pub fn approx_stochastic<R: Rng + ?Sized>(&self, w: f64, rng: &mut R) -> Result<WeightCode> {
        finite(w)?;
        let u: f64 = rng.gen();
        Ok(self.codes[self.stochastic_index(w, u)])
    }
}

fn collect_multisets(
    spec: &CodebookSpec,
    depth: usize,
    current: &mut [u8; MAX_TERMS],
    out: &mut Vec<(f64, [u8; MAX_TERMS])>,
) {
    if depth == spec.k as usize {
        let value = current[..depth].iter().map(|&m| (-(m as f64)).exp2()).sum();
        out.push((value, *current));
        return;
    }
    let start = if depth == 0 { spec.m_min } else { current[depth - 1] };
    for m in start..=spec.m_max {
        current[depth] = m;
        collect_multisets(spec, depth + 1, current, out);
    }
}

fn finite(w: f64) -> Result<()> {
    if w.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(w))
    }
}

/// Deterministic projection onto the nearest codebook value.
pub fn approx_nearest(w: f64, spec: &CodebookSpec) -> Result<WeightCode> {
    Codebook::new(*spec)?.approx_nearest(w)
}

pub fn neighbors(w: f64, spec: &CodebookSpec) -> Result<RoundingNeighbors> {
    finite(w)?;
    Ok(Codebook::new(*spec)?.neighbors(w))
}

/// Unbiased stochastic projection: `w_h` with probability `p`, else `w_l`.
pub fn approx_stochastic<R: Rng + ?Sized>(w: f64, spec: &CodebookSpec, rng: &mut R) -> Result<WeightCode> {
    Codebook::new(*spec)?.approx_stochastic(w, rng)
}

/// `sign(w)` as a binary code, with `sign(0) = +1`.
pub fn binarize(w: f64) -> Result<WeightCode> {
    finite(w)?;
    Ok(WeightCode::unit(Sign::of(w)))
}

/// Packs a code into the low `bits_per_weight` bits of a `u8`.
///
/// * binary: `1` for +1, `0` for -1
/// * k = 1: `s mmm` (sign in bit 3)
/// * k = 2: `0 s m1 m1 m1 m2 m2 m2` with `m1 ≤ m2`
pub fn encode(code: &WeightCode, spec: &CodebookSpec) -> Result<u8> {
    let width = spec.bits_per_weight()?;
    code.check(spec)?;
    if let Some(&m) = code.exponents().iter().find(|&&m| m > MAX_ENCODED_EXPONENT) {
        return Err(Error::ExponentOutOfRange { exponent: m as i32, min: 0, max: MAX_ENCODED_EXPONENT as i32 });
    }
    let neg = code.sign().is_negative() as u8;
    Ok(match width {
        1 => 1 - neg,
        4 => (neg << 3) | code.exponents()[0],
        _ => {
            let e = code.exponents();
            (neg << 6) | (e[0] << 3) | e[1]
        }
    })
}

pub fn decode(bits: u8, spec: &CodebookSpec) -> Result<WeightCode> {
    let width = spec.bits_per_weight()?;
    let code = match width {
        1 => {
            if bits > 1 {
                return Err(Error::InvalidCode(format!("binary pattern {bits:#b}")));
            }
            WeightCode::unit(if bits == 1 { Sign::Plus } else { Sign::Minus })
        }
        4 => {
            if bits > 0xf {
                return Err(Error::InvalidCode(format!("nibble pattern {bits:#b}")));
            }
            let sign = if bits & 0x8 != 0 { Sign::Minus } else { Sign::Plus };
            WeightCode::new(sign, &[bits & 0x7])?
        }
        _ => {
            if bits & 0x80 != 0 {
                return Err(Error::InvalidCode(format!("reserved bit set in {bits:#010b}")));
            }
            let (m1, m2) = ((bits >> 3) & 0x7, bits & 0x7);
            if m1 > m2 {
                return Err(Error::InvalidCode(format!("unsorted exponents {m1} > {m2}")));
            }
            let sign = if bits & 0x40 != 0 { Sign::Minus } else { Sign::Plus };
            WeightCode::new(sign, &[m1, m2])?
        }
    };
    code.check(spec)?;
    Ok(code)
}
