use core::fmt;
use core::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CodebookId {
    Nf4,
    Uniform4,
}

impl CodebookId {
    /// Stable byte used by the checkpoint format.
    pub fn code(self) -> u8 {
        match self {
            CodebookId::Nf4 => 0,
            CodebookId::Uniform4 => 1,
        }
    }

    pub fn from_code(c: u8) -> Result<Self> {
        match c {
            0 => Ok(CodebookId::Nf4),
            1 => Ok(CodebookId::Uniform4),
            other => Err(Error::Corrupt(alloc::format!(
                "unknown codebook id {other}"
            ))),
        }
    }
}

impl FromStr for CodebookId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "nf4" => Ok(CodebookId::Nf4),
            "uniform4" => Ok(CodebookId::Uniform4),
            other => Err(Error::Config(alloc::format!("unknown codebook `{other}`"))),
        }
    }
}

impl fmt::Display for CodebookId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CodebookId::Nf4 => "nf4",
            CodebookId::Uniform4 => "uniform4",
        })
    }
}

/// Sixteen strictly increasing reconstruction levels spanning `[-1, 1]`,
/// with `0.0` exactly representable.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Codebook {
    pub id: CodebookId,
    pub values: [f32; 16],
}

/// Probability offset of the outermost NF4 quantile, `1 - (1/32 + 1/30) / 2`.
pub const NF4_OFFSET: f64 = 1.0 - (1.0 / 32.0 + 1.0 / 30.0) / 2.0;

fn linspace(a: f64, b: f64, n: usize) -> impl Iterator<Item = f64> {
    (0..n).map(move |i| a + (b - a) * i as f64 / (n - 1) as f64)
}

impl Codebook {
    pub fn build(id: CodebookId) -> Self {
        let values = match id {
            CodebookId::Nf4 => nf4_values(),
            CodebookId::Uniform4 => uniform4_values(),
        };
        Self { id, values }
    }

    pub fn nearest(&self, x: f32) -> u8 {
        nearest_index(&self.values, x)
    }

    pub fn zero_index(&self) -> u8 {
        self.values
            .iter()
            .position(|&v| v == 0.0)
            .expect("codebook contains zero") as u8
    }

    pub fn max_gap(&self) -> f32 {
        max_adjacent_gap(&self.values)
    }
}

/// `build_codebook` under its operational name.
pub fn build_codebook(id: CodebookId) -> Codebook {
    Codebook::build(id)
}

/// NF4: 8 positive and 7 negative standard-normal quantiles plus an exact zero,
/// normalized by the largest magnitude.
fn nf4_values() -> [f32; 16] {
    let mut v = [0.0f64; 16];
    let mut i = 0;
    for p in linspace(1.0 - NF4_OFFSET, 0.5, 8).take(7) {
        v[i] = inverse_normal_cdf(p);
        i += 1;
    }
    v[i] = 0.0;
    i += 1;
    let pos: alloc::vec::Vec<f64> = linspace(NF4_OFFSET, 0.5, 9).take(8).collect();
    for &p in pos.iter().rev() {
        v[i] = inverse_normal_cdf(p);
        i += 1;
    }
    let max = v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let mut out = [0.0f32; 16];
    for (o, x) in out.iter_mut().zip(v) {
        *o = (x / max) as f32;
    }
    out
}

/// `-1 + 2k/15`, with the level nearest zero (k = 7 under the lower-index
/// tie rule) replaced by exactly zero.
fn uniform4_values() -> [f32; 16] {
    let mut out = [0.0f32; 16];
    for (k, o) in out.iter_mut().enumerate() {
        *o = (-1.0 + 2.0 * k as f64 / 15.0) as f32;
    }
    let zi = nearest_index(&out, 0.0) as usize;
    out[zi] = 0.0;
    out
}

/// Index of the level closest to `x`; ties go to the lower index.
#[inline]
pub fn nearest_index(levels: &[f32], x: f32) -> u8 {
    let mut best = 0usize;
    let mut best_d = f32::INFINITY;
    for (i, &v) in levels.iter().enumerate() {
        let d = (x - v).abs();
        if d < best_d {
            best_d = d;
            best = i;
        }
    }
    best as u8
}

pub fn max_adjacent_gap(levels: &[f32]) -> f32 {
    levels.windows(2).map(|w| w[1] - w[0]).fold(0.0, f32::max)
}

/// Standard normal quantile function.
///
/// Acklam's rational approximation followed by one Halley step against
/// `erfc`, accurate to roughly 1e-15 over `(0, 1)`.
pub fn inverse_normal_cdf(p: f64) -> f64 {
    if p <= 0.0 {
        return f64::NEG_INFINITY;
    }
    if p >= 1.0 {
        return f64::INFINITY;
    }
    const A: [f64; 6] = [
        -3.969683028665376e+01,
        2.209460984245205e+02,
        -2.759285104469687e+02,
        1.383577518672690e+02,
        -3.066479806614716e+01,
        2.506628277459239e+00,
    ];
    const B: [f64; 5] = [
        -5.447609879822406e+01,
        1.615858368580409e+02,
        -1.556989798598866e+02,
        6.680131188771972e+01,
        -1.328068155288572e+01,
    ];
    const C: [f64; 6] = [
        -7.784894002430293e-03,
        -3.223964580411365e-01,
        -2.400758277161838e+00,
        -2.549732539343734e+00,
        4.374664141464968e+00,
        2.938163982698783e+00,
    ];
    const D: [f64; 4] = [
        7.784695709041462e-03,
        3.224671290700398e-01,
        2.445134137142996e+00,
        3.754408661907416e+00,
    ];
    const LOW: f64 = 0.02425;
    let x = if p < LOW {
        let q = libm::sqrt(-2.0 * libm::log(p));
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if p <= 1.0 - LOW {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        let q = libm::sqrt(-2.0 * libm::log(1.0 - p));
        -(((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    };
    let e = 0.5 * libm::erfc(-x / core::f64::consts::SQRT_2) - p;
    let u = e * libm::sqrt(2.0 * core::f64::consts::PI) * libm::exp(x * x / 2.0);
    x - u / (1.0 + x * u / 2.0)
}
