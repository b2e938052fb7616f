use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::codebook::{nearest_index, Codebook, CodebookId};
use super::double_quant::{double_quantize_scales, DoubleQuantScales};
use super::pack::{code_at, pack_codes, unpack_codes};
use crate::numerics::Tensor;
use crate::{Error, Result};

/// Default number of consecutive weights sharing one absmax scale.
pub const DEFAULT_BLOCK_SIZE: usize = 64;

/// First-level block scales, plain or double-quantized.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Scales {
    Plain(Vec<f32>),
    Double(DoubleQuantScales),
}

impl Scales {
    pub fn len(&self) -> usize {
        match self {
            Scales::Plain(s) => s.len(),
            Scales::Double(d) => d.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn values(&self) -> Vec<f32> {
        match self {
            Scales::Plain(s) => s.clone(),
            Scales::Double(d) => d.reconstruct(),
        }
    }

    pub fn storage_bits(&self) -> usize {
        match self {
            Scales::Plain(s) => 32 * s.len(),
            Scales::Double(d) => d.storage_bits(),
        }
    }
}

/// 4-bit codes packed two per byte plus one scale per block of the flattened tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantizedTensor {
    pub shape: Vec<usize>,
    pub block_size: usize,
    pub codebook: CodebookId,
    /// Packed codes, low nibble = even element index.
    pub codes: Vec<u8>,
    pub scales: Scales,
}

impl QuantizedTensor {
    /// Builds from unpacked codes, checking every invariant.
    pub fn from_codes(
        shape: Vec<usize>,
        block_size: usize,
        codebook: CodebookId,
        codes: &[u8],
        scales: Scales,
    ) -> Result<Self> {
        if let Some(&c) = codes.iter().find(|&&c| c >= 16) {
            return Err(Error::Corrupt(format!("code {c} does not fit in 4 bits")));
        }
        let q = Self {
            shape,
            block_size,
            codebook,
            codes: pack_codes(codes),
            scales,
        };
        q.validate()?;
        Ok(q)
    }

    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn num_blocks(&self) -> usize {
        self.len().div_ceil(self.block_size.max(1))
    }

    pub fn code(&self, i: usize) -> u8 {
        code_at(&self.codes, i)
    }

    pub fn unpacked_codes(&self) -> Vec<u8> {
        unpack_codes(&self.codes, self.len())
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        if self.block_size == 0 {
            return Err(Error::Corrupt("block size 0".into()));
        }
        if self.codes.len() != n.div_ceil(2) {
            return Err(Error::Corrupt(format!(
                "{} code bytes for {} elements",
                self.codes.len(),
                n
            )));
        }
        if n % 2 == 1 && self.codes[n / 2] >> 4 != 0 {
            return Err(Error::Corrupt("nonzero padding nibble".into()));
        }
        let blocks = self.num_blocks();
        match &self.scales {
            Scales::Plain(s) if s.len() != blocks => Err(Error::Corrupt(format!(
                "{} scales for {} blocks",
                s.len(),
                blocks
            ))),
            Scales::Plain(s) if s.iter().any(|v| !v.is_finite()) => {
                Err(Error::Corrupt("non-finite scale".into()))
            }
            Scales::Double(d) => d.validate(blocks),
            _ => Ok(()),
        }
    }

    /// Exact storage of codes and scales in bits.
    pub fn storage_bits(&self) -> usize {
        8 * self.codes.len() + self.scales.storage_bits()
    }

    pub fn bits_per_weight(&self) -> f64 {
        self.storage_bits() as f64 / self.len() as f64
    }
}

/// Bits per weight implied by the format: 4-bit codes, plus either one f32
/// scale per block or one i8 scale per block and two f32 per chunk of blocks.
pub fn format_bits_per_weight(block_size: usize, double_quant_chunk: Option<usize>) -> f64 {
    let b = block_size as f64;
    match double_quant_chunk {
        None => 4.0 + 32.0 / b,
        Some(c) => 4.0 + 8.0 / b + 64.0 / (b * c as f64),
    }
}

/// Absmax of each consecutive block of the flattened data.
pub fn block_absmax(data: &[f32], block_size: usize) -> Vec<f32> {
    data.chunks(block_size)
        .map(|b| b.iter().fold(0.0f32, |m, v| m.max(v.abs())))
        .collect()
}

/// Code of `w` under scale `s`; zero-scale blocks encode the zero level.
#[inline]
pub(crate) fn encode(levels: &[f32], zero: u8, w: f32, s: f32) -> u8 {
    if s == 0.0 {
        zero
    } else {
        nearest_index(levels, w / s)
    }
}

/// Blockwise absmax quantization of the flattened tensor.
///
/// Codes are chosen against the exact block absmax; when `double_quant_chunk`
/// is set the stored scales are then compressed with [`double_quantize_scales`].
pub fn quantize_blockwise(
    w: &Tensor<f32>,
    block_size: usize,
    codebook: &Codebook,
    double_quant_chunk: Option<usize>,
) -> Result<QuantizedTensor> {
    if block_size == 0 {
        return Err(Error::Config("block_size must be >= 1".into()));
    }
    if !w.all_finite() {
        return Err(Error::NonFinite("quantization input"));
    }
    let scales = block_absmax(w.data(), block_size);
    let zero = codebook.zero_index();
    let codes: Vec<u8> = w
        .data()
        .iter()
        .enumerate()
        .map(|(i, &x)| encode(&codebook.values, zero, x, scales[i / block_size]))
        .collect();
    let scales = match double_quant_chunk {
        Some(chunk) if !scales.is_empty() => {
            Scales::Double(double_quantize_scales(&scales, chunk)?)
        }
        _ => Scales::Plain(scales),
    };
    QuantizedTensor::from_codes(w.shape().to_vec(), block_size, codebook.id, &codes, scales)
}

/// `w[i] = scale(block(i)) * codebook[code(i)]`.
pub fn dequantize_blockwise(q: &QuantizedTensor) -> Result<Tensor<f32>> {
    q.validate()?;
    let cb = Codebook::build(q.codebook);
    let scales = q.scales.values();
    let data = (0..q.len())
        .map(|i| scales[i / q.block_size] * cb.values[q.code(i) as usize])
        .collect();
    Tensor::new(q.shape.clone(), data)
}
