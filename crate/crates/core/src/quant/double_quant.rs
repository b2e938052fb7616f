use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Default number of first-level scales sharing one second-level scale.
pub const DEFAULT_CHUNK_SIZE: usize = 256;

/// Blockwise scales compressed to 8-bit residuals around a per-chunk mean.
///
/// Reconstruction: `offset[c] + code[i] * (chunk_scale[c] / 127)` for scale `i`
/// in chunk `c = i / chunk_size`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DoubleQuantScales {
    pub chunk_size: usize,
    pub offsets: Vec<f32>,
    /// Absolute maximum residual of each chunk.
    pub chunk_scales: Vec<f32>,
    pub codes: Vec<i8>,
}

impl DoubleQuantScales {
    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    pub fn num_chunks(&self) -> usize {
        self.offsets.len()
    }

    #[inline]
    pub fn scale(&self, i: usize) -> f32 {
        let c = i / self.chunk_size;
        self.offsets[c] + self.codes[i] as f32 * (self.chunk_scales[c] / 127.0)
    }

    pub fn reconstruct(&self) -> Vec<f32> {
        (0..self.codes.len()).map(|i| self.scale(i)).collect()
    }

    pub fn validate(&self, expected_scales: usize) -> Result<()> {
        let chunks = expected_scales.div_ceil(self.chunk_size.max(1));
        if self.chunk_size == 0
            || self.codes.len() != expected_scales
            || self.offsets.len() != chunks
            || self.chunk_scales.len() != chunks
        {
            return Err(Error::Corrupt(alloc::format!(
                "double-quantized scales: {} codes / {} chunks for {} scales",
                self.codes.len(),
                self.offsets.len(),
                expected_scales
            )));
        }
        if self.codes.contains(&i8::MIN) {
            return Err(Error::Corrupt(
                "residual code -128 is outside the symmetric range".into(),
            ));
        }
        Ok(())
    }

    /// Storage in bits: one byte per scale, two f32 per chunk.
    pub fn storage_bits(&self) -> usize {
        8 * self.codes.len() + 64 * self.offsets.len()
    }
}

/// Per chunk: offset = mean, residuals quantized symmetric 8-bit absmax.
pub fn double_quantize_scales(scales: &[f32], chunk_size: usize) -> Result<DoubleQuantScales> {
    if scales.is_empty() {
        return Err(Error::EmptyInput("scales"));
    }
    if chunk_size == 0 {
        return Err(Error::Config("chunk_size must be >= 1".into()));
    }
    if scales.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("scales"));
    }
    let n_chunks = scales.len().div_ceil(chunk_size);
    let mut offsets = Vec::with_capacity(n_chunks);
    let mut chunk_scales = Vec::with_capacity(n_chunks);
    let mut codes = Vec::with_capacity(scales.len());
    for chunk in scales.chunks(chunk_size) {
        let mean = chunk.iter().map(|&s| s as f64).sum::<f64>() / chunk.len() as f64;
        let offset = mean as f32;
        let absmax = chunk
            .iter()
            .map(|&s| (s - offset).abs())
            .fold(0.0f32, f32::max);
        offsets.push(offset);
        chunk_scales.push(absmax);
        for &s in chunk {
            let code = if absmax == 0.0 {
                0
            } else {
                libm::round(((s - offset) / absmax * 127.0) as f64).clamp(-127.0, 127.0) as i8
            };
            codes.push(code);
        }
    }
    Ok(DoubleQuantScales {
        chunk_size,
        offsets,
        chunk_scales,
        codes,
    })
}
