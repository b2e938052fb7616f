use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::blockwise::{block_absmax, encode, QuantizedTensor, Scales, DEFAULT_BLOCK_SIZE};
use super::codebook::{nearest_index, Codebook};
use super::linalg::{cholesky_upper, spd_inverse};
use crate::numerics::Tensor;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GptqConfig {
    /// Damping added to the Hessian diagonal, relative to its mean.
    pub damping_ratio: f64,
    pub calibration_samples: usize,
    pub block_size: usize,
    /// Process columns by descending Hessian diagonal.
    pub act_order: bool,
}

impl Default for GptqConfig {
    fn default() -> Self {
        Self {
            damping_ratio: 0.01,
            calibration_samples: 128,
            block_size: DEFAULT_BLOCK_SIZE,
            act_order: false,
        }
    }
}

impl GptqConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.damping_ratio > 0.0) || !self.damping_ratio.is_finite() {
            return Err(Error::Config("damping_ratio must be > 0".into()));
        }
        if self.calibration_samples == 0 {
            return Err(Error::Config("calibration_samples must be >= 1".into()));
        }
        if self.block_size == 0 {
            return Err(Error::Config("block_size must be >= 1".into()));
        }
        Ok(())
    }
}

/// `H = 2 X Xᵀ` for `X` of shape `features × samples`, in f64.
pub fn hessian(x: &Tensor<f32>) -> Vec<f64> {
    let n = x.rows();
    let m = x.cols();
    let xd: Vec<f64> = x.data().iter().map(|&v| v as f64).collect();
    let mut h = alloc::vec![0.0; n * n];
    for i in 0..n {
        let ri = &xd[i * m..(i + 1) * m];
        for j in 0..=i {
            let rj = &xd[j * m..(j + 1) * m];
            let s: f64 = ri.iter().zip(rj).map(|(a, b)| a * b).sum::<f64>() * 2.0;
            h[i * n + j] = s;
            h[j * n + i] = s;
        }
    }
    h
}

/// Greedy column-by-column assignment of codes with error feedback.
///
/// `w` is `rows × cols`; `x` is the `cols × samples` calibration matrix;
/// `scales[i]` is the fixed scale of flattened element `i`. Each code is the
/// nearest level to `w_work / scale` (the same rule as round-to-nearest), and
/// the scaled quantization error of column `j` is pushed onto the not yet
/// quantized columns through the upper Cholesky factor of the damped `H⁻¹`.
pub fn gptq_codes(
    w: &Tensor<f32>,
    x: &Tensor<f32>,
    scales: &[f32],
    levels: &[f32],
    damping_ratio: f64,
    act_order: bool,
) -> Result<Vec<u8>> {
    if w.rank() != 2 || x.rank() != 2 {
        return Err(Error::Shape(
            "gptq expects 2-d weight and calibration matrices".into(),
        ));
    }
    let (rows, cols) = (w.rows(), w.cols());
    if x.rows() != cols {
        return Err(Error::Shape(alloc::format!(
            "calibration features {} != weight columns {}",
            x.rows(),
            cols
        )));
    }
    if scales.len() != w.len() {
        return Err(Error::Shape("one scale per weight element required".into()));
    }
    if x.cols() == 0 {
        return Err(Error::EmptyInput("calibration samples"));
    }
    if !w.all_finite() || !x.all_finite() {
        return Err(Error::NonFinite("gptq input"));
    }
    let zero = nearest_index(levels, 0.0);

    let mut h = hessian(x);
    let mean_diag = (0..cols).map(|i| h[i * cols + i]).sum::<f64>() / cols as f64;
    let damp = damping_ratio * mean_diag;
    for i in 0..cols {
        h[i * cols + i] += damp;
    }

    let mut perm: Vec<usize> = (0..cols).collect();
    if act_order {
        perm.sort_by(|&a, &b| h[b * cols + b].total_cmp(&h[a * cols + a]));
        let mut hp = alloc::vec![0.0; cols * cols];
        for (i, &pi) in perm.iter().enumerate() {
            for (j, &pj) in perm.iter().enumerate() {
                hp[i * cols + j] = h[pi * cols + pj];
            }
        }
        h = hp;
    }
    let u = cholesky_upper(&spd_inverse(&h, cols)?, cols)?;

    let mut codes = alloc::vec![0u8; w.len()];
    let mut work: Vec<f64> = Vec::with_capacity(cols);
    for r in 0..rows {
        work.clear();
        work.extend(perm.iter().map(|&c| w.at(r, c) as f64));
        for j in 0..cols {
            let idx = r * cols + perm[j];
            let s = scales[idx];
            let code = encode(levels, zero, work[j] as f32, s);
            codes[idx] = code;
            let q = s as f64 * levels[code as usize] as f64;
            let err = (work[j] - q) / u[j * cols + j];
            for k in j + 1..cols {
                work[k] -= err * u[j * cols + k];
            }
        }
    }
    Ok(codes)
}

/// GPTQ with blockwise absmax scales taken from the original `W`.
pub fn gptq_quantize_matrix(
    w: &Tensor<f32>,
    x: &Tensor<f32>,
    cfg: &GptqConfig,
    codebook: &Codebook,
) -> Result<QuantizedTensor> {
    cfg.validate()?;
    if !w.all_finite() {
        return Err(Error::NonFinite("quantization input"));
    }
    let block_scales = block_absmax(w.data(), cfg.block_size);
    let per_elem: Vec<f32> = (0..w.len())
        .map(|i| block_scales[i / cfg.block_size])
        .collect();
    let codes = gptq_codes(
        w,
        x,
        &per_elem,
        &codebook.values,
        cfg.damping_ratio,
        cfg.act_order,
    )?;
    QuantizedTensor::from_codes(
        w.shape().to_vec(),
        cfg.block_size,
        codebook.id,
        &codes,
        Scales::Plain(block_scales),
    )
}
