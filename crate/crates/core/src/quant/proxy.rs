use alloc::vec::Vec;

use super::blockwise::encode;
use super::codebook::nearest_index;
use crate::numerics::Tensor;
use crate::{Error, Result};

/// Layer reconstruction objective `‖(W − Ŵ) X‖²_F`, accumulated in f64.
pub fn proxy_loss(w: &Tensor<f32>, w_hat: &Tensor<f32>, x: &Tensor<f32>) -> Result<f64> {
    w.check_same_shape(w_hat)?;
    if w.rank() != 2 || x.rank() != 2 || x.rows() != w.cols() {
        return Err(Error::Shape(alloc::format!(
            "proxy loss: weight {:?} vs calibration {:?}",
            w.shape(),
            x.shape()
        )));
    }
    let (rows, cols, m) = (w.rows(), w.cols(), x.cols());
    let mut total = 0.0f64;
    let mut acc = alloc::vec![0.0f64; m];
    for r in 0..rows {
        acc.iter_mut().for_each(|a| *a = 0.0);
        for c in 0..cols {
            let d = w.at(r, c) as f64 - w_hat.at(r, c) as f64;
            if d != 0.0 {
                for (a, &xv) in acc.iter_mut().zip(x.row(c)) {
                    *a += d * xv as f64;
                }
            }
        }
        total += acc.iter().map(|a| a * a).sum::<f64>();
    }
    Ok(total)
}

/// Round-to-nearest codes under fixed per-element scales.
pub fn rtn_codes(w: &Tensor<f32>, scales: &[f32], levels: &[f32]) -> Vec<u8> {
    let zero = nearest_index(levels, 0.0);
    w.data()
        .iter()
        .zip(scales)
        .map(|(&v, &s)| encode(levels, zero, v, s))
        .collect()
}

/// `scale · level[code]` per element.
pub fn reconstruct(
    shape: &[usize],
    codes: &[u8],
    scales: &[f32],
    levels: &[f32],
) -> Result<Tensor<f32>> {
    let data = codes
        .iter()
        .zip(scales)
        .map(|(&c, &s)| s * levels[c as usize])
        .collect();
    Tensor::new(shape.to_vec(), data)
}
