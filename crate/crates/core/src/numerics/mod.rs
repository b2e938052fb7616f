//! Dense row-major tensors and the primitive operations the model is built from.

mod ops;
mod real;
mod rng;
mod tensor;

pub use ops::{
    add_row_bias, cross_entropy, gelu, gelu_grad, layer_norm_backward, layer_norm_rows,
    layer_norm_rows_cached, matmul, matmul_nt, matmul_tn, softmax_in_place, softmax_rows,
    LayerNormCache,
};
pub use real::Real;
pub use rng::{rng_normal, Rng};
pub use tensor::Tensor;
