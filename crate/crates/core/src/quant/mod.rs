//! 4-bit post-training quantization: codebooks, blockwise absmax with
//! double-quantized scales, and GPTQ.

mod blockwise;
mod codebook;
mod double_quant;
mod gptq;
pub mod linalg;
mod model;
mod pack;
mod proxy;

pub use blockwise::{
    block_absmax, dequantize_blockwise, format_bits_per_weight, quantize_blockwise,
    QuantizedTensor, Scales, DEFAULT_BLOCK_SIZE,
};
pub use codebook::{
    build_codebook, inverse_normal_cdf, max_adjacent_gap, nearest_index, Codebook, CodebookId,
    NF4_OFFSET,
};
pub use double_quant::{double_quantize_scales, DoubleQuantScales, DEFAULT_CHUNK_SIZE};
pub use gptq::{gptq_codes, gptq_quantize_matrix, hessian, GptqConfig};
pub use model::{collect_calibration, quantize_model, Calibration, QuantConfig, QuantizedModel};
pub use pack::{code_at, pack_codes, unpack_codes};
pub use proxy::{proxy_loss, reconstruct, rtn_codes};
