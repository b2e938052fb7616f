use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::blockwise::{
    dequantize_blockwise, quantize_blockwise, QuantizedTensor, Scales, DEFAULT_BLOCK_SIZE,
};
use super::codebook::{Codebook, CodebookId};
use super::double_quant::{double_quantize_scales, DEFAULT_CHUNK_SIZE};
use super::gptq::{gptq_quantize_matrix, GptqConfig};
use crate::model::params::projection_weights;
use crate::model::{forward, ModelConfig, Parameters, Weights};
use crate::numerics::Tensor;
use crate::{Error, QuantMethod, Result, StageLabel};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantConfig {
    pub method: QuantMethod,
    pub codebook: CodebookId,
    pub block_size: usize,
    /// Compress block scales in chunks of this many; `None` keeps f32 scales.
    pub double_quant_chunk: Option<usize>,
    pub gptq: GptqConfig,
}

impl QuantConfig {
    /// NF4 with double quantization for bnb; uniform grid, plain scales for GPTQ.
    pub fn for_method(method: QuantMethod) -> Self {
        match method {
            QuantMethod::BnbNf4 => Self {
                method,
                codebook: CodebookId::Nf4,
                block_size: DEFAULT_BLOCK_SIZE,
                double_quant_chunk: Some(DEFAULT_CHUNK_SIZE),
                gptq: GptqConfig::default(),
            },
            QuantMethod::Gptq => Self {
                method,
                codebook: CodebookId::Uniform4,
                block_size: DEFAULT_BLOCK_SIZE,
                double_quant_chunk: None,
                gptq: GptqConfig::default(),
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.block_size == 0 {
            return Err(Error::Config("block_size must be >= 1".into()));
        }
        if self.double_quant_chunk == Some(0) {
            return Err(Error::Config("double-quant chunk must be >= 1".into()));
        }
        if self.method == QuantMethod::Gptq {
            self.gptq.validate()?;
        }
        Ok(())
    }
}

/// Stacked input activations per projection weight, `features × samples`.
pub type Calibration = BTreeMap<String, Tensor<f32>>;

/// Runs the full-precision model over `sequences` and stacks every
/// projection's input rows (one column per token position).
pub fn collect_calibration(
    params: &Parameters<f32>,
    cfg: &ModelConfig,
    sequences: &[Vec<usize>],
) -> Result<Calibration> {
    if sequences.is_empty() {
        return Err(Error::EmptyInput("calibration sequences"));
    }
    let mut rows: BTreeMap<String, (usize, Vec<f32>)> = BTreeMap::new();
    for seq in sequences {
        let (_, cache) = forward(params, cfg, seq)?;
        for (name, x) in cache.projection_inputs() {
            let e = rows.entry(name).or_insert((x.cols(), Vec::new()));
            e.1.extend_from_slice(x.data());
        }
    }
    rows.into_iter()
        .map(|(name, (f, data))| {
            let n = data.len() / f;
            Ok((name, Tensor::new(alloc::vec![n, f], data)?.transpose()))
        })
        .collect()
}

/// Quantized projections plus the untouched full-precision tensors.
///
/// Dequantized copies of the projections are cached so the model can be used
/// directly as a [`Weights`] source; it never trains its own tensors.
#[derive(Debug, Clone)]
pub struct QuantizedModel {
    pub config: QuantConfig,
    quantized: BTreeMap<String, QuantizedTensor>,
    dense: Parameters<f32>,
    cache: BTreeMap<String, Tensor<f32>>,
}

impl QuantizedModel {
    pub fn from_parts(
        config: QuantConfig,
        quantized: BTreeMap<String, QuantizedTensor>,
        dense: Parameters<f32>,
    ) -> Result<Self> {
        let mut cache = BTreeMap::new();
        for (name, q) in &quantized {
            if dense.contains(name) {
                return Err(Error::Corrupt(format!(
                    "{name} stored both quantized and dense"
                )));
            }
            cache.insert(name.clone(), dequantize_blockwise(q)?);
        }
        Ok(Self {
            config,
            quantized,
            dense,
            cache,
        })
    }

    pub fn method(&self) -> QuantMethod {
        self.config.method
    }

    pub fn label(&self) -> StageLabel {
        StageLabel::Ptq(self.config.method)
    }

    pub fn quantized(&self) -> &BTreeMap<String, QuantizedTensor> {
        &self.quantized
    }

    pub fn dense(&self) -> &Parameters<f32> {
        &self.dense
    }

    pub fn dequantized(&self, name: &str) -> Option<&Tensor<f32>> {
        self.cache.get(name)
    }

    /// Storage bits per weight over the quantized projections.
    pub fn bits_per_weight(&self) -> f64 {
        let (bits, n) = self.quantized.values().fold((0usize, 0usize), |(b, n), q| {
            (b + q.storage_bits(), n + q.len())
        });
        bits as f64 / n.max(1) as f64
    }

    /// Every tensor in full precision, projections dequantized.
    pub fn to_parameters(&self) -> Parameters<f32> {
        let mut p = self.dense.clone();
        for (name, t) in &self.cache {
            p.insert(name.clone(), t.clone());
        }
        p
    }
}

impl Weights<f32> for QuantizedModel {
    fn tensor(&self, name: &str) -> Result<&Tensor<f32>> {
        match self.cache.get(name) {
            Some(t) => Ok(t),
            None => self.dense.get(name),
        }
    }

    fn trains_base(&self, _name: &str) -> bool {
        false
    }
}

/// Quantizes every attention and MLP projection weight; embeddings, layer
/// norms, biases and the output head stay in full precision.
pub fn quantize_model(
    params: &Parameters<f32>,
    cfg: &ModelConfig,
    qc: &QuantConfig,
    calibration: Option<&Calibration>,
) -> Result<QuantizedModel> {
    qc.validate()?;
    params.validate(cfg)?;
    let codebook = Codebook::build(qc.codebook);
    let mut dense = params.clone();
    let mut quantized = BTreeMap::new();
    for name in projection_weights(cfg) {
        let w = dense
            .remove(&name)
            .ok_or_else(|| Error::UnknownName(name.clone()))?;
        let q = match qc.method {
            QuantMethod::BnbNf4 => {
                quantize_blockwise(&w, qc.block_size, &codebook, qc.double_quant_chunk)?
            }
            QuantMethod::Gptq => {
                let x = calibration
                    .and_then(|c| c.get(&name))
                    .ok_or_else(|| Error::MissingCalibration(name.clone()))?;
                let g = GptqConfig {
                    block_size: qc.block_size,
                    ..qc.gptq
                };
                let mut q = gptq_quantize_matrix(&w, x, &g, &codebook)?;
                if let (Some(chunk), Scales::Plain(s)) = (qc.double_quant_chunk, &q.scales) {
                    q.scales = Scales::Double(double_quantize_scales(s, chunk)?);
                }
                q
            }
        };
        quantized.insert(name, q);
    }
    QuantizedModel::from_parts(*qc, quantized, dense)
}
