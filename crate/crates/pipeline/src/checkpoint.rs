//! `PQLR` binary checkpoints.
//!
//! Little-endian throughout:
//!
//! ```text
//! "PQLR"  version:u32  total_len:u64
//! meta_count:u32   { key_len:u32 key  val_len:u32 val }*
//! entry_count:u32  { name_len:u32 name  dtype:u8  rank:u32  dims:u64*rank
//!                    offset:u64  length:u64
//!                    [q4 only] codebook:u8  block:u32  dq:u8  chunk:u32 }*
//! data section (payloads, contiguous, in directory order)
//! crc32:u32 over every preceding byte
//! ```
//!
//! An f32 payload is the raw values. A q4 payload is the packed codes
//! (two per byte, low nibble first) followed by either one f32 scale per
//! block, or one i8 residual per block, then per-chunk f32 offsets and
//! per-chunk f32 scales when the scales are double-quantized.
//!
//! The loader only accepts the canonical layout the writer produces: sorted
//! unique keys and names, contiguous payloads, no slack bytes.

use std::collections::BTreeMap;
use std::path::Path;

use ptqlora_core::adapter::{adapter_tensors, adapters_from_tensors, Adapters, QLoraModel};
use ptqlora_core::model::{ModelConfig, Parameters};
use ptqlora_core::quant::{
    CodebookId, DoubleQuantScales, QuantConfig, QuantizedModel, QuantizedTensor, Scales,
};
use ptqlora_core::{StageLabel, Tensor};

use crate::error::{PipelineError, Result};

pub const MAGIC: &[u8; 4] = b"PQLR";
pub const VERSION: u32 = 1;

const DTYPE_F32: u8 = 0;
const DTYPE_Q4: u8 = 1;

pub const META_STAGE: &str = "stage";
pub const META_MODEL: &str = "model_config";
pub const META_QUANT: &str = "quant_config";
pub const META_LORA_ALPHA: &str = "lora_alpha";

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, String>,
    pub dense: BTreeMap<String, Tensor<f32>>,
    pub quantized: BTreeMap<String, QuantizedTensor>,
}

/// Bytes taken by one entry's payload.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SectionSize {
    pub name: String,
    pub quantized: bool,
    pub elements: usize,
    pub bytes: usize,
}

impl Checkpoint {
    fn with_stage(stage: StageLabel, cfg: &ModelConfig) -> Self {
        let mut meta = BTreeMap::new();
        meta.insert(META_STAGE.into(), stage.as_str().into());
        meta.insert(
            META_MODEL.into(),
            serde_json::to_string(cfg).expect("model config serializes"),
        );
        Self {
            meta,
            ..Default::default()
        }
    }

    pub fn from_params(stage: StageLabel, cfg: &ModelConfig, p: &Parameters<f32>) -> Self {
        let mut c = Self::with_stage(stage, cfg);
        c.dense = p.as_map().clone();
        c
    }

    pub fn from_quantized(cfg: &ModelConfig, qm: &QuantizedModel) -> Self {
        let mut c = Self::with_stage(qm.label(), cfg);
        c.meta.insert(
            META_QUANT.into(),
            serde_json::to_string(&qm.config).expect("quant config serializes"),
        );
        c.dense = qm.dense().as_map().clone();
        c.quantized = qm.quantized().clone();
        c
    }

    pub fn from_qlora(cfg: &ModelConfig, m: &QLoraModel<QuantizedModel>) -> Self {
        let mut c = Self::from_quantized(cfg, &m.base);
        c.meta.insert(
            META_STAGE.into(),
            StageLabel::PtqQlora(m.base.method()).as_str().into(),
        );
        if let Some(a) = m.adapters.values().next() {
            c.meta
                .insert(META_LORA_ALPHA.into(), format!("{:?}", a.alpha));
        }
        c.dense.extend(adapter_tensors(&m.adapters));
        c
    }

    pub fn stage(&self) -> Result<StageLabel> {
        let s = self
            .meta
            .get(META_STAGE)
            .ok_or_else(|| PipelineError::Manifest("checkpoint has no stage label".into()))?;
        Ok(s.parse()?)
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let s = self
            .meta
            .get(META_MODEL)
            .ok_or_else(|| PipelineError::Manifest("checkpoint has no model config".into()))?;
        Ok(serde_json::from_str(s)?)
    }

    fn quant_config(&self) -> Result<QuantConfig> {
        let s = self.meta.get(META_QUANT).ok_or_else(|| {
            PipelineError::Manifest("checkpoint has no quantization config".into())
        })?;
        Ok(serde_json::from_str(s)?)
    }

    pub fn into_params(self) -> Result<Parameters<f32>> {
        if !self.quantized.is_empty() {
            return Err(PipelineError::Manifest(
                "expected a dense checkpoint, found quantized tensors".into(),
            ));
        }
        let cfg = self.model_config()?;
        let p = Parameters::from_map(self.dense);
        p.validate(&cfg)?;
        Ok(p)
    }

    fn split_adapters(mut self) -> (Self, BTreeMap<String, Tensor<f32>>) {
        let names: Vec<String> = self
            .dense
            .keys()
            .filter(|n| n.ends_with(".lora_a") || n.ends_with(".lora_b"))
            .cloned()
            .collect();
        let mut ad = BTreeMap::new();
        for n in names {
            let t = self.dense.remove(&n).expect("name listed above");
            ad.insert(n, t);
        }
        (self, ad)
    }

    pub fn into_quantized(self) -> Result<QuantizedModel> {
        let (c, ad) = self.split_adapters();
        if !ad.is_empty() {
            return Err(PipelineError::Manifest(
                "checkpoint carries adapters; load it as a QLoRA model".into(),
            ));
        }
        c.build_quantized()
    }

    fn build_quantized(self) -> Result<QuantizedModel> {
        let cfg = self.model_config()?;
        let qc = self.quant_config()?;
        let dense = Parameters::from_map(self.dense);
        let qm = QuantizedModel::from_parts(qc, self.quantized, dense)?;
        Parameters::from_map(qm.to_parameters().into_map()).validate(&cfg)?;
        Ok(qm)
    }

    pub fn into_qlora(self) -> Result<QLoraModel<QuantizedModel>> {
        let alpha: f64 = self
            .meta
            .get(META_LORA_ALPHA)
            .ok_or_else(|| PipelineError::Manifest("checkpoint has no adapter alpha".into()))?
            .parse()
            .map_err(|_| PipelineError::Manifest("adapter alpha is not a number".into()))?;
        let (c, ad) = self.split_adapters();
        let adapters: Adapters<f32> = adapters_from_tensors(&ad, alpha)?;
        Ok(QLoraModel::new(c.build_quantized()?, adapters)?)
    }

    fn entries(&self) -> impl Iterator<Item = Entry<'_>> {
        // dense and quantized names are disjoint; merge them into one sorted directory
        let mut all: Vec<Entry<'_>> = self
            .dense
            .iter()
            .map(|(n, t)| Entry::F32(n, t))
            .chain(self.quantized.iter().map(|(n, q)| Entry::Q4(n, q)))
            .collect();
        all.sort_by(|a, b| a.name().cmp(b.name()));
        all.into_iter()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        for n in self.quantized.keys() {
            if self.dense.contains_key(n) {
                return Err(PipelineError::Manifest(format!(
                    "{n} stored both dense and quantized"
                )));
            }
        }
        let entries: Vec<Entry<'_>> = self.entries().collect();
        let mut head = Vec::new();
        put_u32(&mut head, self.meta.len() as u32);
        for (k, v) in &self.meta {
            put_str(&mut head, k);
            put_str(&mut head, v);
        }
        put_u32(&mut head, entries.len() as u32);
        let mut offset = 0u64;
        for e in &entries {
            put_str(&mut head, e.name());
            let shape = e.shape();
            head.push(if matches!(e, Entry::F32(..)) {
                DTYPE_F32
            } else {
                DTYPE_Q4
            });
            put_u32(&mut head, shape.len() as u32);
            for &d in shape {
                put_u64(&mut head, d as u64);
            }
            let len = e.payload_len() as u64;
            put_u64(&mut head, offset);
            put_u64(&mut head, len);
            offset += len;
            if let Entry::Q4(_, q) = e {
                head.push(q.codebook.code());
                put_u32(&mut head, q.block_size as u32);
                match &q.scales {
                    Scales::Plain(_) => {
                        head.push(0);
                        put_u32(&mut head, 0);
                    }
                    Scales::Double(d) => {
                        head.push(1);
                        put_u32(&mut head, d.chunk_size as u32);
                    }
                }
            }
        }
        let total = 4 + 4 + 8 + head.len() as u64 + offset + 4;
        let mut out = Vec::with_capacity(total as usize);
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION);
        put_u64(&mut out, total);
        out.extend_from_slice(&head);
        for e in &entries {
            e.write_payload(&mut out);
        }
        let crc = crc32fast::hash(&out);
        put_u32(&mut out, crc);
        debug_assert_eq!(out.len() as u64, total);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let body = verified_body(bytes)?;
        let mut r = Reader::new(body);
        let (meta, dir) = parse_directory(&mut r)?;
        parse_payloads(meta, dir, &body[r.pos..])
    }

    /// Entry directory of serialized checkpoint bytes, payloads not decoded.
    pub fn directory(bytes: &[u8]) -> Result<Vec<SectionSize>> {
        let mut r = Reader::new(verified_body(bytes)?);
        let (_, dir) = parse_directory(&mut r)?;
        Ok(dir
            .into_iter()
            .map(|e| SectionSize {
                elements: e.shape.iter().product(),
                name: e.name,
                quantized: e.dtype == DTYPE_Q4,
                bytes: e.len,
            })
            .collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        // write-then-rename so a crash never leaves a half-written checkpoint
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, &bytes).map_err(|e| PipelineError::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| PipelineError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| PipelineError::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

enum Entry<'a> {
    F32(&'a String, &'a Tensor<f32>),
    Q4(&'a String, &'a QuantizedTensor),
}

impl Entry<'_> {
    fn name(&self) -> &str {
        match self {
            Entry::F32(n, _) | Entry::Q4(n, _) => n,
        }
    }

    fn shape(&self) -> &[usize] {
        match self {
            Entry::F32(_, t) => t.shape(),
            Entry::Q4(_, q) => &q.shape,
        }
    }

    fn payload_len(&self) -> usize {
        match self {
            Entry::F32(_, t) => 4 * t.len(),
            Entry::Q4(_, q) => q4_payload_len(q.len(), q.num_blocks(), q.scales.chunk_count()),
        }
    }

    fn write_payload(&self, out: &mut Vec<u8>) {
        match self {
            Entry::F32(_, t) => {
                for v in t.data() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
            Entry::Q4(_, q) => {
                out.extend_from_slice(&q.codes);
                match &q.scales {
                    Scales::Plain(s) => {
                        for v in s {
                            out.extend_from_slice(&v.to_le_bytes());
                        }
                    }
                    Scales::Double(d) => {
                        out.extend(d.codes.iter().map(|&c| c as u8));
                        for v in d.offsets.iter().chain(&d.chunk_scales) {
                            out.extend_from_slice(&v.to_le_bytes());
                        }
                    }
                }
            }
        }
    }
}

trait ChunkCount {
    fn chunk_count(&self) -> Option<usize>;
}

impl ChunkCount for Scales {
    fn chunk_count(&self) -> Option<usize> {
        match self {
            Scales::Plain(_) => None,
            Scales::Double(d) => Some(d.num_chunks()),
        }
    }
}

fn q4_payload_len(n: usize, blocks: usize, chunks: Option<usize>) -> usize {
    let codes = n.div_ceil(2);
    match chunks {
        None => codes + 4 * blocks,
        Some(c) => codes + blocks + 8 * c,
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len() as u32);
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(PipelineError::Truncated(format!("while reading {what}")));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4, what)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8, what)?.try_into().expect("8 bytes"),
        ))
    }

    fn usize(&mut self, what: &str) -> Result<usize> {
        usize::try_from(self.u64(what)?).map_err(|_| corrupt(format!("{what} overflows")))
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let n = self.u32(what)? as usize;
        let b = self.take(n, what)?;
        String::from_utf8(b.to_vec()).map_err(|_| corrupt(format!("{what} is not UTF-8")))
    }

    fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        let b = self.take(
            n.checked_mul(4)
                .ok_or_else(|| corrupt("size overflow".into()))?,
            what,
        )?;
        Ok(b.chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }
}

/// Checks magic, version, length and checksum; returns the bytes between
/// the fixed header and the checksum.
fn verified_body(bytes: &[u8]) -> Result<&[u8]> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(PipelineError::BadMagic);
    }
    let mut r = Reader::new(&bytes[4..]);
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(PipelineError::UnsupportedVersion(version));
    }
    let total = r.u64("length")?;
    if (bytes.len() as u64) < total {
        return Err(PipelineError::Truncated(format!(
            "file has {} of {} bytes",
            bytes.len(),
            total
        )));
    }
    if bytes.len() as u64 > total {
        return Err(PipelineError::Manifest(format!(
            "{} trailing bytes after checkpoint",
            bytes.len() as u64 - total
        )));
    }
    if total < 20 {
        return Err(corrupt(format!(
            "declared length {total} is below the header size"
        )));
    }
    let body_end = bytes.len() - 4;
    let stored = u32::from_le_bytes(bytes[body_end..].try_into().expect("4 bytes"));
    let computed = crc32fast::hash(&bytes[..body_end]);
    if stored != computed {
        return Err(PipelineError::ChecksumMismatch { stored, computed });
    }
    Ok(&bytes[16..body_end])
}

fn corrupt(msg: String) -> PipelineError {
    PipelineError::Core(ptqlora_core::Error::Corrupt(msg))
}

struct DirEntry {
    name: String,
    dtype: u8,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
    q4: Option<(CodebookId, usize, Option<usize>)>,
}

type Directory = (BTreeMap<String, String>, Vec<DirEntry>);

fn parse_directory(r: &mut Reader<'_>) -> Result<Directory> {
    let mut meta = BTreeMap::new();
    let n_meta = r.u32("meta count")?;
    let mut last: Option<String> = None;
    for _ in 0..n_meta {
        let k = r.string("meta key")?;
        let v = r.string("meta value")?;
        if last.as_ref().is_some_and(|l| *l >= k) {
            return Err(corrupt(format!("meta key `{k}` out of order")));
        }
        last = Some(k.clone());
        meta.insert(k, v);
    }
    let n_entries = r.u32("entry count")?;
    let mut dir = Vec::new();
    let mut last: Option<String> = None;
    let mut expect_offset = 0usize;
    for _ in 0..n_entries {
        let name = r.string("entry name")?;
        if last.as_ref().is_some_and(|l| *l >= name) {
            return Err(corrupt(format!("entry `{name}` out of order")));
        }
        last = Some(name.clone());
        let dtype = r.u8("dtype")?;
        if dtype != DTYPE_F32 && dtype != DTYPE_Q4 {
            return Err(corrupt(format!("{name}: unknown dtype {dtype}")));
        }
        let rank = r.u32("rank")? as usize;
        if rank > 8 {
            return Err(corrupt(format!("{name}: rank {rank} too large")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.usize("dimension")?);
        }
        let elements = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| corrupt(format!("{name}: shape overflows")))?;
        let offset = r.usize("offset")?;
        let len = r.usize("length")?;
        if offset != expect_offset {
            return Err(corrupt(format!(
                "{name}: payload offset {offset}, expected {expect_offset}"
            )));
        }
        let q4 = if dtype == DTYPE_Q4 {
            let cb = CodebookId::from_code(r.u8("codebook")?)?;
            let block = r.u32("block size")? as usize;
            let dq = r.u8("double-quant flag")?;
            let chunk = r.u32("chunk size")? as usize;
            if block == 0 {
                return Err(corrupt(format!("{name}: zero block size")));
            }
            let chunk = match (dq, chunk) {
                (0, 0) => None,
                (1, c) if c > 0 => Some(c),
                _ => return Err(corrupt(format!("{name}: bad double-quant fields"))),
            };
            Some((cb, block, chunk))
        } else {
            None
        };
        let want = match q4 {
            None => elements.checked_mul(4),
            Some((_, block, chunk)) => {
                let blocks = elements.div_ceil(block);
                Some(q4_payload_len(
                    elements,
                    blocks,
                    chunk.map(|c| blocks.div_ceil(c)),
                ))
            }
        };
        if want != Some(len) {
            return Err(corrupt(format!(
                "{name}: payload length {len} does not match its shape"
            )));
        }
        expect_offset = offset
            .checked_add(len)
            .ok_or_else(|| corrupt("offset overflow".into()))?;
        dir.push(DirEntry {
            name,
            dtype,
            shape,
            offset,
            len,
            q4,
        });
    }
    Ok((meta, dir))
}

fn parse_payloads(
    meta: BTreeMap<String, String>,
    dir: Vec<DirEntry>,
    data: &[u8],
) -> Result<Checkpoint> {
    let mut ck = Checkpoint {
        meta,
        ..Default::default()
    };
    let expect_offset = dir.last().map_or(0, |e| e.offset + e.len);
    if data.len() != expect_offset {
        return Err(PipelineError::Truncated(format!(
            "data section has {} bytes, directory needs {expect_offset}",
            data.len()
        )));
    }
    for e in dir {
        let mut p = Reader::new(&data[e.offset..e.offset + e.len]);
        let n: usize = e.shape.iter().product();
        if e.dtype == DTYPE_F32 {
            let v = p.f32s(n, &e.name)?;
            ck.dense.insert(e.name, Tensor::new(e.shape, v)?);
            continue;
        }
        let (codebook, block_size, chunk) = e.q4.expect("q4 fields parsed");
        let blocks = n.div_ceil(block_size);
        let codes = p.take(n.div_ceil(2), "codes")?.to_vec();
        let scales = match chunk {
            None => Scales::Plain(p.f32s(blocks, "scales")?),
            Some(chunk_size) => {
                let chunks = blocks.div_ceil(chunk_size);
                let codes = p
                    .take(blocks, "scale codes")?
                    .iter()
                    .map(|&b| b as i8)
                    .collect();
                let offsets = p.f32s(chunks, "chunk offsets")?;
                let chunk_scales = p.f32s(chunks, "chunk scales")?;
                let d = DoubleQuantScales {
                    chunk_size,
                    offsets,
                    chunk_scales,
                    codes,
                };
                d.validate(blocks)?;
                Scales::Double(d)
            }
        };
        let q = QuantizedTensor {
            shape: e.shape,
            block_size,
            codebook,
            codes,
            scales,
        };
        q.validate()?;
        ck.quantized.insert(e.name, q);
    }
    Ok(ck)
}
