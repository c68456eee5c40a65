//! The `DLLM` checkpoint container.
//!
//! Layout: magic `DLLM`, `u32` LE version, `u64` LE header length, UTF-8 JSON
//! header, then the payload. Tensor offsets in the header are relative to the
//! payload start, which is the first 64-byte boundary after the header; every
//! blob is 64-byte aligned, row-major and little-endian.

use std::collections::BTreeMap;
use std::path::Path;

use deltallm_core::delta::{CompressedModel, DeltaModule, InitMethod, SharingPlan, StoredWeight};
use deltallm_core::model::{Backbone, Model, ModelConfig, WeightSite};
use deltallm_core::quant::{QuantPolicy, QuantScheme, QuantizedTensor};
use deltallm_core::Tensor;
use serde::{Deserialize, Serialize};

pub const MAGIC: [u8; 4] = *b"DLLM";
pub const VERSION: u32 = 1;
pub const ALIGN: usize = 64;
const PREAMBLE: usize = 16;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic {0:?}, not a DLLM checkpoint")]
    BadMagic([u8; 4]),
    #[error("container version {found} is not supported (expected {VERSION})")]
    VersionMismatch { found: u32 },
    #[error("file truncated: need {needed} bytes, have {have}")]
    Truncated { needed: u64, have: u64 },
    #[error("tensors `{first}` and `{second}` overlap")]
    OverlappingOffsets { first: String, second: String },
    #[error("tensor `{0}` is not 64-byte aligned")]
    Misaligned(String),
    #[error("tensor `{name}` declares {declared} bytes, its shape needs {expected}")]
    LengthMismatch { name: String, declared: u64, expected: u64 },
    #[error("header: {0}")]
    Header(#[from] serde_json::Error),
    #[error("tensor `{0}` is missing")]
    MissingTensor(String),
    #[error("tensor `{name}` has dtype {dtype:?} where {expected} is required")]
    DtypeMismatch { name: String, dtype: Dtype, expected: &'static str },
    #[error(transparent)]
    Model(#[from] deltallm_core::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    #[default]
    F64,
    F32,
    I8,
    U4p,
}

impl Dtype {
    fn byte_len(self, elems: usize) -> usize {
        match self {
            Dtype::F64 => 8 * elems,
            Dtype::F32 => 4 * elems,
            Dtype::I8 => elems,
            Dtype::U4p => elems.div_ceil(2),
        }
    }

    pub fn is_float(self) -> bool {
        matches!(self, Dtype::F64 | Dtype::F32)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: Dtype,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub length: u64,
    /// Row-scale tensor of a quantized entry.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scales: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaEntry {
    pub site: WeightSite,
    pub rank: usize,
    pub scaling: f64,
    pub init: InitMethod,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Kind {
    Model,
    Compressed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub kind: Kind,
    pub config: ModelConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub plan: Option<SharingPlan>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quantization: Option<QuantPolicy>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub deltas: Vec<DeltaEntry>,
    pub tensors: Vec<TensorEntry>,
}

impl Header {
    pub fn tensor(&self, name: &str) -> Option<&TensorEntry> {
        self.tensors.iter().find(|t| t.name == name)
    }
}

/// A dense model or a compressed one.
#[derive(Debug, Clone, PartialEq)]
pub enum Checkpoint {
    Model(Model),
    Compressed(CompressedModel),
}

impl Checkpoint {
    pub fn config(&self) -> &ModelConfig {
        match self {
            Checkpoint::Model(m) => &m.config,
            Checkpoint::Compressed(c) => &c.config,
        }
    }

    /// Compressed view; a dense model becomes an empty-plan compressed model.
    pub fn into_compressed(self) -> CompressedModel {
        match self {
            Checkpoint::Compressed(c) => c,
            Checkpoint::Model(m) => CompressedModel {
                config: m.config,
                backbone: m.backbone,
                weights: m.weights.into_iter().map(|(s, w)| (s, StoredWeight::Dense(w))).collect(),
                plan: SharingPlan::empty(m.config.n_layers),
                deltas: BTreeMap::new(),
                quantization: None,
            },
        }
    }

    /// Fully materialized weights.
    pub fn into_model(self) -> Result<Model, CheckpointError> {
        match self {
            Checkpoint::Model(m) => Ok(m),
            Checkpoint::Compressed(c) => Ok(c.to_model()?),
        }
    }
}

pub fn attn_norm_name(l: usize) -> String {
    format!("attn_norm.{l}")
}

pub fn mlp_norm_name(l: usize) -> String {
    format!("mlp_norm.{l}")
}

pub fn delta_names(site: WeightSite) -> [String; 2] {
    [format!("{site}.A"), format!("{site}.B")]
}

pub fn scales_name(site: WeightSite) -> String {
    format!("{site}.scales")
}

enum Blob<'a> {
    Float(&'a Tensor),
    Bytes(&'a [u8]),
    Scales(&'a [f32]),
}

fn encode_blob(blob: &Blob<'_>, float: Dtype, out: &mut Vec<u8>) {
    match blob {
        Blob::Float(t) => match float {
            Dtype::F32 => t.data().iter().for_each(|&x| out.extend_from_slice(&(x as f32).to_le_bytes())),
            _ => t.data().iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        },
        Blob::Bytes(b) => out.extend_from_slice(b),
        Blob::Scales(s) => s.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
    }
}

fn backbone_blobs(b: &Backbone) -> Vec<(String, Blob<'_>)> {
    let mut v = vec![("embedding".to_string(), Blob::Float(&b.embedding))];
    v.extend(b.attn_norms.iter().enumerate().map(|(l, t)| (attn_norm_name(l), Blob::Float(t))));
    v.extend(b.mlp_norms.iter().enumerate().map(|(l, t)| (mlp_norm_name(l), Blob::Float(t))));
    v.push(("final_norm".into(), Blob::Float(&b.final_norm)));
    v.push(("output".into(), Blob::Float(&b.output)));
    v
}

/// Serializes a checkpoint; floats are written as `float` (`f64` or `f32`).
pub fn encode(ck: &Checkpoint, float: Dtype) -> Result<Vec<u8>, CheckpointError> {
    assert!(float.is_float(), "float dtype must be f64 or f32");
    let mut entries: Vec<(String, Blob<'_>, Dtype, Vec<usize>, Option<String>)> = Vec::new();
    let (header_kind, config, plan, quantization, deltas_meta) = match ck {
        Checkpoint::Model(m) => {
            m.validate()?;
            for (name, blob) in backbone_blobs(&m.backbone) {
                let shape = blob_shape(&blob);
                entries.push((name, blob, float, shape, None));
            }
            for (site, w) in &m.weights {
                entries.push((site.to_string(), Blob::Float(w), float, w.shape().to_vec(), None));
            }
            (Kind::Model, m.config, None, None, Vec::new())
        }
        Checkpoint::Compressed(c) => {
            c.validate()?;
            for (name, blob) in backbone_blobs(&c.backbone) {
                let shape = blob_shape(&blob);
                entries.push((name, blob, float, shape, None));
            }
            let mut scale_blobs = Vec::new();
            for (site, w) in &c.weights {
                match w {
                    StoredWeight::Dense(t) => {
                        entries.push((site.to_string(), Blob::Float(t), float, t.shape().to_vec(), None))
                    }
                    StoredWeight::Quantized(q) => {
                        let dtype = match q.scheme {
                            QuantScheme::AbsmaxInt8 => Dtype::I8,
                            QuantScheme::Nf4 => Dtype::U4p,
                        };
                        let sname = scales_name(*site);
                        entries.push((site.to_string(), Blob::Bytes(&q.codes), dtype, vec![q.rows, q.cols], Some(sname.clone())));
                        scale_blobs.push((sname, Blob::Scales(&q.scales), Dtype::F32, vec![q.scales.len()], None));
                    }
                }
            }
            entries.extend(scale_blobs);
            let mut meta = Vec::new();
            for (site, d) in &c.deltas {
                let [an, bn] = delta_names(*site);
                entries.push((an, Blob::Float(&d.a), float, d.a.shape().to_vec(), None));
                entries.push((bn, Blob::Float(&d.b), float, d.b.shape().to_vec(), None));
                meta.push(DeltaEntry { site: *site, rank: d.rank, scaling: d.scaling, init: d.init });
            }
            (Kind::Compressed, c.config, Some(c.plan.clone()), c.quantization, meta)
        }
    };

    let mut payload = Vec::new();
    let mut tensors = Vec::with_capacity(entries.len());
    for (name, blob, dtype, shape, scales) in &entries {
        let pad = payload.len().next_multiple_of(ALIGN) - payload.len();
        payload.resize(payload.len() + pad, 0);
        let offset = payload.len();
        encode_blob(blob, *dtype, &mut payload);
        tensors.push(TensorEntry {
            name: name.clone(),
            dtype: *dtype,
            shape: shape.clone(),
            offset: offset as u64,
            length: (payload.len() - offset) as u64,
            scales: scales.clone(),
        });
    }
    let header = Header { kind: header_kind, config, plan, quantization, deltas: deltas_meta, tensors };
    let json = serde_json::to_vec(&header)?;
    let payload_start = (PREAMBLE + json.len()).next_multiple_of(ALIGN);
    let mut out = Vec::with_capacity(payload_start + payload.len());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.resize(payload_start, 0);
    out.extend_from_slice(&payload);
    Ok(out)
}

fn blob_shape(b: &Blob<'_>) -> Vec<usize> {
    match b {
        Blob::Float(t) => t.shape().to_vec(),
        Blob::Bytes(b) => vec![b.len()],
        Blob::Scales(s) => vec![s.len()],
    }
}

/// Parses and validates the preamble and header, returning the header and the
/// payload start.
pub fn decode_header(bytes: &[u8]) -> Result<(Header, usize), CheckpointError> {
    let have = bytes.len() as u64;
    if bytes.len() < 4 {
        return Err(CheckpointError::Truncated { needed: PREAMBLE as u64, have });
    }
    let magic: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
    if magic != MAGIC {
        return Err(CheckpointError::BadMagic(magic));
    }
    if bytes.len() < PREAMBLE {
        return Err(CheckpointError::Truncated { needed: PREAMBLE as u64, have });
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(CheckpointError::VersionMismatch { found: version });
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let header_end = (PREAMBLE as u64).saturating_add(header_len);
    if header_end > have {
        return Err(CheckpointError::Truncated { needed: header_end, have });
    }
    let header: Header = serde_json::from_slice(&bytes[PREAMBLE..header_end as usize])?;
    let payload_start = (header_end as usize).next_multiple_of(ALIGN);
    let payload_len = bytes.len().saturating_sub(payload_start) as u64;

    for t in &header.tensors {
        let elems: usize = t.shape.iter().product();
        let expected = t.dtype.byte_len(elems) as u64;
        if t.length != expected {
            return Err(CheckpointError::LengthMismatch { name: t.name.clone(), declared: t.length, expected });
        }
        if t.offset % ALIGN as u64 != 0 {
            return Err(CheckpointError::Misaligned(t.name.clone()));
        }
        let end = t.offset.saturating_add(t.length);
        if end > payload_len {
            return Err(CheckpointError::Truncated { needed: payload_start as u64 + end, have });
        }
    }
    let mut by_offset: Vec<&TensorEntry> = header.tensors.iter().collect();
    by_offset.sort_by_key(|t| (t.offset, t.length));
    for w in by_offset.windows(2) {
        if w[0].offset + w[0].length > w[1].offset {
            return Err(CheckpointError::OverlappingOffsets { first: w[0].name.clone(), second: w[1].name.clone() });
        }
    }
    Ok((header, payload_start))
}

struct Reader<'a> {
    header: &'a Header,
    payload: &'a [u8],
}

impl Reader<'_> {
    fn entry(&self, name: &str) -> Result<&TensorEntry, CheckpointError> {
        self.header.tensor(name).ok_or_else(|| CheckpointError::MissingTensor(name.into()))
    }

    fn bytes(&self, e: &TensorEntry) -> &[u8] {
        &self.payload[e.offset as usize..(e.offset + e.length) as usize]
    }

    fn float(&self, name: &str) -> Result<Tensor, CheckpointError> {
        let e = self.entry(name)?;
        let raw = self.bytes(e);
        let data: Vec<f64> = match e.dtype {
            Dtype::F64 => raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect(),
            Dtype::F32 => raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64).collect(),
            dtype => return Err(CheckpointError::DtypeMismatch { name: name.into(), dtype, expected: "f64 or f32" }),
        };
        Ok(Tensor::new(&e.shape, data)?)
    }

    fn scales(&self, name: &str) -> Result<Vec<f32>, CheckpointError> {
        let e = self.entry(name)?;
        if e.dtype != Dtype::F32 {
            return Err(CheckpointError::DtypeMismatch { name: name.into(), dtype: e.dtype, expected: "f32" });
        }
        Ok(self.bytes(e).chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect())
    }

    fn stored(&self, site: WeightSite) -> Result<StoredWeight, CheckpointError> {
        let name = site.to_string();
        let e = self.entry(&name)?;
        let scheme = match e.dtype {
            Dtype::F64 | Dtype::F32 => return Ok(StoredWeight::Dense(self.float(&name)?)),
            Dtype::I8 => QuantScheme::AbsmaxInt8,
            Dtype::U4p => QuantScheme::Nf4,
        };
        let [rows, cols]: [usize; 2] = e.shape.as_slice().try_into().map_err(|_| {
            CheckpointError::Model(deltallm_core::Error::InvalidArgument(format!("{name} is not 2-D")))
        })?;
        let sname = e.scales.clone().ok_or_else(|| CheckpointError::MissingTensor(scales_name(site)))?;
        let scales = self.scales(&sname)?;
        if scales.len() != rows && scales.len() != 1 {
            return Err(CheckpointError::LengthMismatch { name: sname, declared: scales.len() as u64, expected: rows as u64 });
        }
        Ok(StoredWeight::Quantized(QuantizedTensor { rows, cols, scheme, codes: self.bytes(e).to_vec(), scales }))
    }

    fn backbone(&self, cfg: &ModelConfig) -> Result<Backbone, CheckpointError> {
        Ok(Backbone {
            embedding: self.float("embedding")?,
            attn_norms: (0..cfg.n_layers).map(|l| self.float(&attn_norm_name(l))).collect::<Result<_, _>>()?,
            mlp_norms: (0..cfg.n_layers).map(|l| self.float(&mlp_norm_name(l))).collect::<Result<_, _>>()?,
            final_norm: self.float("final_norm")?,
            output: self.float("output")?,
        })
    }
}

/// Parses a container; also returns the float dtype it was written with.
pub fn decode(bytes: &[u8]) -> Result<(Checkpoint, Dtype), CheckpointError> {
    let (header, payload_start) = decode_header(bytes)?;
    let r = Reader { header: &header, payload: &bytes[payload_start.min(bytes.len())..] };
    let cfg = header.config;
    cfg.validate()?;
    let float = header.tensors.iter().map(|t| t.dtype).find(|d| d.is_float()).unwrap_or_default();
    let backbone = r.backbone(&cfg)?;
    let ck = match header.kind {
        Kind::Model => {
            let weights = cfg.sites().into_iter().map(|s| Ok((s, r.float(&s.to_string())?))).collect::<Result<_, CheckpointError>>()?;
            let m = Model { config: cfg, backbone, weights };
            m.validate()?;
            Checkpoint::Model(m)
        }
        Kind::Compressed => {
            let plan = header.plan.clone().unwrap_or_else(|| SharingPlan::empty(cfg.n_layers));
            let mut weights = BTreeMap::new();
            for site in cfg.sites() {
                if !plan.is_target(site) {
                    weights.insert(site, r.stored(site)?);
                }
            }
            let mut deltas = BTreeMap::new();
            for d in &header.deltas {
                let [an, bn] = delta_names(d.site);
                let module = DeltaModule { a: r.float(&an)?, b: r.float(&bn)?, rank: d.rank, scaling: d.scaling, init: d.init };
                deltas.insert(d.site, module);
            }
            let c = CompressedModel { config: cfg, backbone, weights, plan, deltas, quantization: header.quantization };
            c.validate()?;
            Checkpoint::Compressed(c)
        }
    };
    Ok((ck, float))
}

pub fn save(path: impl AsRef<Path>, ck: &Checkpoint, float: Dtype) -> Result<(), CheckpointError> {
    std::fs::write(path, encode(ck, float)?)?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<(Checkpoint, Dtype), CheckpointError> {
    decode(&std::fs::read(path)?)
}

pub fn read_header(path: impl AsRef<Path>) -> Result<Header, CheckpointError> {
    Ok(decode_header(&std::fs::read(path)?)?.0)
}
