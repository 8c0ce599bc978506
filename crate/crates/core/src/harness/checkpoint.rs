//! Checkpoint files.
//!
//! Layout: one text line `VLENC-CKPT <version> <header bytes>`, then a JSON
//! header with the model hyperparameters, provenance, run seed, optimizer step count and
//! `(name, shape, byte offsets)` per parameter, then the raw little-endian
//! `f32` payload (value, first moment, second moment per parameter).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, Provenance};
use crate::numerics::{Parameter, ParameterStore, Tensor};

pub const MAGIC: &str = "VLENC-CKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub provenance: Provenance,
    /// Seed of the run that produced the parameters.
    pub seed: u64,
    pub store: ParameterStore<f32>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    /// Byte offsets into the payload of the value and the two moment tensors.
    offsets: [u64; 3],
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format_version: u32,
    model: ModelConfig,
    provenance: Provenance,
    seed: u64,
    step_count: u64,
    parameters: Vec<Entry>,
}

fn bad(path: &Path, msg: impl std::fmt::Display) -> Error {
    Error::Checkpoint(format!("{}: {msg}", path.display()))
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Vec<u8> {
    let mut payload = Vec::with_capacity(ckpt.store.num_elements() * 12);
    let mut entries = Vec::with_capacity(ckpt.store.len());
    for (name, p) in ckpt.store.iter() {
        let mut offsets = [0u64; 3];
        for (slot, t) in [&p.value, &p.first_moment, &p.second_moment].into_iter().enumerate() {
            offsets[slot] = payload.len() as u64;
            for v in t.data() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
        entries.push(Entry { name: name.to_string(), shape: p.value.shape().to_vec(), offsets });
    }
    let header = Header {
        format_version: FORMAT_VERSION,
        model: ckpt.model.clone(),
        provenance: ckpt.provenance,
        seed: ckpt.seed,
        step_count: ckpt.store.step_count(),
        parameters: entries,
    };
    let header = serde_json::to_vec(&header).expect("header serializes");
    let mut out = format!("{MAGIC} {FORMAT_VERSION} {}\n", header.len()).into_bytes();
    out.extend_from_slice(&header);
    out.extend_from_slice(&payload);
    out
}

/// Writes through a temporary file and rename, so readers never see a partial file.
pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<String> {
    let bytes = encode_checkpoint(ckpt);
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
    Ok(content_id(&bytes))
}

/// Short content hash identifying a checkpoint in reports.
pub fn content_id(bytes: &[u8]) -> String {
    hex::encode(&Sha256::digest(bytes)[..8])
}

pub fn checkpoint_id(path: &Path) -> Result<String> {
    Ok(content_id(&fs::read(path).map_err(|e| Error::io(path, e))?))
}

pub fn decode_checkpoint(path: &Path, bytes: &[u8]) -> Result<Checkpoint> {
    let nl = bytes.iter().position(|&b| b == b'\n').ok_or_else(|| bad(path, "missing header line"))?;
    let line = std::str::from_utf8(&bytes[..nl]).map_err(|_| bad(path, "header line is not text"))?;
    let fields: Vec<&str> = line.split(' ').collect();
    if fields.len() != 3 || fields[0] != MAGIC {
        return Err(bad(path, "not a checkpoint file"));
    }
    let version: u32 = fields[1].parse().map_err(|_| bad(path, "bad version field"))?;
    if version != FORMAT_VERSION {
        return Err(bad(path, format!("format version {version}, expected {FORMAT_VERSION}")));
    }
    let header_len: usize = fields[2].parse().map_err(|_| bad(path, "bad header length"))?;
    let start = nl + 1;
    let header_bytes = bytes.get(start..start + header_len).ok_or_else(|| bad(path, "truncated header"))?;
    let header: Header = serde_json::from_slice(header_bytes).map_err(|e| bad(path, format!("header: {e}")))?;
    if header.format_version != version {
        return Err(bad(path, "header version disagrees with first line"));
    }
    let payload = &bytes[start + header_len..];

    let expected: Vec<(String, Vec<usize>)> = header.model.parameter_shapes();
    if expected.len() != header.parameters.len() {
        return Err(bad(path, format!("{} parameters, model defines {}", header.parameters.len(), expected.len())));
    }
    let mut store = ParameterStore::new();
    let mut total = 0usize;
    for e in &header.parameters {
        let want = expected.iter().find(|(n, _)| *n == e.name).ok_or_else(|| bad(path, format!("unknown parameter {}", e.name)))?;
        if want.1 != e.shape {
            return Err(bad(path, format!("{}: shape {:?}, model expects {:?}", e.name, e.shape, want.1)));
        }
        let numel: usize = e.shape.iter().product();
        let read = |off: u64| -> Result<Tensor<f32>> {
            let off = off as usize;
            let raw = payload.get(off..off + numel * 4).ok_or_else(|| bad(path, format!("{}: truncated payload", e.name)))?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            Tensor::new(e.shape.clone(), data)
        };
        let p = Parameter { value: read(e.offsets[0])?.with_requires_grad(true), first_moment: read(e.offsets[1])?, second_moment: read(e.offsets[2])? };
        store.insert_parameter(e.name.clone(), p);
        total += numel * 12;
    }
    if payload.len() != total {
        return Err(bad(path, format!("payload has {} bytes, header describes {total}", payload.len())));
    }
    store.set_step_count(header.step_count);
    Ok(Checkpoint { model: header.model, provenance: header.provenance, seed: header.seed, store })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(path, &bytes)
}

/// Loads a checkpoint and checks it was built for `model`.
pub fn load_checkpoint_for(path: &Path, model: &ModelConfig) -> Result<Checkpoint> {
    let ckpt = load_checkpoint(path)?;
    if ckpt.model.parameter_shapes() != model.parameter_shapes() {
        return Err(bad(path, "parameter shapes differ from the configured model"));
    }
    Ok(ckpt)
}
