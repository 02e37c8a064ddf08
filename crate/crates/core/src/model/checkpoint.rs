//! On-disk checkpoints: `manifest.json` (canonical JSON with the model config
//! and a tensor index) plus `weights.bin`, a sequence of records
//! `[name_len u32][name][ndim u32][dims u64 * ndim][data f64 * numel]`, all
//! little-endian.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig, ModelError, ParamStore};
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset of the record within `weights.bin`.
    pub offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub config: ModelConfig,
    pub tensors: Vec<TensorEntry>,
    #[serde(default)]
    pub metadata: BTreeMap<String, serde_json::Value>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub metadata: BTreeMap<String, serde_json::Value>,
}

/// Serializes through `serde_json::Value` so object keys come out sorted.
pub fn canonical_json<T: Serialize>(value: &T) -> Result<String, serde_json::Error> {
    let v = serde_json::to_value(value)?;
    serde_json::to_string_pretty(&v)
}

pub fn save_checkpoint(
    dir: &Path,
    model: &Model,
    metadata: &BTreeMap<String, serde_json::Value>,
) -> Result<(), ModelError> {
    fs::create_dir_all(dir)?;
    let mut weights = Vec::new();
    let mut tensors = Vec::with_capacity(model.params.len());
    for (name, t) in model.params.iter() {
        tensors.push(TensorEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            offset: weights.len() as u64,
        });
        weights.extend_from_slice(&(name.len() as u32).to_le_bytes());
        weights.extend_from_slice(name.as_bytes());
        weights.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            weights.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            weights.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        config: model.config.clone(),
        tensors,
        metadata: metadata.clone(),
    };
    fs::write(dir.join("manifest.json"), canonical_json(&manifest)? + "\n")?;
    fs::File::create(dir.join("weights.bin"))?.write_all(&weights)?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8], ModelError> {
        if self.pos + n > self.buf.len() {
            return Err(ModelError::Checkpoint(format!(
                "weights.bin truncated at byte {}",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, ModelError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, ModelError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint, ModelError> {
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(ModelError::Checkpoint(format!(
            "unsupported format version {}",
            manifest.format_version
        )));
    }
    let mut buf = Vec::new();
    fs::File::open(dir.join("weights.bin"))?.read_to_end(&mut buf)?;
    let mut r = Reader { buf: &buf, pos: 0 };
    let mut params = ParamStore::new();
    for entry in &manifest.tensors {
        if r.pos as u64 != entry.offset {
            return Err(ModelError::Checkpoint(format!(
                "`{}` expected at offset {}, found {}",
                entry.name, entry.offset, r.pos
            )));
        }
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|e| ModelError::Checkpoint(e.to_string()))?
            .to_string();
        if name != entry.name {
            return Err(ModelError::Checkpoint(format!(
                "record `{name}` does not match manifest entry `{}`",
                entry.name
            )));
        }
        let ndim = r.u32()? as usize;
        let shape = (0..ndim)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>, _>>()?;
        if shape != entry.shape {
            return Err(ModelError::Checkpoint(format!(
                "`{name}` header shape {shape:?} differs from manifest {:?}",
                entry.shape
            )));
        }
        let n: usize = shape.iter().product();
        let bytes = r.take(n * 8)?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        params.insert(name, Tensor::new(shape, data)?);
    }
    if r.pos != buf.len() {
        return Err(ModelError::Checkpoint("trailing bytes in weights.bin".into()));
    }
    let model = Model::from_params(manifest.config, params)?;
    Ok(Checkpoint {
        model,
        metadata: manifest.metadata,
    })
}
