//! Named tensor storage and the parameter checkpoint format: a JSON manifest
//! of `(name, shape, offset)` entries beside a blob of little-endian f32
//! values.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Real, Tensor};

#[derive(Clone, Debug, Default)]
pub struct ParamStore<T: Real> {
    entries: Vec<(String, Tensor<T>)>,
    index: HashMap<String, usize>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<usize> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Invalid(format!("duplicate tensor name `{name}`")));
        }
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push((name, value));
        Ok(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalars.
    pub fn numel(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn position(&self, name: &str) -> Result<usize> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| Error::Invalid(format!("no tensor named `{name}`")))
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        Ok(&self.entries[self.position(name)?].1)
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        let i = self.position(name)?;
        Ok(&mut self.entries[i].1)
    }

    pub fn name(&self, i: usize) -> &str {
        &self.entries[i].0
    }

    pub fn tensor(&self, i: usize) -> &Tensor<T> {
        &self.entries[i].1
    }

    pub fn tensor_mut(&mut self, i: usize) -> &mut Tensor<T> {
        &mut self.entries[i].1
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor<T>> {
        self.entries.iter_mut().map(|(_, t)| t)
    }

    /// Order-sensitive FNV-1a hash of every value's bit pattern.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        for (_, t) in &self.entries {
            for v in t.data() {
                h ^= v.as_f64().to_bits();
                h = h.wrapping_mul(0x100000001b3);
            }
        }
        h
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self.entries.iter().map(|(n, t)| (n.clone(), t.cast())).collect(),
            index: self.index.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset in f32 elements from the start of the blob.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub blob: String,
    pub tensors: Vec<ManifestEntry>,
}

pub const MANIFEST_FORMAT: &str = "longvq-params";

/// Write `stores` (in order) as `<stem>.json` and `<stem>.bin` in `dir`.
pub fn save_tensors<T: Real>(dir: &Path, stem: &str, stores: &[&ParamStore<T>]) -> Result<()> {
    let blob_name = format!("{stem}.bin");
    let mut blob = std::io::BufWriter::new(std::fs::File::create(dir.join(&blob_name))?);
    let mut tensors = Vec::new();
    let mut offset = 0;
    for store in stores {
        for (name, t) in store.iter() {
            tensors.push(ManifestEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                offset,
            });
            for v in t.data() {
                blob.write_all(&(v.as_f64() as f32).to_le_bytes())?;
            }
            offset += t.len();
        }
    }
    blob.flush()?;
    let manifest = Manifest {
        format: MANIFEST_FORMAT.into(),
        version: 1,
        blob: blob_name,
        tensors,
    };
    std::fs::write(dir.join(format!("{stem}.json")), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

/// Overwrite every tensor of `stores` from a checkpoint written by
/// [`save_tensors`]. Names and shapes must match.
pub fn load_tensors<T: Real>(dir: &Path, stem: &str, stores: &mut [&mut ParamStore<T>]) -> Result<()> {
    let manifest: Manifest = serde_json::from_str(&std::fs::read_to_string(dir.join(format!("{stem}.json")))?)?;
    if manifest.format != MANIFEST_FORMAT {
        return Err(Error::Format(format!("unexpected manifest format `{}`", manifest.format)));
    }
    let bytes = std::fs::read(dir.join(&manifest.blob))?;
    let by_name: HashMap<&str, &ManifestEntry> = manifest.tensors.iter().map(|e| (e.name.as_str(), e)).collect();
    for store in stores.iter_mut() {
        for i in 0..store.len() {
            let name = store.name(i).to_string();
            let entry = by_name
                .get(name.as_str())
                .ok_or_else(|| Error::Format(format!("checkpoint lacks tensor `{name}`")))?;
            let t = store.tensor_mut(i);
            if entry.shape != t.shape() {
                return Err(Error::Format(format!(
                    "tensor `{name}` has shape {:?} in checkpoint, {:?} in model",
                    entry.shape,
                    t.shape()
                )));
            }
            let (lo, hi) = (entry.offset * 4, (entry.offset + t.len()) * 4);
            let raw = bytes
                .get(lo..hi)
                .ok_or_else(|| Error::Format(format!("blob too short for `{name}`")))?;
            for (dst, c) in t.data_mut().iter_mut().zip(raw.chunks_exact(4)) {
                *dst = T::cast(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64);
            }
        }
    }
    Ok(())
}
