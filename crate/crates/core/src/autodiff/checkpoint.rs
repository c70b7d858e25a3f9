//! Checkpoint archive: a tar stream holding `manifest.json` and one little-endian
//! `f64` blob per tensor under `tensors/`.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::optim::{AdamWConfig, OptimizerState};
use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub file: String,
    /// Offset of this blob in the concatenation of all blobs, in manifest order.
    pub byte_offset: u64,
    pub byte_len: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct OptimizerManifest {
    pub hyper: AdamWConfig,
    pub step: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Manifest {
    pub format_version: u32,
    pub tensors: Vec<TensorEntry>,
    pub optimizer: Option<OptimizerManifest>,
    #[serde(default)]
    pub meta: serde_json::Value,
}

/// Parameters, optional optimizer state and free-form metadata (e.g. the run config).
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ParamStore,
    pub optimizer: Option<OptimizerState>,
    pub meta: serde_json::Value,
}

const M_PREFIX: &str = "optim.m.";
const V_PREFIX: &str = "optim.v.";

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut named: Vec<(String, &Tensor)> =
            self.params.iter().map(|(k, t)| (k.clone(), t)).collect();
        if let Some(opt) = &self.optimizer {
            named.extend(opt.m.iter().map(|(k, t)| (format!("{M_PREFIX}{k}"), t)));
            named.extend(opt.v.iter().map(|(k, t)| (format!("{V_PREFIX}{k}"), t)));
        }
        let mut entries = Vec::with_capacity(named.len());
        let mut offset = 0u64;
        for (i, (name, t)) in named.iter().enumerate() {
            let byte_len = (t.len() * 8) as u64;
            entries.push(TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                file: format!("tensors/{i:05}.bin"),
                byte_offset: offset,
                byte_len,
            });
            offset += byte_len;
        }
        let manifest = Manifest {
            format_version: FORMAT_VERSION,
            tensors: entries,
            optimizer: self.optimizer.as_ref().map(|o| OptimizerManifest {
                hyper: o.hyper,
                step: o.step,
            }),
            meta: self.meta.clone(),
        };
        let mut builder = tar::Builder::new(Vec::new());
        append(&mut builder, "manifest.json", &serde_json::to_vec_pretty(&manifest)?)?;
        for (entry, (_, t)) in manifest.tensors.iter().zip(&named) {
            let mut blob = Vec::with_capacity(t.len() * 8);
            for v in t.data() {
                blob.extend_from_slice(&v.to_le_bytes());
            }
            append(&mut builder, &entry.file, &blob)?;
        }
        Ok(builder.into_inner()?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    /// Parses an archive without validating against a model definition.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut archive = tar::Archive::new(bytes);
        let mut files: BTreeMap<String, Vec<u8>> = BTreeMap::new();
        for entry in archive.entries()? {
            let mut entry = entry?;
            let path = entry.path()?.to_string_lossy().into_owned();
            let mut buf = Vec::new();
            entry.read_to_end(&mut buf)?;
            files.insert(path, buf);
        }
        let manifest: Manifest = serde_json::from_slice(
            files
                .get("manifest.json")
                .ok_or_else(|| Error::Format("checkpoint has no manifest.json".into()))?,
        )?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint format version {}",
                manifest.format_version
            )));
        }
        let mut params = ParamStore::new();
        let mut m = BTreeMap::new();
        let mut v = BTreeMap::new();
        for e in &manifest.tensors {
            let blob = files
                .get(&e.file)
                .ok_or_else(|| Error::Format(format!("missing blob {}", e.file)))?;
            if blob.len() as u64 != e.byte_len || e.byte_len as usize != 8 * e.shape.iter().product::<usize>() {
                return Err(Error::Format(format!("blob {} has wrong length", e.file)));
            }
            let data = blob
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let t = Tensor::new(e.shape.clone(), data)?;
            if let Some(k) = e.name.strip_prefix(M_PREFIX) {
                m.insert(k.to_string(), t);
            } else if let Some(k) = e.name.strip_prefix(V_PREFIX) {
                v.insert(k.to_string(), t);
            } else {
                params.insert(e.name.clone(), t);
            }
        }
        let optimizer = manifest.optimizer.map(|o| OptimizerState {
            hyper: o.hyper,
            step: o.step,
            m,
            v,
        });
        Ok(Self {
            params,
            optimizer,
            meta: manifest.meta,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Checks that every tensor of `expected` is present with the same shape, and nothing else.
    pub fn validate_against(&self, expected: &ParamStore) -> Result<()> {
        for (name, t) in expected.iter() {
            let got = self
                .params
                .get(name)
                .map_err(|_| Error::Format(format!("checkpoint lacks tensor `{name}`")))?;
            if got.shape() != t.shape() {
                return Err(Error::Format(format!(
                    "tensor `{name}` has shape {:?}, model expects {:?}",
                    got.shape(),
                    t.shape()
                )));
            }
        }
        if let Some(extra) = self.params.names().find(|n| !expected.contains(n)) {
            return Err(Error::Format(format!("checkpoint has unknown tensor `{extra}`")));
        }
        Ok(())
    }
}

fn append<W: Write>(builder: &mut tar::Builder<W>, path: &str, data: &[u8]) -> Result<()> {
    let mut header = tar::Header::new_gnu();
    header.set_size(data.len() as u64);
    header.set_mode(0o644);
    header.set_mtime(0);
    header.set_uid(0);
    header.set_gid(0);
    header.set_cksum();
    builder.append_data(&mut header, path, data)?;
    Ok(())
}
