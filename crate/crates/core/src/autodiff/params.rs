use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::tensor::Tensor;
use super::{AutodiffError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub value: Tensor,
    /// Frozen parameters still receive gradients but are never updated.
    pub trainable: bool,
    /// Whether decoupled weight decay applies (weights yes, norms/biases no).
    pub decay: bool,
}

/// Named parameter arrays with per-parameter trainable flags.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor, trainable: bool, decay: bool) -> Result<()> {
        if self.params.contains_key(name) {
            return Err(AutodiffError::DuplicateParam(name.to_string()));
        }
        self.params.insert(
            name.to_string(),
            Param {
                value,
                trainable,
                decay,
            },
        );
        Ok(())
    }

    /// Replaces or inserts, keeping the flags of `param`.
    pub fn set(&mut self, name: &str, param: Param) {
        self.params.insert(name.to_string(), param);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name).map(|p| &p.value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name).map(|p| &mut p.value)
    }

    pub fn param(&self, name: &str) -> Option<&Param> {
        self.params.get(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Param)> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn set_trainable(&mut self, name: &str, trainable: bool) -> Result<()> {
        self.params
            .get_mut(name)
            .map(|p| p.trainable = trainable)
            .ok_or_else(|| AutodiffError::MissingParam(name.to_string()))
    }

    /// Applies `trainable` to every parameter whose name satisfies `pred`.
    pub fn set_trainable_where(&mut self, pred: impl Fn(&str) -> bool, trainable: bool) {
        for (name, p) in self.params.iter_mut() {
            if pred(name) {
                p.trainable = trainable;
            }
        }
    }

    pub fn num_elements(&self) -> usize {
        self.params.values().map(|p| p.value.numel()).sum()
    }

    pub fn num_trainable(&self) -> usize {
        self.params
            .values()
            .filter(|p| p.trainable)
            .map(|p| p.value.numel())
            .sum()
    }

    /// Sub-store of parameters whose name starts with `prefix`.
    pub fn subset(&self, prefix: &str) -> ParamStore {
        ParamStore {
            params: self
                .params
                .iter()
                .filter(|(n, _)| n.starts_with(prefix))
                .map(|(n, p)| (n.clone(), p.clone()))
                .collect(),
        }
    }

    /// SHA-256 over names, shapes and the bit patterns of every value whose
    /// name satisfies `pred`.
    pub fn checksum_where(&self, pred: impl Fn(&str) -> bool) -> String {
        let mut h = Sha256::new();
        for (name, p) in self.params.iter().filter(|(n, _)| pred(n)) {
            h.update(name.as_bytes());
            for d in p.value.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in p.value.data() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn save(&self, dir: &Path, dtype: BlobType) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut entries = Vec::with_capacity(self.params.len());
        for (name, p) in &self.params {
            let file = format!("{name}.bin");
            let bytes: Vec<u8> = match dtype {
                BlobType::F32 => p
                    .value
                    .data()
                    .iter()
                    .flat_map(|&v| (v as f32).to_le_bytes())
                    .collect(),
                BlobType::F64 => p.value.data().iter().flat_map(|v| v.to_le_bytes()).collect(),
            };
            fs::write(dir.join(&file), bytes)?;
            entries.push(ManifestEntry {
                name: name.clone(),
                shape: p.value.shape().to_vec(),
                trainable: p.trainable,
                decay: p.decay,
                file,
            });
        }
        let manifest = Manifest {
            format_version: CHECKPOINT_VERSION,
            dtype,
            params: entries,
        };
        let json = serde_json::to_string_pretty(&manifest)
            .map_err(|e| AutodiffError::Checkpoint(e.to_string()))?;
        fs::write(dir.join("params.json"), json)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<ParamStore> {
        let text = fs::read_to_string(dir.join("params.json"))?;
        let manifest: Manifest =
            serde_json::from_str(&text).map_err(|e| AutodiffError::Checkpoint(e.to_string()))?;
        if manifest.format_version != CHECKPOINT_VERSION {
            return Err(AutodiffError::Checkpoint(format!(
                "unsupported checkpoint version {}",
                manifest.format_version
            )));
        }
        let width = match manifest.dtype {
            BlobType::F32 => 4,
            BlobType::F64 => 8,
        };
        let mut store = ParamStore::new();
        for e in manifest.params {
            let bytes = fs::read(dir.join(&e.file))?;
            let numel: usize = e.shape.iter().product();
            if bytes.len() != numel * width {
                return Err(AutodiffError::Checkpoint(format!(
                    "blob {} holds {} bytes, expected {}",
                    e.file,
                    bytes.len(),
                    numel * width
                )));
            }
            let data: Vec<f64> = match manifest.dtype {
                BlobType::F32 => bytes
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                    .collect(),
                BlobType::F64 => bytes
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect(),
            };
            store.insert(&e.name, Tensor::new(e.shape, data)?, e.trainable, e.decay)?;
        }
        Ok(store)
    }
}

pub const CHECKPOINT_VERSION: u32 = 1;

/// Element type of checkpoint blobs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum BlobType {
    #[default]
    F32,
    F64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    dtype: BlobType,
    params: Vec<ManifestEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    trainable: bool,
    decay: bool,
    file: String,
}
