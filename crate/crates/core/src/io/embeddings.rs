use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::container::{self, ManifestEntry, Record};
use super::EMBEDDING_MAGIC;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StoreMeta {
    dim: usize,
    records: Vec<ManifestEntry>,
}

/// Utterance embeddings keyed by id, kept in insertion order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EmbeddingStore {
    dim: usize,
    ids: Vec<String>,
    vectors: Vec<Vec<f32>>,
    index: HashMap<String, usize>,
}

impl EmbeddingStore {
    pub fn new(dim: usize) -> Self {
        EmbeddingStore { dim, ..Default::default() }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn insert(&mut self, id: impl Into<String>, vector: Vec<f32>) -> Result<()> {
        let id = id.into();
        if vector.len() != self.dim {
            return Err(Error::Input(format!("embedding {id:?} has dim {}, store holds dim {}", vector.len(), self.dim)));
        }
        if id.is_empty() || id.chars().any(char::is_whitespace) {
            return Err(Error::Input(format!("embedding id {id:?} must be non-empty without whitespace")));
        }
        if self.index.contains_key(&id) {
            return Err(Error::Input(format!("duplicate embedding id {id:?}")));
        }
        self.index.insert(id.clone(), self.ids.len());
        self.ids.push(id);
        self.vectors.push(vector);
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<&[f32]> {
        self.index.get(id).map(|&i| self.vectors[i].as_slice())
    }

    /// Looks up an id, failing with an input error that names it.
    pub fn require(&self, id: &str) -> Result<&[f32]> {
        self.get(id).ok_or_else(|| Error::Input(format!("no embedding for id {id:?}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f32])> {
        self.ids.iter().map(String::as_str).zip(self.vectors.iter().map(Vec::as_slice))
    }

    pub fn vectors(&self) -> &[Vec<f32>] {
        &self.vectors
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let records: Vec<Record> = self.iter().map(|(id, v)| Record::from_values(id, &[self.dim], v)).collect();
        let meta = StoreMeta { dim: self.dim, records: records.iter().map(Record::manifest).collect() };
        let meta = serde_json::to_vec(&meta).map_err(|e| Error::Format(format!("embedding store metadata: {e}")))?;
        Ok(container::encode(EMBEDDING_MAGIC, &meta, &records))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let what = "embedding store";
        let (meta, records) = container::decode(bytes, EMBEDDING_MAGIC, what)?;
        let meta: StoreMeta = serde_json::from_slice(meta).map_err(|e| Error::Format(format!("{what} metadata: {e}")))?;
        container::check_manifest(what, &meta.records, &records)?;
        let mut store = EmbeddingStore::new(meta.dim);
        for r in records {
            if r.shape != [meta.dim] || r.dtype != crate::tensor::DType::F32 {
                return Err(Error::Format(format!("{what}: record {:?} is not an f32 vector of dim {}", r.name, meta.dim)));
            }
            store.insert(r.name.clone(), r.values()).map_err(|e| Error::Format(format!("{what}: {e}")))?;
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::Input(format!("{}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::Input(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}
