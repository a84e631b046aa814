//! Enrolled embeddings on disk.
//!
//! One record per line: `id<TAB>n<TAB>v1 v2 ...` where `n` is the number of
//! utterances averaged into the vector. Values are printed in the shortest
//! form that parses back to the same `f32`, so a write/read cycle is exact.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::fsutil::write_atomic;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct StoreRecord {
    pub n_utterances: usize,
    pub values: Vec<f32>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EmbeddingStore {
    records: BTreeMap<String, StoreRecord>,
}

impl EmbeddingStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &StoreRecord)> {
        self.records.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn get(&self, id: &str) -> Result<&StoreRecord> {
        self.records.get(id).ok_or_else(|| Error::UnknownId(id.to_string()))
    }

    /// Adds a record. An existing id is an error unless `overwrite` is set.
    pub fn insert(&mut self, id: &str, record: StoreRecord, overwrite: bool) -> Result<()> {
        if id.is_empty() || id.contains(['\t', '\n', '\r']) {
            return Err(Error::config(format!("invalid store id {id:?}")));
        }
        if record.values.is_empty() || record.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::DegenerateInput(format!("embedding for `{id}` is empty or non-finite")));
        }
        if let Some((_, other)) = self.records.iter().find(|(k, _)| k.as_str() != id) {
            if other.values.len() != record.values.len() {
                return Err(Error::shape(format!(
                    "store holds {}-dim vectors, got {}",
                    other.values.len(),
                    record.values.len()
                )));
            }
        }
        if !overwrite && self.records.contains_key(id) {
            return Err(Error::DuplicateId(id.to_string()));
        }
        self.records.insert(id.to_string(), record);
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (id, r) in &self.records {
            write!(s, "{id}\t{}\t", r.n_utterances).unwrap();
            for (i, v) in r.values.iter().enumerate() {
                if i > 0 {
                    s.push(' ');
                }
                write!(s, "{v}").unwrap();
            }
            s.push('\n');
        }
        s
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut store = Self::new();
        for (i, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg,
            };
            let mut fields = line.split('\t');
            let (Some(id), Some(n), Some(vals), None) = (fields.next(), fields.next(), fields.next(), fields.next())
            else {
                return Err(err("expected `id<TAB>n<TAB>values`".into()));
            };
            let n_utterances = n.parse().map_err(|_| err(format!("bad utterance count `{n}`")))?;
            let values = vals
                .split(' ')
                .map(|v| v.parse::<f32>().map_err(|_| err(format!("bad value `{v}`"))))
                .collect::<Result<Vec<_>>>()?;
            if store.records.contains_key(id) {
                return Err(err(format!("duplicate id `{id}`")));
            }
            store
                .insert(id, StoreRecord { n_utterances, values }, false)
                .map_err(|e| err(e.to_string()))?;
        }
        Ok(store)
    }

    /// Reads a store; a missing file is an empty store.
    pub fn load(path: &Path) -> Result<Self> {
        match std::fs::read_to_string(path) {
            Ok(text) => Self::parse(&text, path),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(Self::new()),
            Err(e) => Err(e.into()),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_text().as_bytes())
    }
}

/// Element-wise mean of equally sized vectors, accumulated in `f64`.
pub fn mean_embedding(vectors: &[Vec<f32>]) -> Result<Vec<f32>> {
    let Some(first) = vectors.first() else {
        return Err(Error::InsufficientData("no embeddings to average".into()));
    };
    if vectors.iter().any(|v| v.len() != first.len()) {
        return Err(Error::shape("embeddings to average differ in length"));
    }
    let mut acc = vec![0.0f64; first.len()];
    for v in vectors {
        for (a, x) in acc.iter_mut().zip(v) {
            *a += *x as f64;
        }
    }
    Ok(acc.iter().map(|a| (a / vectors.len() as f64) as f32).collect())
}
