//! On-disk array container: a JSON header plus one raw little-endian f32
//! file per array, row-major. Dataset manifests, checkpoints, and adapter
//! embedding tables all store their numeric payloads through this module.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

/// Schema version for container headers written by this build.
pub const SCHEMA_VERSION: u32 = 1;

/// Write `data` as raw little-endian f32, creating parent directories.
pub fn write_raw(path: &Path, data: &[f32]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut bytes = Vec::with_capacity(data.len() * 4);
    for v in data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

/// Read raw little-endian f32, validating the byte length against
/// `expected_len` elements.
pub fn read_raw(path: &Path, expected_len: usize) -> Result<Vec<f32>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .map_err(|e| Error::Ingestion(format!("cannot open {}: {e}", path.display())))?
        .read_to_end(&mut bytes)?;
    if bytes.len() != expected_len * 4 {
        return Err(Error::Ingestion(format!(
            "{}: expected {} f32 values ({} bytes), file has {} bytes",
            path.display(),
            expected_len,
            expected_len * 4,
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

/// A keyed set of arrays with shapes, as stored by one container directory.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ArrayTable {
    entries: BTreeMap<String, TableArray>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TableArray {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Serialize, Deserialize)]
struct TableHeader {
    schema_version: u32,
    kind: String,
    arrays: Vec<TableHeaderEntry>,
}

#[derive(Serialize, Deserialize)]
struct TableHeaderEntry {
    key: String,
    shape: Vec<usize>,
    path: String,
}

fn key_ok(key: &str) -> bool {
    !key.is_empty()
        && key
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.'))
}

impl ArrayTable {
    #[must_use]
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, key: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) -> Result<()> {
        let key = key.into();
        if !key_ok(&key) {
            return Err(Error::Validation(format!(
                "array key {key:?} must be non-empty and use only [A-Za-z0-9_.-]"
            )));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Validation(format!(
                "array {key}: shape {shape:?} implies {n} elements, got {}",
                data.len()
            )));
        }
        self.entries.insert(key, TableArray { shape, data });
        Ok(())
    }

    #[must_use]
    pub fn get(&self, key: &str) -> Option<&TableArray> {
        self.entries.get(key)
    }

    /// Fetch an array by key, checked against an expected shape.
    pub fn get_nd(&self, key: &str, expected: &[usize]) -> Result<ndarray::ArrayD<f32>> {
        let entry = self
            .entries
            .get(key)
            .ok_or_else(|| Error::Lookup(format!("array table has no entry {key:?}")))?;
        if entry.shape != expected {
            return Err(Error::shape(format!("array {key}"), expected, &entry.shape));
        }
        ndarray::ArrayD::from_shape_vec(entry.shape.clone(), entry.data.clone())
            .map_err(|e| Error::Validation(format!("array {key}: {e}")))
    }

    #[must_use]
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    #[must_use]
    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Save as `<dir>/table.json` plus `<dir>/arrays/<key>.f32`.
    pub fn save(&self, dir: &Path, kind: &str) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut header = TableHeader {
            schema_version: SCHEMA_VERSION,
            kind: kind.to_string(),
            arrays: Vec::new(),
        };
        for (key, arr) in &self.entries {
            let rel: PathBuf = ["arrays", &format!("{key}.f32")].iter().collect();
            write_raw(&dir.join(&rel), &arr.data)?;
            header.arrays.push(TableHeaderEntry {
                key: key.clone(),
                shape: arr.shape.clone(),
                path: rel.to_string_lossy().into_owned(),
            });
        }
        let json = serde_json::to_string_pretty(&header)?;
        std::fs::write(dir.join("table.json"), json)?;
        Ok(())
    }

    /// Load a directory written by [`ArrayTable::save`], checking the kind tag
    /// and every array length against the header.
    pub fn load(dir: &Path, expected_kind: &str) -> Result<Self> {
        let header_path = dir.join("table.json");
        let text = std::fs::read_to_string(&header_path)
            .map_err(|e| Error::Ingestion(format!("cannot read {}: {e}", header_path.display())))?;
        let header: TableHeader = serde_json::from_str(&text)
            .map_err(|e| Error::Ingestion(format!("{}: {e}", header_path.display())))?;
        if header.schema_version != SCHEMA_VERSION {
            return Err(Error::SchemaVersion {
                found: header.schema_version,
                supported: SCHEMA_VERSION,
            });
        }
        if header.kind != expected_kind {
            return Err(Error::Ingestion(format!(
                "container kind mismatch: expected {expected_kind:?}, found {:?}",
                header.kind
            )));
        }
        let mut table = Self::new();
        for entry in header.arrays {
            let n: usize = entry.shape.iter().product();
            let data = read_raw(&dir.join(&entry.path), n)?;
            table.insert(entry.key, entry.shape, data)?;
        }
        Ok(table)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn raw_round_trip_preserves_bits() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.f32");
        let data = vec![0.0f32, -1.5, f32::MIN_POSITIVE, 3.25e7, -0.0];
        write_raw(&path, &data).unwrap();
        let back = read_raw(&path, data.len()).unwrap();
        for (a, b) in data.iter().zip(&back) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn raw_read_rejects_wrong_length() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.f32");
        write_raw(&path, &[1.0, 2.0, 3.0]).unwrap();
        let err = read_raw(&path, 4).unwrap_err();
        assert!(err.to_string().contains("expected 4 f32 values"));
    }

    #[test]
    fn table_round_trip_is_equal() {
        let dir = tempfile::tempdir().unwrap();
        let mut t = ArrayTable::new();
        t.insert("clip_a", vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0])
            .unwrap();
        t.insert("clip_b", vec![4], vec![0.5; 4]).unwrap();
        t.save(dir.path(), "test-table").unwrap();
        let back = ArrayTable::load(dir.path(), "test-table").unwrap();
        assert_eq!(t, back);
    }

    #[test]
    fn table_load_rejects_wrong_kind() {
        let dir = tempfile::tempdir().unwrap();
        let mut t = ArrayTable::new();
        t.insert("k", vec![1], vec![1.0]).unwrap();
        t.save(dir.path(), "kind-a").unwrap();
        let err = ArrayTable::load(dir.path(), "kind-b").unwrap_err();
        assert!(matches!(err, Error::Ingestion(_)));
    }

    #[test]
    fn table_rejects_bad_keys_and_shapes() {
        let mut t = ArrayTable::new();
        assert!(t.insert("has space", vec![1], vec![1.0]).is_err());
        assert!(t.insert("", vec![1], vec![1.0]).is_err());
        assert!(t.insert("ok", vec![2, 2], vec![1.0]).is_err());
    }
}
