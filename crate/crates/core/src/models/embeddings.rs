//! Precomputed sentence embeddings keyed by headline hash.
//!
//! File layout: CSV (or TSV when the file name ends in `.tsv`) without a
//! header, one row per headline: `headline_hash, v1, ..., vD`. A sibling
//! `<file>.manifest` records the format, the hashing rule and `D`.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use super::batch::HEADLINE_HASH_RULE;
use crate::artifact;
use crate::error::{Error, Result};
use crate::ingest::parse_meta;
use crate::numeric::Tensor;

pub const EMBEDDING_FORMAT: &str = "fineas-embeddings/1";

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    dim: usize,
    vectors: HashMap<String, Vec<f64>>,
}

pub fn manifest_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest");
    path.with_file_name(name)
}

fn delimiter(path: &Path) -> u8 {
    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("tsv")) {
        b'\t'
    } else {
        b','
    }
}

impl EmbeddingTable {
    pub fn new(dim: usize) -> Self {
        EmbeddingTable {
            dim,
            vectors: HashMap::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn insert(&mut self, key: impl Into<String>, vector: Vec<f64>) -> Result<()> {
        if vector.len() != self.dim {
            return Err(Error::shape("embedding row", &[self.dim], &[vector.len()]));
        }
        if vector.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteValue("embedding row".into()));
        }
        self.vectors.insert(key.into(), vector);
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<&[f64]> {
        self.vectors.get(key).map(Vec::as_slice)
    }

    /// Stacks the vectors for `keys` into a `[keys.len(), dim]` tensor.
    pub fn lookup(&self, keys: &[String]) -> Result<Tensor> {
        let mut values = Vec::with_capacity(keys.len() * self.dim);
        for k in keys {
            let v = self.get(k).ok_or_else(|| Error::MissingEmbedding(k.clone()))?;
            values.extend_from_slice(v);
        }
        Tensor::new(&[keys.len(), self.dim], values)
    }

    /// Writes rows sorted by key, plus the manifest.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = csv::WriterBuilder::new()
            .has_headers(false)
            .delimiter(delimiter(path))
            .from_writer(Vec::new());
        let mut keys: Vec<&String> = self.vectors.keys().collect();
        keys.sort();
        for k in keys {
            let mut row = vec![k.clone()];
            row.extend(self.vectors[k].iter().map(|v| v.to_string()));
            w.write_record(&row)?;
        }
        artifact::write_atomic(path, &crate::ingest::csv_into_bytes(w)?)?;
        let manifest = format!(
            "format={EMBEDDING_FORMAT}\nhash_rule={HEADLINE_HASH_RULE}\ndim={}\nrows={}\n",
            self.dim,
            self.vectors.len()
        );
        artifact::write_atomic(&manifest_path(path), manifest.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mpath = manifest_path(path);
        let meta = parse_meta(&artifact::read_to_string(&mpath)?);
        let get = |k: &str| meta.iter().find(|(key, _)| key == k).map(|(_, v)| v.as_str());
        if get("format") != Some(EMBEDDING_FORMAT) {
            return Err(Error::InvalidConfig(format!("{}: unknown format", mpath.display())));
        }
        if get("hash_rule") != Some(HEADLINE_HASH_RULE) {
            return Err(Error::ConfigHashMismatch {
                what: "embedding hash rule".into(),
                expected: HEADLINE_HASH_RULE.into(),
                found: get("hash_rule").unwrap_or("").into(),
            });
        }
        let dim: usize = get("dim")
            .and_then(|d| d.parse().ok())
            .ok_or_else(|| Error::InvalidConfig(format!("{}: bad dim", mpath.display())))?;

        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(false)
            .delimiter(delimiter(path))
            .from_reader(file);
        let mut table = EmbeddingTable::new(dim);
        for rec in rdr.records() {
            let rec = rec.map_err(|e| Error::ParseError {
                path: path.to_path_buf(),
                line: e.position().map_or(0, |p| p.line()),
                message: e.to_string(),
            })?;
            let line = rec.position().map_or(0, |p| p.line());
            let bad = |msg: String| Error::ParseError {
                path: path.to_path_buf(),
                line,
                message: msg,
            };
            let key = rec.get(0).ok_or_else(|| bad("empty row".into()))?.trim().to_string();
            let values = rec
                .iter()
                .skip(1)
                .map(|v| v.trim().parse::<f64>().map_err(|_| bad(format!("bad value `{v}`"))))
                .collect::<Result<Vec<_>>>()?;
            if values.len() != dim {
                return Err(bad(format!("expected {dim} values, found {}", values.len())));
            }
            table.insert(key, values)?;
        }
        Ok(table)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::headline_key;

    #[test]
    fn save_load_round_trip_csv_and_tsv() {
        let dir = tempfile::tempdir().unwrap();
        let mut t = EmbeddingTable::new(3);
        t.insert(headline_key("Apple beats"), vec![0.5, -1.0, 0.25]).unwrap();
        t.insert(headline_key("Tesla misses"), vec![1.0, 2.0, 3.0]).unwrap();
        for name in ["emb.csv", "emb.tsv"] {
            let p = dir.path().join(name);
            t.save(&p).unwrap();
            assert_eq!(EmbeddingTable::load(&p).unwrap(), t);
        }
        let x = t.lookup(&[headline_key("Tesla misses")]).unwrap();
        assert_eq!(x.values(), &[1.0, 2.0, 3.0]);
        assert!(matches!(t.lookup(&["nope".into()]), Err(Error::MissingEmbedding(_))));
    }

    #[test]
    fn wrong_width_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("emb.csv");
        EmbeddingTable::new(2).save(&p).unwrap();
        std::fs::write(&p, "abc,1,2,3\n").unwrap();
        assert!(matches!(EmbeddingTable::load(&p), Err(Error::ParseError { line: 1, .. })));
    }
}
