//! Bit-exact on-disk cache of per-visit embeddings — the hand-off artifact
//! between feature extraction and aggregator training.
//!
//! Layout (all integers little-endian): magic `TSDE`, version u32, dim u32,
//! count u64, then per record (sorted by id): id length u16, id bytes,
//! `dim` f32 values.

use std::collections::BTreeMap;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::tensor::{Result, TensorError};

const MAGIC: [u8; 4] = *b"TSDE";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EmbeddingStore {
    dim: usize,
    entries: BTreeMap<String, Vec<f32>>,
}

fn corrupt(msg: &str) -> TensorError {
    TensorError::Invalid { op: "read_store", msg: msg.to_string() }
}

impl EmbeddingStore {
    pub fn new(dim: usize) -> Result<Self> {
        if dim == 0 || dim > u32::MAX as usize {
            return Err(TensorError::Invalid {
                op: "embedding_store",
                msg: format!("bad dim {dim}"),
            });
        }
        Ok(Self { dim, entries: BTreeMap::new() })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn insert(&mut self, id: &str, embedding: Vec<f32>) -> Result<()> {
        if id.is_empty() || id.len() > u16::MAX as usize {
            return Err(TensorError::Invalid {
                op: "embedding_store",
                msg: format!("id length {} out of range", id.len()),
            });
        }
        if embedding.len() != self.dim {
            return Err(TensorError::Invalid {
                op: "embedding_store",
                msg: format!("id {id:?}: dim {} != store dim {}", embedding.len(), self.dim),
            });
        }
        if self.entries.contains_key(id) {
            return Err(TensorError::Invalid {
                op: "embedding_store",
                msg: format!("duplicate id {id:?}"),
            });
        }
        self.entries.insert(id.to_string(), embedding);
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<&[f32]> {
        self.entries.get(id).map(|v| v.as_slice())
    }

    /// Ids in sorted order.
    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|k| k.as_str())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| TensorError::io("write_store", e))?;
        let mut out = BufWriter::new(file);
        let mut put = |bytes: &[u8]| -> Result<()> {
            out.write_all(bytes).map_err(|e| TensorError::io("write_store", e))
        };
        put(&MAGIC)?;
        put(&VERSION.to_le_bytes())?;
        put(&(self.dim as u32).to_le_bytes())?;
        put(&(self.entries.len() as u64).to_le_bytes())?;
        for (id, vec) in &self.entries {
            put(&(id.len() as u16).to_le_bytes())?;
            put(id.as_bytes())?;
            for v in vec {
                put(&v.to_le_bytes())?;
            }
        }
        out.flush().map_err(|e| TensorError::io("write_store", e))?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| TensorError::io("read_store", e))?;
        let mut input = BufReader::new(file);
        let mut head = [0u8; 4];
        input.read_exact(&mut head).map_err(|_| corrupt("truncated header"))?;
        if head != MAGIC {
            return Err(corrupt("bad magic: not an embedding store"));
        }
        let mut u32buf = [0u8; 4];
        input.read_exact(&mut u32buf).map_err(|_| corrupt("truncated header"))?;
        let version = u32::from_le_bytes(u32buf);
        if version != VERSION {
            return Err(corrupt(&format!("unsupported version {version}")));
        }
        input.read_exact(&mut u32buf).map_err(|_| corrupt("truncated header"))?;
        let dim = u32::from_le_bytes(u32buf) as usize;
        let mut u64buf = [0u8; 8];
        input.read_exact(&mut u64buf).map_err(|_| corrupt("truncated header"))?;
        let count = u64::from_le_bytes(u64buf);

        let mut store = Self::new(dim.max(1))?;
        store.dim = dim;
        for _ in 0..count {
            let mut lenbuf = [0u8; 2];
            input.read_exact(&mut lenbuf).map_err(|_| corrupt("truncated record"))?;
            let id_len = u16::from_le_bytes(lenbuf) as usize;
            let mut id_bytes = vec![0u8; id_len];
            input.read_exact(&mut id_bytes).map_err(|_| corrupt("truncated record"))?;
            let id = String::from_utf8(id_bytes).map_err(|_| corrupt("id is not utf-8"))?;
            let mut raw = vec![0u8; dim * 4];
            input.read_exact(&mut raw).map_err(|_| corrupt("truncated record"))?;
            let vec: Vec<f32> =
                raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            store.insert(&id, vec)?;
        }
        let mut extra = [0u8; 1];
        if input.read(&mut extra).map_err(|e| TensorError::io("read_store", e))? != 0 {
            return Err(corrupt("trailing bytes after last record"));
        }
        Ok(store)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn roundtrip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.tsdf");
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = EmbeddingStore::new(17).unwrap();
        for i in 0..100 {
            let v: Vec<f32> = (0..17).map(|_| rng.gen_range(-10.0f32..10.0)).collect();
            store.insert(&format!("id{i:04}"), v).unwrap();
        }
        store.write(&path).unwrap();
        let back = EmbeddingStore::read(&path).unwrap();
        assert_eq!(store, back);
        for id in store.ids() {
            let (a, b) = (store.get(id).unwrap(), back.get(id).unwrap());
            assert!(a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn ids_come_back_sorted() {
        let mut store = EmbeddingStore::new(2).unwrap();
        for id in ["zeta", "alpha", "mid"] {
            store.insert(id, vec![0.0, 1.0]).unwrap();
        }
        let ids: Vec<&str> = store.ids().collect();
        assert_eq!(ids, vec!["alpha", "mid", "zeta"]);
    }

    #[test]
    fn rejects_duplicates_and_dim_mismatch() {
        let mut store = EmbeddingStore::new(3).unwrap();
        store.insert("a", vec![1.0, 2.0, 3.0]).unwrap();
        assert!(store.insert("a", vec![4.0, 5.0, 6.0]).is_err());
        assert!(store.insert("b", vec![1.0]).is_err());
        assert!(store.insert("", vec![1.0, 2.0, 3.0]).is_err());
    }

    #[test]
    fn corrupt_files_are_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.tsdf");
        let mut store = EmbeddingStore::new(4).unwrap();
        store.insert("visit", vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        store.write(&path).unwrap();

        let full = std::fs::read(&path).unwrap();
        std::fs::write(&path, &full[..full.len() - 3]).unwrap();
        let err = EmbeddingStore::read(&path).unwrap_err().to_string();
        assert!(err.contains("truncated"), "{err}");

        let mut bad_magic = full.clone();
        bad_magic[0] = b'X';
        std::fs::write(&path, &bad_magic).unwrap();
        let err = EmbeddingStore::read(&path).unwrap_err().to_string();
        assert!(err.contains("magic"), "{err}");

        let mut bad_version = full.clone();
        bad_version[4] = 9;
        std::fs::write(&path, &bad_version).unwrap();
        let err = EmbeddingStore::read(&path).unwrap_err().to_string();
        assert!(err.contains("version"), "{err}");

        let mut trailing = full;
        trailing.push(0);
        std::fs::write(&path, &trailing).unwrap();
        let err = EmbeddingStore::read(&path).unwrap_err().to_string();
        assert!(err.contains("trailing"), "{err}");
    }
}
