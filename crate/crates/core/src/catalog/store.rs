//! `MLDE` embedding stores: id-keyed f32 vectors, used both for model
//! embedding dumps and as the pipeline's persistent feature cache.
//!
//! ```text
//! magic "MLDE" | version u32 | dim u32 | count u64
//! records: id (u16 len + UTF-8) | dim x f32
//! ```

use std::path::{Path, PathBuf};

use indexmap::IndexMap;

use crate::binio::{read_file, write_atomic, Reader, Writer};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"MLDE";
const VERSION: u32 = 1;

pub fn encode_store(dim: usize, entries: &IndexMap<String, Vec<f32>>) -> Result<Vec<u8>> {
    let mut w = Writer::default();
    w.bytes(MAGIC);
    w.u32(VERSION);
    w.u32(u32::try_from(dim).map_err(|_| Error::format("dim", format!("{dim} exceeds u32")))?);
    w.u64(entries.len() as u64);
    for (id, v) in entries {
        if v.len() != dim {
            return Err(Error::dim("embedding store", format!("`{id}` has {} values, store dim is {dim}", v.len())));
        }
        w.str16(id, "id")?;
        v.iter().for_each(|&x| w.f32(x));
    }
    Ok(w.buf)
}

pub fn decode_store(bytes: &[u8]) -> Result<(usize, IndexMap<String, Vec<f32>>)> {
    let mut r = Reader::new(bytes);
    r.magic(MAGIC)?;
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::format("version", format!("unsupported store version {version}")));
    }
    let dim = r.u32("dim")? as usize;
    let count = r.u64("count")?;
    if count > (bytes.len() / (2 + 4 * dim).max(1)) as u64 {
        return Err(Error::format("count", format!("{count} records cannot fit in {} bytes", bytes.len())));
    }
    let mut entries = IndexMap::with_capacity(count as usize);
    for _ in 0..count {
        let id = r.str16("id")?;
        let mut v = Vec::with_capacity(dim);
        for _ in 0..dim {
            v.push(r.f32("values")?);
        }
        if entries.insert(id.clone(), v).is_some() {
            return Err(Error::format("id", format!("duplicate id `{id}`")));
        }
    }
    r.finish()?;
    Ok((dim, entries))
}

/// Writes `(id, vector)` pairs in order, rounding to f32.
pub fn save_embeddings(path: &Path, dim: usize, items: &[(String, Vec<f64>)]) -> Result<()> {
    let mut entries = IndexMap::with_capacity(items.len());
    for (id, v) in items {
        if entries.insert(id.clone(), v.iter().map(|&x| x as f32).collect()).is_some() {
            return Err(Error::Validation(format!("duplicate id `{id}`")));
        }
    }
    write_atomic(path, &encode_store(dim, &entries)?)
}

pub type Embeddings = Vec<(String, Vec<f64>)>;

/// Reads a store back as f64 vectors in file order.
pub fn load_embeddings(path: &Path) -> Result<(usize, Embeddings)> {
    let (dim, entries) = decode_store(&read_file(path)?).map_err(|e| match e {
        Error::Format { field, detail } => Error::format(field, format!("{}: {detail}", path.display())),
        other => other,
    })?;
    Ok((dim, entries.into_iter().map(|(id, v)| (id, v.into_iter().map(f64::from).collect())).collect()))
}

/// Durable key-value cache over one store file. Writes are buffered until
/// [`EmbeddingStore::flush`].
#[derive(Debug)]
pub struct EmbeddingStore {
    path: PathBuf,
    dim: usize,
    entries: IndexMap<String, Vec<f32>>,
    dirty: bool,
}

impl EmbeddingStore {
    /// Opens `path`, starting empty if it does not exist. An unreadable or
    /// corrupt file, or one of a different dimension, is discarded with a
    /// warning and its entries are rebuilt on demand.
    pub fn open(path: &Path, dim: usize) -> Result<Self> {
        let mut store = Self { path: path.to_path_buf(), dim, entries: IndexMap::new(), dirty: false };
        if !path.exists() {
            return Ok(store);
        }
        match decode_store(&read_file(path)?) {
            Ok((d, entries)) if d == dim => store.entries = entries,
            Ok((d, _)) => {
                log::warn!("feature cache {} has dim {d}, expected {dim}; rebuilding", path.display());
                store.dirty = true;
            }
            Err(e) => {
                log::warn!("feature cache {} is corrupt ({e}); rebuilding", path.display());
                store.dirty = true;
            }
        }
        Ok(store)
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

    /// Returns the stored vector. Entries holding non-finite values are
    /// treated as corrupt: they are dropped with a warning and reported absent.
    pub fn get(&mut self, id: &str) -> Option<Vec<f64>> {
        let v = self.entries.get(id)?;
        if v.iter().all(|x| x.is_finite()) {
            return Some(v.iter().map(|&x| x as f64).collect());
        }
        log::warn!("feature cache entry `{id}` holds non-finite values; rebuilding");
        self.entries.shift_remove(id);
        self.dirty = true;
        None
    }

    pub fn put(&mut self, id: &str, v: &[f64]) -> Result<()> {
        if v.len() != self.dim {
            return Err(Error::dim("embedding store", format!("`{id}` has {} values, store dim is {}", v.len(), self.dim)));
        }
        self.entries.insert(id.to_string(), v.iter().map(|&x| x as f32).collect());
        self.dirty = true;
        Ok(())
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn flush(&mut self) -> Result<()> {
        if self.dirty {
            write_atomic(&self.path, &encode_store(self.dim, &self.entries)?)?;
            self.dirty = false;
        }
        Ok(())
    }
}

pub fn cache_get(store: &mut EmbeddingStore, id: &str) -> Option<Vec<f64>> {
    store.get(id)
}

pub fn cache_put(store: &mut EmbeddingStore, id: &str, v: &[f64]) -> Result<()> {
    store.put(id, v)
}
