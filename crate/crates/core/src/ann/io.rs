//! `MLDI` index files.
//!
//! ```text
//! magic "MLDI" | version u32 | dim u32 | count u64 | n_trees u32 | k u32
//! items: id (u16 len + UTF-8) | dim x f32
//! trees, pre-order: tag u8 (0 inner: dim x f32 normal, f32 offset; 1 leaf: u32 count, u32 ordinals)
//! ```

use std::path::Path;

use super::{AnnForest, IndexConfig, TreeNode};
use crate::binio::{read_file, write_atomic, Reader, Writer};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"MLDI";
const VERSION: u32 = 1;
const MAX_DEPTH: usize = 4096;

fn encode_node(w: &mut Writer, node: &TreeNode) {
    match node {
        TreeNode::Inner { normal, offset, left, right } => {
            w.u8(0);
            normal.iter().for_each(|&v| w.f32(v));
            w.f32(*offset);
            encode_node(w, left);
            encode_node(w, right);
        }
        TreeNode::Leaf(items) => {
            w.u8(1);
            w.u32(items.len() as u32);
            items.iter().for_each(|&i| w.u32(i));
        }
    }
}

pub fn encode_index(forest: &AnnForest) -> Result<Vec<u8>> {
    if forest.is_empty() || forest.trees.is_empty() {
        return Err(Error::param("refusing to save an empty forest"));
    }
    let mut w = Writer::default();
    w.bytes(MAGIC);
    w.u32(VERSION);
    w.u32(forest.dim as u32);
    w.u64(forest.ids.len() as u64);
    w.u32(forest.trees.len() as u32);
    w.u32(forest.config.leaf_capacity as u32);
    for (i, id) in forest.ids.iter().enumerate() {
        w.str16(id, "item id")?;
        forest.row(i).iter().for_each(|&v| w.f32(v));
    }
    for tree in &forest.trees {
        encode_node(&mut w, tree);
    }
    Ok(w.buf)
}

fn decode_node(r: &mut Reader<'_>, dim: usize, count: usize, depth: usize) -> Result<TreeNode> {
    if depth > MAX_DEPTH {
        return Err(Error::format("tree", "nesting too deep"));
    }
    match r.u8("node tag")? {
        0 => {
            let mut normal = Vec::with_capacity(dim);
            for _ in 0..dim {
                normal.push(r.f32("normal")?);
            }
            let offset = r.f32("offset")?;
            let left = Box::new(decode_node(r, dim, count, depth + 1)?);
            let right = Box::new(decode_node(r, dim, count, depth + 1)?);
            Ok(TreeNode::Inner { normal, offset, left, right })
        }
        1 => {
            let n = r.u32("leaf count")? as usize;
            if n > count {
                return Err(Error::format("leaf count", format!("{n} exceeds item count {count}")));
            }
            let mut items = Vec::with_capacity(n);
            for _ in 0..n {
                let i = r.u32("ordinal")?;
                if i as usize >= count {
                    return Err(Error::format("ordinal", format!("{i} out of range for {count} items")));
                }
                items.push(i);
            }
            Ok(TreeNode::Leaf(items))
        }
        t => Err(Error::format("node tag", format!("unknown tag {t}"))),
    }
}

pub fn decode_index(bytes: &[u8]) -> Result<AnnForest> {
    let mut r = Reader::new(bytes);
    r.magic(MAGIC)?;
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::format("version", format!("unsupported index version {version}")));
    }
    let dim = r.u32("dim")? as usize;
    let count = usize::try_from(r.u64("count")?).map_err(|_| Error::format("count", "item count overflows"))?;
    let n_trees = r.u32("n_trees")? as usize;
    let k = r.u32("k")? as usize;
    if dim == 0 || count == 0 || n_trees == 0 || k == 0 {
        return Err(Error::format("header", format!("dim {dim}, count {count}, n_trees {n_trees}, k {k}")));
    }
    // Each item needs at least its length prefix and vector; reject absurd counts early.
    if count > bytes.len() / (2 + 4 * dim) {
        return Err(Error::format("count", format!("{count} items cannot fit in {} bytes", bytes.len())));
    }
    let mut ids = Vec::with_capacity(count);
    let mut vectors = Vec::with_capacity(count * dim);
    for _ in 0..count {
        ids.push(r.str16("item id")?);
        for _ in 0..dim {
            vectors.push(r.f32("vector")?);
        }
    }
    let mut trees = Vec::with_capacity(n_trees);
    for _ in 0..n_trees {
        trees.push(decode_node(&mut r, dim, count, 0)?);
    }
    r.finish()?;
    let config = IndexConfig { n_trees, leaf_capacity: k, ..IndexConfig::default() };
    Ok(AnnForest { config, dim, ids, vectors, trees })
}

pub fn save_index(forest: &AnnForest, path: &Path) -> Result<()> {
    write_atomic(path, &encode_index(forest)?)
}

pub fn load_index(path: &Path) -> Result<AnnForest> {
    decode_index(&read_file(path)?).map_err(|e| match e {
        Error::Format { field, detail } => Error::format(field, format!("{}: {detail}", path.display())),
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::super::{build_index, tests::random_items};
    use super::*;

    #[test]
    fn round_trip_is_bitwise() {
        let items = random_items(300, 6, 8);
        let f = build_index(&items, &IndexConfig::default(), 4).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("i.mldi");
        save_index(&f, &path).unwrap();
        let back = load_index(&path).unwrap();
        assert_eq!(back.trees, f.trees);
        for (_, q) in items.iter().take(20) {
            for budget in [Some(5), Some(50), None] {
                let a = f.query(q, 7, budget).unwrap();
                let b = back.query(q, 7, budget).unwrap();
                assert_eq!(a.len(), b.len());
                for (x, y) in a.iter().zip(&b) {
                    assert_eq!(x.id, y.id);
                    assert_eq!(x.distance.to_bits(), y.distance.to_bits());
                }
            }
        }
    }

    #[test]
    fn rejects_corrupt_files() {
        let f = build_index(&random_items(40, 3, 1), &IndexConfig::default(), 1).unwrap();
        let bytes = encode_index(&f).unwrap();
        for cut in [0, 3, 10, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(decode_index(&bytes[..cut]), Err(Error::Format { .. })), "cut {cut}");
        }
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(decode_index(&bad), Err(Error::Format { ref field, .. }) if field == "version"));
        let mut bad = bytes;
        bad[0] = b'X';
        assert!(matches!(decode_index(&bad), Err(Error::Format { ref field, .. }) if field == "magic"));
    }

    #[test]
    fn empty_forest_rejected_at_save() {
        let mut f = build_index(&random_items(3, 2, 1), &IndexConfig::default(), 1).unwrap();
        f.trees.clear();
        assert!(encode_index(&f).is_err());
    }
}
