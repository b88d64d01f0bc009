//! Catalog side of retrieval: the engineered baseline features, partitioning
//! by (gender, category), incremental batch top-k with a feature cache, and
//! triplet mining from the baseline's neighbours.

pub mod color;
pub mod features;
pub mod mining;
pub mod pipeline;
pub mod store;
pub mod synth;

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::binio::write_atomic;
use crate::error::{Error, Result};

pub use color::{lab_histogram, rgb_to_lab};
pub use features::{extract_fused, fused_distance, Extractors, FeatureExtractor, FusedFeature, FusionWeights};
pub use mining::{catalog_features, mine_triplets, MiningConfig};
pub use pipeline::{load_results, run_batch, BatchReport, NeighborResult, PipelineConfig};
pub use store::{cache_get, cache_put, load_embeddings, save_embeddings, EmbeddingStore};
pub use synth::{partition_keys, synth_catalog};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Gender {
    Men,
    Women,
    Girl,
    Boy,
}

impl Gender {
    pub const ALL: [Gender; 4] = [Gender::Men, Gender::Women, Gender::Girl, Gender::Boy];

    pub fn as_str(self) -> &'static str {
        match self {
            Gender::Men => "men",
            Gender::Women => "women",
            Gender::Girl => "girl",
            Gender::Boy => "boy",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CatalogItem {
    pub id: String,
    pub image_path: String,
    pub gender: Gender,
    pub category_key: String,
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct PartitionKey {
    pub gender: Gender,
    pub category_key: String,
}

impl fmt::Display for PartitionKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.gender.as_str(), self.category_key)
    }
}

impl CatalogItem {
    pub fn partition_key(&self) -> PartitionKey {
        PartitionKey { gender: self.gender, category_key: self.category_key.clone() }
    }
}

pub fn parse_catalog(text: &str) -> Result<Vec<CatalogItem>> {
    let mut items = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let item: CatalogItem =
            serde_json::from_str(line).map_err(|e| Error::Line { line: i + 1, detail: e.to_string() })?;
        if item.id.is_empty() || item.category_key.is_empty() {
            return Err(Error::Line { line: i + 1, detail: "id and category_key must be non-empty".into() });
        }
        if !seen.insert(item.id.clone()) {
            return Err(Error::Line { line: i + 1, detail: format!("duplicate id `{}`", item.id) });
        }
        items.push(item);
    }
    Ok(items)
}

pub fn load_catalog(path: &Path) -> Result<Vec<CatalogItem>> {
    parse_catalog(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
}

pub fn write_catalog(path: &Path, items: &[CatalogItem]) -> Result<()> {
    let mut out = String::new();
    for item in items {
        out.push_str(&serde_json::to_string(item).expect("items always serialize"));
        out.push('\n');
    }
    write_atomic(path, out.as_bytes())
}

/// Groups items by (gender, category_key); items keep catalog order.
pub fn partition_catalog(items: &[CatalogItem]) -> BTreeMap<PartitionKey, Vec<CatalogItem>> {
    let mut out: BTreeMap<PartitionKey, Vec<CatalogItem>> = BTreeMap::new();
    for item in items {
        out.entry(item.partition_key()).or_default().push(item.clone());
    }
    out
}
