//! Incremental batch top-k over a partitioned catalog.
//!
//! Each run writes `results.jsonl` and `state.json` (partition key to content
//! hash) into the output directory and reads the previous run's copies back.
//! A partition whose content hash is unchanged is carried forward verbatim.
//! A partition that only gained items recomputes the new items and every
//! existing item whose top-k a new item enters; any other change recomputes
//! the whole partition. With the default exhaustive search budget the output
//! is identical to a run from scratch.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::features::{extract_fused, fused_distance_unchecked, Extractors, FusedFeature, FusionWeights, FUSED_DIM};
use super::store::EmbeddingStore;
use super::{partition_catalog, CatalogItem};
use crate::ann::{build_index, IndexConfig, Neighbor};
use crate::binio::{read_file, write_atomic};
use crate::data::image::decode_image;
use crate::data::manifest::resolve;
use crate::error::{Error, Result};
use crate::seed::derive_seed;

pub const RESULTS_FILE: &str = "results.jsonl";
pub const STATE_FILE: &str = "state.json";

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineConfig {
    pub top_k: usize,
    pub fusion: FusionWeights,
    /// Forest shape used for candidate generation.
    pub index: IndexConfig,
    /// Candidates re-ranked per query; `None` inspects the whole partition.
    pub search_budget: Option<usize>,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self { top_k: 10, fusion: FusionWeights::default(), index: IndexConfig::default(), search_budget: None, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NeighborResult {
    pub query_id: String,
    pub neighbors: Vec<Neighbor>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct BatchReport {
    pub partitions: usize,
    pub partitions_carried: usize,
    pub partitions_incremental: usize,
    pub partitions_full: usize,
    pub extractions: usize,
    pub recomputed_items: usize,
    pub results: usize,
}

struct Entry<'a> {
    item: &'a CatalogItem,
    digest: String,
    bytes: Vec<u8>,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn content_hash<'a>(entries: impl Iterator<Item = &'a Entry<'a>>) -> String {
    let mut h = Sha256::new();
    for e in entries {
        h.update((e.item.id.len() as u64).to_le_bytes());
        h.update(e.item.id.as_bytes());
        h.update(e.digest.as_bytes());
    }
    hex(&h.finalize()[..16])
}

fn read_previous(out_dir: &Path) -> Result<(BTreeMap<String, String>, HashMap<String, NeighborResult>)> {
    let state_path = out_dir.join(STATE_FILE);
    let results_path = out_dir.join(RESULTS_FILE);
    if !state_path.exists() || !results_path.exists() {
        return Ok(Default::default());
    }
    let state: BTreeMap<String, String> = serde_json::from_slice(&read_file(&state_path)?)
        .map_err(|e| Error::format("state", format!("{}: {e}", state_path.display())))?;
    let text = fs::read_to_string(&results_path).map_err(|e| Error::io(&results_path, e))?;
    let mut results = HashMap::new();
    for (i, line) in text.lines().enumerate() {
        let r: NeighborResult =
            serde_json::from_str(line).map_err(|e| Error::Line { line: i + 1, detail: e.to_string() })?;
        results.insert(r.query_id.clone(), r);
    }
    Ok((state, results))
}

/// Ranks `ids[candidates]` against `ids[q]` by fused distance, then id.
fn top_k(q: usize, candidates: &[usize], ids: &[&str], feats: &[FusedFeature], w: [f64; 3], k: usize) -> Vec<Neighbor> {
    let mut hits: Vec<Neighbor> = candidates
        .iter()
        .filter(|&&c| c != q)
        .map(|&c| Neighbor { id: ids[c].to_string(), distance: fused_distance_unchecked(&feats[q], &feats[c], w) })
        .collect();
    hits.sort_by(|a, b| a.distance.total_cmp(&b.distance).then_with(|| a.id.cmp(&b.id)));
    hits.truncate(k);
    hits
}

/// Forest coordinates: each block scaled so squared Euclidean distance is the
/// weighted sum of squared per-block distances.
fn index_vector(f: &FusedFeature, w: [f64; 3]) -> Vec<f64> {
    let mut v = Vec::with_capacity(FUSED_DIM);
    for (block, wi) in [(&f.structure, w[0]), (&f.pattern, w[1]), (&f.color, w[2])] {
        let s = (wi / block.len() as f64).sqrt();
        v.extend(block.iter().map(|x| x * s));
    }
    v
}

fn key_seed(root: u64, key: &str) -> u64 {
    let d = Sha256::digest(key.as_bytes());
    derive_seed(root, &[u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))])
}

/// Loads features for `entries`, extracting (and caching) only misses.
/// Returns the features, quantized to cache precision, and the miss count.
pub(crate) fn features_for(
    entries: &[(&CatalogItem, String, Vec<u8>)],
    cache: &mut EmbeddingStore,
    extractors: &Extractors,
) -> Result<(Vec<FusedFeature>, usize)> {
    let keys: Vec<String> = entries.iter().map(|(item, digest, _)| format!("{}:{digest}", item.id)).collect();
    let cached: Vec<Option<Vec<f64>>> = keys.iter().map(|k| cache.get(k)).collect();
    let misses: Vec<usize> = (0..entries.len()).filter(|&i| cached[i].is_none()).collect();
    let extracted: Vec<Result<FusedFeature>> = misses
        .par_iter()
        .map(|&i| {
            let img = decode_image(&entries[i].2)
                .map_err(|e| Error::Validation(format!("image of `{}`: {e}", entries[i].0.id)))?;
            Ok(extract_fused(&img, extractors)?.quantized())
        })
        .collect();
    let mut out: Vec<Option<FusedFeature>> =
        cached.into_iter().map(|c| c.map(|v| FusedFeature::from_vec(&v)).transpose()).collect::<Result<_>>()?;
    for (&i, f) in misses.iter().zip(extracted) {
        let f = f?;
        cache.put(&keys[i], &f.to_vec())?;
        out[i] = Some(f);
    }
    Ok((out.into_iter().map(|f| f.expect("every entry filled")).collect(), misses.len()))
}

pub(crate) fn digest_images(items: &[&CatalogItem], catalog_dir: &Path) -> Result<Vec<(String, Vec<u8>)>> {
    items
        .par_iter()
        .map(|item| {
            let bytes = read_file(&resolve(catalog_dir, &item.image_path))?;
            let digest = hex(&Sha256::digest(&bytes)[..16]);
            Ok((digest, bytes))
        })
        .collect()
}

/// Runs one batch. Image paths resolve against `catalog_dir`.
pub fn run_batch(
    catalog: &[CatalogItem],
    catalog_dir: &Path,
    out_dir: &Path,
    cache: &mut EmbeddingStore,
    extractors: &Extractors,
    cfg: &PipelineConfig,
) -> Result<BatchReport> {
    if cfg.top_k == 0 {
        return Err(Error::param("top_k must be >= 1"));
    }
    if cache.dim() != FUSED_DIM {
        return Err(Error::dim("feature cache", format!("dim {} but fused features have {FUSED_DIM}", cache.dim())));
    }
    cfg.index.validate()?;
    let w = cfg.fusion.normalized()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let (prev_state, mut prev_results) = read_previous(out_dir)?;
    let mut report = BatchReport::default();
    let mut state = BTreeMap::new();
    let mut all_results = Vec::new();

    for (key, mut items) in partition_catalog(catalog) {
        let key = key.to_string();
        report.partitions += 1;
        items.sort_by(|a, b| a.id.cmp(&b.id));
        let refs: Vec<&CatalogItem> = items.iter().collect();
        let digests = digest_images(&refs, catalog_dir)?;
        let entries: Vec<Entry> =
            refs.iter().zip(digests).map(|(&item, (digest, bytes))| Entry { item, digest, bytes }).collect();
        let hash = content_hash(entries.iter());
        let prev_hash = prev_state.get(&key);
        let all_known = entries.iter().all(|e| prev_results.contains_key(&e.item.id));

        if prev_hash == Some(&hash) && all_known {
            report.partitions_carried += 1;
            all_results.extend(entries.iter().map(|e| prev_results.remove(&e.item.id).expect("checked above")));
            state.insert(key, hash);
            continue;
        }

        // Pure insertion: the previously seen items alone reproduce the old hash.
        let old: Vec<bool> = entries.iter().map(|e| prev_results.contains_key(&e.item.id)).collect();
        let incremental = prev_hash.is_some_and(|h| {
            old.iter().any(|&o| o) && content_hash(entries.iter().zip(&old).filter(|(_, &o)| o).map(|(e, _)| e)) == *h
        });

        let triples: Vec<(&CatalogItem, String, Vec<u8>)> =
            entries.into_iter().map(|e| (e.item, e.digest, e.bytes)).collect();
        let (feats, extracted) = features_for(&triples, cache, extractors)?;
        report.extractions += extracted;
        let ids: Vec<&str> = triples.iter().map(|t| t.0.id.as_str()).collect();
        let n = ids.len();

        let recompute: Vec<bool> = if incremental {
            report.partitions_incremental += 1;
            let new: Vec<usize> = (0..n).filter(|&i| !old[i]).collect();
            let mut mark: Vec<bool> = old.iter().map(|o| !o).collect();
            for e in (0..n).filter(|&i| old[i]) {
                let prev = &prev_results[ids[e]].neighbors;
                let touched = prev.len() < cfg.top_k
                    || new.iter().any(|&x| {
                        let last = prev.last().expect("non-empty when full");
                        let d = fused_distance_unchecked(&feats[e], &feats[x], w);
                        d.total_cmp(&last.distance).then_with(|| ids[x].cmp(&last.id)).is_lt()
                    });
                mark[e] = touched;
            }
            mark
        } else {
            report.partitions_full += 1;
            vec![true; n]
        };

        let budget = cfg.search_budget.unwrap_or(n);
        let index_items: Vec<(String, Vec<f64>)> =
            (0..n).map(|i| (ids[i].to_string(), index_vector(&feats[i], w))).collect();
        let forest = build_index(&index_items, &cfg.index, key_seed(cfg.seed, &key))?;
        let computed: HashMap<usize, Vec<Neighbor>> = (0..n)
            .into_par_iter()
            .filter(|&i| recompute[i])
            .map(|i| {
                let cands: Vec<usize> =
                    forest.candidates(&index_items[i].1, budget).into_iter().map(|c| c as usize).collect();
                (i, top_k(i, &cands, &ids, &feats, w, cfg.top_k))
            })
            .collect();
        report.recomputed_items += computed.len();
        let mut computed = computed;
        for (i, id) in ids.iter().enumerate() {
            let neighbors = match computed.remove(&i) {
                Some(nb) => nb,
                None => prev_results.remove(*id).expect("carried items were seen before").neighbors,
            };
            all_results.push(NeighborResult { query_id: id.to_string(), neighbors });
        }
        state.insert(key, hash);
    }

    let mut text = String::new();
    for r in &all_results {
        text.push_str(&serde_json::to_string(r).expect("results serialize"));
        text.push('\n');
    }
    write_atomic(&out_dir.join(RESULTS_FILE), text.as_bytes())?;
    let mut state_text = serde_json::to_string_pretty(&state).expect("state serializes");
    state_text.push('\n');
    write_atomic(&out_dir.join(STATE_FILE), state_text.as_bytes())?;
    cache.flush()?;
    report.results = all_results.len();
    Ok(report)
}

/// Reads a results file written by [`run_batch`].
pub fn load_results(path: &Path) -> Result<Vec<NeighborResult>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let r: NeighborResult =
            serde_json::from_str(line).map_err(|e| Error::Line { line: i + 1, detail: e.to_string() })?;
        if !seen.insert(r.query_id.clone()) {
            return Err(Error::Line { line: i + 1, detail: format!("duplicate query `{}`", r.query_id) });
        }
        out.push(r);
    }
    Ok(out)
}
