//! Triplet mining from baseline neighbour results.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::features::{fused_distance_unchecked, Extractors, FusedFeature};
use super::pipeline::{digest_images, features_for, NeighborResult};
use super::store::EmbeddingStore;
use super::{partition_catalog, CatalogItem, FusionWeights};
use crate::data::manifest::{largest_remainder, Source, TripletRecord};
use crate::error::{Error, Result};
use crate::seed::rng_for;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MiningConfig {
    pub count: usize,
    /// Share of in-class triplets; the rest are out-of-class.
    pub in_class_ratio: f64,
    /// Positives come from each query's top `top_p` neighbours.
    pub top_p: usize,
    /// Inclusive 1-based fused-distance rank range for in-class negatives.
    pub negative_ranks: (usize, usize),
    pub fusion: FusionWeights,
}

impl Default for MiningConfig {
    fn default() -> Self {
        Self { count: 100, in_class_ratio: 0.3, top_p: 5, negative_ranks: (50, 100), fusion: FusionWeights::default() }
    }
}

impl MiningConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.in_class_ratio) {
            return Err(Error::param(format!("in_class_ratio {} outside [0, 1]", self.in_class_ratio)));
        }
        if self.top_p == 0 {
            return Err(Error::param("top_p must be >= 1"));
        }
        let (lo, hi) = self.negative_ranks;
        if lo == 0 || lo > hi {
            return Err(Error::param(format!("invalid negative rank range [{lo}, {hi}]")));
        }
        self.fusion.normalized().map(|_| ())
    }
}

/// Candidate pools for one query.
struct QueryPools<'a> {
    query: &'a CatalogItem,
    positives: Vec<&'a CatalogItem>,
    in_class: Vec<&'a CatalogItem>,
    out_class: Vec<&'a CatalogItem>,
}

/// Rank band `[lo, hi]` clamped to start after the top `top_p` and to end at
/// the partition's last rank.
fn negative_band(cfg: &MiningConfig, others: usize, partition: &str) -> (usize, usize) {
    let (lo, hi) = cfg.negative_ranks;
    let start = lo.max(cfg.top_p + 1);
    let end = hi.min(others);
    if start > lo || end < hi {
        log::warn!("partition {partition} has {others} other items per query; negative ranks [{lo}, {hi}] clamped to [{start}, {end}]");
    }
    (start, end)
}

/// Ranks every other partition member by fused distance (ties by id) and
/// returns the members at the 1-based ranks of `band`.
fn in_class_negatives<'a>(
    q: usize,
    members: &[&'a CatalogItem],
    feats: &HashMap<&str, FusedFeature>,
    w: [f64; 3],
    band: (usize, usize),
) -> Vec<&'a CatalogItem> {
    let fq = &feats[members[q].id.as_str()];
    let mut ranked: Vec<(f64, &CatalogItem)> = members
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != q)
        .map(|(_, m)| (fused_distance_unchecked(fq, &feats[m.id.as_str()], w), *m))
        .collect();
    ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.id.cmp(&b.1.id)));
    let (start, end) = band;
    if start > end {
        return Vec::new();
    }
    ranked[start - 1..end].iter().map(|(_, m)| *m).collect()
}

/// Draws `cfg.count` distinct triplets: positives from each query's top-P
/// results, in-class negatives from the configured rank band of the query's
/// partition, out-of-class negatives uniformly from other categories. The
/// in-class/out-of-class split follows largest-remainder rounding.
pub fn mine_triplets(
    results: &[NeighborResult],
    catalog: &[CatalogItem],
    features: &HashMap<String, FusedFeature>,
    cfg: &MiningConfig,
    seed: u64,
) -> Result<Vec<TripletRecord>> {
    cfg.validate()?;
    let w = cfg.fusion.normalized()?;
    let by_id: HashMap<&str, &CatalogItem> = catalog.iter().map(|i| (i.id.as_str(), i)).collect();
    let feats: HashMap<&str, FusedFeature> = features.iter().map(|(k, v)| (k.as_str(), v.clone())).collect();
    for item in catalog {
        if !feats.contains_key(item.id.as_str()) {
            return Err(Error::Validation(format!("no features for catalog item `{}`", item.id)));
        }
    }
    let results: BTreeMap<&str, &NeighborResult> = results.iter().map(|r| (r.query_id.as_str(), r)).collect();
    let mut pools = Vec::new();
    for (_, mut members) in partition_catalog(catalog) {
        members.sort_by(|a, b| a.id.cmp(&b.id));
        let members: Vec<&CatalogItem> = members.iter().map(|m| by_id[m.id.as_str()]).collect();
        let band = negative_band(cfg, members.len() - 1, &members[0].partition_key().to_string());
        for (qi, q) in members.iter().enumerate() {
            let Some(r) = results.get(q.id.as_str()) else {
                return Err(Error::Validation(format!("results do not cover catalog item `{}`", q.id)));
            };
            let positives: Vec<&CatalogItem> = r
                .neighbors
                .iter()
                .take(cfg.top_p)
                .map(|n| by_id.get(n.id.as_str()).copied())
                .collect::<Option<_>>()
                .ok_or_else(|| Error::Validation(format!("results for `{}` name unknown items", q.id)))?;
            let top: HashSet<&str> = positives.iter().map(|p| p.id.as_str()).collect();
            let in_class = in_class_negatives(qi, &members, &feats, w, band)
                .into_iter()
                .filter(|n| !top.contains(n.id.as_str()))
                .collect();
            let mut out_class: Vec<&CatalogItem> =
                catalog.iter().filter(|o| o.category_key != q.category_key).collect();
            out_class.sort_by(|a, b| a.id.cmp(&b.id));
            pools.push(QueryPools { query: q, positives, in_class, out_class });
        }
    }

    let counts = largest_remainder(cfg.count, &[cfg.in_class_ratio, 1.0 - cfg.in_class_ratio])?;
    let mut out = Vec::with_capacity(cfg.count);
    for (stratum, (&count, in_class)) in counts.iter().zip([true, false]).enumerate() {
        let name = if in_class { "in-class" } else { "out-of-class" };
        let eligible: Vec<&QueryPools> = pools
            .iter()
            .filter(|p| !p.positives.is_empty() && !(if in_class { &p.in_class } else { &p.out_class }).is_empty())
            .collect();
        let capacity: usize = eligible
            .iter()
            .map(|p| p.positives.len() * if in_class { p.in_class.len() } else { p.out_class.len() })
            .sum();
        if count > capacity {
            return Err(Error::Validation(format!(
                "stratum {name} needs {count} triplets but only {capacity} distinct ones exist"
            )));
        }
        let mut rng = rng_for(seed, &[stratum as u64]);
        let mut seen = HashSet::new();
        while seen.len() < count {
            let p = eligible[rng.gen_range(0..eligible.len())];
            let pos = p.positives[rng.gen_range(0..p.positives.len())];
            let negs = if in_class { &p.in_class } else { &p.out_class };
            let neg = negs[rng.gen_range(0..negs.len())];
            if !seen.insert((p.query.id.as_str(), pos.id.as_str(), neg.id.as_str())) {
                continue;
            }
            out.push(TripletRecord {
                q_path: p.query.image_path.clone(),
                p_path: pos.image_path.clone(),
                n_path: neg.image_path.clone(),
                category_key: p.query.category_key.clone(),
                q_source: Source::Catalog,
                in_class,
                split: None,
            });
        }
    }
    Ok(out)
}

/// Features for every catalog item, served from `cache` where possible.
/// Returns the map and the number of extractions performed.
pub fn catalog_features(
    catalog: &[CatalogItem],
    catalog_dir: &Path,
    cache: &mut EmbeddingStore,
    extractors: &Extractors,
) -> Result<(HashMap<String, FusedFeature>, usize)> {
    let refs: Vec<&CatalogItem> = catalog.iter().collect();
    let digests = digest_images(&refs, catalog_dir)?;
    let triples: Vec<(&CatalogItem, String, Vec<u8>)> =
        refs.into_iter().zip(digests).map(|(i, (d, b))| (i, d, b)).collect();
    let (feats, n) = features_for(&triples, cache, extractors)?;
    cache.flush()?;
    Ok((catalog.iter().map(|i| i.id.clone()).zip(feats).collect(), n))
}
