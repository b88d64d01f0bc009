//! Forest of random-projection trees for approximate Euclidean k-NN search.
//!
//! Stored vectors, hyperplane normals and offsets are all kept at f32
//! precision, so an index loaded from disk answers queries bit-for-bit like
//! the one that was saved.

mod io;

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::rng_for;

pub use io::{decode_index, encode_index, load_index, save_index};

#[derive(Clone, Debug, PartialEq)]
pub struct IndexConfig {
    pub n_trees: usize,
    /// Maximum items per leaf (`k`).
    pub leaf_capacity: usize,
    /// Distinct leaf items inspected per query; `None` means
    /// `n_trees * leaf_capacity * top_k`.
    pub search_budget: Option<usize>,
    /// Nominal approximation factor. Recall is measured, not guaranteed.
    pub epsilon: f64,
}

impl Default for IndexConfig {
    fn default() -> Self {
        Self { n_trees: 10, leaf_capacity: 16, search_budget: None, epsilon: 0.0 }
    }
}

impl IndexConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_trees == 0 {
            return Err(Error::param("n_trees must be >= 1"));
        }
        if self.leaf_capacity == 0 {
            return Err(Error::param("leaf_capacity must be >= 1"));
        }
        if self.search_budget == Some(0) {
            return Err(Error::param("search_budget must be >= 1"));
        }
        Ok(())
    }

    pub fn budget_for(&self, top_k: usize) -> usize {
        self.search_budget.unwrap_or(self.n_trees * self.leaf_capacity * top_k)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum TreeNode {
    /// Items with `normal . x + offset > 0` go right. A zero normal marks a
    /// random balanced split of points the hyperplane could not separate.
    Inner { normal: Vec<f32>, offset: f32, left: Box<TreeNode>, right: Box<TreeNode> },
    Leaf(Vec<u32>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnnForest {
    pub config: IndexConfig,
    dim: usize,
    ids: Vec<String>,
    /// Row-major `count x dim`.
    vectors: Vec<f32>,
    trees: Vec<TreeNode>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Neighbor {
    pub id: String,
    pub distance: f64,
}

fn margin(normal: &[f32], offset: f32, x: &[f64]) -> f64 {
    normal.iter().zip(x).map(|(&n, &v)| n as f64 * v).sum::<f64>() + offset as f64
}

fn distance(a: &[f32], q: &[f64]) -> f64 {
    a.iter().zip(q).map(|(&x, &y)| (x as f64 - y) * (x as f64 - y)).sum::<f64>().sqrt()
}

fn rank(mut hits: Vec<Neighbor>, top_k: usize) -> Vec<Neighbor> {
    hits.sort_by(|a, b| a.distance.total_cmp(&b.distance).then_with(|| a.id.cmp(&b.id)));
    hits.truncate(top_k);
    hits
}

fn check_items(items: &[(String, Vec<f64>)]) -> Result<usize> {
    let Some((_, first)) = items.first() else {
        return Err(Error::param("cannot index an empty item set"));
    };
    let dim = first.len();
    if dim == 0 {
        return Err(Error::dim("build_index", "vectors must have at least one component"));
    }
    for (id, v) in items {
        if v.len() != dim {
            return Err(Error::dim("build_index", format!("item `{id}` has dim {}, expected {dim}", v.len())));
        }
    }
    Ok(dim)
}

pub fn build_index(items: &[(String, Vec<f64>)], cfg: &IndexConfig, seed: u64) -> Result<AnnForest> {
    cfg.validate()?;
    let dim = check_items(items)?;
    if items.len() > u32::MAX as usize {
        return Err(Error::param("too many items for u32 ordinals"));
    }
    let ids = items.iter().map(|(id, _)| id.clone()).collect();
    let vectors: Vec<f32> = items.iter().flat_map(|(_, v)| v.iter().map(|&x| x as f32)).collect();
    let builder = Builder { dim, k: cfg.leaf_capacity, vectors: &vectors };
    let trees = (0..cfg.n_trees)
        .into_par_iter()
        .map(|t| {
            let mut rng = rng_for(seed, &[t as u64]);
            builder.split((0..items.len() as u32).collect(), &mut rng)
        })
        .collect();
    Ok(AnnForest { config: cfg.clone(), dim, ids, vectors, trees })
}

struct Builder<'a> {
    dim: usize,
    k: usize,
    vectors: &'a [f32],
}

impl Builder<'_> {
    fn row(&self, i: u32) -> &[f32] {
        &self.vectors[i as usize * self.dim..(i as usize + 1) * self.dim]
    }

    fn split<R: Rng>(&self, mut set: Vec<u32>, rng: &mut R) -> TreeNode {
        if set.len() <= self.k {
            return TreeNode::Leaf(set);
        }
        let a = rng.gen_range(0..set.len());
        let b = (a + rng.gen_range(1..set.len())) % set.len();
        let (pa, pb) = (self.row(set[a]), self.row(set[b]));
        let normal: Vec<f32> = pa.iter().zip(pb).map(|(&x, &y)| (x as f64 - y as f64) as f32).collect();
        let offset = -(0..self.dim)
            .map(|i| normal[i] as f64 * (pa[i] as f64 + pb[i] as f64) / 2.0)
            .sum::<f64>() as f32;
        let (mut left, mut right) = (Vec::new(), Vec::new());
        for &i in &set {
            let x: Vec<f64> = self.row(i).iter().map(|&v| v as f64).collect();
            if margin(&normal, offset, &x) > 0.0 {
                right.push(i);
            } else {
                left.push(i);
            }
        }
        let (normal, offset) = if left.is_empty() || right.is_empty() {
            set.shuffle(rng);
            right = set.split_off(set.len() / 2);
            left = set;
            (vec![0.0; self.dim], 0.0)
        } else {
            (normal, offset)
        };
        TreeNode::Inner {
            normal,
            offset,
            left: Box::new(self.split(left, rng)),
            right: Box::new(self.split(right, rng)),
        }
    }
}

struct Pending<'a> {
    priority: f64,
    seq: usize,
    node: &'a TreeNode,
}

impl PartialEq for Pending<'_> {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Pending<'_> {}
impl PartialOrd for Pending<'_> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Pending<'_> {
    // Max-heap on priority; earlier pushes first among equals.
    fn cmp(&self, other: &Self) -> Ordering {
        self.priority.total_cmp(&other.priority).then_with(|| other.seq.cmp(&self.seq))
    }
}

impl AnnForest {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn trees(&self) -> &[TreeNode] {
        &self.trees
    }

    /// Stored (f32-rounded) vector of item `ordinal`, widened to f64.
    pub fn vector(&self, ordinal: usize) -> Vec<f64> {
        self.row(ordinal).iter().map(|&v| v as f64).collect()
    }

    fn row(&self, ordinal: usize) -> &[f32] {
        &self.vectors[ordinal * self.dim..(ordinal + 1) * self.dim]
    }

    fn check_query(&self, q: &[f64], top_k: usize) -> Result<()> {
        if top_k == 0 {
            return Err(Error::param("top_k must be >= 1"));
        }
        if q.len() != self.dim {
            return Err(Error::dim("query", format!("query has dim {}, index has {}", q.len(), self.dim)));
        }
        Ok(())
    }

    /// Ordinals collected by the shared min-margin queue, in pop order.
    pub fn candidates(&self, q: &[f64], budget: usize) -> Vec<u32> {
        let mut seen = vec![false; self.ids.len()];
        let mut out = Vec::new();
        let mut heap = BinaryHeap::new();
        let mut seq = 0;
        for tree in &self.trees {
            heap.push(Pending { priority: f64::INFINITY, seq, node: tree });
            seq += 1;
        }
        while out.len() < budget {
            let Some(Pending { priority, node, .. }) = heap.pop() else { break };
            match node {
                TreeNode::Leaf(items) => {
                    for &i in items {
                        if !seen[i as usize] {
                            seen[i as usize] = true;
                            out.push(i);
                        }
                    }
                }
                TreeNode::Inner { normal, offset, left, right } => {
                    let m = margin(normal, *offset, q);
                    heap.push(Pending { priority: priority.min(m), seq, node: right });
                    heap.push(Pending { priority: priority.min(-m), seq: seq + 1, node: left });
                    seq += 2;
                }
            }
        }
        out
    }

    /// `budget` of `None` uses the configured default for `top_k`.
    pub fn query(&self, q: &[f64], top_k: usize, budget: Option<usize>) -> Result<Vec<Neighbor>> {
        self.check_query(q, top_k)?;
        let budget = budget.unwrap_or_else(|| self.config.budget_for(top_k));
        if budget == 0 {
            return Err(Error::param("search budget must be >= 1"));
        }
        let hits = self
            .candidates(q, budget)
            .into_iter()
            .map(|i| Neighbor { id: self.ids[i as usize].clone(), distance: distance(self.row(i as usize), q) })
            .collect();
        Ok(rank(hits, top_k))
    }

    /// Exact scan over the stored vectors.
    pub fn brute_force(&self, q: &[f64], top_k: usize) -> Result<Vec<Neighbor>> {
        self.check_query(q, top_k)?;
        let hits = (0..self.ids.len())
            .map(|i| Neighbor { id: self.ids[i].clone(), distance: distance(self.row(i), q) })
            .collect();
        Ok(rank(hits, top_k))
    }
}

pub fn query_knn(forest: &AnnForest, q: &[f64], top_k: usize, budget: Option<usize>) -> Result<Vec<Neighbor>> {
    forest.query(q, top_k, budget)
}

pub fn brute_force_knn(items: &[(String, Vec<f64>)], q: &[f64], top_k: usize) -> Result<Vec<Neighbor>> {
    if top_k == 0 {
        return Err(Error::param("top_k must be >= 1"));
    }
    let mut hits = Vec::with_capacity(items.len());
    for (id, v) in items {
        if v.len() != q.len() {
            return Err(Error::dim("brute_force_knn", format!("item `{id}` has dim {}, query {}", v.len(), q.len())));
        }
        let d = v.iter().zip(q).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        hits.push(Neighbor { id: id.clone(), distance: d });
    }
    Ok(rank(hits, top_k))
}

/// Share of `truth` ids found in `found`.
pub fn recall(found: &[Neighbor], truth: &[Neighbor]) -> f64 {
    if truth.is_empty() {
        return 1.0;
    }
    let hit = truth.iter().filter(|t| found.iter().any(|f| f.id == t.id)).count();
    hit as f64 / truth.len() as f64
}
