//! Euclidean distance, the two triplet ranking losses and triplet accuracy.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Hinge,
    Contrastive,
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossKind::Hinge => "hinge",
            LossKind::Contrastive => "contrastive",
        })
    }
}

impl FromStr for LossKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "hinge" => Ok(LossKind::Hinge),
            "contrastive" => Ok(LossKind::Contrastive),
            other => Err(Error::param(format!("unknown loss `{other}` (hinge|contrastive)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub kind: LossKind,
    pub margin: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { kind: LossKind::Hinge, margin: 1.0 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.margin > 0.0 && self.margin.is_finite()) {
            return Err(Error::param(format!("margin must be > 0, got {}", self.margin)));
        }
        Ok(())
    }

    pub fn evaluate(&self, t: &TripletEmbeddings<'_>) -> Result<LossOutput> {
        match self.kind {
            LossKind::Hinge => hinge_triplet_loss(t, self),
            LossKind::Contrastive => contrastive_triplet_loss(t, self),
        }
    }
}

/// Query, positive and negative embeddings of one triplet.
#[derive(Clone, Copy, Debug)]
pub struct TripletEmbeddings<'a> {
    pub q: &'a [f64],
    pub p: &'a [f64],
    pub n: &'a [f64],
}

impl<'a> TripletEmbeddings<'a> {
    pub fn new(q: &'a [f64], p: &'a [f64], n: &'a [f64]) -> Result<Self> {
        if q.len() != p.len() || q.len() != n.len() {
            return Err(Error::dim(
                "triplet",
                format!("q/p/n lengths {}/{}/{} differ", q.len(), p.len(), n.len()),
            ));
        }
        Ok(Self { q, p, n })
    }
}

/// Loss value and its gradient with respect to each embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct LossOutput {
    pub loss: f64,
    pub grad_q: Vec<f64>,
    pub grad_p: Vec<f64>,
    pub grad_n: Vec<f64>,
}

impl LossOutput {
    fn zero(dim: usize, loss: f64) -> Self {
        Self { loss, grad_q: vec![0.0; dim], grad_p: vec![0.0; dim], grad_n: vec![0.0; dim] }
    }
}

pub fn squared_distance(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum()
}

pub fn euclidean_distance(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::dim("euclidean_distance", format!("lengths {} and {}", x.len(), y.len())));
    }
    Ok(squared_distance(x, y).sqrt())
}

/// `max(0, D(q,p)^2 - D(q,n)^2 + m)`.
pub fn hinge_triplet_loss(t: &TripletEmbeddings<'_>, cfg: &LossConfig) -> Result<LossOutput> {
    cfg.validate()?;
    let dim = t.q.len();
    let raw = squared_distance(t.q, t.p) - squared_distance(t.q, t.n) + cfg.margin;
    if raw <= 0.0 {
        return Ok(LossOutput::zero(dim, 0.0));
    }
    let mut out = LossOutput::zero(dim, raw);
    for i in 0..dim {
        let (q, p, n) = (t.q[i], t.p[i], t.n[i]);
        out.grad_q[i] = 2.0 * (n - p);
        out.grad_p[i] = -2.0 * (q - p);
        out.grad_n[i] = 2.0 * (q - n);
    }
    Ok(out)
}

/// Sum of the similar-pair term `D(q,p)^2 / 2` and the dissimilar-pair term
/// `max(0, m - D(q,n))^2 / 2`. The negative-branch gradient is zero at
/// `D(q,n) = 0`.
pub fn contrastive_triplet_loss(t: &TripletEmbeddings<'_>, cfg: &LossConfig) -> Result<LossOutput> {
    cfg.validate()?;
    let dim = t.q.len();
    let d_pos2 = squared_distance(t.q, t.p);
    let d_neg = squared_distance(t.q, t.n).sqrt();
    let hinge = (cfg.margin - d_neg).max(0.0);
    let mut out = LossOutput::zero(dim, 0.5 * d_pos2 + 0.5 * hinge * hinge);
    let neg_scale = if hinge > 0.0 && d_neg > 0.0 { hinge / d_neg } else { 0.0 };
    for i in 0..dim {
        let diff_p = t.q[i] - t.p[i];
        let diff_n = t.q[i] - t.n[i];
        out.grad_q[i] = diff_p - neg_scale * diff_n;
        out.grad_p[i] = -diff_p;
        out.grad_n[i] = neg_scale * diff_n;
    }
    Ok(out)
}

/// Fraction of triplets with `D(q,p) < D(q,n)`; ties count as failures.
pub fn triplet_accuracy(batch: &[TripletEmbeddings<'_>]) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::param("triplet_accuracy needs a non-empty batch"));
    }
    let hits = batch.iter().filter(|t| is_correct(t)).count();
    Ok(hits as f64 / batch.len() as f64)
}

pub(crate) fn is_correct(t: &TripletEmbeddings<'_>) -> bool {
    squared_distance(t.q, t.p) < squared_distance(t.q, t.n)
}
