//! Triplet manifests (JSON lines) and ratio-controlled stratified sampling.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::binio::write_atomic;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Wild,
    Catalog,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

/// One line of a manifest. Paths are relative to the manifest's directory
/// unless absolute.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TripletRecord {
    #[serde(rename = "q")]
    pub q_path: String,
    #[serde(rename = "p")]
    pub p_path: String,
    #[serde(rename = "n")]
    pub n_path: String,
    pub category_key: String,
    pub q_source: Source,
    pub in_class: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<Split>,
}

impl TripletRecord {
    pub fn validate(&self) -> Result<()> {
        if self.q_path == self.p_path || self.q_path == self.n_path || self.p_path == self.n_path {
            return Err(Error::Validation(format!(
                "triplet references must be distinct: {} / {} / {}",
                self.q_path, self.p_path, self.n_path
            )));
        }
        if self.category_key.is_empty() {
            return Err(Error::Validation("category_key must be non-empty".into()));
        }
        Ok(())
    }
}

/// Parses a JSON-lines manifest. Blank lines are ignored. No query used by a
/// `val` record may also be the query of a `train` record.
pub fn load_manifest(path: &Path) -> Result<Vec<TripletRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_manifest(&text)
}

pub fn parse_manifest(text: &str) -> Result<Vec<TripletRecord>> {
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: TripletRecord =
            serde_json::from_str(line).map_err(|e| Error::Line { line: i + 1, detail: e.to_string() })?;
        record.validate().map_err(|e| Error::Line { line: i + 1, detail: e.to_string() })?;
        records.push(record);
    }
    check_splits(&records)?;
    Ok(records)
}

pub fn check_splits(records: &[TripletRecord]) -> Result<()> {
    let train: HashSet<&str> =
        records.iter().filter(|r| r.split == Some(Split::Train)).map(|r| r.q_path.as_str()).collect();
    if let Some(leak) = records.iter().find(|r| r.split == Some(Split::Val) && train.contains(r.q_path.as_str())) {
        return Err(Error::Validation(format!("validation query {} also appears as a training query", leak.q_path)));
    }
    Ok(())
}

pub fn manifest_to_string(records: &[TripletRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("records always serialize"));
        out.push('\n');
    }
    out
}

pub fn write_manifest(path: &Path, records: &[TripletRecord]) -> Result<()> {
    write_atomic(path, manifest_to_string(records).as_bytes())
}

/// Resolves a manifest-relative reference.
pub fn resolve(base: &Path, reference: &str) -> PathBuf {
    let p = Path::new(reference);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Splits `n` by `weights` (normalized) using largest-remainder rounding.
/// Ties in the remainder go to the earlier stratum.
pub fn largest_remainder(n: usize, weights: &[f64]) -> Result<Vec<usize>> {
    let total: f64 = weights.iter().sum();
    if weights.is_empty() || weights.iter().any(|w| !(*w >= 0.0 && w.is_finite())) || total <= 0.0 {
        return Err(Error::param(format!("invalid stratum weights {weights:?}")));
    }
    // Floors and remainders on a 1e-6 grid.
    let quotas: Vec<f64> = weights.iter().map(|w| n as f64 * w / total).collect();
    let floors: Vec<f64> = quotas.iter().map(|q| (q + 1e-9).floor()).collect();
    let rems: Vec<i64> = quotas.iter().zip(&floors).map(|(q, f)| ((q - f).max(0.0) * 1e6).round() as i64).collect();
    let mut counts: Vec<usize> = floors.iter().map(|f| *f as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| rems[b].cmp(&rems[a]).then(a.cmp(&b)));
    for &i in order.iter().cycle().take(n.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    Ok(counts)
}

/// Which record attribute splits the pool, and the share of the first stratum.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Stratification {
    /// In-class share; the rest is out-of-class.
    InClass(f64),
    /// Wild-query share; the rest has catalog queries.
    WildQuery(f64),
}

impl Stratification {
    fn strata(&self) -> [(Stratum, f64); 2] {
        match *self {
            Stratification::InClass(r) => [(Stratum::InClass, r), (Stratum::OutOfClass, 1.0 - r)],
            Stratification::WildQuery(r) => [(Stratum::Wild, r), (Stratum::Catalog, 1.0 - r)],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (Stratification::InClass(r) | Stratification::WildQuery(r)) = *self;
        if !(0.0..=1.0).contains(&r) {
            return Err(Error::param(format!("stratum ratio {r} outside [0, 1]")));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stratum {
    InClass,
    OutOfClass,
    Wild,
    Catalog,
}

impl Stratum {
    pub fn admits(&self, r: &TripletRecord) -> bool {
        match self {
            Stratum::InClass => r.in_class,
            Stratum::OutOfClass => !r.in_class,
            Stratum::Wild => r.q_source == Source::Wild,
            Stratum::Catalog => r.q_source == Source::Catalog,
        }
    }
}

impl fmt::Display for Stratum {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stratum::InClass => "in-class",
            Stratum::OutOfClass => "out-of-class",
            Stratum::Wild => "wild",
            Stratum::Catalog => "catalog",
        })
    }
}

/// Draws `n` records without replacement, with per-stratum counts fixed by
/// largest-remainder rounding of `n * ratio`. Output is shuffled.
pub fn sample_triplets<R: Rng + ?Sized>(
    pool: &[TripletRecord],
    n: usize,
    ratios: Stratification,
    rng: &mut R,
) -> Result<Vec<TripletRecord>> {
    ratios.validate()?;
    let strata = ratios.strata();
    let counts = largest_remainder(n, &strata.map(|(_, r)| r))?;
    let mut out = Vec::with_capacity(n);
    for ((stratum, _), want) in strata.iter().zip(counts) {
        let mut members: Vec<&TripletRecord> = pool.iter().filter(|r| stratum.admits(r)).collect();
        if members.len() < want {
            return Err(Error::param(format!(
                "stratum {stratum} exhausted: need {want} records, pool has {}",
                members.len()
            )));
        }
        let (picked, _) = members.partial_shuffle(rng, want);
        out.extend(picked.iter().map(|r| (*r).clone()));
    }
    out.shuffle(rng);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn record(i: usize, in_class: bool, source: Source) -> TripletRecord {
        TripletRecord {
            q_path: format!("q{i}"),
            p_path: format!("p{i}"),
            n_path: format!("n{i}"),
            category_key: "tops".into(),
            q_source: source,
            in_class,
            split: None,
        }
    }

    fn pool() -> Vec<TripletRecord> {
        (0..40).map(|i| record(i, i % 2 == 0, if i % 4 < 2 { Source::Wild } else { Source::Catalog })).collect()
    }

    #[test]
    fn empty_and_two_line_manifests() {
        assert!(parse_manifest("").unwrap().is_empty());
        let text = manifest_to_string(&[record(0, true, Source::Wild), record(1, false, Source::Catalog)]);
        let parsed = parse_manifest(&text).unwrap();
        assert_eq!(parsed.len(), 2);
        assert_eq!(parsed[0].q_path, "q0");
        assert_eq!(parsed[1].q_source, Source::Catalog);
    }

    #[test]
    fn malformed_line_reports_number() {
        let good = manifest_to_string(&[record(0, true, Source::Wild)]);
        let text = format!("{good}\n{{\"q\": 1}}\n");
        match parse_manifest(&text).unwrap_err() {
            Error::Line { line, .. } => assert_eq!(line, 3),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn split_leak_is_rejected() {
        let mut a = record(0, true, Source::Wild);
        a.split = Some(Split::Train);
        let mut b = record(1, true, Source::Wild);
        b.q_path = a.q_path.clone();
        b.split = Some(Split::Val);
        let err = parse_manifest(&manifest_to_string(&[a, b])).unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
    }

    #[test]
    fn sampling_ratio_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = sample_triplets(&pool(), 10, Stratification::InClass(0.3), &mut rng).unwrap();
        assert_eq!(s.iter().filter(|r| r.in_class).count(), 3);
        let s = sample_triplets(&pool(), 10, Stratification::WildQuery(0.3), &mut rng).unwrap();
        assert_eq!(s.iter().filter(|r| r.q_source == Source::Wild).count(), 3);
        let s = sample_triplets(&pool(), 20, Stratification::InClass(1.0), &mut rng).unwrap();
        assert!(s.iter().all(|r| r.in_class));
        let distinct: HashSet<_> = s.iter().collect();
        assert_eq!(distinct.len(), 20);
    }

    #[test]
    fn exhausted_stratum_is_named() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let err = sample_triplets(&pool(), 30, Stratification::InClass(1.0), &mut rng).unwrap_err();
        assert!(err.to_string().contains("in-class"), "{err}");
    }

    #[test]
    fn sampling_is_deterministic() {
        let a = sample_triplets(&pool(), 12, Stratification::InClass(0.3), &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = sample_triplets(&pool(), 12, Stratification::InClass(0.3), &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn largest_remainder_thirty_seventy() {
        for n in [10, 100, 1000] {
            assert_eq!(largest_remainder(n, &[0.3, 0.7]).unwrap(), vec![3 * n / 10, 7 * n / 10]);
        }
        assert_eq!(largest_remainder(7, &[1.0, 1.0, 1.0]).unwrap(), vec![3, 2, 2]);
    }

    /// Exact rational oracle: count_i = floor(n*w_i/W) plus one for the
    /// strata with the largest remainders (n*w_i mod W).
    fn rational_oracle(n: usize, w: &[u64]) -> Vec<usize> {
        let total: u64 = w.iter().sum();
        let mut counts: Vec<usize> = w.iter().map(|&x| (n as u64 * x / total) as usize).collect();
        let rem: Vec<u64> = w.iter().map(|&x| n as u64 * x % total).collect();
        let mut order: Vec<usize> = (0..w.len()).collect();
        order.sort_by(|&a, &b| rem[b].cmp(&rem[a]).then(a.cmp(&b)));
        let missing = n - counts.iter().sum::<usize>();
        for &i in order.iter().take(missing) {
            counts[i] += 1;
        }
        counts
    }

    #[test]
    fn largest_remainder_matches_rational_oracle() {
        for pct in 0u64..=100 {
            for n in 0usize..=10_000 {
                let ours = largest_remainder(n, &[pct as f64 / 100.0, (100 - pct) as f64 / 100.0]).unwrap();
                assert_eq!(ours, rational_oracle(n, &[pct, 100 - pct]), "n {n} pct {pct}");
            }
        }
        for n in 0usize..=3000 {
            let w = [1u64, 3, 2, 7];
            let ours = largest_remainder(n, &w.map(|x| x as f64 / 13.0)).unwrap();
            assert_eq!(ours, rational_oracle(n, &w), "n {n}");
        }
    }
}
