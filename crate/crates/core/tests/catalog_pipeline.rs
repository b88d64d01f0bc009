use std::collections::HashMap;
use std::fs;
use std::path::Path;

use mildnet_core::catalog::features::FUSED_DIM;
use mildnet_core::catalog::mining::catalog_features;
use mildnet_core::catalog::pipeline::{load_results, RESULTS_FILE};
use mildnet_core::catalog::{
    mine_triplets, partition_catalog, partition_keys, run_batch, synth_catalog, write_catalog, CatalogItem,
    EmbeddingStore, Extractors, MiningConfig, PipelineConfig,
};
use mildnet_core::data::manifest::{parse_manifest, write_manifest};

fn full_recompute(catalog: &[CatalogItem], dir: &Path, ex: &Extractors, cfg: &PipelineConfig) -> Vec<u8> {
    let scratch = tempfile::tempdir().unwrap();
    let mut cache = EmbeddingStore::open(&scratch.path().join("cache.mlde"), FUSED_DIM).unwrap();
    run_batch(catalog, dir, &scratch.path().join("out"), &mut cache, ex, cfg).unwrap();
    fs::read(scratch.path().join("out").join(RESULTS_FILE)).unwrap()
}

#[test]
fn incremental_matches_full_recompute() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let keys = partition_keys(4);
    let ex = Extractors::stub(7);
    let cfg = PipelineConfig::default();
    let mut cache = EmbeddingStore::open(&dir.path().join("cache.mlde"), FUSED_DIM).unwrap();
    let mut catalog = synth_catalog(dir.path(), 0, 200, &keys, 24, 11).unwrap();

    let first = run_batch(&catalog, dir.path(), &out, &mut cache, &ex, &cfg).unwrap();
    assert_eq!(first.extractions, 200);
    assert_eq!(first.partitions_full, 4);

    let unchanged = run_batch(&catalog, dir.path(), &out, &mut cache, &ex, &cfg).unwrap();
    assert_eq!(unchanged.extractions, 0);
    assert_eq!(unchanged.partitions_carried, 4);

    for (round, added) in [(0, 7), (1, 12), (2, 1)] {
        let start = catalog.len();
        // Round 2 adds a single item, so only one partition changes.
        catalog.extend(synth_catalog(dir.path(), start, added, &keys, 24, 11).unwrap());
        let report = run_batch(&catalog, dir.path(), &out, &mut cache, &ex, &cfg).unwrap();
        assert_eq!(report.extractions, added, "round {round}");
        assert_eq!(report.partitions_full, 0);
        if added == 1 {
            assert_eq!(report.partitions_incremental, 1);
            assert_eq!(report.partitions_carried, 3);
        }
        let incremental = fs::read(out.join(RESULTS_FILE)).unwrap();
        assert_eq!(incremental, full_recompute(&catalog, dir.path(), &ex, &cfg), "round {round}");
    }

    // Removal and an in-place image change fall back to full partition rebuilds.
    catalog.remove(3);
    let moved = catalog[10].clone();
    fs::copy(dir.path().join(&catalog[11].image_path), dir.path().join(&moved.image_path)).unwrap();
    let report = run_batch(&catalog, dir.path(), &out, &mut cache, &ex, &cfg).unwrap();
    assert_eq!(report.extractions, 1);
    assert_eq!(fs::read(out.join(RESULTS_FILE)).unwrap(), full_recompute(&catalog, dir.path(), &ex, &cfg));

    let results = load_results(&out.join(RESULTS_FILE)).unwrap();
    let part_of: HashMap<_, _> = catalog.iter().map(|i| (i.id.clone(), i.partition_key())).collect();
    assert_eq!(results.len(), catalog.len());
    for r in &results {
        assert_eq!(r.neighbors.len(), 10);
        assert!(r.neighbors.iter().all(|n| n.id != r.query_id && part_of[&n.id] == part_of[&r.query_id]));
        assert!(r.neighbors.windows(2).all(|w| w[0].distance <= w[1].distance));
    }
}

#[test]
fn mined_triplets_follow_ratios_and_validate() {
    let dir = tempfile::tempdir().unwrap();
    let keys = partition_keys(4);
    let catalog = synth_catalog(dir.path(), 0, 240, &keys, 16, 3).unwrap();
    let ex = Extractors::stub(1);
    let mut cache = EmbeddingStore::open(&dir.path().join("cache.mlde"), FUSED_DIM).unwrap();
    run_batch(&catalog, dir.path(), &dir.path().join("out"), &mut cache, &ex, &PipelineConfig::default()).unwrap();
    let results = load_results(&dir.path().join("out").join(RESULTS_FILE)).unwrap();
    let (feats, extracted) = catalog_features(&catalog, dir.path(), &mut cache, &ex).unwrap();
    assert_eq!(extracted, 0);
    let parts = partition_catalog(&catalog);
    for n in [10, 100, 1000] {
        let cfg = MiningConfig { count: n, ..Default::default() };
        let mined = mine_triplets(&results, &catalog, &feats, &cfg, 5).unwrap();
        let in_class = mined.iter().filter(|t| t.in_class).count();
        assert_eq!((in_class, mined.len() - in_class), (3 * n / 10, 7 * n / 10));
        assert_eq!(mined, mine_triplets(&results, &catalog, &feats, &cfg, 5).unwrap());
        let by_path: HashMap<_, _> = catalog.iter().map(|i| (i.image_path.clone(), i)).collect();
        let by_id: HashMap<_, _> = results.iter().map(|r| (r.query_id.clone(), r)).collect();
        for t in &mined {
            let q = by_path[&t.q_path];
            let top: Vec<_> = by_id[&q.id].neighbors.iter().take(5).map(|n| n.id.clone()).collect();
            assert!(top.contains(&by_path[&t.p_path].id));
            assert!(!top.contains(&by_path[&t.n_path].id));
            let n = by_path[&t.n_path];
            assert_eq!(t.in_class, n.category_key == q.category_key);
            if t.in_class {
                assert_eq!(parts[&q.partition_key()].len(), 60);
            }
        }
        let path = dir.path().join("mined.jsonl");
        write_manifest(&path, &mined).unwrap();
        assert_eq!(parse_manifest(&fs::read_to_string(&path).unwrap()).unwrap(), mined);
    }
    write_catalog(&dir.path().join("catalog.jsonl"), &catalog).unwrap();
}
