use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use mildnet_core::ann::{build_index, load_index, recall, save_index, Neighbor};
use mildnet_core::catalog::features::FUSED_DIM;
use mildnet_core::catalog::{
    catalog_features, load_catalog, load_embeddings, load_results, mine_triplets, partition_keys, run_batch,
    save_embeddings, synth_catalog, write_catalog, EmbeddingStore, Extractors, MiningConfig, PipelineConfig,
};
use mildnet_core::data::manifest::{load_manifest, resolve, write_manifest, Split, TripletRecord};
use mildnet_core::data::{read_image, resize_normalize, synth_generate, AugmentSpec};
use mildnet_core::gradcheck::op_gradchecks;
use mildnet_core::graph::{
    build_network, count_params, forward_embed, gradcheck_network, load_weights_checked, save_weights, Taps,
};
use mildnet_core::seed::rng_for;
use mildnet_core::tensor::Mode;
use mildnet_core::trainer::{
    evaluate, load_checkpoint, train, OptimizerState, StepRecord, TrainRunConfig, TripletData,
};
use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::{load_config, RunConfig};
use crate::{Cli, Command, SplitArg, SynthKind};

pub const WEIGHTS_FILE: &str = "weights.mldw";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const CHECKPOINT_FILE: &str = "last.mldc";
pub const CONFIG_FILE: &str = "config.txt";
pub const CATALOG_FILE: &str = "catalog.jsonl";
pub const CACHE_FILE: &str = "cache.mlde";

const WEIGHTS_HINT: &str = "loading weights (pass the training run's --config, e.g. OUT/config.txt)";

fn emit(cli: &Cli, value: &Value, text: &str) {
    if cli.json {
        println!("{value}");
    } else {
        print!("{text}");
        if !text.ends_with('\n') {
            println!();
        }
    }
}

pub fn run(cli: &Cli) -> Result<()> {
    let mut overrides = cli.overrides.clone();
    match &cli.command {
        Command::Train { flags, .. } | Command::Ablate { flags, .. } => overrides.extend(flags.overrides()),
        Command::Params { taps: Some(t), .. } => overrides.push(("skip_taps".into(), t.clone())),
        Command::IndexQuery { top_k: Some(k), .. } => overrides.push(("top_k".into(), k.to_string())),
        _ => {}
    }
    let cfg = load_config(Some(&cli.config), &overrides)?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads.max(1))
        .build_global()
        .context("starting worker threads")?;
    let seed = cli.seed;

    match &cli.command {
        Command::Synth { kind, out, start, append } => synth(cli, &cfg, *kind, out, *start, *append),
        Command::Train { manifest, out, resume, wall_time, .. } => {
            let o = train_run(&cfg, manifest, out, seed, *resume, *wall_time)?;
            let mut text = String::new();
            for (m, v) in o.epochs.iter().zip(o.val_accuracy.iter().map(Some).chain(std::iter::repeat(None))) {
                text.push_str(&format!("epoch {} loss {:.6} train_acc {:.4}", m.epoch, m.mean_loss, m.train_accuracy));
                if let Some(v) = v {
                    text.push_str(&format!(" val_acc {v:.4}"));
                }
                text.push('\n');
            }
            text.push_str(&format!("weights: {}\n", o.weights.display()));
            emit(cli, &serde_json::to_value(&o)?, &text);
            Ok(())
        }
        Command::Eval { manifest, weights, split } => {
            let w = load_weights_checked(weights, &cfg.model).context(WEIGHTS_HINT)?;
            let records = load_manifest(manifest)?;
            let has_val = records.iter().any(|r| r.split == Some(Split::Val));
            let split = split.unwrap_or(if has_val { SplitArg::Val } else { SplitArg::All });
            let records: Vec<TripletRecord> = records
                .into_iter()
                .filter(|r| match split {
                    SplitArg::All => true,
                    SplitArg::Val => r.split == Some(Split::Val),
                    SplitArg::Train => r.split != Some(Split::Val),
                })
                .collect();
            let n = records.len();
            let data = TripletData::from_records(records, &base_dir(manifest), cfg.model.input_size)?;
            let acc = evaluate(&w, &cfg.model, &data)?;
            emit(cli, &json!({ "triplets": n, "accuracy": acc }), &format!("triplet accuracy {acc:.4} over {n} triplets"));
            Ok(())
        }
        Command::Ablate { manifest, out, .. } => ablate(cli, &cfg, manifest, out, seed),
        Command::Embed { weights, catalog, manifest, out } => {
            embed(cli, &cfg, weights, catalog.as_deref(), manifest.as_deref(), out)
        }
        Command::IndexBuild { embeddings, out } => {
            let (dim, items) = load_embeddings(embeddings)?;
            let forest = build_index(&items, &cfg.index.index_config(), seed)?;
            save_index(&forest, out)?;
            emit(
                cli,
                &json!({ "items": items.len(), "dim": dim, "trees": forest.trees().len(), "index": out }),
                &format!("indexed {} vectors of dim {dim} in {} trees: {}", items.len(), forest.trees().len(), out.display()),
            );
            Ok(())
        }
        Command::IndexQuery { index, id, embeddings, exact, .. } => {
            index_query(cli, &cfg, index, id.as_deref(), embeddings.as_deref(), *exact)
        }
        Command::PipelineRun { catalog, out, cache } => {
            let items = load_catalog(catalog)?;
            let cache_path = cache.clone().unwrap_or_else(|| out.join(CACHE_FILE));
            fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
            let mut store = EmbeddingStore::open(&cache_path, FUSED_DIM)?;
            let pcfg = PipelineConfig {
                top_k: cfg.index.top_k,
                fusion: cfg.fusion,
                index: cfg.index.index_config(),
                search_budget: cfg.index.pipeline_budget,
                seed,
            };
            let report = run_batch(&items, &base_dir(catalog), out, &mut store, &Extractors::stub(seed), &pcfg)?;
            let text = format!(
                "partitions {} (carried {}, incremental {}, full {})\nextractions {}\nrecomputed items {}\nresults {}",
                report.partitions,
                report.partitions_carried,
                report.partitions_incremental,
                report.partitions_full,
                report.extractions,
                report.recomputed_items,
                report.results
            );
            emit(cli, &serde_json::to_value(&report)?, &text);
            Ok(())
        }
        Command::MineTriplets { catalog, results, out, cache } => {
            mine(cli, &cfg, catalog, results, out, cache.as_deref(), seed)
        }
        Command::Params { ablation, .. } => {
            if *ablation {
                let rows: Vec<(String, u64)> = Taps::ablation_ladder()
                    .iter()
                    .map(|(label, taps)| {
                        let model = mildnet_core::graph::ModelConfig { skip_taps: *taps, ..cfg.model.clone() };
                        (label.to_string(), count_params(&model))
                    })
                    .collect();
                let text: String = rows.iter().map(|(l, p)| format!("{p:>12}  {:>6.2}M  {l}\n", *p as f64 / 1e6)).collect();
                let value = json!(rows.iter().map(|(l, p)| json!({ "taps": l, "params": p })).collect::<Vec<_>>());
                emit(cli, &value, &text);
            } else {
                let n = count_params(&cfg.model);
                emit(cli, &json!({ "taps": cfg.model.skip_taps.to_string(), "params": n }), &n.to_string());
            }
            Ok(())
        }
        Command::Gradcheck { seeds, per_tensor, epsilon, tolerance } => {
            gradcheck(cli, &cfg, *seeds, *per_tensor, *epsilon, *tolerance)
        }
    }
}

fn base_dir(file: &Path) -> PathBuf {
    match file.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

fn synth(cli: &Cli, cfg: &RunConfig, kind: SynthKind, out: &Path, start: usize, append: bool) -> Result<()> {
    match kind {
        SynthKind::Triplets => {
            let o = synth_generate(out, &cfg.synth.synth_config(), cli.seed)?;
            let val = o.records.iter().filter(|r| r.split == Some(Split::Val)).count();
            emit(
                cli,
                &json!({ "manifest": o.manifest_path, "triplets": o.records.len(), "val": val }),
                &format!("{} triplets ({val} held out): {}", o.records.len(), o.manifest_path.display()),
            );
        }
        SynthKind::Catalog => {
            let path = out.join(CATALOG_FILE);
            let mut items = if append && path.exists() { load_catalog(&path)? } else { Vec::new() };
            let keys = partition_keys(cfg.synth.catalog_partitions);
            let added = synth_catalog(out, start, cfg.synth.catalog_items, &keys, cfg.synth.image_size, cli.seed)?;
            let n_added = added.len();
            items.extend(added);
            write_catalog(&path, &items)?;
            emit(
                cli,
                &json!({ "catalog": path, "items": items.len(), "added": n_added }),
                &format!("{} items ({n_added} new): {}", items.len(), path.display()),
            );
        }
    }
    Ok(())
}

#[derive(Serialize)]
pub struct EpochLine {
    pub epoch: usize,
    pub mean_loss: f64,
    pub train_accuracy: f64,
}

#[derive(Serialize)]
pub struct TrainOutcome {
    pub params: u64,
    pub start_epoch: usize,
    pub epochs: Vec<EpochLine>,
    pub val_accuracy: Vec<f64>,
    pub weights: PathBuf,
}

/// Keeps only metrics of epochs before `epoch`, so a resumed run appends
/// exactly what an uninterrupted run would have written.
fn truncate_metrics(path: &Path, epoch: usize) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let text = fs::read_to_string(path)?;
    let mut kept = String::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let r: StepRecord = serde_json::from_str(line).with_context(|| format!("parsing {}", path.display()))?;
        if r.epoch < epoch {
            kept.push_str(line);
            kept.push('\n');
        }
    }
    fs::write(path, kept)?;
    Ok(())
}

fn train_run(cfg: &RunConfig, manifest: &Path, out: &Path, seed: u64, resume: bool, wall_time: bool) -> Result<TrainOutcome> {
    let records = load_manifest(manifest)?;
    let (val, tr): (Vec<TripletRecord>, Vec<TripletRecord>) =
        records.into_iter().partition(|r| r.split == Some(Split::Val));
    if tr.is_empty() {
        bail!("{} has no training triplets", manifest.display());
    }
    let base = base_dir(manifest);
    let train_data = TripletData::from_records(tr, &base, cfg.model.input_size)?;
    let val_data =
        if val.is_empty() { None } else { Some(TripletData::from_records(val, &base, cfg.model.input_size)?) };

    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    fs::write(out.join(CONFIG_FILE), cfg.to_text())?;
    let metrics = out.join(METRICS_FILE);
    let ck_dir = out.join(CHECKPOINT_DIR);
    let run = TrainRunConfig {
        batch_size: cfg.training.batch_size,
        epochs: cfg.training.epochs,
        loss: cfg.training.loss,
        seed,
        augment: cfg.training.augment.then(AugmentSpec::default),
        checkpoint_dir: Some(ck_dir.clone()),
        metrics_log: Some(metrics.clone()),
        log_wall_time: wall_time,
    };
    let (mut weights, mut opt, start) = if resume {
        let ck = load_checkpoint(&ck_dir.join(CHECKPOINT_FILE), &cfg.model)?;
        if ck.seed != seed {
            bail!("checkpoint was written with seed {}, this run uses seed {seed}", ck.seed);
        }
        truncate_metrics(&metrics, ck.epochs_done)?;
        (ck.weights, ck.optimizer, ck.epochs_done)
    } else {
        if metrics.exists() {
            fs::remove_file(&metrics)?;
        }
        (build_network(&cfg.model, seed)?, OptimizerState::new(cfg.optimizer, &cfg.model)?, 0)
    };
    let summary = train(&mut weights, &cfg.model, &train_data, val_data.as_ref(), &run, &mut opt, start)?;
    let weights_path = out.join(WEIGHTS_FILE);
    save_weights(&weights, &cfg.model, &weights_path)?;
    Ok(TrainOutcome {
        params: count_params(&cfg.model),
        start_epoch: start,
        epochs: summary
            .epochs
            .iter()
            .map(|m| EpochLine { epoch: m.epoch, mean_loss: m.mean_loss, train_accuracy: m.triplet_accuracy })
            .collect(),
        val_accuracy: summary.val_accuracy,
        weights: weights_path,
    })
}

fn ablate(cli: &Cli, cfg: &RunConfig, manifest: &Path, out: &Path, seed: u64) -> Result<()> {
    let mut rows = Vec::new();
    let mut text = format!("{:<52} {:>12} {:>10}\n", "taps", "params", "val_acc");
    for (i, (label, taps)) in Taps::ablation_ladder().iter().enumerate() {
        let mut c = cfg.clone();
        c.model.skip_taps = *taps;
        let o = train_run(&c, manifest, &out.join(format!("config{i}")), seed, false, false)?;
        let acc = o.val_accuracy.last().copied();
        let shown = acc.map_or("-".to_string(), |a| format!("{a:.4}"));
        text.push_str(&format!("{label:<52} {:>12} {shown:>10}\n", o.params));
        rows.push(json!({ "taps": label, "params": o.params, "val_accuracy": acc, "dir": out.join(format!("config{i}")) }));
    }
    emit(cli, &Value::Array(rows), &text);
    Ok(())
}

fn embed(
    cli: &Cli,
    cfg: &RunConfig,
    weights: &Path,
    catalog: Option<&Path>,
    manifest: Option<&Path>,
    out: &Path,
) -> Result<()> {
    let w = load_weights_checked(weights, &cfg.model).context(WEIGHTS_HINT)?;
    let jobs: Vec<(String, PathBuf)> = match (catalog, manifest) {
        (Some(c), _) => {
            let base = base_dir(c);
            load_catalog(c)?.into_iter().map(|it| (it.id, resolve(&base, &it.image_path))).collect()
        }
        (None, Some(m)) => {
            let base = base_dir(m);
            let mut seen = HashSet::new();
            let mut jobs = Vec::new();
            for r in load_manifest(m)? {
                for p in [r.q_path, r.p_path, r.n_path] {
                    if seen.insert(p.clone()) {
                        jobs.push((p.clone(), resolve(&base, &p)));
                    }
                }
            }
            jobs
        }
        (None, None) => bail!("one of --catalog or --manifest is required"),
    };
    let items: Vec<(String, Vec<f64>)> = jobs
        .par_iter()
        .map(|(id, path)| -> Result<(String, Vec<f64>)> {
            let img = resize_normalize(&read_image(path)?, cfg.model.input_size)?;
            let e = forward_embed(&w, &cfg.model, &img, Mode::Infer, &mut rng_for(0, &[]))?;
            Ok((id.clone(), e.data().to_vec()))
        })
        .collect::<Result<_>>()?;
    save_embeddings(out, cfg.model.embedding_dim, &items)?;
    emit(
        cli,
        &json!({ "items": items.len(), "dim": cfg.model.embedding_dim, "store": out }),
        &format!("embedded {} images: {}", items.len(), out.display()),
    );
    Ok(())
}

#[derive(Serialize)]
struct QueryResult {
    query_id: String,
    neighbors: Vec<Neighbor>,
    #[serde(skip_serializing_if = "Option::is_none")]
    recall: Option<f64>,
}

fn index_query(
    cli: &Cli,
    cfg: &RunConfig,
    index: &Path,
    id: Option<&str>,
    embeddings: Option<&Path>,
    exact: bool,
) -> Result<()> {
    let forest = load_index(index)?;
    let queries: Vec<(String, Vec<f64>)> = match embeddings {
        Some(path) => {
            let (_, items) = load_embeddings(path)?;
            match id {
                Some(id) => {
                    let hit = items.into_iter().find(|(i, _)| i == id);
                    vec![hit.with_context(|| format!("id `{id}` not in {}", path.display()))?]
                }
                None => items,
            }
        }
        None => {
            let Some(id) = id else { bail!("give --id, --embeddings, or both") };
            let ord = forest.ids().iter().position(|i| i == id).with_context(|| format!("id `{id}` not in index"))?;
            vec![(id.to_string(), forest.vector(ord))]
        }
    };
    let top_k = cfg.index.top_k;
    let results: Vec<QueryResult> = queries
        .par_iter()
        .map(|(qid, v)| -> Result<QueryResult> {
            let neighbors = forest.query(v, top_k, cfg.index.search_budget)?;
            let recall = if exact { Some(recall(&neighbors, &forest.brute_force(v, top_k)?)) } else { None };
            Ok(QueryResult { query_id: qid.clone(), neighbors, recall })
        })
        .collect::<Result<_>>()?;
    let mut text = String::new();
    for r in &results {
        text.push_str(&r.query_id);
        if let Some(rc) = r.recall {
            text.push_str(&format!(" (recall {rc:.3})"));
        }
        text.push('\n');
        for n in &r.neighbors {
            text.push_str(&format!("  {} {:.6}\n", n.id, n.distance));
        }
    }
    let mut value = json!({ "results": results });
    if exact && !results.is_empty() {
        let mean = results.iter().filter_map(|r| r.recall).sum::<f64>() / results.len() as f64;
        text.push_str(&format!("mean recall@{top_k} {mean:.4}\n"));
        value["mean_recall"] = json!(mean);
    }
    emit(cli, &value, &text);
    Ok(())
}

fn mine(
    cli: &Cli,
    cfg: &RunConfig,
    catalog: &Path,
    results: &Path,
    out: &Path,
    cache: Option<&Path>,
    seed: u64,
) -> Result<()> {
    let items = load_catalog(catalog)?;
    let neighbours = load_results(results)?;
    let cat_dir = base_dir(catalog);
    let cache_path = cache.map(Path::to_path_buf).unwrap_or_else(|| base_dir(results).join(CACHE_FILE));
    let mut store = EmbeddingStore::open(&cache_path, FUSED_DIM)?;
    let (features, extractions) = catalog_features(&items, &cat_dir, &mut store, &Extractors::stub(seed))?;
    let mcfg = MiningConfig { fusion: cfg.fusion, ..cfg.mining.clone() };
    let mut records = mine_triplets(&neighbours, &items, &features, &mcfg, seed)?;
    // Manifest paths resolve against the manifest's own directory.
    let out_dir = base_dir(out);
    if fs::canonicalize(&out_dir).ok() != fs::canonicalize(&cat_dir).ok() {
        let abs = fs::canonicalize(&cat_dir).with_context(|| format!("resolving {}", cat_dir.display()))?;
        for r in &mut records {
            for p in [&mut r.q_path, &mut r.p_path, &mut r.n_path] {
                *p = abs.join(&*p).to_string_lossy().into_owned();
            }
        }
    }
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    write_manifest(out, &records)?;
    let in_class = records.iter().filter(|r| r.in_class).count();
    emit(
        cli,
        &json!({ "manifest": out, "triplets": records.len(), "in_class": in_class, "out_of_class": records.len() - in_class, "extractions": extractions }),
        &format!(
            "{} triplets ({in_class} in-class, {} out-of-class): {}",
            records.len(),
            records.len() - in_class,
            out.display()
        ),
    );
    Ok(())
}

fn gradcheck(cli: &Cli, cfg: &RunConfig, seeds: u64, per_tensor: usize, epsilon: f64, tolerance: f64) -> Result<()> {
    let mut op_max = 0.0f64;
    let mut net_max = 0.0f64;
    let mut worst_op = String::new();
    let mut checked = 0;
    let mut skipped = 0;
    for seed in 0..seeds {
        for c in op_gradchecks(seed, epsilon)? {
            if c.max_relative_error >= op_max {
                op_max = c.max_relative_error;
                worst_op = c.op;
            }
        }
        let n = gradcheck_network(&cfg.model, seed, per_tensor, epsilon)?;
        net_max = net_max.max(n.max_relative_error);
        checked += n.checked;
        skipped += n.skipped_kinks;
    }
    let max = op_max.max(net_max);
    let pass = max <= tolerance;
    emit(
        cli,
        &json!({
            "seeds": seeds,
            "max_relative_error": max,
            "ops_max_relative_error": op_max,
            "worst_op": worst_op,
            "network_max_relative_error": net_max,
            "network_coordinates": checked,
            "network_skipped_kinks": skipped,
            "tolerance": tolerance,
            "pass": pass,
        }),
        &format!(
            "max relative error {max:.3e}\n  ops {op_max:.3e} (worst: {worst_op})\n  network {net_max:.3e} over {checked} coordinates ({skipped} skipped at kinks)\n{}",
            if pass { "PASS" } else { "FAIL" }
        ),
    );
    if !pass {
        bail!("max relative error {max:.3e} exceeds {tolerance:.0e}");
    }
    Ok(())
}
