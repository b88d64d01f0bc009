//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use mildnet_core::ann::{build_index, decode_index, encode_index, IndexConfig};
use mildnet_core::catalog::{load_embeddings, save_embeddings};
use mildnet_core::data::{sample_triplets, Source, Stratification, TripletRecord};
use mildnet_core::gradcheck::op_gradchecks;
use mildnet_core::graph::{
    build_network, count_params, decode_weights, encode_weights, forward_embed, gradcheck_network, ModelConfig,
    Precision, Taps,
};
use mildnet_core::losses::{contrastive_triplet_loss, hinge_triplet_loss, LossConfig, LossKind, TripletEmbeddings};
use mildnet_core::seed::rng_for;
use mildnet_core::tensor::{Mode, Tensor};
use rand::Rng;
use serde_json::Value;

type Check = Result<String, String>;

fn ensure(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

struct Out {
    code: i32,
    stdout: String,
    stderr: String,
}

fn mildnet(args: &[&str]) -> Out {
    let o = Command::new(env!("CARGO_BIN_EXE_mildnet"))
        .args(args)
        .env_remove("MILDNET_SEED")
        .env("RUST_LOG", "error")
        .output()
        .expect("binary runs");
    Out {
        code: o.status.code().unwrap_or(-1),
        stdout: String::from_utf8_lossy(&o.stdout).into_owned(),
        stderr: String::from_utf8_lossy(&o.stderr).into_owned(),
    }
}

fn mildnet_json(args: &[&str]) -> Result<Value, String> {
    let mut full = vec!["--json"];
    full.extend_from_slice(args);
    let o = mildnet(&full);
    if o.code != 0 {
        return Err(format!("`mildnet {}` exited {}: {}", args.join(" "), o.code, o.stderr.trim()));
    }
    serde_json::from_str(&o.stdout).map_err(|e| format!("bad JSON from `{}`: {e}", args.join(" ")))
}

fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 temp path")
}

// 1 -------------------------------------------------------------------------

/// Layer-by-layer count written out independently of the library: 3x3 convs
/// with bias, then concat -> hidden -> embedding dense layers with bias.
fn oracle_params(channels: [u64; 5], convs: [u64; 5], taps: &[usize], hidden: u64, embedding: u64) -> u64 {
    let mut total = 0;
    let mut c_in = 3;
    for b in 0..5 {
        for _ in 0..convs[b] {
            total += 3 * 3 * c_in * channels[b] + channels[b];
            c_in = channels[b];
        }
    }
    let concat: u64 = taps.iter().map(|&b| channels[b - 1]).sum();
    total + concat * hidden + hidden + hidden * embedding + embedding
}

fn criterion_1() -> Check {
    let expected: [(u64, f64); 5] = [
        (19_961_664, 19.96),
        (21_010_240, 21.01),
        (21_534_528, 21.53),
        (21_796_672, 21.80),
        (21_927_744, 21.93),
    ];
    let tap_sets: [&[usize]; 5] = [&[5], &[4, 5], &[3, 4, 5], &[2, 3, 4, 5], &[1, 2, 3, 4, 5]];
    let vgg = ([64, 128, 256, 512, 512], [2, 2, 3, 3, 3]);
    let cli = mildnet_json(&["params", "--ablation"])?;
    let rows = cli.as_array().ok_or("params --ablation did not return a list")?;
    ensure(rows.len() == 5, "expected five ablation rows")?;
    for (i, ((label, taps), (count, millions))) in Taps::ablation_ladder().iter().zip(expected).enumerate() {
        let lib = count_params(&ModelConfig { skip_taps: *taps, ..ModelConfig::default() });
        let oracle = oracle_params(vgg.0, vgg.1, tap_sets[i], 2048, 2048);
        let from_cli = rows[i]["params"].as_u64().unwrap_or(0);
        ensure(
            lib == count && oracle == count && from_cli == count,
            format!("{label}: lib {lib}, oracle {oracle}, cli {from_cli}, expected {count}"),
        )?;
        let rounded = (count as f64 / 1e4).round() / 100.0;
        ensure(rounded == millions, format!("{label}: {rounded}M != {millions}M"))?;
    }
    let full = mildnet(&["params", "--taps", "b1,b2,b3,b4,b5"]);
    ensure(full.stdout.trim() == "21927744", format!("params --taps b1..b5 printed {}", full.stdout.trim()))?;
    Ok("19.96 / 21.01 / 21.53 / 21.80 / 21.93 M exact (lib, oracle, cli)".into())
}

// 2 -------------------------------------------------------------------------

fn criterion_2() -> Check {
    let tiny = ModelConfig::tiny();
    ensure(tiny.block_channels == [4, 8, 8, 16, 16] && tiny.input_size == 32, "tiny config drifted")?;
    let (mut ops, mut net, mut coords) = (0.0f64, 0.0f64, 0);
    for seed in 0..20 {
        for c in op_gradchecks(seed, 1e-5).map_err(|e| e.to_string())? {
            ensure(c.max_relative_error.is_finite(), format!("{} produced a non-finite error", c.op))?;
            ops = ops.max(c.max_relative_error);
        }
        let n = gradcheck_network(&tiny, seed, 4, 1e-5).map_err(|e| e.to_string())?;
        net = net.max(n.max_relative_error);
        coords += n.checked;
    }
    ensure(ops <= 1e-4, format!("op max relative error {ops:.3e}"))?;
    ensure(net <= 1e-4, format!("network max relative error {net:.3e}"))?;
    let cli = mildnet(&["gradcheck", "--config", "tiny"]);
    ensure(cli.code == 0, format!("gradcheck --config tiny exited {}", cli.code))?;
    ensure(cli.stdout.contains("max relative error"), "gradcheck did not print its error")?;
    Ok(format!("20 seeds: ops {ops:.2e}, network {net:.2e} over {coords} coordinates; cli exit 0"))
}

// 3 -------------------------------------------------------------------------

fn loss(kind: LossKind, q: &[f64], p: &[f64], n: &[f64]) -> Result<mildnet_core::losses::LossOutput, String> {
    let t = TripletEmbeddings::new(q, p, n).map_err(|e| e.to_string())?;
    let cfg = LossConfig { kind, margin: 1.0 };
    match kind {
        LossKind::Hinge => hinge_triplet_loss(&t, &cfg),
        LossKind::Contrastive => contrastive_triplet_loss(&t, &cfg),
    }
    .map_err(|e| e.to_string())
}

fn oracle_loss(kind: LossKind, q: &[f64], p: &[f64], n: &[f64]) -> f64 {
    let d2 = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
    match kind {
        LossKind::Hinge => (d2(q, p) - d2(q, n) + 1.0).max(0.0),
        LossKind::Contrastive => 0.5 * d2(q, p) + 0.5 * (1.0 - d2(q, n).sqrt()).max(0.0).powi(2),
    }
}

fn criterion_3() -> Check {
    let cases: [(LossKind, [&[f64]; 3], f64); 5] = [
        (LossKind::Hinge, [&[0.0, 0.0], &[1.0, 0.0], &[2.0, 0.0]], 0.0),
        (LossKind::Hinge, [&[0.0, 0.0], &[1.0, 0.0], &[0.0, 1.0]], 1.0),
        (LossKind::Hinge, [&[1.0, 2.0], &[4.0, 6.0], &[1.0, 2.0]], 26.0),
        (LossKind::Contrastive, [&[0.0, 0.0], &[0.0, 0.0], &[3.0, 4.0]], 0.0),
        (LossKind::Contrastive, [&[0.5, 0.5], &[0.5, 0.5], &[0.5, 0.5]], 0.5),
    ];
    for (kind, [q, p, n], want) in cases {
        let got = loss(kind, q, p, n)?.loss;
        ensure(got == want, format!("{kind} loss at {q:?},{p:?},{n:?} = {got}, expected {want}"))?;
    }

    // Central differences of the oracle at random points away from the
    // non-smooth loci.
    let mut rng = rng_for(3, &[]);
    let mut worst = 0.0f64;
    let mut points = 0;
    for kind in [LossKind::Hinge, LossKind::Contrastive] {
        let mut done = 0;
        while done < 200 {
            let mut v = |scale: f64| (0..8).map(|_| rng.gen_range(-scale..scale)).collect::<Vec<f64>>();
            let q = v(1.0);
            let p = v(1.0).iter().zip(&q).map(|(a, b)| b + 0.3 * a).collect::<Vec<_>>();
            let n = v(1.0).iter().zip(&q).map(|(a, b)| b + 0.4 * a).collect::<Vec<_>>();
            let dn = n.iter().zip(&q).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let hinge = oracle_loss(LossKind::Hinge, &q, &p, &n);
            let smooth = match kind {
                LossKind::Hinge => hinge > 1e-3,
                LossKind::Contrastive => dn > 1e-3 && (dn - 1.0).abs() > 1e-3,
            };
            if !smooth {
                continue;
            }
            done += 1;
            points += 1;
            let out = loss(kind, &q, &p, &n)?;
            let base = [q.clone(), p.clone(), n.clone()];
            for (role, grad) in [&out.grad_q, &out.grad_p, &out.grad_n].into_iter().enumerate() {
                for i in 0..8 {
                    let h = 1e-6;
                    let mut plus = base.clone();
                    let mut minus = base.clone();
                    plus[role][i] += h;
                    minus[role][i] -= h;
                    let fd = (oracle_loss(kind, &plus[0], &plus[1], &plus[2])
                        - oracle_loss(kind, &minus[0], &minus[1], &minus[2]))
                        / (2.0 * h);
                    worst = worst.max((fd - grad[i]).abs() / fd.abs().max(grad[i].abs()).max(1e-8));
                }
            }
        }
    }
    ensure(worst <= 1e-6, format!("loss gradient relative error {worst:.3e}"))?;
    let mut lib_worst = 0.0f64;
    for seed in 0..20 {
        for c in op_gradchecks(seed, 1e-6).map_err(|e| e.to_string())?.into_iter().filter(|c| c.op.ends_with("loss")) {
            lib_worst = lib_worst.max(c.max_relative_error);
        }
    }
    ensure(lib_worst <= 1e-6, format!("library loss gradcheck {lib_worst:.3e}"))?;
    Ok(format!("5 table values exact; gradients vs finite differences {worst:.2e} ({points} points), library check {lib_worst:.2e}"))
}

// 4 -------------------------------------------------------------------------

fn f32_points(n: usize, dim: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    (0..n).map(|_| (0..dim).map(|_| rng.gen_range(-1.0f32..1.0) as f64).collect()).collect()
}

fn oracle_knn(items: &[(String, Vec<f64>)], q: &[f64], k: usize) -> Vec<(String, f64)> {
    let mut all: Vec<(String, f64)> = items
        .iter()
        .map(|(id, v)| (id.clone(), v.iter().zip(q).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()))
        .collect();
    all.sort_by(|a, b| a.1.total_cmp(&b.1).then_with(|| a.0.cmp(&b.0)));
    all.truncate(k);
    all
}

fn criterion_4() -> Check {
    let mut rng = rng_for(4, &[]);
    let items: Vec<(String, Vec<f64>)> =
        f32_points(2000, 32, &mut rng).into_iter().enumerate().map(|(i, v)| (format!("p{i:04}"), v)).collect();
    let cfg = IndexConfig { n_trees: 16, leaf_capacity: 16, ..IndexConfig::default() };
    let forest = build_index(&items, &cfg, 4).map_err(|e| e.to_string())?;
    let queries = f32_points(50, 32, &mut rng);
    let recall_at = |budget: Option<usize>| -> Result<f64, String> {
        let mut total = 0.0;
        for q in &queries {
            let got = forest.query(q, 10, budget).map_err(|e| e.to_string())?;
            let truth = oracle_knn(&items, q, 10);
            total += got.iter().filter(|g| truth.iter().any(|(id, _)| *id == g.id)).count() as f64 / 10.0;
        }
        Ok(total / queries.len() as f64)
    };
    let mean = recall_at(None)?;
    let (r100, r400) = (recall_at(Some(100))?, recall_at(Some(400))?);
    ensure(mean >= 0.95, format!("mean recall@10 {mean:.4} < 0.95"))?;

    let mut datasets = 0;
    for (n, dim, dupes) in [(1, 3, false), (2, 5, false), (17, 8, true), (100, 16, false), (257, 4, true), (512, 32, false)] {
        let mut pts = f32_points(n, dim, &mut rng);
        if dupes {
            for i in (1..n).step_by(3) {
                pts[i] = pts[i - 1].clone();
            }
        }
        let items: Vec<(String, Vec<f64>)> = pts.into_iter().enumerate().map(|(i, v)| (format!("x{i:03}"), v)).collect();
        let small = IndexConfig { n_trees: 3, leaf_capacity: 4, ..IndexConfig::default() };
        let forest = build_index(&items, &small, n as u64).map_err(|e| e.to_string())?;
        let mut qs = f32_points(10, dim, &mut rng);
        qs.push(items[0].1.clone());
        for q in &qs {
            for k in [1, 10, n] {
                let got = forest.query(q, k, Some(n)).map_err(|e| e.to_string())?;
                let truth = oracle_knn(&items, q, k);
                ensure(got.len() == truth.len(), format!("n={n} k={k}: {} results", got.len()))?;
                for (g, (id, d)) in got.iter().zip(&truth) {
                    ensure(
                        g.id == *id && (g.distance - d).abs() <= 1e-12 * d.max(1.0),
                        format!("n={n} k={k}: got ({}, {}), brute force ({id}, {d})", g.id, g.distance),
                    )?;
                }
            }
        }
        datasets += 1;
    }
    Ok(format!("mean recall@10 {mean:.4} over 50 queries (budget 100: {r100:.3}, 400: {r400:.3}); exhaustive == brute force on {datasets} datasets (n <= 512)"))
}

// 5 -------------------------------------------------------------------------

fn desk_run(root: &Path, seed: u64, loss: &str, taps: &str) -> Result<f64, String> {
    let data = root.join(format!("synth{seed}"));
    if !data.join("manifest.jsonl").exists() {
        mildnet_json(&["synth", "--out", s(&data), "--seed", &seed.to_string()])?;
    }
    let out = root.join(format!("run-{seed}-{loss}-{}", taps.replace(',', "")));
    let manifest = data.join("manifest.jsonl");
    let v = mildnet_json(&[
        "train", "--config", "tiny", "--manifest", s(&manifest), "--out", s(&out), "--loss", loss, "--taps", taps,
        "--seed", &seed.to_string(),
    ])?;
    let acc = v["val_accuracy"].as_array().and_then(|a| a.last()).and_then(Value::as_f64);
    let epochs = v["epochs"].as_array().map_or(0, Vec::len);
    ensure(epochs == 10, format!("expected 10 epochs, got {epochs}"))?;
    acc.ok_or_else(|| "no held-out accuracy reported".to_string())
}

fn criterion_5(root: &Path) -> Check {
    let seeds = [1u64, 2, 3];
    let mut full = Vec::new();
    let mut none = Vec::new();
    let mut low = Vec::new();
    for &seed in &seeds {
        for loss in ["hinge", "contrastive"] {
            let f = desk_run(root, seed, loss, "b1,b2,b3,b4,b5")?;
            let b = desk_run(root, seed, loss, "b5")?;
            if f < 0.85 {
                low.push(format!("seed {seed} {loss}: {f:.3}"));
            }
            full.push(f);
            none.push(b);
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (mf, mn) = (mean(&full), mean(&none));
    let min = full.iter().copied().fold(f64::INFINITY, f64::min);
    let detail = format!("full taps min {min:.3} mean {mf:.3}; no skip mean {mn:.3} (3 seeds x 2 losses)");
    ensure(low.is_empty(), format!("below 0.85: {}; {detail}", low.join(", ")))?;
    ensure(mf >= mn - 0.02, format!("full taps below no-skip - 0.02: {detail}"))?;
    Ok(detail)
}

// 6 -------------------------------------------------------------------------

fn criterion_6(root: &Path) -> Check {
    let cat = root.join("catalog");
    let inc = root.join("incremental");
    let catalog = cat.join("catalog.jsonl");
    mildnet_json(&["synth", "--kind", "catalog", "--out", s(&cat), "--set", "catalog_items=200", "--set", "catalog_partitions=4"])?;
    let first = mildnet_json(&["pipeline-run", "--catalog", s(&catalog), "--out", s(&inc)])?;
    ensure(first["extractions"] == 200 && first["partitions"] == 4, format!("first run: {first}"))?;
    let again = mildnet_json(&["pipeline-run", "--catalog", s(&catalog), "--out", s(&inc)])?;
    ensure(again["extractions"] == 0, format!("unchanged round extracted {}", again["extractions"]))?;
    ensure(again["partitions_carried"] == 4, format!("unchanged round: {again}"))?;

    let mut start = 200;
    for (round, added) in [9usize, 14, 3].into_iter().enumerate() {
        mildnet_json(&[
            "synth", "--kind", "catalog", "--out", s(&cat), "--append", "--start", &start.to_string(), "--set",
            &format!("catalog_items={added}"), "--set", "catalog_partitions=4",
        ])?;
        start += added;
        let r = mildnet_json(&["pipeline-run", "--catalog", s(&catalog), "--out", s(&inc)])?;
        ensure(r["extractions"] == added, format!("round {round}: {} extractions for {added} new items", r["extractions"]))?;
        let fresh = root.join(format!("full{round}"));
        mildnet_json(&["pipeline-run", "--catalog", s(&catalog), "--out", s(&fresh)])?;
        for file in ["results.jsonl", "state.json"] {
            let a = fs::read(inc.join(file)).map_err(|e| e.to_string())?;
            let b = fs::read(fresh.join(file)).map_err(|e| e.to_string())?;
            ensure(a == b, format!("round {round}: {file} differs from full recomputation"))?;
        }
    }
    Ok("3 insertion rounds byte-identical to full recomputation; unchanged round 0 extractions".into())
}

// 7 -------------------------------------------------------------------------

fn criterion_7(root: &Path) -> Check {
    let data = root.join("det-synth");
    mildnet_json(&["synth", "--out", s(&data), "--seed", "7", "--set", "synth_triplets=120"])?;
    let manifest = data.join("manifest.jsonl");
    let train = |out: &Path, epochs: &str, extra: &[&str]| -> Result<Value, String> {
        let mut args = vec!["train", "--config", "tiny", "--manifest", s(&manifest), "--out", s(out), "--epochs", epochs, "--seed", "7"];
        args.extend_from_slice(extra);
        mildnet_json(&args)
    };
    let read = |p: PathBuf| fs::read(&p).map_err(|e| format!("{}: {e}", p.display()));

    let (a, b, c, r) = (root.join("det-a"), root.join("det-b"), root.join("det-c"), root.join("det-r"));
    train(&a, "3", &[])?;
    train(&b, "3", &[])?;
    train(&c, "3", &["--threads", "2"])?;
    for f in ["metrics.jsonl", "weights.mldw", "checkpoints/last.mldc"] {
        ensure(read(a.join(f))? == read(b.join(f))?, format!("{f} differs between identical runs"))?;
        ensure(read(a.join(f))? == read(c.join(f))?, format!("{f} differs between 1 and 2 threads"))?;
    }
    train(&r, "1", &[])?;
    train(&r, "3", &["--resume"])?;
    for f in ["metrics.jsonl", "weights.mldw", "checkpoints/last.mldc"] {
        ensure(read(a.join(f))? == read(r.join(f))?, format!("{f} differs after checkpoint resume"))?;
    }

    // Weights: the file round-trips and drives identical embeddings.
    let cfg = ModelConfig::tiny();
    let w = build_network(&cfg, 7).map_err(|e| e.to_string())?;
    let bytes = encode_weights(&w, cfg.hash(), Precision::F32).map_err(|e| e.to_string())?;
    let (loaded, _) = decode_weights(&bytes).map_err(|e| e.to_string())?;
    ensure(encode_weights(&loaded, cfg.hash(), Precision::F32).map_err(|e| e.to_string())? == bytes, "weights re-encode differs")?;
    let img = Tensor::new(vec![3, 32, 32], (0..3072).map(|i| (i % 17) as f64 / 17.0).collect()).map_err(|e| e.to_string())?;
    let embed = |w| forward_embed(w, &cfg, &img, Mode::Infer, &mut rng_for(0, &[])).map_err(|e| e.to_string());
    ensure(embed(&loaded)? == embed(&w.quantized())?, "loaded weights embed differently")?;

    // Embedding store and index: files round-trip to identical query results.
    let store = root.join("det.mlde");
    let mut rng = rng_for(7, &[1]);
    let items: Vec<(String, Vec<f64>)> =
        f32_points(300, 12, &mut rng).into_iter().enumerate().map(|(i, v)| (format!("e{i}"), v)).collect();
    save_embeddings(&store, 12, &items).map_err(|e| e.to_string())?;
    let (_, back) = load_embeddings(&store).map_err(|e| e.to_string())?;
    ensure(back == items, "embedding store does not round-trip")?;
    let forest = build_index(&back, &IndexConfig::default(), 7).map_err(|e| e.to_string())?;
    let enc = encode_index(&forest).map_err(|e| e.to_string())?;
    let reloaded = decode_index(&enc).map_err(|e| e.to_string())?;
    ensure(encode_index(&reloaded).map_err(|e| e.to_string())? == enc, "index re-encode differs")?;
    for q in f32_points(20, 12, &mut rng) {
        let x = forest.query(&q, 10, Some(40)).map_err(|e| e.to_string())?;
        let y = reloaded.query(&q, 10, Some(40)).map_err(|e| e.to_string())?;
        ensure(x == y, "reloaded index answers differently")?;
    }
    let idx = root.join("det.mldi");
    mildnet_json(&["index-build", "--embeddings", s(&store), "--out", s(&idx), "--seed", "7"])?;
    ensure(read(idx.clone())? == enc, "CLI index differs from library index")?;
    let q1 = mildnet(&["--json", "index-query", "--index", s(&idx), "--embeddings", s(&store)]);
    let q2 = mildnet(&["--json", "index-query", "--index", s(&idx), "--embeddings", s(&store), "--threads", "2"]);
    ensure(q1.code == 0 && q1.stdout == q2.stdout, "index-query output not reproducible")?;
    Ok("training logs, weights and checkpoints bitwise across runs, threads and resume; weights/store/index round-trip".into())
}

// 8 -------------------------------------------------------------------------

fn oracle_split(n: usize) -> (usize, usize) {
    let exact = [n as f64 * 0.3, n as f64 * 0.7];
    let mut counts = exact.map(|x| x.floor() as usize);
    let mut left = n - counts.iter().sum::<usize>();
    let mut order = [0, 1];
    order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())).then(a.cmp(&b)));
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[i] += 1;
        left -= 1;
    }
    (counts[0], counts[1])
}

fn criterion_8(root: &Path) -> Check {
    let pool: Vec<TripletRecord> = (0..4000)
        .map(|i| TripletRecord {
            q_path: format!("q{i}"),
            p_path: format!("p{i}"),
            n_path: format!("n{i}"),
            category_key: format!("c{}", i % 7),
            q_source: Source::Catalog,
            in_class: i % 2 == 0,
            split: None,
        })
        .collect();
    // 100 items per partition, so the in-class negative ranks 50..=99 exist.
    let cat = root.join("ratio-catalog");
    let results = root.join("ratio-results").join("results.jsonl");
    mildnet_json(&["synth", "--kind", "catalog", "--out", s(&cat), "--set", "catalog_items=400", "--set", "catalog_partitions=4"])?;
    mildnet_json(&["pipeline-run", "--catalog", s(&cat.join("catalog.jsonl")), "--out", s(&results.with_file_name(""))])?;
    for n in [10usize, 100, 1000] {
        let want = oracle_split(n);
        ensure(want == (n * 3 / 10, n * 7 / 10), format!("oracle split for {n}: {want:?}"))?;
        let mut rng = rng_for(8, &[n as u64]);
        let got = sample_triplets(&pool, n, Stratification::InClass(0.3), &mut rng).map_err(|e| e.to_string())?;
        let in_class = got.iter().filter(|r| r.in_class).count();
        ensure((in_class, got.len() - in_class) == want, format!("sample_triplets n={n}: {in_class}/{}", got.len() - in_class))?;

        let out = root.join(format!("mined{n}.jsonl"));
        let v = mildnet_json(&[
            "mine-triplets", "--catalog", s(&cat.join("catalog.jsonl")), "--results", s(&results), "--out", s(&out),
            "--set", &format!("mine_count={n}"),
        ])?;
        let text = fs::read_to_string(&out).map_err(|e| e.to_string())?;
        let recs: Vec<TripletRecord> =
            text.lines().map(serde_json::from_str).collect::<Result<_, _>>().map_err(|e| e.to_string())?;
        let ic = recs.iter().filter(|r| r.in_class).count();
        ensure(
            (ic, recs.len() - ic) == want && v["in_class"] == want.0,
            format!("mine_triplets n={n}: {ic}/{}", recs.len() - ic),
        )?;
    }
    Ok("30/70 exact for n in {10, 100, 1000} via sample_triplets and mine_triplets".into())
}

type Criterion<'a> = Box<dyn Fn() -> Check + 'a>;

fn main() {
    let root = tempfile::tempdir().expect("temp dir");
    let root = root.path();
    let criteria: Vec<(&str, Criterion)> = vec![
        ("parameter counts", Box::new(criterion_1)),
        ("gradient integrity", Box::new(criterion_2)),
        ("loss correctness", Box::new(criterion_3)),
        ("ANN quality", Box::new(criterion_4)),
        ("desk-scale learning", Box::new(|| criterion_5(root))),
        ("incremental pipeline", Box::new(|| criterion_6(root))),
        ("determinism and persistence", Box::new(|| criterion_7(root))),
        ("triplet ratios", Box::new(|| criterion_8(root))),
    ];
    let only: Option<Vec<usize>> =
        std::env::var("ACCEPTANCE_ONLY").ok().map(|v| v.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let id = i + 1;
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            continue;
        }
        let t = Instant::now();
        let result = check();
        let secs = t.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("PASS {id} {name} ({secs:.1}s): {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {id} {name} ({secs:.1}s): {detail}");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
