//! Triplet training: shared-weight forward/backward over q, p and n, the
//! epoch loop, evaluation, metric logs and checkpoints.

pub mod checkpoint;
pub mod optim;

use std::collections::BTreeSet;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::augment::{augment, AugmentSpec};
use crate::data::image::{read_image, resize_normalize};
use crate::data::manifest::{load_manifest, resolve, Split, TripletRecord};
use crate::error::{Error, Result};
use crate::graph::{backward, forward, frozen_param_names, ModelConfig, ModelWeights};
use crate::losses::{is_correct, LossConfig, TripletEmbeddings};
use crate::seed::rng_for;
use crate::tensor::{Mode, Tensor};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use optim::{rmsprop_step, sgd_momentum_step, OptimizerConfig, OptimizerKind, OptimizerState};

const ROLE_Q: u64 = 0;
const ROLE_P: u64 = 1;
const ROLE_N: u64 = 2;
const STREAM_SHUFFLE: u64 = 0x5348;
const STREAM_AUGMENT: u64 = 0x4147;
const STREAM_DROPOUT: u64 = 0x4450;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainRunConfig {
    /// Triplets per optimizer step.
    pub batch_size: usize,
    pub epochs: usize,
    pub loss: LossConfig,
    pub seed: u64,
    /// `None` trains on unaugmented images.
    pub augment: Option<AugmentSpec>,
    pub checkpoint_dir: Option<PathBuf>,
    pub metrics_log: Option<PathBuf>,
    /// When false, `wall_ms` is logged as 0 so logs compare bitwise.
    pub log_wall_time: bool,
}

impl Default for TrainRunConfig {
    fn default() -> Self {
        Self {
            batch_size: 96,
            epochs: 10,
            loss: LossConfig::default(),
            seed: 0,
            augment: Some(AugmentSpec::default()),
            checkpoint_dir: None,
            metrics_log: None,
            log_wall_time: true,
        }
    }
}

impl TrainRunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::param("batch_size must be >= 1"));
        }
        self.loss.validate()?;
        if let Some(spec) = &self.augment {
            spec.validate()?;
        }
        Ok(())
    }
}

/// Decoded triplet images, raw (`[0, 255]`) and network-ready.
pub struct TripletData {
    pub records: Vec<TripletRecord>,
    raw: Vec<[Tensor; 3]>,
    ready: Vec<[Tensor; 3]>,
}

impl TripletData {
    /// Loads the records of `split` (all records when `None`), resolving
    /// paths against the manifest's directory.
    pub fn load(manifest: &Path, split: Option<Split>, input_size: usize) -> Result<Self> {
        let base = manifest.parent().unwrap_or(Path::new(".")).to_path_buf();
        let records: Vec<TripletRecord> =
            load_manifest(manifest)?.into_iter().filter(|r| split.is_none() || r.split == split).collect();
        Self::from_records(records, &base, input_size)
    }

    pub fn from_records(records: Vec<TripletRecord>, base: &Path, input_size: usize) -> Result<Self> {
        let raw: Vec<[Tensor; 3]> = records
            .par_iter()
            .map(|r| {
                Ok([
                    read_image(&resolve(base, &r.q_path))?,
                    read_image(&resolve(base, &r.p_path))?,
                    read_image(&resolve(base, &r.n_path))?,
                ])
            })
            .collect::<Result<_>>()?;
        let ready = raw
            .iter()
            .map(|imgs| {
                Ok([
                    resize_normalize(&imgs[0], input_size)?,
                    resize_normalize(&imgs[1], input_size)?,
                    resize_normalize(&imgs[2], input_size)?,
                ])
            })
            .collect::<Result<_>>()?;
        Ok(Self { records, raw, ready })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Network input for triplet `i`, role `role`, in `epoch`.
    fn input(&self, i: usize, role: u64, epoch: usize, run: &TrainRunConfig, size: usize) -> Result<Tensor> {
        match &run.augment {
            None => Ok(self.ready[i][role as usize].clone()),
            Some(spec) => {
                let mut rng = rng_for(run.seed, &[STREAM_AUGMENT, epoch as u64, i as u64, role]);
                resize_normalize(&augment(&self.raw[i][role as usize], spec, &mut rng)?, size)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub mean_loss: f64,
    pub triplet_accuracy: f64,
    pub steps: usize,
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: u64,
    pub loss: f64,
    pub triplet_accuracy: f64,
    pub wall_ms: u64,
}

/// Append-only JSON-lines metrics log.
pub struct MetricsLog {
    file: File,
    path: PathBuf,
}

impl MetricsLog {
    pub fn open(path: &Path) -> Result<Self> {
        let file = OpenOptions::new().create(true).append(true).open(path).map_err(|e| Error::io(path, e))?;
        Ok(Self { file, path: path.to_path_buf() })
    }

    pub fn append(&mut self, record: &StepRecord) -> Result<()> {
        let mut line = serde_json::to_string(record).expect("records serialize");
        line.push('\n');
        self.file.write_all(line.as_bytes()).map_err(|e| Error::io(&self.path, e))
    }
}

struct TripletStep {
    loss: f64,
    correct: bool,
    grads: ModelWeights,
}

/// Forward q, p and n through the same weights, then backpropagate all three
/// paths into one gradient buffer. `scale` multiplies the loss gradient.
#[allow(clippy::too_many_arguments)]
fn triplet_step(
    weights: &ModelWeights,
    config: &ModelConfig,
    data: &TripletData,
    i: usize,
    epoch: usize,
    run: &TrainRunConfig,
    frozen: &BTreeSet<String>,
    scale: f64,
) -> Result<TripletStep> {
    let mut embs = Vec::with_capacity(3);
    let mut traces = Vec::with_capacity(3);
    for role in [ROLE_Q, ROLE_P, ROLE_N] {
        let img = data.input(i, role, epoch, run, config.input_size)?;
        let mut rng = rng_for(run.seed, &[STREAM_DROPOUT, epoch as u64, i as u64, role]);
        let (e, trace) = forward(weights, config, &img, Mode::Train, &mut rng)?;
        embs.push(e);
        traces.push(trace);
    }
    let t = TripletEmbeddings::new(embs[0].data(), embs[1].data(), embs[2].data())?;
    let out = run.loss.evaluate(&t)?;
    let correct = is_correct(&t);
    let mut grads = ModelWeights::zeros(config);
    for (trace, g) in traces.iter().zip([&out.grad_q, &out.grad_p, &out.grad_n]) {
        if g.iter().all(|&v| v == 0.0) {
            continue;
        }
        let g = Tensor::from_vec(g.iter().map(|v| v * scale).collect());
        backward(weights, config, trace, &g, &mut grads, frozen, false)?;
    }
    Ok(TripletStep { loss: out.loss, correct, grads })
}

/// One pass over `data` in a seeded order. Each batch averages the loss over
/// its triplets and takes one optimizer step. Triplets are processed
/// `rayon::current_num_threads()` at a time; their gradients are summed in
/// batch order, so results do not depend on the thread count.
pub fn train_epoch(
    weights: &mut ModelWeights,
    config: &ModelConfig,
    data: &TripletData,
    run: &TrainRunConfig,
    opt: &mut OptimizerState,
    epoch: usize,
    mut log: Option<&mut MetricsLog>,
) -> Result<EpochMetrics> {
    run.validate()?;
    if data.is_empty() {
        return Err(Error::param("cannot train on an empty triplet set"));
    }
    let frozen = frozen_param_names(config);
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut rng_for(run.seed, &[STREAM_SHUFFLE, epoch as u64]));
    let width = rayon::current_num_threads().max(1);
    let start = Instant::now();
    let (mut loss_sum, mut hits, mut steps) = (0.0, 0usize, 0usize);

    for (batch_index, batch) in order.chunks(run.batch_size).enumerate() {
        let scale = 1.0 / batch.len() as f64;
        let mut grads = ModelWeights::zeros(config);
        let (mut batch_loss, mut batch_hits) = (0.0, 0usize);
        for group in batch.chunks(width) {
            let results: Vec<Result<TripletStep>> = group
                .par_iter()
                .map(|&i| triplet_step(weights, config, data, i, epoch, run, &frozen, scale))
                .collect();
            for r in results {
                let r = r?;
                batch_loss += r.loss;
                batch_hits += r.correct as usize;
                grads.add_assign(&r.grads)?;
            }
        }
        let mean = batch_loss * scale;
        if !mean.is_finite() || grads.tensors.values().any(|t| !t.all_finite()) {
            return Err(Error::Numerical {
                batch: batch_index,
                lr: opt.config.lr,
                detail: format!("epoch {epoch}: non-finite loss or gradient (mean loss {mean})"),
            });
        }
        opt.step(weights, &grads, &frozen)?;
        loss_sum += batch_loss;
        hits += batch_hits;
        steps += 1;
        if let Some(log) = log.as_deref_mut() {
            log.append(&StepRecord {
                epoch,
                step: opt.steps,
                loss: mean,
                triplet_accuracy: batch_hits as f64 * scale,
                wall_ms: if run.log_wall_time { start.elapsed().as_millis() as u64 } else { 0 },
            })?;
        }
    }
    Ok(EpochMetrics {
        epoch,
        mean_loss: loss_sum / data.len() as f64,
        triplet_accuracy: hits as f64 / data.len() as f64,
        steps,
    })
}

/// Infer-mode embeddings of every triplet's q, p and n.
pub fn embed_triplets(weights: &ModelWeights, config: &ModelConfig, data: &TripletData) -> Result<Vec<[Tensor; 3]>> {
    (0..data.len())
        .into_par_iter()
        .map(|i| {
            let mut rng = rng_for(0, &[]);
            let mut e = |role: usize| forward(weights, config, &data.ready[i][role], Mode::Infer, &mut rng).map(|o| o.0);
            Ok([e(0)?, e(1)?, e(2)?])
        })
        .collect()
}

/// Held-out triplet accuracy with dropout off.
pub fn evaluate(weights: &ModelWeights, config: &ModelConfig, data: &TripletData) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::param("cannot evaluate an empty triplet set"));
    }
    let embs = embed_triplets(weights, config, data)?;
    let hits = embs
        .iter()
        .map(|[q, p, n]| TripletEmbeddings::new(q.data(), p.data(), n.data()).map(|t| is_correct(&t)))
        .collect::<Result<Vec<bool>>>()?
        .into_iter()
        .filter(|&c| c)
        .count();
    Ok(hits as f64 / data.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub epochs: Vec<EpochMetrics>,
    /// Held-out accuracy after each epoch, when validation data was given.
    pub val_accuracy: Vec<f64>,
}

/// Trains epochs `start_epoch..run.epochs`, checkpointing after each one to
/// `checkpoint_dir/last.mldc` when a directory is configured.
pub fn train(
    weights: &mut ModelWeights,
    config: &ModelConfig,
    train_data: &TripletData,
    val_data: Option<&TripletData>,
    run: &TrainRunConfig,
    opt: &mut OptimizerState,
    start_epoch: usize,
) -> Result<TrainSummary> {
    config.validate()?;
    run.validate()?;
    let mut log = run.metrics_log.as_deref().map(MetricsLog::open).transpose()?;
    if let Some(dir) = &run.checkpoint_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut summary = TrainSummary { epochs: Vec::new(), val_accuracy: Vec::new() };
    for epoch in start_epoch..run.epochs {
        let m = train_epoch(weights, config, train_data, run, opt, epoch, log.as_mut())?;
        log::info!("epoch {epoch}: loss {:.6} accuracy {:.4}", m.mean_loss, m.triplet_accuracy);
        summary.epochs.push(m);
        if let Some(val) = val_data {
            summary.val_accuracy.push(evaluate(weights, config, val)?);
        }
        if let Some(dir) = &run.checkpoint_dir {
            let ck = Checkpoint { weights: weights.clone(), optimizer: opt.clone(), epochs_done: epoch + 1, seed: run.seed };
            save_checkpoint(&ck, config, &dir.join("last.mldc"))?;
        }
    }
    Ok(summary)
}
