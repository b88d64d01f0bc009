//! The multi-intermediate-layer descriptor network.
//!
//! A VGG16-shaped backbone of five conv blocks, each closed by a 2x2 max-pool.
//! Selected pool outputs ("taps") are globally average-pooled, concatenated and
//! fed through `FC -> ReLU -> Dropout -> FC` to produce the embedding. The last
//! pool is always tapped; the "no skip" network taps it alone.

pub(crate) mod io;

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use indexmap::IndexMap;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::seed::rng_for;
use crate::tensor::{self, ConvSpec, Mode, PoolOutput, Tensor};

pub use io::{decode_weights, encode_weights, load_weights, load_weights_checked, save_weights, Precision};

pub const BLOCKS: usize = 5;

/// Set of tapped pool outputs. Block 5 is always a member.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Taps([bool; BLOCKS]);

impl Taps {
    pub fn new(blocks: impl IntoIterator<Item = usize>) -> Result<Self> {
        let mut set = [false; BLOCKS];
        set[BLOCKS - 1] = true;
        for b in blocks {
            if !(1..=BLOCKS).contains(&b) {
                return Err(Error::param(format!("tap block {b} outside 1..={BLOCKS}")));
            }
            set[b - 1] = true;
        }
        Ok(Self(set))
    }

    /// Only the last pool ("No skip").
    pub fn last_only() -> Self {
        Self::new([]).expect("empty tap list is valid")
    }

    /// All five pools: the last one plus four intermediate levels.
    pub fn full() -> Self {
        Self::new([1, 2, 3, 4]).expect("static tap list")
    }

    pub fn contains(&self, block: usize) -> bool {
        (1..=BLOCKS).contains(&block) && self.0[block - 1]
    }

    /// Tapped block numbers, ascending.
    pub fn blocks(&self) -> impl Iterator<Item = usize> + '_ {
        (1..=BLOCKS).filter(|&b| self.0[b - 1])
    }

    /// The five configurations of the skip-layer ablation, from "no skip" to
    /// all four intermediate taps, each labelled with the intermediate pool it
    /// adds. The last rung adds the 64-channel `block1_pool`; the published
    /// ablation table labels that row `block5_pool`, but only `block1_pool`
    /// gives its 1472-wide descriptor.
    pub fn ablation_ladder() -> [(&'static str, Taps); 5] {
        let t = |v: &[usize]| Taps::new(v.iter().copied()).expect("static tap list");
        [
            ("No skip", t(&[])),
            ("block4_pool", t(&[4])),
            ("block3_pool, block4_pool", t(&[3, 4])),
            ("block2_pool, block3_pool, block4_pool", t(&[2, 3, 4])),
            ("block1_pool, block2_pool, block3_pool, block4_pool", t(&[1, 2, 3, 4])),
        ]
    }
}

impl Default for Taps {
    fn default() -> Self {
        Self::full()
    }
}

impl fmt::Display for Taps {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<String> = self.blocks().map(|b| format!("b{b}")).collect();
        f.write_str(&names.join(","))
    }
}

/// Accepts `b2,b3`, `2,3`, `block2_pool,block3_pool`, or `none`.
impl FromStr for Taps {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.is_empty() || s.eq_ignore_ascii_case("none") || s.eq_ignore_ascii_case("noskip") {
            return Ok(Self::last_only());
        }
        let mut blocks = Vec::new();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let digits = part
                .strip_prefix("block")
                .map(|r| r.trim_end_matches("_pool"))
                .or_else(|| part.strip_prefix('b'))
                .unwrap_or(part);
            let b = digits
                .parse::<usize>()
                .map_err(|_| Error::param(format!("unrecognised tap `{part}`")))?;
            blocks.push(b);
        }
        Self::new(blocks)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub block_channels: [usize; BLOCKS],
    pub convs_per_block: [usize; BLOCKS],
    pub input_size: usize,
    pub skip_taps: Taps,
    pub embedding_dim: usize,
    pub hidden_dim: usize,
    pub dropout_rate: f64,
    /// Leading layers (convs and pools, in build order) whose weights stay fixed.
    pub freeze_prefix: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            block_channels: [64, 128, 256, 512, 512],
            convs_per_block: [2, 2, 3, 3, 3],
            input_size: 224,
            skip_taps: Taps::full(),
            embedding_dim: 2048,
            hidden_dim: 2048,
            dropout_rate: 0.5,
            freeze_prefix: 10,
        }
    }
}

impl ModelConfig {
    /// Desk-scale network used for gradient checks and synthetic training.
    pub fn tiny() -> Self {
        Self {
            block_channels: [4, 8, 8, 16, 16],
            input_size: 32,
            embedding_dim: 16,
            hidden_dim: 32,
            freeze_prefix: 0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.block_channels.iter().chain(&self.convs_per_block).any(|&n| n == 0) {
            return Err(Error::param("block channels and convs per block must be >= 1"));
        }
        if self.embedding_dim == 0 || self.hidden_dim == 0 {
            return Err(Error::param("embedding_dim and hidden_dim must be >= 1"));
        }
        if self.input_size == 0 || !self.input_size.is_multiple_of(32) {
            return Err(Error::param(format!("input_size {} must be a positive multiple of 32", self.input_size)));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::param(format!("dropout_rate {} outside [0, 1)", self.dropout_rate)));
        }
        let total = layer_plan(self).len();
        if self.freeze_prefix > total {
            return Err(Error::param(format!("freeze_prefix {} exceeds layer count {total}", self.freeze_prefix)));
        }
        Ok(())
    }

    /// Width of the concatenated tap descriptor.
    pub fn concat_width(&self) -> usize {
        self.skip_taps.blocks().map(|b| self.block_channels[b - 1]).sum()
    }

    /// Hash of every field that fixes the weight layout.
    pub fn hash(&self) -> u64 {
        let canon = format!(
            "channels={:?};convs={:?};input={};taps={};hidden={};embedding={}",
            self.block_channels, self.convs_per_block, self.input_size, self.skip_taps, self.hidden_dim, self.embedding_dim
        );
        let digest = Sha256::digest(canon.as_bytes());
        u64::from_le_bytes(digest[..8].try_into().expect("sha256 has 32 bytes"))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum LayerKind {
    Conv(ConvSpec),
    Pool,
    Dense { inputs: usize, outputs: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub name: String,
    pub kind: LayerKind,
}

impl Layer {
    pub fn kernel_name(&self) -> String {
        format!("{}/kernel", self.name)
    }
    pub fn bias_name(&self) -> String {
        format!("{}/bias", self.name)
    }

    fn param_shapes(&self) -> Option<(Vec<usize>, usize)> {
        match &self.kind {
            LayerKind::Conv(spec) => Some((spec.weight_shape().to_vec(), spec.out_channels)),
            LayerKind::Dense { inputs, outputs } => Some((vec![*outputs, *inputs], *outputs)),
            LayerKind::Pool => None,
        }
    }
}

/// All layers in build order: `blockB_convI`..., `blockB_pool`, then `fc1`, `fc2`.
pub fn layer_plan(config: &ModelConfig) -> Vec<Layer> {
    let mut layers = Vec::new();
    let mut channels = 3;
    for b in 0..BLOCKS {
        let out = config.block_channels[b];
        for i in 0..config.convs_per_block[b] {
            layers.push(Layer {
                name: format!("block{}_conv{}", b + 1, i + 1),
                kind: LayerKind::Conv(ConvSpec::same3x3(channels, out)),
            });
            channels = out;
        }
        layers.push(Layer { name: format!("block{}_pool", b + 1), kind: LayerKind::Pool });
    }
    layers.push(Layer {
        name: "fc1".into(),
        kind: LayerKind::Dense { inputs: config.concat_width(), outputs: config.hidden_dim },
    });
    layers.push(Layer {
        name: "fc2".into(),
        kind: LayerKind::Dense { inputs: config.hidden_dim, outputs: config.embedding_dim },
    });
    layers
}

/// Exact parameter count, without allocating anything.
pub fn count_params(config: &ModelConfig) -> u64 {
    let mut total = 0u64;
    let mut cin = 3u64;
    for b in 0..BLOCKS {
        let cout = config.block_channels[b] as u64;
        for _ in 0..config.convs_per_block[b] {
            total += cin * cout * 9 + cout;
            cin = cout;
        }
    }
    let concat = config.concat_width() as u64;
    let hidden = config.hidden_dim as u64;
    let emb = config.embedding_dim as u64;
    total + concat * hidden + hidden + hidden * emb + emb
}

/// Names of the layers covered by `freeze_prefix` (convs and pools counted).
pub fn freeze_layers(config: &ModelConfig) -> BTreeSet<String> {
    layer_plan(config).into_iter().take(config.freeze_prefix).map(|l| l.name).collect()
}

/// Parameter tensor names (kernel and bias) owned by frozen layers.
pub fn frozen_param_names(config: &ModelConfig) -> BTreeSet<String> {
    layer_plan(config)
        .into_iter()
        .take(config.freeze_prefix)
        .filter(|l| l.param_shapes().is_some())
        .flat_map(|l| [l.kernel_name(), l.bias_name()])
        .collect()
}

/// Learned parameters keyed by `layer/kernel` and `layer/bias`, in build order.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelWeights {
    pub tensors: IndexMap<String, Tensor>,
}

impl ModelWeights {
    /// Zero tensors with the layout of `config`; also used as a gradient buffer.
    pub fn zeros(config: &ModelConfig) -> Self {
        let mut tensors = IndexMap::new();
        for layer in layer_plan(config) {
            if let Some((kshape, bias)) = layer.param_shapes() {
                tensors.insert(layer.kernel_name(), Tensor::zeros(&kshape));
                tensors.insert(layer.bias_name(), Tensor::zeros(&[bias]));
            }
        }
        Self { tensors }
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors.get(name).ok_or_else(|| Error::param(format!("missing weight tensor `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors.get_mut(name).ok_or_else(|| Error::param(format!("missing weight tensor `{name}`")))
    }

    pub fn element_count(&self) -> u64 {
        self.tensors.values().map(|t| t.len() as u64).sum()
    }

    pub fn fill(&mut self, value: f64) {
        self.tensors.values_mut().for_each(|t| t.fill(value));
    }

    pub fn add_assign(&mut self, other: &ModelWeights) -> Result<()> {
        for (name, t) in &mut self.tensors {
            t.add_assign(other.get(name)?)?;
        }
        Ok(())
    }

    pub fn quantized(&self) -> Self {
        Self { tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.quantized())).collect() }
    }

    /// Checks names and shapes against `config`.
    pub fn check_layout(&self, config: &ModelConfig) -> Result<()> {
        let expect = ModelWeights::zeros(config);
        if expect.tensors.len() != self.tensors.len() {
            return Err(Error::dim(
                "model weights",
                format!("expected {} tensors, found {}", expect.tensors.len(), self.tensors.len()),
            ));
        }
        for (name, t) in &expect.tensors {
            self.get(name)?.expect_shape(t.shape(), name)?;
        }
        Ok(())
    }
}

/// He-uniform kernels (`U(±sqrt(6/fan_in))`), zero biases. Deterministic per seed.
pub fn build_network(config: &ModelConfig, init_seed: u64) -> Result<ModelWeights> {
    config.validate()?;
    let mut weights = ModelWeights::zeros(config);
    for (index, layer) in layer_plan(config).iter().enumerate() {
        let fan_in = match &layer.kind {
            LayerKind::Conv(spec) => spec.in_channels * spec.kernel_h * spec.kernel_w,
            LayerKind::Dense { inputs, .. } => *inputs,
            LayerKind::Pool => continue,
        };
        let limit = (6.0 / fan_in as f64).sqrt();
        let mut rng = rng_for(init_seed, &[index as u64]);
        let kernel = weights.get_mut(&layer.kernel_name())?;
        kernel.data_mut().iter_mut().for_each(|w| *w = rng.gen_range(-limit..limit));
    }
    Ok(weights)
}

/// An image's embedding, tagged with the item it came from.
#[derive(Clone, Debug, PartialEq)]
pub struct Embedding {
    pub item_id: String,
    pub vector: Tensor,
}

/// Intermediate values kept by a forward pass for the backward pass.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    conv_inputs: Vec<Tensor>,
    conv_preacts: Vec<Tensor>,
    pools: Vec<(Vec<usize>, PoolOutput)>,
    tap_widths: Vec<usize>,
    head_input: Tensor,
    hidden_preact: Tensor,
    dropout_mask: Option<Vec<f64>>,
    hidden_out: Tensor,
}

impl ForwardTrace {
    /// Fingerprint of the piecewise-linear regime: every ReLU sign and every
    /// pool argmax. Two points with equal fingerprints lie on the same smooth
    /// piece of the network function.
    pub fn regime_fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut feed = |v: u64| {
            h ^= v;
            h = h.wrapping_mul(0x0100_0000_01b3);
        };
        for t in self.conv_preacts.iter().chain(std::iter::once(&self.hidden_preact)) {
            for &x in t.data() {
                feed((x > 0.0) as u64);
            }
        }
        for (_, p) in &self.pools {
            for &i in &p.argmax {
                feed(i as u64);
            }
        }
        h
    }
}

fn check_image(config: &ModelConfig, image: &Tensor) -> Result<()> {
    let s = config.input_size;
    if image.rank() != 3 || image.shape()[0] != 3 {
        return Err(Error::dim("forward_embed", format!("expected [3, S, S] image, got {:?}", image.shape())));
    }
    let (h, w) = (image.shape()[1], image.shape()[2]);
    if h % 32 != 0 || w % 32 != 0 {
        return Err(Error::dim("forward_embed", format!("image {h}x{w} not divisible by 32")));
    }
    if h != s || w != s {
        return Err(Error::dim("forward_embed", format!("image {h}x{w} != configured input size {s}")));
    }
    Ok(())
}

/// Runs the network and returns the embedding along with the trace needed
/// by [`backward`].
pub fn forward<R: Rng + ?Sized>(
    weights: &ModelWeights,
    config: &ModelConfig,
    image: &Tensor,
    mode: Mode,
    rng: &mut R,
) -> Result<(Tensor, ForwardTrace)> {
    check_image(config, image)?;
    let plan = layer_plan(config);
    let mut conv_inputs = Vec::new();
    let mut conv_preacts = Vec::new();
    let mut pools = Vec::new();
    let mut taps = Vec::new();
    let mut x = image.clone();
    for layer in &plan {
        match &layer.kind {
            LayerKind::Conv(spec) => {
                let pre = tensor::conv2d(&x, weights.get(&layer.kernel_name())?, weights.get(&layer.bias_name())?, spec)?;
                let out = tensor::relu(&pre);
                conv_inputs.push(std::mem::replace(&mut x, out));
                conv_preacts.push(pre);
            }
            LayerKind::Pool => {
                let pooled = tensor::maxpool2d_with_indices(&x)?;
                let block = pools.len() + 1;
                if config.skip_taps.contains(block) {
                    taps.push(tensor::global_avg_pool(&pooled.output)?);
                }
                x = pooled.output.clone();
                pools.push((pooled_input_shape(&pooled), pooled));
            }
            LayerKind::Dense { .. } => break,
        }
    }
    let tap_widths = taps.iter().map(Tensor::len).collect();
    let head_input = tensor::concat_channels(&taps.iter().collect::<Vec<_>>())?;
    let hidden_preact = tensor::dense_affine(&head_input, weights.get("fc1/kernel")?, weights.get("fc1/bias")?)?;
    let hidden = tensor::relu(&hidden_preact);
    let (hidden_out, dropout_mask) = tensor::dropout_mask(&hidden, config.dropout_rate, mode, rng)?;
    let embedding = tensor::dense_affine(&hidden_out, weights.get("fc2/kernel")?, weights.get("fc2/bias")?)?;
    Ok((
        embedding,
        ForwardTrace { conv_inputs, conv_preacts, pools, tap_widths, head_input, hidden_preact, dropout_mask, hidden_out },
    ))
}

fn pooled_input_shape(p: &PoolOutput) -> Vec<usize> {
    let s = p.output.shape();
    vec![s[0], s[1] * 2, s[2] * 2]
}

/// Inference-style forward pass that keeps no trace.
pub fn forward_embed<R: Rng + ?Sized>(
    weights: &ModelWeights,
    config: &ModelConfig,
    image: &Tensor,
    mode: Mode,
    rng: &mut R,
) -> Result<Tensor> {
    Ok(forward(weights, config, image, mode, rng)?.0)
}

/// Accumulates (`+=`) parameter gradients of the embedding into `grads`.
///
/// Parameters named in `frozen` receive no gradient, and propagation stops
/// below the lowest trainable conv unless `want_input` is set, in which case
/// the gradient with respect to the image is returned.
pub fn backward(
    weights: &ModelWeights,
    config: &ModelConfig,
    trace: &ForwardTrace,
    grad_embedding: &Tensor,
    grads: &mut ModelWeights,
    frozen: &BTreeSet<String>,
    want_input: bool,
) -> Result<Option<Tensor>> {
    let plan = layer_plan(config);
    let trainable = |l: &Layer| !frozen.contains(&l.kernel_name());

    let fc2 = tensor::dense_affine_backward(&trace.hidden_out, weights.get("fc2/kernel")?, weights.get("fc2/bias")?, grad_embedding)?;
    if !frozen.contains("fc2/kernel") {
        grads.get_mut("fc2/kernel")?.add_assign(&fc2.weights)?;
        grads.get_mut("fc2/bias")?.add_assign(&fc2.bias)?;
    }
    let g_hidden = tensor::dropout_backward(trace.dropout_mask.as_deref(), &fc2.input);
    let g_hidden_pre = tensor::relu_backward(&trace.hidden_preact, &g_hidden)?;
    let fc1 = tensor::dense_affine_backward(&trace.head_input, weights.get("fc1/kernel")?, weights.get("fc1/bias")?, &g_hidden_pre)?;
    if !frozen.contains("fc1/kernel") {
        grads.get_mut("fc1/kernel")?.add_assign(&fc1.weights)?;
        grads.get_mut("fc1/bias")?.add_assign(&fc1.bias)?;
    }
    let mut tap_grads = tensor::split_channels(&fc1.input, &trace.tap_widths)?;

    // Index of the lowest conv whose parameters are trainable.
    let conv_layers: Vec<&Layer> = plan.iter().filter(|l| matches!(l.kind, LayerKind::Conv(_))).collect();
    let lowest = if want_input { Some(0) } else { conv_layers.iter().position(|l| trainable(l)) };
    let Some(lowest) = lowest else {
        return Ok(None);
    };

    let mut conv_index = conv_layers.len();
    let mut grad: Option<Tensor> = None;
    for (block, (in_shape, pool)) in trace.pools.iter().enumerate().rev() {
        let block = block + 1;
        let mut g_pool = grad.take();
        if config.skip_taps.contains(block) {
            let tg = tensor::global_avg_pool_backward(pool.output.shape(), &tap_grads.pop().expect("one grad per tap"))?;
            g_pool = Some(match g_pool {
                Some(mut g) => {
                    g.add_assign(&tg)?;
                    g
                }
                None => tg,
            });
        }
        let Some(g_pool) = g_pool else {
            // Nothing flows into this block (can only happen below the last tap).
            conv_index -= config.convs_per_block[block - 1];
            continue;
        };
        let mut g = tensor::maxpool2d_backward(in_shape, &pool.argmax, &g_pool)?;
        for _ in 0..config.convs_per_block[block - 1] {
            conv_index -= 1;
            let layer = conv_layers[conv_index];
            let LayerKind::Conv(spec) = &layer.kind else { unreachable!() };
            let g_pre = tensor::relu_backward(&trace.conv_preacts[conv_index], &g)?;
            let cg = tensor::conv2d_backward_with(
                &trace.conv_inputs[conv_index],
                weights.get(&layer.kernel_name())?,
                weights.get(&layer.bias_name())?,
                spec,
                &g_pre,
                conv_index > lowest || (want_input && conv_index == 0),
            )?;
            if trainable(layer) {
                grads.get_mut(&layer.kernel_name())?.add_assign(&cg.weights)?;
                grads.get_mut(&layer.bias_name())?.add_assign(&cg.bias)?;
            }
            if conv_index == lowest {
                return Ok(if want_input { cg.input } else { None });
            }
            g = cg.input.expect("input gradient requested above the lowest conv");
        }
        grad = Some(g);
    }
    Ok(None)
}

/// Outcome of a finite-difference check of the whole network.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NetworkGradcheck {
    pub max_relative_error: f64,
    pub checked: usize,
    /// Coordinates skipped because the perturbation crossed a ReLU kink or a
    /// pool tie, where the function is not differentiable.
    pub skipped_kinks: usize,
}

/// Central-difference check of `d(r·f(image))/d(param)` for a random
/// projection `r`, over `per_tensor` sampled coordinates of every parameter
/// tensor and of the input image. Dropout runs in train mode with a fixed mask.
pub fn gradcheck_network(config: &ModelConfig, seed: u64, per_tensor: usize, epsilon: f64) -> Result<NetworkGradcheck> {
    let config = ModelConfig { freeze_prefix: 0, ..config.clone() };
    let mut weights = build_network(&config, seed)?;
    // Small non-zero biases so no unit sits exactly at a kink.
    for (i, (name, t)) in weights.tensors.iter_mut().enumerate() {
        if name.ends_with("/bias") {
            let mut rng = rng_for(seed, &[1, i as u64]);
            t.data_mut().iter_mut().for_each(|b| *b = rng.gen_range(-0.1..0.1));
        }
    }
    let s = config.input_size;
    let mut rng = rng_for(seed, &[2]);
    let image = Tensor::new(vec![3, s, s], (0..3 * s * s).map(|_| rng.gen_range(0.0..1.0)).collect())?;
    let projection: Vec<f64> = (0..config.embedding_dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let dropout_seed = seed ^ 0x5eed;

    let eval = |w: &ModelWeights, img: &Tensor| -> Result<(f64, ForwardTrace)> {
        let (e, trace) = forward(w, &config, img, Mode::Train, &mut rng_for(dropout_seed, &[]))?;
        Ok((e.data().iter().zip(&projection).map(|(a, b)| a * b).sum(), trace))
    };

    let (_, trace) = eval(&weights, &image)?;
    let base_regime = trace.regime_fingerprint();
    let mut grads = ModelWeights::zeros(&config);
    let input_grad = backward(&weights, &config, &trace, &Tensor::from_vec(projection.clone()), &mut grads, &BTreeSet::new(), true)?
        .expect("input gradient requested");

    let mut report = NetworkGradcheck { max_relative_error: 0.0, checked: 0, skipped_kinks: 0 };
    let mut pick = rng_for(seed, &[3]);
    let names: Vec<String> = weights.tensors.keys().cloned().collect();
    for name in names.iter().map(Some).chain(std::iter::once(None)) {
        let len = match name {
            Some(n) => weights.get(n)?.len(),
            None => image.len(),
        };
        for _ in 0..per_tensor.min(len) {
            let idx = pick.gen_range(0..len);
            let mut values = [0.0; 2];
            let mut same_regime = true;
            for (slot, sign) in [1.0, -1.0].into_iter().enumerate() {
                let (v, t) = match name {
                    Some(n) => {
                        let mut w = weights.clone();
                        w.get_mut(n)?.data_mut()[idx] += sign * epsilon;
                        eval(&w, &image)?
                    }
                    None => {
                        let mut img = image.clone();
                        img.data_mut()[idx] += sign * epsilon;
                        eval(&weights, &img)?
                    }
                };
                same_regime &= t.regime_fingerprint() == base_regime;
                values[slot] = v;
            }
            if !same_regime {
                report.skipped_kinks += 1;
                continue;
            }
            let numeric = (values[0] - values[1]) / (2.0 * epsilon);
            let analytic = match name {
                Some(n) => grads.get(n)?.data()[idx],
                None => input_grad.data()[idx],
            };
            report.max_relative_error = report.max_relative_error.max(tensor::relative_error(analytic, numeric));
            report.checked += 1;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::rng_for;

    #[test]
    fn ablation_param_counts() {
        let expect = [19_961_664u64, 21_010_240, 21_534_528, 21_796_672, 21_927_744];
        for ((_, taps), want) in Taps::ablation_ladder().into_iter().zip(expect) {
            let cfg = ModelConfig { skip_taps: taps, ..ModelConfig::default() };
            assert_eq!(count_params(&cfg), want, "{taps}");
        }
    }

    #[test]
    fn hand_countable_params() {
        let cfg = ModelConfig {
            block_channels: [1; 5],
            convs_per_block: [1; 5],
            skip_taps: Taps::last_only(),
            hidden_dim: 1,
            embedding_dim: 1,
            ..ModelConfig::tiny()
        };
        // conv 3->1: 27+1; four convs 1->1: 10 each; fc1 1->1: 2; fc2: 2.
        assert_eq!(count_params(&cfg), 28 + 40 + 2 + 2);
        assert_eq!(build_network(&cfg, 0).unwrap().element_count(), 72);
    }

    #[test]
    fn default_build_matches_count() {
        let cfg = ModelConfig::default();
        let w = build_network(&cfg, 1).unwrap();
        assert_eq!(w.element_count(), 21_927_744);
    }

    #[test]
    fn build_is_deterministic() {
        let cfg = ModelConfig::tiny();
        assert_eq!(build_network(&cfg, 9).unwrap(), build_network(&cfg, 9).unwrap());
        assert_ne!(build_network(&cfg, 9).unwrap(), build_network(&cfg, 10).unwrap());
    }

    #[test]
    fn taps_parse() {
        assert_eq!("b1,b2,b3,b4,b5".parse::<Taps>().unwrap(), Taps::full());
        assert_eq!("b2,b3,b4".parse::<Taps>().unwrap(), "b2,b3,b4,b5".parse::<Taps>().unwrap());
        assert_eq!("block4_pool".parse::<Taps>().unwrap(), Taps::new([4]).unwrap());
        assert_eq!("none".parse::<Taps>().unwrap(), Taps::last_only());
        assert!("b7".parse::<Taps>().is_err());
    }

    #[test]
    fn concat_widths() {
        assert_eq!(ModelConfig::default().concat_width(), 1472);
        let no_skip = ModelConfig { skip_taps: Taps::last_only(), ..ModelConfig::default() };
        assert_eq!(no_skip.concat_width(), 512);
    }

    #[test]
    fn freeze_prefix_enumeration() {
        let none = ModelConfig { freeze_prefix: 0, ..ModelConfig::default() };
        assert!(freeze_layers(&none).is_empty());
        let frozen = freeze_layers(&ModelConfig::default());
        let want: BTreeSet<String> = [
            "block1_conv1", "block1_conv2", "block1_pool", "block2_conv1", "block2_conv2", "block2_pool",
            "block3_conv1", "block3_conv2", "block3_conv3", "block3_pool",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        assert_eq!(frozen, want);
        assert_eq!(frozen_param_names(&ModelConfig::default()).len(), 14);
    }

    #[test]
    fn zero_weights_give_zero_embedding() {
        let cfg = ModelConfig::tiny();
        let w = ModelWeights::zeros(&cfg);
        let img = Tensor::full(&[3, 32, 32], 0.7);
        let e = forward_embed(&w, &cfg, &img, Mode::Infer, &mut rng_for(0, &[])).unwrap();
        assert_eq!(e.len(), cfg.embedding_dim);
        assert!(e.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rejects_bad_image_sizes() {
        let cfg = ModelConfig::tiny();
        let w = ModelWeights::zeros(&cfg);
        let err = forward_embed(&w, &cfg, &Tensor::zeros(&[3, 30, 30]), Mode::Infer, &mut rng_for(0, &[])).unwrap_err();
        assert!(matches!(err, Error::Dimension { .. }));
    }

    #[test]
    fn infer_mode_is_pure() {
        let cfg = ModelConfig::tiny();
        let w = build_network(&cfg, 3).unwrap();
        let img = Tensor::full(&[3, 32, 32], 0.25);
        let a = forward_embed(&w, &cfg, &img, Mode::Infer, &mut rng_for(1, &[])).unwrap();
        let b = forward_embed(&w, &cfg, &img, Mode::Infer, &mut rng_for(2, &[])).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn embedding_width_independent_of_taps() {
        for (_, taps) in Taps::ablation_ladder() {
            let cfg = ModelConfig { skip_taps: taps, ..ModelConfig::tiny() };
            let w = build_network(&cfg, 0).unwrap();
            let e = forward_embed(&w, &cfg, &Tensor::full(&[3, 32, 32], 0.5), Mode::Infer, &mut rng_for(0, &[])).unwrap();
            assert_eq!(e.len(), cfg.embedding_dim);
        }
    }

    #[test]
    fn tiny_network_gradcheck() {
        let report = gradcheck_network(&ModelConfig::tiny(), 4, 4, 1e-5).unwrap();
        assert!(report.checked > 50);
        assert!(report.max_relative_error <= 1e-4, "{report:?}");
    }
}
