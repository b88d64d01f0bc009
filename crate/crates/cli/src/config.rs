//! Flat `key = value` run configuration shared by every subcommand.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use mildnet_core::ann::IndexConfig;
use mildnet_core::catalog::features::FusionWeights;
use mildnet_core::catalog::MiningConfig;
use mildnet_core::data::SynthConfig;
use mildnet_core::graph::{ModelConfig, Taps, BLOCKS};
use mildnet_core::losses::{LossConfig, LossKind};
use mildnet_core::trainer::{OptimizerConfig, OptimizerKind};
use serde::Serialize;

/// Bad configuration input. Reported as a usage error (exit 1).
#[derive(Debug)]
pub struct ConfigError {
    pub source_name: String,
    pub line: Option<usize>,
    pub key: Option<String>,
    pub detail: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.source_name)?;
        if let Some(line) = self.line {
            write!(f, " line {line}")?;
        }
        if let Some(key) = &self.key {
            write!(f, ": key `{key}`")?;
        }
        write!(f, ": {}", self.detail)
    }
}

impl std::error::Error for ConfigError {}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainingConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub loss: LossConfig,
    pub augment: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct IndexSettings {
    pub n_trees: usize,
    pub leaf_capacity: usize,
    pub search_budget: Option<usize>,
    pub epsilon: f64,
    pub top_k: usize,
    /// Pipeline candidates per query; `None` inspects the whole partition.
    pub pipeline_budget: Option<usize>,
}

impl IndexSettings {
    pub fn index_config(&self) -> IndexConfig {
        IndexConfig {
            n_trees: self.n_trees,
            leaf_capacity: self.leaf_capacity,
            search_budget: self.search_budget,
            epsilon: self.epsilon,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SynthSettings {
    pub triplets: usize,
    pub classes: usize,
    pub image_size: usize,
    pub val_fraction: f64,
    pub catalog_items: usize,
    pub catalog_partitions: usize,
}

impl SynthSettings {
    pub fn synth_config(&self) -> SynthConfig {
        SynthConfig {
            triplets: self.triplets,
            classes: self.classes,
            image_size: self.image_size,
            val_fraction: self.val_fraction,
            ..SynthConfig::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub optimizer: OptimizerConfig,
    pub training: TrainingConfig,
    pub index: IndexSettings,
    pub fusion: FusionWeights,
    pub mining: MiningConfig,
    pub synth: SynthSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        let synth = SynthConfig::default();
        Self {
            model: ModelConfig::default(),
            optimizer: OptimizerConfig::default(),
            training: TrainingConfig { batch_size: 96, epochs: 10, loss: LossConfig::default(), augment: true },
            index: IndexSettings {
                n_trees: 10,
                leaf_capacity: 16,
                search_budget: None,
                epsilon: 0.0,
                top_k: 10,
                pipeline_budget: None,
            },
            fusion: FusionWeights::default(),
            mining: MiningConfig::default(),
            synth: SynthSettings {
                triplets: synth.triplets,
                classes: synth.classes,
                image_size: synth.image_size,
                val_fraction: synth.val_fraction,
                catalog_items: 200,
                catalog_partitions: 4,
            },
        }
    }
}

/// Every accepted key with its description.
pub const KEYS: &[(&str, &str)] = &[
    ("block_channels", "output channels of the five conv blocks"),
    ("convs_per_block", "3x3 convs in each block"),
    ("input_size", "square input side, a multiple of 32"),
    ("skip_taps", "tapped block pools (block5 is always tapped)"),
    ("embedding_dim", "embedding width"),
    ("hidden_dim", "hidden dense width"),
    ("dropout_rate", "dropout after the hidden dense layer"),
    ("freeze_prefix", "leading layers kept fixed during training"),
    ("optimizer", "sgd_momentum | rmsprop"),
    ("lr", "learning rate"),
    ("momentum", "SGD momentum"),
    ("rms_decay", "RMSProp decay"),
    ("rms_epsilon", "RMSProp epsilon"),
    ("batch_size", "triplets per step"),
    ("epochs", "training epochs"),
    ("loss", "hinge | contrastive"),
    ("margin", "loss margin"),
    ("augment", "random flips, zoom, shear and rotation during training"),
    ("n_trees", "random-projection trees"),
    ("leaf_capacity", "items per leaf"),
    ("search_budget", "items inspected per query (default: n_trees*leaf_capacity*top_k)"),
    ("epsilon", "nominal approximation factor"),
    ("top_k", "neighbours returned"),
    ("pipeline_budget", "pipeline candidates per query (all: whole partition)"),
    ("fusion_structure", "structure weight in the fused distance"),
    ("fusion_pattern", "pattern weight in the fused distance"),
    ("fusion_color", "colour weight in the fused distance"),
    ("mine_count", "triplets to mine"),
    ("in_class_ratio", "in-class share of mined triplets"),
    ("top_p", "positives come from the top P neighbours"),
    ("negative_rank_min", "first rank of in-class negatives"),
    ("negative_rank_max", "last rank of in-class negatives"),
    ("synth_triplets", "synthetic triplets"),
    ("synth_classes", "synthetic classes"),
    ("synth_image_size", "synthetic image side"),
    ("synth_val_fraction", "held-out share of synthetic triplets"),
    ("catalog_items", "synthetic catalog items"),
    ("catalog_partitions", "synthetic catalog partitions"),
];

fn parse<T: FromStr>(value: &str) -> Result<T, String>
where
    T::Err: fmt::Display,
{
    value.parse::<T>().map_err(|e| format!("cannot parse `{value}`: {e}"))
}

fn parse_bool(value: &str) -> Result<bool, String> {
    match value.to_ascii_lowercase().as_str() {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err(format!("expected true or false, got `{value}`")),
    }
}

fn parse_blocks(value: &str) -> Result<[usize; BLOCKS], String> {
    let parts = value.split(',').map(|p| parse::<usize>(p.trim())).collect::<Result<Vec<_>, _>>()?;
    parts.try_into().map_err(|v: Vec<usize>| format!("expected {BLOCKS} comma-separated values, got {}", v.len()))
}

fn parse_budget(value: &str, auto: &str) -> Result<Option<usize>, String> {
    if value.eq_ignore_ascii_case(auto) {
        Ok(None)
    } else {
        parse(value).map(Some)
    }
}

fn show_budget(v: Option<usize>, auto: &str) -> String {
    v.map_or(auto.to_string(), |n| n.to_string())
}

impl RunConfig {
    /// Named preset: `default` or `tiny`.
    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "default" => Some(Self::default()),
            "tiny" => Some(Self::tiny()),
            _ => None,
        }
    }

    /// Desk-scale preset: the tiny network trained with RMSProp on batches
    /// of 16.
    pub fn tiny() -> Self {
        let d = Self::default();
        Self {
            model: ModelConfig::tiny(),
            optimizer: OptimizerConfig { kind: OptimizerKind::Rmsprop, ..d.optimizer },
            training: TrainingConfig { batch_size: 16, ..d.training },
            ..d
        }
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        let v = value.trim();
        match key {
            "block_channels" => self.model.block_channels = parse_blocks(v)?,
            "convs_per_block" => self.model.convs_per_block = parse_blocks(v)?,
            "input_size" => self.model.input_size = parse(v)?,
            "skip_taps" => self.model.skip_taps = parse::<Taps>(v)?,
            "embedding_dim" => self.model.embedding_dim = parse(v)?,
            "hidden_dim" => self.model.hidden_dim = parse(v)?,
            "dropout_rate" => self.model.dropout_rate = parse(v)?,
            "freeze_prefix" => self.model.freeze_prefix = parse(v)?,
            "optimizer" => self.optimizer.kind = parse(v)?,
            "lr" => self.optimizer.lr = parse(v)?,
            "momentum" => self.optimizer.momentum = parse(v)?,
            "rms_decay" => self.optimizer.rms_decay = parse(v)?,
            "rms_epsilon" => self.optimizer.rms_epsilon = parse(v)?,
            "batch_size" => self.training.batch_size = parse(v)?,
            "epochs" => self.training.epochs = parse(v)?,
            "loss" => self.training.loss.kind = parse::<LossKind>(v)?,
            "margin" => self.training.loss.margin = parse(v)?,
            "augment" => self.training.augment = parse_bool(v)?,
            "n_trees" => self.index.n_trees = parse(v)?,
            "leaf_capacity" => self.index.leaf_capacity = parse(v)?,
            "search_budget" => self.index.search_budget = parse_budget(v, "default")?,
            "epsilon" => self.index.epsilon = parse(v)?,
            "top_k" => self.index.top_k = parse(v)?,
            "pipeline_budget" => self.index.pipeline_budget = parse_budget(v, "all")?,
            "fusion_structure" => self.fusion.structure = parse(v)?,
            "fusion_pattern" => self.fusion.pattern = parse(v)?,
            "fusion_color" => self.fusion.color = parse(v)?,
            "mine_count" => self.mining.count = parse(v)?,
            "in_class_ratio" => self.mining.in_class_ratio = parse(v)?,
            "top_p" => self.mining.top_p = parse(v)?,
            "negative_rank_min" => self.mining.negative_ranks.0 = parse(v)?,
            "negative_rank_max" => self.mining.negative_ranks.1 = parse(v)?,
            "synth_triplets" => self.synth.triplets = parse(v)?,
            "synth_classes" => self.synth.classes = parse(v)?,
            "synth_image_size" => self.synth.image_size = parse(v)?,
            "synth_val_fraction" => self.synth.val_fraction = parse(v)?,
            "catalog_items" => self.synth.catalog_items = parse(v)?,
            "catalog_partitions" => self.synth.catalog_partitions = parse(v)?,
            _ => return Err("unknown key".to_string()),
        }
        Ok(())
    }

    /// Current value of `key`, in the syntax `set` accepts.
    pub fn get(&self, key: &str) -> Option<String> {
        let join = |b: &[usize; BLOCKS]| b.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",");
        Some(match key {
            "block_channels" => join(&self.model.block_channels),
            "convs_per_block" => join(&self.model.convs_per_block),
            "input_size" => self.model.input_size.to_string(),
            "skip_taps" => self.model.skip_taps.to_string(),
            "embedding_dim" => self.model.embedding_dim.to_string(),
            "hidden_dim" => self.model.hidden_dim.to_string(),
            "dropout_rate" => self.model.dropout_rate.to_string(),
            "freeze_prefix" => self.model.freeze_prefix.to_string(),
            "optimizer" => self.optimizer.kind.to_string(),
            "lr" => self.optimizer.lr.to_string(),
            "momentum" => self.optimizer.momentum.to_string(),
            "rms_decay" => self.optimizer.rms_decay.to_string(),
            "rms_epsilon" => self.optimizer.rms_epsilon.to_string(),
            "batch_size" => self.training.batch_size.to_string(),
            "epochs" => self.training.epochs.to_string(),
            "loss" => self.training.loss.kind.to_string(),
            "margin" => self.training.loss.margin.to_string(),
            "augment" => self.training.augment.to_string(),
            "n_trees" => self.index.n_trees.to_string(),
            "leaf_capacity" => self.index.leaf_capacity.to_string(),
            "search_budget" => show_budget(self.index.search_budget, "default"),
            "epsilon" => self.index.epsilon.to_string(),
            "top_k" => self.index.top_k.to_string(),
            "pipeline_budget" => show_budget(self.index.pipeline_budget, "all"),
            "fusion_structure" => self.fusion.structure.to_string(),
            "fusion_pattern" => self.fusion.pattern.to_string(),
            "fusion_color" => self.fusion.color.to_string(),
            "mine_count" => self.mining.count.to_string(),
            "in_class_ratio" => self.mining.in_class_ratio.to_string(),
            "top_p" => self.mining.top_p.to_string(),
            "negative_rank_min" => self.mining.negative_ranks.0.to_string(),
            "negative_rank_max" => self.mining.negative_ranks.1.to_string(),
            "synth_triplets" => self.synth.triplets.to_string(),
            "synth_classes" => self.synth.classes.to_string(),
            "synth_image_size" => self.synth.image_size.to_string(),
            "synth_val_fraction" => self.synth.val_fraction.to_string(),
            "catalog_items" => self.synth.catalog_items.to_string(),
            "catalog_partitions" => self.synth.catalog_partitions.to_string(),
            _ => return None,
        })
    }

    /// The whole config as a file `load_config` reads back to an equal value.
    pub fn to_text(&self) -> String {
        KEYS.iter().map(|(k, _)| format!("{k} = {}\n", self.get(k).expect("every listed key has a value"))).collect()
    }

    /// Module-level checks, so bad values surface before any work starts.
    pub fn validate(&self) -> Result<(), String> {
        self.model.validate().map_err(|e| e.to_string())?;
        self.optimizer.validate().map_err(|e| e.to_string())?;
        self.training.loss.validate().map_err(|e| e.to_string())?;
        if self.training.batch_size == 0 {
            return Err("batch_size must be >= 1".into());
        }
        self.index.index_config().validate().map_err(|e| e.to_string())?;
        if self.index.top_k == 0 {
            return Err("top_k must be >= 1".into());
        }
        if self.index.pipeline_budget == Some(0) {
            return Err("pipeline_budget must be >= 1".into());
        }
        self.fusion.normalized().map_err(|e| e.to_string())?;
        self.mining.validate().map_err(|e| e.to_string())?;
        Ok(())
    }
}

/// Parses `key = value` lines on top of `base`. Blank lines and `#`
/// comments are skipped.
pub fn parse_config(text: &str, base: RunConfig, source_name: &str) -> Result<RunConfig, ConfigError> {
    let mut cfg = base;
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let err = |key: Option<&str>, detail: String| ConfigError {
            source_name: source_name.to_string(),
            line: Some(i + 1),
            key: key.map(str::to_string),
            detail,
        };
        let (key, value) = line.split_once('=').ok_or_else(|| err(None, format!("expected `key = value`, got `{line}`")))?;
        let key = key.trim();
        cfg.set(key, value).map_err(|d| err(Some(key), d))?;
    }
    Ok(cfg)
}

/// Resolves `--config` (a preset name or a file; absent means defaults) and
/// applies `overrides` in order, so later entries win.
pub fn load_config(config: Option<&str>, overrides: &[(String, String)]) -> Result<RunConfig, ConfigError> {
    let mut cfg = match config {
        None => RunConfig::default(),
        Some(name) => match RunConfig::preset(name) {
            Some(c) => c,
            None => {
                let text = fs::read_to_string(Path::new(name)).map_err(|e| ConfigError {
                    source_name: name.to_string(),
                    line: None,
                    key: None,
                    detail: e.to_string(),
                })?;
                parse_config(&text, RunConfig::default(), name)?
            }
        },
    };
    for (key, value) in overrides {
        cfg.set(key, value).map_err(|detail| ConfigError {
            source_name: "command line".into(),
            line: None,
            key: Some(key.clone()),
            detail,
        })?;
    }
    cfg.validate().map_err(|detail| ConfigError {
        source_name: config.unwrap_or("defaults").to_string(),
        line: None,
        key: None,
        detail,
    })?;
    Ok(cfg)
}

/// Splits a `--set key=value` argument.
pub fn parse_override(s: &str) -> Result<(String, String), String> {
    let (k, v) = s.split_once('=').ok_or_else(|| format!("expected key=value, got `{s}`"))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let c = parse_config("", RunConfig::default(), "t").unwrap();
        assert_eq!(c.optimizer.lr, 0.001);
        assert_eq!(c.optimizer.momentum, 0.9);
        assert_eq!(c.training.batch_size, 96);
        assert_eq!(c.training.loss.margin, 1.0);
        assert_eq!(c, RunConfig::default());
    }

    #[test]
    fn text_round_trip_for_presets() {
        for c in [RunConfig::default(), RunConfig::tiny()] {
            assert_eq!(parse_config(&c.to_text(), RunConfig::default(), "t").unwrap(), c);
        }
        assert_eq!(KEYS.len(), RunConfig::default().to_text().lines().count());
    }

    #[test]
    fn errors_name_line_and_key() {
        let e = parse_config("lr = 0.01\n# note\nthis is not valid\n", RunConfig::default(), "f").unwrap_err();
        assert_eq!(e.line, Some(3));
        let e = parse_config("lr = 0.01\nbogus = 3\n", RunConfig::default(), "f").unwrap_err();
        assert_eq!((e.line, e.key.as_deref()), (Some(2), Some("bogus")));
        let e = parse_config("epochs = ten\n", RunConfig::default(), "f").unwrap_err();
        assert_eq!((e.line, e.key.as_deref()), (Some(1), Some("epochs")));
        assert!(e.to_string().contains("line 1"));
    }

    #[test]
    fn overrides_win() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.conf");
        fs::write(&path, "lr = 0.01\nbatch_size = 8\n").unwrap();
        let c = load_config(Some(path.to_str().unwrap()), &[("lr".into(), "0.05".into())]).unwrap();
        assert_eq!((c.optimizer.lr, c.training.batch_size), (0.05, 8));
        assert!(load_config(None, &[("lr".into(), "-1".into())]).is_err());
    }
}
