//! SGD with momentum and RMSProp over [`ModelWeights`].

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{ModelConfig, ModelWeights};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    SgdMomentum,
    Rmsprop,
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OptimizerKind::SgdMomentum => "sgd_momentum",
            OptimizerKind::Rmsprop => "rmsprop",
        })
    }
}

impl FromStr for OptimizerKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "sgd_momentum" | "sgd" => Ok(OptimizerKind::SgdMomentum),
            "rmsprop" => Ok(OptimizerKind::Rmsprop),
            other => Err(Error::param(format!("unknown optimizer `{other}` (sgd_momentum|rmsprop)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub momentum: f64,
    pub rms_decay: f64,
    pub rms_epsilon: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self { kind: OptimizerKind::SgdMomentum, lr: 0.001, momentum: 0.9, rms_decay: 0.9, rms_epsilon: 1e-7 }
    }
}

impl OptimizerConfig {
    /// `lr == 0` is accepted so a run can be replayed without updates.
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::param(format!("lr must be >= 0, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::param(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        if !(0.0..1.0).contains(&self.rms_decay) {
            return Err(Error::param(format!("rms_decay {} outside [0, 1)", self.rms_decay)));
        }
        if self.rms_epsilon.is_nan() || self.rms_epsilon <= 0.0 {
            return Err(Error::param(format!("rms_epsilon must be > 0, got {}", self.rms_epsilon)));
        }
        Ok(())
    }
}

/// Optimizer hyperparameters plus one slot tensor per parameter: velocity
/// for SGD, squared-gradient average for RMSProp.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub config: OptimizerConfig,
    pub slots: ModelWeights,
    pub steps: u64,
}

impl OptimizerState {
    pub fn new(config: OptimizerConfig, model: &ModelConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config, slots: ModelWeights::zeros(model), steps: 0 })
    }

    /// Applies one update to every parameter not named in `frozen`.
    pub fn step(&mut self, weights: &mut ModelWeights, grads: &ModelWeights, frozen: &BTreeSet<String>) -> Result<()> {
        match self.config.kind {
            OptimizerKind::SgdMomentum => sgd_momentum_step(weights, grads, self, frozen),
            OptimizerKind::Rmsprop => rmsprop_step(weights, grads, self, frozen),
        }
    }
}

fn for_each_param(
    weights: &mut ModelWeights,
    grads: &ModelWeights,
    slots: &mut ModelWeights,
    frozen: &BTreeSet<String>,
    mut f: impl FnMut(&mut f64, f64, &mut f64),
) -> Result<()> {
    for (name, w) in weights.tensors.iter_mut() {
        if frozen.contains(name) {
            continue;
        }
        let g = grads.get(name)?;
        let s = slots.get_mut(name)?;
        g.expect_shape(w.shape(), name)?;
        s.expect_shape(w.shape(), name)?;
        for ((w, &g), s) in w.data_mut().iter_mut().zip(g.data()).zip(s.data_mut()) {
            f(w, g, s);
        }
    }
    Ok(())
}

/// `v = momentum * v - lr * g; w += v`.
pub fn sgd_momentum_step(
    weights: &mut ModelWeights,
    grads: &ModelWeights,
    state: &mut OptimizerState,
    frozen: &BTreeSet<String>,
) -> Result<()> {
    let OptimizerConfig { lr, momentum, .. } = state.config;
    for_each_param(weights, grads, &mut state.slots, frozen, |w, g, v| {
        *v = momentum * *v - lr * g;
        *w += *v;
    })?;
    state.steps += 1;
    Ok(())
}

/// `a = decay * a + (1 - decay) * g^2; w -= lr * g / sqrt(a + eps)`.
pub fn rmsprop_step(
    weights: &mut ModelWeights,
    grads: &ModelWeights,
    state: &mut OptimizerState,
    frozen: &BTreeSet<String>,
) -> Result<()> {
    let OptimizerConfig { lr, rms_decay, rms_epsilon, .. } = state.config;
    for_each_param(weights, grads, &mut state.slots, frozen, |w, g, a| {
        *a = rms_decay * *a + (1.0 - rms_decay) * g * g;
        *w -= lr * g / (*a + rms_epsilon).sqrt();
    })?;
    state.steps += 1;
    Ok(())
}
