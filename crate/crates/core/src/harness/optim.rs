use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::registry::ParameterRegistry;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Momentum,
    Adam,
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Momentum => "momentum",
            OptimizerKind::Adam => "adam",
        })
    }
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sgd" => Ok(OptimizerKind::Sgd),
            "momentum" | "sgd_momentum" => Ok(OptimizerKind::Momentum),
            "adam" => Ok(OptimizerKind::Adam),
            other => Err(Error::config(format!("unknown optimizer `{other}`"))),
        }
    }
}

/// Optimizer and schedule settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub momentum: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub steps: usize,
    pub batch_size: usize,
    /// Evaluate every this many steps in addition to epoch ends; 0 turns
    /// the extra evaluations off.
    pub eval_every: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Adam,
            lr: 1e-3,
            momentum: 0.9,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            steps: 200,
            batch_size: 16,
            eval_every: 0,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let finite = [self.lr, self.momentum, self.beta1, self.beta2, self.eps];
        if finite.iter().any(|v| !v.is_finite()) || self.lr < 0.0 {
            return Err(Error::config("optimizer hyperparameters must be finite and lr >= 0"));
        }
        if !(0.0..1.0).contains(&self.momentum) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("momentum and betas must lie in [0, 1)"));
        }
        if self.eps <= 0.0 {
            return Err(Error::config("optimizer eps must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        Ok(())
    }
}

/// First-order update rule over the trainable parameters of a registry.
/// State is keyed by registry position.
#[derive(Clone, Debug)]
pub struct Optimizer {
    config: OptimizerConfig,
    step: u64,
    first: Vec<Option<Vec<f64>>>,
    second: Vec<Option<Vec<f64>>>,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        })
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update using the gradients stored on each trainable
    /// parameter. Frozen parameters and parameters without a gradient are
    /// skipped.
    pub fn step(&mut self, registry: &mut ParameterRegistry) {
        self.step += 1;
        let n = registry.len();
        self.first.resize(n, None);
        self.second.resize(n, None);
        let c = self.config.clone();
        let t = self.step as i32;
        let (bc1, bc2) = (1.0 - c.beta1.powi(t), 1.0 - c.beta2.powi(t));
        for (i, p) in registry.iter_mut().enumerate() {
            if p.frozen() {
                continue;
            }
            let Some(grad) = p.tensor().grad().map(<[f64]>::to_vec) else {
                continue;
            };
            let len = grad.len();
            let w = p.tensor_mut().data_mut();
            match c.kind {
                OptimizerKind::Sgd => {
                    for (w, g) in w.iter_mut().zip(&grad) {
                        *w -= c.lr * g;
                    }
                }
                OptimizerKind::Momentum => {
                    let v = self.first[i].get_or_insert_with(|| vec![0.0; len]);
                    for ((w, g), v) in w.iter_mut().zip(&grad).zip(v.iter_mut()) {
                        *v = c.momentum * *v + g;
                        *w -= c.lr * *v;
                    }
                }
                OptimizerKind::Adam => {
                    let m = self.first[i].get_or_insert_with(|| vec![0.0; len]);
                    let s = self.second[i].get_or_insert_with(|| vec![0.0; len]);
                    for (((w, g), m), s) in w.iter_mut().zip(&grad).zip(m.iter_mut()).zip(s.iter_mut()) {
                        *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                        *s = c.beta2 * *s + (1.0 - c.beta2) * g * g;
                        let m_hat = *m / bc1;
                        let s_hat = *s / bc2;
                        *w -= c.lr * m_hat / (s_hat.sqrt() + c.eps);
                    }
                }
            }
        }
    }
}
