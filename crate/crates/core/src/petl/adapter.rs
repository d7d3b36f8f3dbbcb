use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::layers::{Linear, INIT_STD};
use crate::registry::{Bound, Group, Init, ParamSink};
use crate::tensor::Var;

use super::Mechanism;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Placement {
    /// Branch reads the normalized FFN input and runs beside the FFN.
    Parallel,
    /// Branch reads the FFN output.
    Sequential,
}

/// Bottleneck `ReLU(x·W_down + b)·W_up + b`, scaled by `s`. `W_up` starts at
/// zero so an untrained adapter is the identity.
#[derive(Clone, Copy, Debug)]
pub struct Adapter {
    pub down: Linear,
    pub up: Linear,
    pub scale: f64,
    pub placement: Placement,
}

impl Adapter {
    pub fn declare(
        sink: &mut dyn ParamSink,
        path: &str,
        dim: usize,
        bottle: usize,
        scale: f64,
        placement: Placement,
    ) -> Result<Self> {
        let group = Group::Petl(match placement {
            Placement::Parallel => Mechanism::AdapterParallel,
            Placement::Sequential => Mechanism::AdapterSequential,
        });
        Ok(Self {
            down: Linear::declare(sink, &format!("{path}.down"), dim, bottle, true, group, Init::Normal(INIT_STD))?,
            up: Linear::declare(sink, &format!("{path}.up"), bottle, dim, true, group, Init::Zeros)?,
            scale,
            placement,
        })
    }

    /// Parameter count for width `dim`.
    pub fn count(dim: usize, bottle: usize) -> u64 {
        let (d, b) = (dim as u64, bottle as u64);
        2 * d * b + b + d
    }

    /// The scaled branch output for branch input `x`.
    pub fn branch<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let h = self.down.forward(p, x)?.relu()?;
        self.up.forward(p, h)?.scale(self.scale)
    }

    /// Combines the block's residual `x_hat`, its normalized FFN input
    /// `ln2` and FFN output `ffn` into the block output.
    pub fn apply<'t>(&self, p: &Bound<'t>, x_hat: Var<'t>, ln2: Var<'t>, ffn: Var<'t>) -> Result<Var<'t>> {
        let input = match self.placement {
            Placement::Parallel => ln2,
            Placement::Sequential => ffn,
        };
        x_hat.add(ffn)?.add(self.branch(p, input)?)
    }
}
