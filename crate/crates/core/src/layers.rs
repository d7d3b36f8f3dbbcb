//! Parameter handles for the two layer shapes everything is built from.

use crate::error::Result;
use crate::registry::{Bound, Group, Init, ParamId, ParamSink};
use crate::tensor::Var;

/// Standard deviation of every randomly initialized weight.
pub const INIT_STD: f64 = 0.02;

/// `y = x·W + b` with `W: [in, out]`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn declare(
        sink: &mut dyn ParamSink,
        path: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        group: Group,
        weight_init: Init,
    ) -> Result<Self> {
        let weight = sink.add(format!("{path}.weight"), vec![fan_in, fan_out], group, weight_init)?;
        let bias = if bias {
            Some(sink.add(format!("{path}.bias"), vec![fan_out], group, Init::Zeros)?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            fan_in,
            fan_out,
        })
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let y = x.matmul(p.var(self.weight))?;
        match self.bias {
            Some(b) => y.add(p.var(b)),
            None => Ok(y),
        }
    }
}

/// Layer normalization over the last axis.
#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn declare(sink: &mut dyn ParamSink, path: &str, dim: usize, eps: f64, group: Group) -> Result<Self> {
        Ok(Self {
            gamma: sink.add(format!("{path}.weight"), vec![dim], group, Init::Ones)?,
            beta: sink.add(format!("{path}.bias"), vec![dim], group, Init::Zeros)?,
            eps,
        })
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        x.layer_norm(p.var(self.gamma), p.var(self.beta), self.eps)
    }
}
