use crate::error::Result;
use crate::layers::INIT_STD;
use crate::registry::{Bound, Group, Init, ParamId, ParamSink};
use crate::tensor::Var;

use super::Mechanism;

/// Learned prompt tokens for one block. They are normalized and projected
/// like ordinary tokens but only contribute keys and values, appended to
/// every window; no output is produced at prompt positions.
#[derive(Clone, Copy, Debug)]
pub struct Prompt {
    pub tokens: ParamId,
    pub len: usize,
}

impl Prompt {
    pub fn declare(sink: &mut dyn ParamSink, path: &str, dim: usize, len: usize) -> Result<Self> {
        let group = Group::Petl(Mechanism::Prompt);
        Ok(Self {
            tokens: sink.add(format!("{path}.tokens"), vec![len, dim], group, Init::Normal(INIT_STD))?,
            len,
        })
    }

    pub fn count(dim: usize, len: usize) -> u64 {
        (dim * len) as u64
    }

    pub fn tokens<'t>(&self, p: &Bound<'t>) -> Var<'t> {
        p.var(self.tokens)
    }
}
