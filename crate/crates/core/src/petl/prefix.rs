use crate::error::Result;
use crate::layers::{Linear, INIT_STD};
use crate::registry::{Bound, Group, Init, ParamId, ParamSink};
use crate::tensor::Var;

use super::Mechanism;

/// Learned key and value prefixes for one block, concatenated in front of
/// every window's keys and values.
///
/// With the transform enabled, both banks pass through the same two-layer
/// map `Tanh(P·W_pk + b)·W_pv + b` before being split across heads.
#[derive(Clone, Copy, Debug)]
pub struct Prefix {
    pub p_k: ParamId,
    pub p_v: ParamId,
    pub transform: Option<(Linear, Linear)>,
    pub tokens: usize,
}

impl Prefix {
    pub fn declare(
        sink: &mut dyn ParamSink,
        path: &str,
        dim: usize,
        tokens: usize,
        middle: usize,
        transform: bool,
    ) -> Result<Self> {
        let group = Group::Petl(Mechanism::Prefix);
        let p_k = sink.add(format!("{path}.p_k"), vec![tokens, dim], group, Init::Normal(INIT_STD))?;
        let p_v = sink.add(format!("{path}.p_v"), vec![tokens, dim], group, Init::Normal(INIT_STD))?;
        let transform = if transform {
            let down = Linear::declare(
                sink,
                &format!("{path}.transform.down"),
                dim,
                middle,
                true,
                group,
                Init::Normal(INIT_STD),
            )?;
            let up = Linear::declare(
                sink,
                &format!("{path}.transform.up"),
                middle,
                dim,
                true,
                group,
                Init::Normal(INIT_STD),
            )?;
            Some((down, up))
        } else {
            None
        };
        Ok(Self {
            p_k,
            p_v,
            transform,
            tokens,
        })
    }

    pub fn count(dim: usize, tokens: usize, middle: usize, transform: bool) -> u64 {
        let (d, e, m) = (dim as u64, tokens as u64, middle as u64);
        let bank = 2 * e * d;
        if transform {
            bank + d * m + m + m * d + d
        } else {
            bank
        }
    }

    /// Key and value prefixes, each `[tokens, d]`.
    pub fn keys_values<'t>(&self, p: &Bound<'t>) -> Result<(Var<'t>, Var<'t>)> {
        let (k, v) = (p.var(self.p_k), p.var(self.p_v));
        match self.transform {
            None => Ok((k, v)),
            Some((down, up)) => {
                let map = |x: Var<'t>| -> Result<Var<'t>> { up.forward(p, down.forward(p, x)?.tanh()?) };
                Ok((map(k)?, map(v)?))
            }
        }
    }
}
