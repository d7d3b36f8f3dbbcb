use crate::error::Result;
use crate::layers::{Linear, INIT_STD};
use crate::registry::{Bound, Group, Init, ParamSink};
use crate::tensor::Var;

use super::{Mechanism, Sites};

/// Parallel attention branch: `s·(Tanh(x·W_down + b)·W_up + b)` added to
/// the projected queries, keys or values. One down-projection is shared and
/// every active site has its own zero-initialized up-projection.
#[derive(Clone, Copy, Debug)]
pub struct Patt {
    pub down: Linear,
    pub up_q: Option<Linear>,
    pub up_k: Option<Linear>,
    pub up_v: Option<Linear>,
    pub scale: f64,
}

/// Additive terms for the projected Q, K and V, each `[.., tokens, d]`.
#[derive(Clone, Copy, Debug, Default)]
pub struct QkvDelta<'t> {
    pub q: Option<Var<'t>>,
    pub k: Option<Var<'t>>,
    pub v: Option<Var<'t>>,
}

impl Patt {
    pub fn declare(
        sink: &mut dyn ParamSink,
        path: &str,
        dim: usize,
        bottle: usize,
        scale: f64,
        sites: Sites,
    ) -> Result<Self> {
        let group = Group::Petl(Mechanism::Patt);
        let down = Linear::declare(sink, &format!("{path}.down"), dim, bottle, true, group, Init::Normal(INIT_STD))?;
        let mut up = |on: bool, name: &str| -> Result<Option<Linear>> {
            if !on {
                return Ok(None);
            }
            Linear::declare(sink, &format!("{path}.{name}"), bottle, dim, true, group, Init::Zeros).map(Some)
        };
        Ok(Self {
            up_q: up(sites.q, "up_q")?,
            up_k: up(sites.k, "up_k")?,
            up_v: up(sites.v, "up_v")?,
            down,
            scale,
        })
    }

    pub fn count(dim: usize, bottle: usize, sites: Sites) -> u64 {
        let (d, b) = (dim as u64, bottle as u64);
        d * b + b + sites.count() as u64 * (b * d + d)
    }

    /// Count for the alternative where a single up-projection feeds every
    /// site. Not instantiated; reported next to [`Patt::count`].
    pub fn count_shared_up(dim: usize, bottle: usize) -> u64 {
        Self::count(dim, bottle, Sites { q: false, k: false, v: true })
    }

    /// Bottleneck activation `Tanh(x·W_down + b)`.
    pub fn hidden<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        self.down.forward(p, x)?.tanh()
    }

    /// Site terms for the normalized block input `x`.
    pub fn deltas<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<QkvDelta<'t>> {
        let h = self.hidden(p, x)?;
        let site = |up: Option<Linear>| -> Result<Option<Var<'t>>> {
            up.map(|l| l.forward(p, h)?.scale(self.scale)).transpose()
        };
        Ok(QkvDelta {
            q: site(self.up_q)?,
            k: site(self.up_k)?,
            v: site(self.up_v)?,
        })
    }
}
