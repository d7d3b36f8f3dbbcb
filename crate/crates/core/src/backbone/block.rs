use std::cell::OnceCell;
use std::rc::Rc;

use crate::error::Result;
use crate::layers::{LayerNorm, Linear, INIT_STD};
use crate::petl::{Adapter, Patt, PetlSpec, Prefix, Prompt, QkvDelta};
use crate::registry::{Bound, Group, Init, ParamId, ParamSink};
use crate::tensor::Var;

use super::attention::{multi_head_attention, KeyMask};
use super::config::ModelConfig;
use super::geometry::{bias_table_rows, window_partition, WindowPlan};

/// PETL modules attached to one block.
#[derive(Clone, Copy, Debug, Default)]
pub struct BlockPetl {
    pub adapter: Option<Adapter>,
    pub patt: Option<Patt>,
    pub prefix: Option<Prefix>,
    pub prompt: Option<Prompt>,
}

impl BlockPetl {
    fn declare(sink: &mut dyn ParamSink, path: &str, dim: usize, spec: &PetlSpec) -> Result<Self> {
        use crate::petl::Mechanism as M;
        let mut petl = BlockPetl::default();
        if spec.has(M::Prefix) && spec.d_token > 0 {
            petl.prefix = Some(Prefix::declare(
                sink,
                &format!("{path}.prefix"),
                dim,
                spec.d_token,
                spec.d_middle(),
                spec.prefix_transform,
            )?);
        }
        if let Some(placement) = spec.adapter_placement() {
            petl.adapter = Some(Adapter::declare(
                sink,
                &format!("{path}.adapter"),
                dim,
                spec.d_bottle,
                spec.s_adapter,
                placement,
            )?);
        }
        if spec.has(M::Prompt) && spec.d_prompt > 0 {
            petl.prompt = Some(Prompt::declare(sink, &format!("{path}.prompt"), dim, spec.d_prompt)?);
        }
        if spec.has(M::Patt) {
            petl.patt = Some(Patt::declare(
                sink,
                &format!("{path}.patt"),
                dim,
                spec.d_bottle,
                spec.s_patt,
                spec.patt_sites,
            )?);
        }
        Ok(petl)
    }

    fn front_tokens(&self) -> usize {
        self.prefix.map_or(0, |p| p.tokens)
    }

    fn back_tokens(&self) -> usize {
        self.prompt.map_or(0, |p| p.len)
    }
}

/// Index tables shared by every forward pass of a block.
#[derive(Debug)]
pub struct AttnPlan {
    pub windows: WindowPlan,
    pub key_mask: KeyMask,
    pub bias_index: Rc<Vec<Option<usize>>>,
    pub gather: Rc<Vec<Option<usize>>>,
    pub scatter: Rc<Vec<Option<usize>>>,
    pub keys: usize,
}

/// One transformer block: windowed attention then FFN, each pre-normed and
/// residual, with optional PETL hooks.
#[derive(Debug)]
pub struct SwinBlock {
    pub dim: usize,
    pub heads: usize,
    pub grid: [usize; 3],
    pub window: [usize; 3],
    pub shifted: bool,
    pub norm1: LayerNorm,
    pub qkv: Linear,
    pub rel_pos_bias: ParamId,
    pub proj: Linear,
    pub norm2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
    pub petl: BlockPetl,
    plan: OnceCell<Rc<AttnPlan>>,
}

impl SwinBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn declare(
        sink: &mut dyn ParamSink,
        path: &str,
        cfg: &ModelConfig,
        dim: usize,
        heads: usize,
        grid: [usize; 3],
        shifted: bool,
        spec: Option<&PetlSpec>,
    ) -> Result<Self> {
        let g = Group::Backbone;
        let w = Init::Normal(INIT_STD);
        let hidden = dim * cfg.ffn_ratio;
        let norm1 = LayerNorm::declare(sink, &format!("{path}.norm1"), dim, cfg.ln_eps, g)?;
        let qkv = Linear::declare(sink, &format!("{path}.attn.qkv"), dim, 3 * dim, true, g, w)?;
        let rel_pos_bias = sink.add(
            format!("{path}.attn.rel_pos_bias"),
            vec![bias_table_rows(cfg.window), heads],
            g,
            w,
        )?;
        let proj = Linear::declare(sink, &format!("{path}.attn.proj"), dim, dim, true, g, w)?;
        let norm2 = LayerNorm::declare(sink, &format!("{path}.norm2"), dim, cfg.ln_eps, g)?;
        let fc1 = Linear::declare(sink, &format!("{path}.mlp.fc1"), dim, hidden, true, g, w)?;
        let fc2 = Linear::declare(sink, &format!("{path}.mlp.fc2"), hidden, dim, true, g, w)?;
        let petl = match spec {
            Some(spec) => BlockPetl::declare(sink, path, dim, spec)?,
            None => BlockPetl::default(),
        };
        Ok(Self {
            dim,
            heads,
            grid,
            window: cfg.window,
            shifted,
            norm1,
            qkv,
            rel_pos_bias,
            proj,
            norm2,
            fc1,
            fc2,
            petl,
            plan: OnceCell::new(),
        })
    }

    pub fn plan(&self) -> Result<Rc<AttnPlan>> {
        if let Some(plan) = self.plan.get() {
            return Ok(Rc::clone(plan));
        }
        let layout = window_partition(self.grid, self.window, self.shifted)?;
        let windows = WindowPlan::new(&layout);
        let (front, back) = (self.petl.front_tokens(), self.petl.back_tokens());
        let plan = Rc::new(AttnPlan {
            key_mask: KeyMask {
                mask: Rc::new(windows.key_mask(front, back)),
                rows: windows.num_windows,
            },
            bias_index: Rc::new(windows.bias_index(self.heads, front, back)),
            gather: Rc::new(windows.gather.clone()),
            scatter: Rc::new(windows.scatter.clone()),
            keys: front + windows.tokens + back,
            windows,
        });
        Ok(Rc::clone(self.plan.get_or_init(|| plan)))
    }

    /// Attention sub-layer on windowed tokens; returns the `[b, L, d]`
    /// residual update and the attention probabilities.
    pub fn attention<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
        let plan = self.plan()?;
        let b = x.shape()[0];
        let (nw, n, d) = (plan.windows.num_windows, plan.windows.tokens, self.dim);
        let groups = b * nw;
        let ln1 = self.norm1.forward(p, x)?;
        let xw = ln1.gather_rows(Rc::clone(&plan.gather))?.reshape(&[groups, n, d])?;
        let qkv = self.qkv.forward(p, xw)?;
        let mut q = qkv.narrow(2, 0, d)?;
        let mut k = qkv.narrow(2, d, d)?;
        let mut v = qkv.narrow(2, 2 * d, d)?;
        if let Some(patt) = &self.petl.patt {
            let QkvDelta { q: dq, k: dk, v: dv } = patt.deltas(p, xw)?;
            if let Some(dq) = dq {
                q = q.add(dq)?;
            }
            if let Some(dk) = dk {
                k = k.add(dk)?;
            }
            if let Some(dv) = dv {
                v = v.add(dv)?;
            }
        }
        if let Some(prefix) = &self.petl.prefix {
            let (pk, pv) = prefix.keys_values(p)?;
            k = Var::concat(&[pk.broadcast_leading(groups)?, k], 1)?;
            v = Var::concat(&[pv.broadcast_leading(groups)?, v], 1)?;
        }
        if let Some(prompt) = &self.petl.prompt {
            let tokens = self.norm1.forward(p, prompt.tokens(p))?;
            let kv = self.qkv.forward(p, tokens)?;
            let (pk, pv) = (kv.narrow(1, d, d)?, kv.narrow(1, 2 * d, d)?);
            k = Var::concat(&[k, pk.broadcast_leading(groups)?], 1)?;
            v = Var::concat(&[v, pv.broadcast_leading(groups)?], 1)?;
        }
        let bias = p
            .var(self.rel_pos_bias)
            .gather_flat(Rc::clone(&plan.bias_index), &[nw, self.heads, n, plan.keys])?;
        let att = multi_head_attention(q, k, v, self.heads, Some(bias), Some(&plan.key_mask))?;
        let out = self
            .proj
            .forward(p, att.out)?
            .reshape(&[b, nw * n, d])?
            .gather_rows(Rc::clone(&plan.scatter))?;
        Ok((out, att.probs))
    }

    pub fn ffn<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let h = self.fc1.forward(p, x)?.gelu()?;
        self.fc2.forward(p, h)
    }

    /// `x: [b, L, d]` → `[b, L, d]`
    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let (attn, _) = self.attention(p, x)?;
        let x_hat = x.add(attn)?;
        let ln2 = self.norm2.forward(p, x_hat)?;
        let f = self.ffn(p, ln2)?;
        match &self.petl.adapter {
            Some(adapter) => adapter.apply(p, x_hat, ln2, f),
            None => x_hat.add(f),
        }
    }
}
