//! Closed-form parameter counts. These are written from the layer formulas
//! and never consult a built model, so they can be checked against
//! enumeration of one.

use std::fmt;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::backbone::geometry::bias_table_rows;
use crate::backbone::ModelConfig;
use crate::error::Result;
use crate::petl::{Adapter, Mechanism, Patt, PetlSpec, Prefix, Prompt};

use super::{Group, ParamInfo};

/// Renders a count in millions with two decimals, e.g. `0.18M`.
pub fn millions(count: u64) -> String {
    format!("{:.2}M", count as f64 / 1e6)
}

fn linear(fan_in: usize, fan_out: usize, bias: bool) -> u64 {
    (fan_in * fan_out + if bias { fan_out } else { 0 }) as u64
}

fn norm(dim: usize) -> u64 {
    2 * dim as u64
}

pub fn head_count(dim: usize, classes: usize) -> u64 {
    linear(dim, classes, true)
}

pub fn bias_table_count(cfg: &ModelConfig, heads: usize) -> u64 {
    (bias_table_rows(cfg.window) * heads) as u64
}

/// Per-block counts split by position.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockCounts {
    pub norm1: u64,
    pub qkv: u64,
    pub rel_pos_bias: u64,
    pub proj: u64,
    pub norm2: u64,
    pub fc1: u64,
    pub fc2: u64,
}

impl BlockCounts {
    pub fn new(cfg: &ModelConfig, dim: usize, heads: usize) -> Self {
        let hidden = dim * cfg.ffn_ratio;
        Self {
            norm1: norm(dim),
            qkv: linear(dim, 3 * dim, true),
            rel_pos_bias: bias_table_count(cfg, heads),
            proj: linear(dim, dim, true),
            norm2: norm(dim),
            fc1: linear(dim, hidden, true),
            fc2: linear(hidden, dim, true),
        }
    }

    pub fn total(&self) -> u64 {
        self.norm1 + self.qkv + self.rel_pos_bias + self.proj + self.norm2 + self.fc1 + self.fc2
    }
}

fn blocks(cfg: &ModelConfig) -> impl Iterator<Item = (usize, BlockCounts)> + '_ {
    (0..cfg.num_stages()).flat_map(move |s| {
        let c = BlockCounts::new(cfg, cfg.dims[s], cfg.heads[s]);
        std::iter::repeat_n((s, c), cfg.blocks[s])
    })
}

pub fn patch_embed_count(cfg: &ModelConfig) -> u64 {
    linear(cfg.patch_len(), cfg.dims[0], true) + norm(cfg.dims[0])
}

/// All patch-merging layers.
pub fn downsample_count(cfg: &ModelConfig) -> u64 {
    (0..cfg.num_stages().saturating_sub(1))
        .map(|s| norm(4 * cfg.dims[s]) + linear(4 * cfg.dims[s], cfg.dims[s + 1], false))
        .sum()
}

/// Backbone without the classification head.
pub fn backbone_count(cfg: &ModelConfig) -> u64 {
    patch_embed_count(cfg)
        + blocks(cfg).map(|(_, c)| c.total()).sum::<u64>()
        + downsample_count(cfg)
        + norm(cfg.final_dim())
}

pub fn full_count(cfg: &ModelConfig) -> u64 {
    backbone_count(cfg) + head_count(cfg.final_dim(), cfg.num_classes)
}

pub fn count_full_swin_b(num_classes: usize) -> u64 {
    full_count(&ModelConfig::swin_b(num_classes))
}

/// PETL parameters added to one block of width `dim`.
pub fn petl_block_count(dim: usize, spec: &PetlSpec) -> u64 {
    let mut n = 0;
    if spec.has(Mechanism::Prefix) && spec.d_token > 0 {
        n += Prefix::count(dim, spec.d_token, spec.d_middle(), spec.prefix_transform);
    }
    if spec.adapter_placement().is_some() {
        n += Adapter::count(dim, spec.d_bottle);
    }
    if spec.has(Mechanism::Prompt) && spec.d_prompt > 0 {
        n += Prompt::count(dim, spec.d_prompt);
    }
    if spec.has(Mechanism::Patt) {
        n += Patt::count(dim, spec.d_bottle, spec.patt_sites);
    }
    n
}

pub fn petl_count(cfg: &ModelConfig, spec: &PetlSpec) -> u64 {
    blocks(cfg)
        .filter(|(s, _)| spec.attached(*s))
        .map(|(s, _)| petl_block_count(cfg.dims[s], spec))
        .sum()
}

/// Trainable parameters of a model built from `cfg` and `spec`.
pub fn trainable_count(cfg: &ModelConfig, spec: &PetlSpec) -> u64 {
    let petl = petl_count(cfg, spec);
    if !spec.freeze_backbone {
        return full_count(cfg) + petl;
    }
    let head = if spec.tune_head {
        head_count(cfg.final_dim(), cfg.num_classes)
    } else {
        0
    };
    petl + head
}

/// Trainable count if PATT used one up-projection shared by all sites.
pub fn trainable_count_shared_patt(cfg: &ModelConfig, spec: &PetlSpec) -> u64 {
    let full = trainable_count(cfg, spec);
    if !spec.has(Mechanism::Patt) {
        return full;
    }
    let saved: u64 = blocks(cfg)
        .filter(|(s, _)| spec.attached(*s))
        .map(|(s, _)| {
            let d = cfg.dims[s];
            Patt::count(d, spec.d_bottle, spec.patt_sites).saturating_sub(Patt::count_shared_up(d, spec.d_bottle))
        })
        .sum();
    full - saved
}

/// Trainable total of a shape-only layout under the freezing rule of `spec`.
pub fn layout_trainable(infos: &[ParamInfo], spec: &PetlSpec) -> u64 {
    infos
        .iter()
        .filter(|p| match p.group {
            Group::Backbone => !spec.freeze_backbone,
            Group::Head => spec.tune_head || !spec.freeze_backbone,
            Group::Petl(_) => true,
        })
        .map(ParamInfo::count)
        .sum()
}

/// Backbone positions that can be tuned in isolation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Position {
    LayerNorm1,
    AttnProj,
    AttnQkv,
    AttnSoftmax,
    LayerNorm2,
    MlpFc1,
    MlpFc2,
    DownSample,
}

impl Position {
    pub const ALL: [Position; 8] = [
        Position::LayerNorm1,
        Position::AttnProj,
        Position::AttnQkv,
        Position::AttnSoftmax,
        Position::LayerNorm2,
        Position::MlpFc1,
        Position::MlpFc2,
        Position::DownSample,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Position::LayerNorm1 => "LayerNorm 1",
            Position::AttnProj => "Attn, Proj",
            Position::AttnQkv => "Attn, QKV",
            Position::AttnSoftmax => "Attn, SoftMax",
            Position::LayerNorm2 => "LayerNorm 2",
            Position::MlpFc1 => "MLP, FC1",
            Position::MlpFc2 => "MLP, FC2",
            Position::DownSample => "DownSample",
        }
    }

    fn is_attention(self) -> bool {
        matches!(self, Position::AttnProj | Position::AttnQkv | Position::AttnSoftmax)
    }

    fn own_marker(self) -> &'static str {
        match self {
            Position::LayerNorm1 => ".norm1.",
            Position::AttnProj => ".attn.proj.",
            Position::AttnQkv => ".attn.qkv.",
            Position::AttnSoftmax => ".attn.rel_pos_bias",
            Position::LayerNorm2 => ".norm2.",
            Position::MlpFc1 => ".mlp.fc1.",
            Position::MlpFc2 => ".mlp.fc2.",
            Position::DownSample => ".downsample.",
        }
    }

    /// Whether tuning this position trains the parameter at `path`.
    ///
    /// Each position trains its own tensors plus every patch-merging layer;
    /// attention positions also train the relative position bias tables,
    /// which sit inside the softmax.
    pub fn selects(self, path: &str) -> bool {
        path.contains(self.own_marker())
            || path.contains(Position::DownSample.own_marker())
            || (self.is_attention() && path.contains(Position::AttnSoftmax.own_marker()))
    }

    fn own(self, c: &BlockCounts) -> u64 {
        match self {
            Position::LayerNorm1 => c.norm1,
            Position::AttnProj => c.proj,
            Position::AttnQkv => c.qkv,
            Position::AttnSoftmax => c.rel_pos_bias,
            Position::LayerNorm2 => c.norm2,
            Position::MlpFc1 => c.fc1,
            Position::MlpFc2 => c.fc2,
            Position::DownSample => 0,
        }
    }

    /// Closed-form trainable count when only this position is tuned.
    pub fn count(self, cfg: &ModelConfig) -> u64 {
        let mut n = downsample_count(cfg);
        for (_, c) in blocks(cfg) {
            n += self.own(&c);
            if self.is_attention() && self != Position::AttnSoftmax {
                n += c.rel_pos_bias;
            }
        }
        n
    }
}

impl fmt::Display for Position {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// One row of the positional report.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PositionRow {
    pub position: String,
    pub count_exact: u64,
    pub count_millions: String,
}

pub const MLP_TOTAL_LABEL: &str = "MLP, FC1+FC2";

/// Per-position trainable counts. The final row sums the FC1 and FC2 rows.
pub fn positional_count_report(cfg: &ModelConfig) -> Vec<PositionRow> {
    let row = |label: &str, n: u64| PositionRow {
        position: label.to_string(),
        count_exact: n,
        count_millions: format!("{:.2}", n as f64 / 1e6),
    };
    let mut rows: Vec<PositionRow> = Position::ALL.iter().map(|p| row(p.label(), p.count(cfg))).collect();
    rows.push(row(MLP_TOTAL_LABEL, mlp_total(cfg)));
    rows
}

pub fn mlp_total(cfg: &ModelConfig) -> u64 {
    Position::MlpFc1.count(cfg) + Position::MlpFc2.count(cfg)
}

/// Enumerated count of a position over a layout.
pub fn enumerate_position(infos: &[ParamInfo], pos: Position) -> u64 {
    infos.iter().filter(|p| pos.selects(&p.path)).map(ParamInfo::count).sum()
}

pub fn write_positional_csv<W: Write>(rows: &[PositionRow], out: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| crate::Error::io("positional report", e))?;
    Ok(())
}

/// Adapter-only trainable counts for every nonempty per-stage attach mask,
/// with and without the head.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskCount {
    pub attach: Vec<bool>,
    pub petl: u64,
    pub with_head: u64,
}

pub fn attach_mask_counts(cfg: &ModelConfig, spec: &PetlSpec) -> Vec<MaskCount> {
    let n = cfg.num_stages();
    let head = head_count(cfg.final_dim(), cfg.num_classes);
    (1u32..(1 << n))
        .map(|bits| {
            let attach: Vec<bool> = (0..n).map(|s| bits & (1 << s) != 0).collect();
            let masked = PetlSpec {
                attach: attach.clone(),
                ..spec.clone()
            };
            let petl = petl_count(cfg, &masked);
            MaskCount {
                attach,
                petl,
                with_head: petl + head,
            }
        })
        .collect()
}
