use std::rc::Rc;

use crate::error::{Error, Result};
use crate::layers::{LayerNorm, Linear, INIT_STD};
use crate::network::Network;
use crate::petl::PetlSpec;
use crate::registry::{Bound, Group, Init, Layout, ParamInfo, ParamSink, ParameterRegistry};
use crate::tensor::{Tape, Tensor, Var};

use super::block::SwinBlock;
use super::config::ModelConfig;
use super::geometry::{merge_index, patchify};

/// 2×2 spatial merge: concatenates four neighbours, normalizes, and maps
/// `4d` to the next stage width without bias.
#[derive(Debug)]
pub struct PatchMerging {
    pub norm: LayerNorm,
    pub reduction: Linear,
    pub index: Rc<Vec<Option<usize>>>,
    pub out_tokens: usize,
    pub dim: usize,
}

impl PatchMerging {
    fn declare(sink: &mut dyn ParamSink, path: &str, cfg: &ModelConfig, grid: [usize; 3], dim: usize, out: usize) -> Result<Self> {
        Ok(Self {
            norm: LayerNorm::declare(sink, &format!("{path}.norm"), 4 * dim, cfg.ln_eps, Group::Backbone)?,
            reduction: Linear::declare(
                sink,
                &format!("{path}.reduction"),
                4 * dim,
                out,
                false,
                Group::Backbone,
                Init::Normal(INIT_STD),
            )?,
            index: Rc::new(merge_index(grid)),
            out_tokens: grid[0] * (grid[1] / 2) * (grid[2] / 2),
            dim,
        })
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let b = x.shape()[0];
        let merged = x
            .gather_rows(Rc::clone(&self.index))?
            .reshape(&[b, self.out_tokens, 4 * self.dim])?;
        let normed = self.norm.forward(p, merged)?;
        self.reduction.forward(p, normed)
    }
}

#[derive(Debug)]
pub struct Stage {
    pub blocks: Vec<SwinBlock>,
    pub downsample: Option<PatchMerging>,
}

/// Parameter handles and index tables for the whole network.
#[derive(Debug)]
pub struct SwinBody {
    pub patch_embed: Linear,
    pub patch_norm: LayerNorm,
    pub stages: Vec<Stage>,
    pub norm: LayerNorm,
    pub head: Linear,
}

impl SwinBody {
    /// Declares every parameter of `cfg` (plus PETL modules from `spec`) into
    /// `sink`, in a fixed order.
    pub fn declare(sink: &mut dyn ParamSink, cfg: &ModelConfig, spec: &PetlSpec) -> Result<Self> {
        cfg.validate()?;
        spec.validate_structure(cfg)?;
        let grids = cfg.stage_grids()?;
        let g = Group::Backbone;
        let d0 = cfg.dims[0];
        let patch_embed = Linear::declare(sink, "patch_embed.proj", cfg.patch_len(), d0, true, g, Init::Normal(INIT_STD))?;
        let patch_norm = LayerNorm::declare(sink, "patch_embed.norm", d0, cfg.ln_eps, g)?;
        let mut stages = Vec::with_capacity(cfg.num_stages());
        for (s, &grid) in grids.iter().enumerate() {
            let (dim, heads) = (cfg.dims[s], cfg.heads[s]);
            let petl = spec.attached(s).then_some(spec);
            let mut blocks = Vec::with_capacity(cfg.blocks[s]);
            for j in 0..cfg.blocks[s] {
                let path = format!("stages.{s}.blocks.{j}");
                blocks.push(SwinBlock::declare(sink, &path, cfg, dim, heads, grid, j % 2 == 1, petl)?);
            }
            let downsample = if s + 1 < cfg.num_stages() {
                let path = format!("stages.{s}.downsample");
                Some(PatchMerging::declare(sink, &path, cfg, grid, dim, cfg.dims[s + 1])?)
            } else {
                None
            };
            stages.push(Stage { blocks, downsample });
        }
        let last = cfg.final_dim();
        let norm = LayerNorm::declare(sink, "norm", last, cfg.ln_eps, g)?;
        let head = Linear::declare(sink, "head", last, cfg.num_classes, true, Group::Head, Init::Normal(INIT_STD))?;
        Ok(Self {
            patch_embed,
            patch_norm,
            stages,
            norm,
            head,
        })
    }

    /// Token features after the patch embedding, `[b, L, d0]`.
    pub fn embed<'t>(&self, p: &Bound<'t>, patches: Var<'t>) -> Result<Var<'t>> {
        let x = self.patch_embed.forward(p, patches)?;
        self.patch_norm.forward(p, x)
    }

    /// Pooled features `[b, d_last]` from embedded tokens.
    pub fn features<'t>(&self, p: &Bound<'t>, mut x: Var<'t>) -> Result<Var<'t>> {
        for stage in &self.stages {
            for block in &stage.blocks {
                x = block.forward(p, x)?;
            }
            if let Some(ds) = &stage.downsample {
                x = ds.forward(p, x)?;
            }
        }
        self.norm.forward(p, x)?.mean_axis(1)
    }

    pub fn blocks(&self) -> impl Iterator<Item = &SwinBlock> {
        self.stages.iter().flat_map(|s| s.blocks.iter())
    }
}

/// Shifted-window video transformer with its parameters.
#[derive(Debug)]
pub struct SwinModel {
    cfg: ModelConfig,
    spec: PetlSpec,
    registry: ParameterRegistry,
    body: SwinBody,
}

impl SwinModel {
    /// Allocates a model. Weights are drawn per parameter path from `seed`,
    /// so the backbone is identical for every PETL spec. Freezing follows
    /// `spec.freeze_backbone` and `spec.tune_head`.
    pub fn build(cfg: &ModelConfig, spec: &PetlSpec, seed: u64) -> Result<Self> {
        spec.validate_structure(cfg)?;
        spec.validate_widths(cfg)?;
        let mut registry = ParameterRegistry::new(seed);
        let body = SwinBody::declare(&mut registry, cfg, spec)?;
        if spec.freeze_backbone {
            registry.freeze_backbone(spec.tune_head);
        } else {
            registry.unfreeze_all();
        }
        Ok(Self {
            cfg: cfg.clone(),
            spec: spec.clone(),
            registry,
            body,
        })
    }

    /// Swin-BAPAT: parallel adapters and PATT; only those two mechanisms
    /// are accepted.
    pub fn build_swin_bapat(cfg: &ModelConfig, spec: &PetlSpec, seed: u64) -> Result<Self> {
        spec.validate_bapat(cfg)?;
        Self::build(cfg, spec, seed)
    }

    /// Parameter shapes of a model without allocating weights. The
    /// bottleneck width is not checked against the stage widths.
    pub fn layout(cfg: &ModelConfig, spec: &PetlSpec) -> Result<Vec<ParamInfo>> {
        let mut layout = Layout::new();
        SwinBody::declare(&mut layout, cfg, spec)?;
        Ok(layout.into_params())
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn spec(&self) -> &PetlSpec {
        &self.spec
    }

    pub fn body(&self) -> &SwinBody {
        &self.body
    }

    fn check_input(&self, video: &Tensor) -> Result<()> {
        let s = video.shape();
        let dims = match s.len() {
            4 => &s[..3],
            5 => &s[1..4],
            _ => s,
        };
        if dims != self.cfg.input {
            return Err(Error::Geometry(format!(
                "clip shape {s:?} does not match configured input {:?}",
                self.cfg.input
            )));
        }
        Ok(())
    }

    /// Logits for a single clip `[t, h, w, 3]`.
    pub fn forward_clip(&self, video: &Tensor) -> Result<Tensor> {
        let tape = Tape::inference();
        let p = self.registry.bind(&tape);
        let logits = self.forward(&tape, &p, video)?;
        let c = self.cfg.num_classes;
        logits.value().reshape(&[c])
    }
}

impl Network for SwinModel {
    fn registry(&self) -> &ParameterRegistry {
        &self.registry
    }

    fn registry_mut(&mut self) -> &mut ParameterRegistry {
        &mut self.registry
    }

    fn num_classes(&self) -> usize {
        self.cfg.num_classes
    }

    fn forward<'t>(&self, tape: &'t Tape, p: &Bound<'t>, inputs: &Tensor) -> Result<Var<'t>> {
        self.check_input(inputs)?;
        let patches = tape.constant(&patchify(inputs, self.cfg.patch)?);
        let x = self.body.embed(p, patches)?;
        let pooled = self.body.features(p, x)?;
        self.body.head.forward(p, pooled)
    }
}
