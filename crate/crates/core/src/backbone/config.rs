use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Backbone hyperparameters. Extents are ordered (time, height, width);
/// input clips always carry 3 channels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub input: [usize; 3],
    pub patch: [usize; 3],
    pub dims: Vec<usize>,
    pub blocks: Vec<usize>,
    pub heads: Vec<usize>,
    pub window: [usize; 3],
    pub ffn_ratio: usize,
    pub num_classes: usize,
    pub ln_eps: f64,
}

pub const CHANNELS: usize = 3;

impl ModelConfig {
    /// Desk-scale preset: 8×32×32 clips, four stages of width 16..128.
    pub fn swin_micro(num_classes: usize) -> Self {
        Self {
            input: [8, 32, 32],
            patch: [2, 4, 4],
            dims: vec![16, 32, 64, 128],
            blocks: vec![1, 1, 2, 1],
            heads: vec![2, 2, 4, 4],
            window: [4, 4, 4],
            ffn_ratio: 4,
            num_classes,
            ln_eps: 1e-5,
        }
    }

    /// Full Swin-B dimensions on 8×224×224 clips.
    pub fn swin_b(num_classes: usize) -> Self {
        Self {
            input: [8, 224, 224],
            patch: [2, 4, 4],
            dims: vec![128, 256, 512, 1024],
            blocks: vec![2, 2, 18, 2],
            heads: vec![4, 8, 16, 32],
            window: [8, 7, 7],
            ffn_ratio: 4,
            num_classes,
            ln_eps: 1e-5,
        }
    }

    pub fn preset(name: &str, num_classes: usize) -> Result<Self> {
        match name {
            "swin-micro" | "swin_micro" => Ok(Self::swin_micro(num_classes)),
            "swin-b" | "swin_b" => Ok(Self::swin_b(num_classes)),
            other => Err(Error::config(format!(
                "unknown model preset `{other}` (expected swin-micro or swin-b)"
            ))),
        }
    }

    pub fn num_stages(&self) -> usize {
        self.dims.len()
    }

    pub fn final_dim(&self) -> usize {
        *self.dims.last().expect("validated config has stages")
    }

    pub fn patch_len(&self) -> usize {
        self.patch.iter().product::<usize>() * CHANNELS
    }

    /// Per-axis shift of the shifted blocks: half the window, rounded down.
    pub fn shift(&self) -> [usize; 3] {
        self.window.map(|w| w / 2)
    }

    pub fn total_blocks(&self) -> usize {
        self.blocks.iter().sum()
    }

    /// Token grid after patch embedding.
    pub fn token_grid(&self) -> Result<[usize; 3]> {
        crate::backbone::geometry::patch_grid(self.input, self.patch)
    }

    /// Token grid seen by each stage.
    pub fn stage_grids(&self) -> Result<Vec<[usize; 3]>> {
        let mut grid = self.token_grid()?;
        let mut out = Vec::with_capacity(self.num_stages());
        for stage in 0..self.num_stages() {
            if stage > 0 {
                if grid[1] % 2 != 0 || grid[2] % 2 != 0 {
                    return Err(Error::Geometry(format!(
                        "patch merging before stage {stage} needs an even spatial grid, got {grid:?}"
                    )));
                }
                grid = [grid[0], grid[1] / 2, grid[2] / 2];
            }
            out.push(grid);
        }
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.dims.len();
        if n == 0 {
            return Err(Error::config("model needs at least one stage"));
        }
        if self.blocks.len() != n || self.heads.len() != n {
            return Err(Error::config(format!(
                "dims, blocks and heads must have equal lengths ({}, {}, {})",
                n,
                self.blocks.len(),
                self.heads.len()
            )));
        }
        for (i, ((&d, &h), &b)) in self.dims.iter().zip(&self.heads).zip(&self.blocks).enumerate() {
            if d == 0 || h == 0 || b == 0 {
                return Err(Error::config(format!(
                    "stage {i}: dims, heads and blocks must be positive"
                )));
            }
            if d % h != 0 {
                return Err(Error::config(format!(
                    "stage {i}: width {d} is not divisible by {h} heads"
                )));
            }
        }
        if self.window.contains(&0) || self.patch.contains(&0) {
            return Err(Error::config("window and patch extents must be positive"));
        }
        if self.ffn_ratio == 0 || self.num_classes == 0 {
            return Err(Error::config("ffn_ratio and num_classes must be positive"));
        }
        if !(self.ln_eps > 0.0 && self.ln_eps.is_finite()) {
            return Err(Error::config("ln_eps must be positive"));
        }
        self.stage_grids()?;
        Ok(())
    }
}
