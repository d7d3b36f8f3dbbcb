//! Patch grids, window partitions and the index tables attention needs.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::config::CHANNELS;

/// Token grid produced by non-overlapping `patch` cuts of an input clip.
pub fn patch_grid(input: [usize; 3], patch: [usize; 3]) -> Result<[usize; 3]> {
    let mut grid = [0; 3];
    for axis in 0..3 {
        if patch[axis] == 0 || input[axis] == 0 || !input[axis].is_multiple_of(patch[axis]) {
            return Err(Error::Geometry(format!(
                "input {input:?} is not divisible into patches {patch:?}"
            )));
        }
        grid[axis] = input[axis] / patch[axis];
    }
    Ok(grid)
}

/// Cuts clips `[b, t, h, w, 3]` (or a single `[t, h, w, 3]`) into flattened
/// patches `[b, tokens, pt·ph·pw·3]`. Patch values are ordered
/// (dt, dh, dw, channel) and tokens row-major over the grid.
pub fn patchify(video: &Tensor, patch: [usize; 3]) -> Result<Tensor> {
    let shape = video.shape();
    let (b, dims) = match shape.len() {
        4 => (1, &shape[..3]),
        5 => (shape[0], &shape[1..4]),
        _ => {
            return Err(Error::Geometry(format!(
                "expected a clip [t, h, w, 3] or batch [b, t, h, w, 3], got {shape:?}"
            )))
        }
    };
    if shape[shape.len() - 1] != CHANNELS {
        return Err(Error::Geometry(format!("clips need {CHANNELS} channels, got {shape:?}")));
    }
    let (t, h, w) = (dims[0], dims[1], dims[2]);
    let [gt, gh, gw] = patch_grid([t, h, w], patch)?;
    let [pt, ph, pw] = patch;
    let plen = pt * ph * pw * CHANNELS;
    let src = video.data();
    let mut out = Vec::with_capacity(b * gt * gh * gw * plen);
    for bi in 0..b {
        let clip = &src[bi * t * h * w * CHANNELS..(bi + 1) * t * h * w * CHANNELS];
        for it in 0..gt {
            for ih in 0..gh {
                for iw in 0..gw {
                    for dt in 0..pt {
                        for dh in 0..ph {
                            let row = ((it * pt + dt) * h + ih * ph + dh) * w + iw * pw;
                            out.extend_from_slice(&clip[row * CHANNELS..(row + pw) * CHANNELS]);
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![b, gt * gh * gw, plen], out)
}

/// Row-major flat index of a grid coordinate.
pub fn flat_index(grid: [usize; 3], c: [usize; 3]) -> usize {
    (c[0] * grid[1] + c[1]) * grid[2] + c[2]
}

/// Non-overlapping windows covering a token grid.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WindowLayout {
    pub grid: [usize; 3],
    pub window: [usize; 3],
    pub shift: [usize; 3],
    /// Window-grid extents.
    pub counts: [usize; 3],
    /// Token coordinates of every window, row-major within each window.
    pub windows: Vec<Vec<[usize; 3]>>,
}

impl WindowLayout {
    pub fn num_windows(&self) -> usize {
        self.windows.len()
    }

    pub fn max_tokens(&self) -> usize {
        self.windows.iter().map(Vec::len).max().unwrap_or(0)
    }

    /// Padding in front of the grid on each axis. A shift of `s` moves the
    /// window boundaries to `s mod w`, which is front padding of `w - s`.
    pub fn pad_front(&self) -> [usize; 3] {
        let mut pad = [0; 3];
        for a in 0..3 {
            pad[a] = (self.window[a] - self.shift[a] % self.window[a]) % self.window[a];
        }
        pad
    }

    /// Coordinate of a token inside its window.
    pub fn local(&self, c: [usize; 3]) -> [usize; 3] {
        let pad = self.pad_front();
        let mut l = [0; 3];
        for a in 0..3 {
            l[a] = (c[a] + pad[a]) % self.window[a];
        }
        l
    }
}

/// Partitions `grid` into `window`-sized cells. Shifted partitions offset
/// the cell boundaries by half a window per axis; boundary cells are partial
/// and attention masks their missing positions.
pub fn window_partition(grid: [usize; 3], window: [usize; 3], shifted: bool) -> Result<WindowLayout> {
    if grid.contains(&0) || window.contains(&0) {
        return Err(Error::Geometry(format!(
            "grid {grid:?} and window {window:?} must be positive"
        )));
    }
    let shift = if shifted { window.map(|w| w / 2) } else { [0; 3] };
    let mut layout = WindowLayout {
        grid,
        window,
        shift,
        counts: [0; 3],
        windows: Vec::new(),
    };
    let pad = layout.pad_front();
    for a in 0..3 {
        layout.counts[a] = (grid[a] + pad[a]).div_ceil(window[a]);
    }
    let [ct, ch, cw] = layout.counts;
    let mut windows = vec![Vec::new(); ct * ch * cw];
    for t in 0..grid[0] {
        for h in 0..grid[1] {
            for w in 0..grid[2] {
                let wi = [(t + pad[0]) / window[0], (h + pad[1]) / window[1], (w + pad[2]) / window[2]];
                windows[(wi[0] * ch + wi[1]) * cw + wi[2]].push([t, h, w]);
            }
        }
    }
    debug_assert!(windows.iter().all(|w| !w.is_empty()));
    layout.windows = windows;
    Ok(layout)
}

/// Number of rows in the relative position bias table for `window`.
pub fn bias_table_rows(window: [usize; 3]) -> usize {
    window.iter().map(|&w| 2 * w - 1).product()
}

/// Row of the bias table for the offset from token `j` to token `i`, both
/// given as in-window coordinates.
pub fn relative_index(window: [usize; 3], li: [usize; 3], lj: [usize; 3]) -> usize {
    let span = window.map(|w| 2 * w - 1);
    let r: [usize; 3] = std::array::from_fn(|a| li[a] + window[a] - 1 - lj[a]);
    (r[0] * span[1] + r[1]) * span[2] + r[2]
}

/// Dense index tables for one window layout, padded to the largest window.
#[derive(Clone, Debug)]
pub struct WindowPlan {
    pub num_windows: usize,
    /// Slots per window.
    pub tokens: usize,
    /// Flat token index for every slot; `None` marks padding.
    pub gather: Vec<Option<usize>>,
    /// Slot for every token of the grid.
    pub scatter: Vec<Option<usize>>,
    /// In-window coordinates per slot.
    pub local: Vec<Option<[usize; 3]>>,
    pub window: [usize; 3],
}

impl WindowPlan {
    pub fn new(layout: &WindowLayout) -> Self {
        let nw = layout.num_windows();
        let n = layout.max_tokens();
        let grid_len: usize = layout.grid.iter().product();
        let mut gather = vec![None; nw * n];
        let mut local = vec![None; nw * n];
        let mut scatter = vec![None; grid_len];
        for (w, win) in layout.windows.iter().enumerate() {
            for (i, &c) in win.iter().enumerate() {
                let flat = flat_index(layout.grid, c);
                gather[w * n + i] = Some(flat);
                local[w * n + i] = Some(layout.local(c));
                scatter[flat] = Some(w * n + i);
            }
        }
        Self {
            num_windows: nw,
            tokens: n,
            gather,
            scatter,
            local,
            window: layout.window,
        }
    }

    /// Key mask `[windows, front + tokens + back]`; extra keys are always
    /// attended, padded slots never.
    pub fn key_mask(&self, front: usize, back: usize) -> Vec<bool> {
        let n = self.tokens;
        let mut mask = Vec::with_capacity(self.num_windows * (front + n + back));
        for w in 0..self.num_windows {
            mask.extend(std::iter::repeat_n(true, front));
            mask.extend((0..n).map(|i| self.local[w * n + i].is_some()));
            mask.extend(std::iter::repeat_n(true, back));
        }
        mask
    }

    /// True when no window has padded slots.
    pub fn is_dense(&self) -> bool {
        self.gather.iter().all(Option::is_some)
    }

    /// Flat indices into a `[table_rows, heads]` bias table for a
    /// `[windows, heads, tokens, front + tokens + back]` logit block.
    /// Extra keys and padded slots read no bias.
    pub fn bias_index(&self, heads: usize, front: usize, back: usize) -> Vec<Option<usize>> {
        let n = self.tokens;
        let keys = front + n + back;
        let mut idx = Vec::with_capacity(self.num_windows * heads * n * keys);
        for w in 0..self.num_windows {
            for h in 0..heads {
                for i in 0..n {
                    let li = self.local[w * n + i];
                    idx.extend(std::iter::repeat_n(None, front));
                    for j in 0..n {
                        let lj = self.local[w * n + j];
                        idx.push(match (li, lj) {
                            (Some(a), Some(b)) => Some(relative_index(self.window, a, b) * heads + h),
                            _ => None,
                        });
                    }
                    idx.extend(std::iter::repeat_n(None, back));
                }
            }
        }
        idx
    }
}

/// Gather indices for 2×2 spatial patch merging. Output token `o` takes
/// rows `4o..4o+4` from quadrants (0,0), (1,0), (0,1), (1,1) as (dh, dw).
pub fn merge_index(grid: [usize; 3]) -> Vec<Option<usize>> {
    let [t, h, w] = grid;
    let mut idx = Vec::with_capacity(t * h * w);
    for it in 0..t {
        for ih in 0..h / 2 {
            for iw in 0..w / 2 {
                for (dh, dw) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                    idx.push(Some(flat_index(grid, [it, 2 * ih + dh, 2 * iw + dw])));
                }
            }
        }
    }
    idx
}
