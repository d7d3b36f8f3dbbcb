//! Loop-based reference model. It reads weights by parameter path and
//! recomputes everything with plain index arithmetic: window membership by
//! comparing window coordinates, attention one query at a time, keys
//! materialized per query.

#![allow(dead_code)]

use petl_lab::{Mechanism, ModelConfig, ParameterRegistry, PetlSpec, Tensor};

pub fn erf(x: f64) -> f64 {
    // positive-term series; accurate for the moderate arguments used here
    let mut term = x;
    let mut sum = x;
    let mut n = 0.0;
    while term.abs() > 1e-18 * sum.abs().max(1e-300) {
        n += 1.0;
        term *= 2.0 * x * x / (2.0 * n + 1.0);
        sum += term;
        if n > 400.0 {
            break;
        }
    }
    2.0 / std::f64::consts::PI.sqrt() * (-x * x).exp() * sum
}

pub fn gelu(x: f64) -> f64 {
    if x.abs() > 8.0 {
        return if x > 0.0 { x } else { 0.0 };
    }
    0.5 * x * (1.0 + erf(x / std::f64::consts::SQRT_2))
}

/// Row-major matrix as rows.
pub type Rows = Vec<Vec<f64>>;

pub struct Oracle<'a> {
    pub reg: &'a ParameterRegistry,
    pub cfg: &'a ModelConfig,
    pub spec: &'a PetlSpec,
}

impl<'a> Oracle<'a> {
    pub fn new(reg: &'a ParameterRegistry, cfg: &'a ModelConfig, spec: &'a PetlSpec) -> Self {
        Self { reg, cfg, spec }
    }

    pub fn w(&self, path: &str) -> &'a [f64] {
        self.reg
            .by_path(path)
            .unwrap_or_else(|| panic!("missing parameter {path}"))
            .tensor()
            .data()
    }

    pub fn has(&self, path: &str) -> bool {
        self.reg.by_path(path).is_some()
    }

    /// `x·W + b` for one row, `W` stored `[fan_in, fan_out]`.
    pub fn linear_row(&self, x: &[f64], path: &str, fan_out: usize, bias: bool) -> Vec<f64> {
        let w = self.w(&format!("{path}.weight"));
        assert_eq!(w.len(), x.len() * fan_out);
        let mut y = vec![0.0; fan_out];
        for (j, yj) in y.iter_mut().enumerate() {
            let mut acc = 0.0;
            for (i, xi) in x.iter().enumerate() {
                acc += xi * w[i * fan_out + j];
            }
            *yj = acc;
        }
        if bias {
            let b = self.w(&format!("{path}.bias"));
            for (yj, bj) in y.iter_mut().zip(b) {
                *yj += bj;
            }
        }
        y
    }

    pub fn ln_row(&self, x: &[f64], path: &str) -> Vec<f64> {
        let g = self.w(&format!("{path}.weight"));
        let b = self.w(&format!("{path}.bias"));
        let n = x.len() as f64;
        let mean = x.iter().sum::<f64>() / n;
        let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let inv = 1.0 / (var + self.cfg.ln_eps).sqrt();
        x.iter()
            .enumerate()
            .map(|(i, v)| (v - mean) * inv * g[i] + b[i])
            .collect()
    }

    /// Logits for a single clip `[t, h, w, 3]`.
    pub fn forward(&self, video: &Tensor) -> Vec<f64> {
        let cfg = self.cfg;
        let [t, h, w] = cfg.input;
        let [pt, ph, pw] = cfg.patch;
        let v = video.data();
        let mut grid = [t / pt, h / ph, w / pw];
        let mut x: Rows = Vec::new();
        for it in 0..grid[0] {
            for ih in 0..grid[1] {
                for iw in 0..grid[2] {
                    let mut patch = Vec::with_capacity(cfg.patch_len());
                    for e in 0..cfg.patch_len() {
                        let c = e % 3;
                        let dw = (e / 3) % pw;
                        let dh = (e / 3 / pw) % ph;
                        let dt = e / 3 / pw / ph;
                        let (tt, hh, ww) = (it * pt + dt, ih * ph + dh, iw * pw + dw);
                        patch.push(v[((tt * h + hh) * w + ww) * 3 + c]);
                    }
                    let y = self.linear_row(&patch, "patch_embed.proj", cfg.dims[0], true);
                    x.push(self.ln_row(&y, "patch_embed.norm"));
                }
            }
        }
        for s in 0..cfg.num_stages() {
            for j in 0..cfg.blocks[s] {
                let path = format!("stages.{s}.blocks.{j}");
                x = self.block(&x, grid, cfg.dims[s], cfg.heads[s], j % 2 == 1, &path);
            }
            if s + 1 < cfg.num_stages() {
                let path = format!("stages.{s}.downsample");
                let (nx, ng) = self.merge(&x, grid, &path, cfg.dims[s + 1]);
                x = nx;
                grid = ng;
            }
        }
        let d = cfg.final_dim();
        let mut pooled = vec![0.0; d];
        for row in &x {
            let r = self.ln_row(row, "norm");
            for (p, v) in pooled.iter_mut().zip(&r) {
                *p += v;
            }
        }
        pooled.iter_mut().for_each(|p| *p /= x.len() as f64);
        self.linear_row(&pooled, "head", cfg.num_classes, true)
    }

    pub fn merge(&self, x: &Rows, grid: [usize; 3], path: &str, out: usize) -> (Rows, [usize; 3]) {
        let ng = [grid[0], grid[1] / 2, grid[2] / 2];
        let mut res = Vec::new();
        for t in 0..ng[0] {
            for h in 0..ng[1] {
                for w in 0..ng[2] {
                    let mut cat = Vec::new();
                    for (dh, dw) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                        let src = (t * grid[1] + 2 * h + dh) * grid[2] + 2 * w + dw;
                        cat.extend_from_slice(&x[src]);
                    }
                    let n = self.ln_row(&cat, &format!("{path}.norm"));
                    res.push(self.linear_row(&n, &format!("{path}.reduction"), out, false));
                }
            }
        }
        (res, ng)
    }

    fn stage_of(&self, path: &str) -> usize {
        path.split('.').nth(1).unwrap().parse().unwrap()
    }

    /// Prefix keys and values `(k, v)`, one row per prefix token.
    pub fn prefix_kv(&self, path: &str, d: usize) -> Option<(Rows, Rows)> {
        let pk = format!("{path}.prefix.p_k");
        if !self.has(&pk) {
            return None;
        }
        let rows = |p: &str| -> Rows { self.w(p).chunks(d).map(|c| c.to_vec()).collect() };
        let (mut k, mut v) = (rows(&pk), rows(&format!("{path}.prefix.p_v")));
        let tdown = format!("{path}.prefix.transform.down");
        if self.has(&format!("{tdown}.weight")) {
            let m = self.w(&format!("{tdown}.bias")).len();
            let map = |r: &Vec<f64>| -> Vec<f64> {
                let hdn: Vec<f64> = self.linear_row(r, &tdown, m, true).iter().map(|v| v.tanh()).collect();
                self.linear_row(&hdn, &format!("{path}.prefix.transform.up"), d, true)
            };
            k = k.iter().map(map).collect();
            v = v.iter().map(map).collect();
        }
        Some((k, v))
    }

    /// Prompt keys and values, one row per prompt token.
    pub fn prompt_kv(&self, path: &str, d: usize) -> Option<(Rows, Rows)> {
        let pt = format!("{path}.prompt.tokens");
        if !self.has(&pt) {
            return None;
        }
        let mut k = Vec::new();
        let mut v = Vec::new();
        for tok in self.w(&pt).chunks(d) {
            let n = self.ln_row(tok, &format!("{path}.norm1"));
            let qkv = self.linear_row(&n, &format!("{path}.attn.qkv"), 3 * d, true);
            k.push(qkv[d..2 * d].to_vec());
            v.push(qkv[2 * d..].to_vec());
        }
        Some((k, v))
    }

    /// Attention output rows (before the residual) for a block.
    pub fn attention(&self, x: &Rows, grid: [usize; 3], d: usize, heads: usize, shifted: bool, path: &str) -> Rows {
        let win = self.cfg.window;
        let pad: [usize; 3] = std::array::from_fn(|a| if shifted { (win[a] - win[a] / 2) % win[a] } else { 0 });
        let coord = |i: usize| [i / (grid[1] * grid[2]), (i / grid[2]) % grid[1], i % grid[2]];
        let wid = |c: [usize; 3]| -> [usize; 3] { std::array::from_fn(|a| (c[a] + pad[a]) / win[a]) };
        let local = |c: [usize; 3]| -> [usize; 3] { std::array::from_fn(|a| (c[a] + pad[a]) % win[a]) };
        let table = self.w(&format!("{path}.attn.rel_pos_bias"));
        let span: [usize; 3] = win.map(|w| 2 * w - 1);
        let attached = self.spec.attached(self.stage_of(path));

        let ln: Rows = x.iter().map(|r| self.ln_row(r, &format!("{path}.norm1"))).collect();
        let mut q = Vec::new();
        let mut k = Vec::new();
        let mut v = Vec::new();
        for r in &ln {
            let y = self.linear_row(r, &format!("{path}.attn.qkv"), 3 * d, true);
            q.push(y[..d].to_vec());
            k.push(y[d..2 * d].to_vec());
            v.push(y[2 * d..].to_vec());
        }
        if attached && self.spec.has(Mechanism::Patt) {
            let s = self.spec.s_patt;
            let b = self.spec.d_bottle;
            for (i, r) in ln.iter().enumerate() {
                let hid: Vec<f64> = self
                    .linear_row(r, &format!("{path}.patt.down"), b, true)
                    .iter()
                    .map(|v| v.tanh())
                    .collect();
                for (site, dst) in [("up_q", &mut q), ("up_k", &mut k), ("up_v", &mut v)] {
                    let p = format!("{path}.patt.{site}");
                    if self.has(&format!("{p}.weight")) {
                        let add = self.linear_row(&hid, &p, d, true);
                        for (o, a) in dst[i].iter_mut().zip(&add) {
                            *o += s * a;
                        }
                    }
                }
            }
        }
        let prefix = self.prefix_kv(path, d);
        let prompt = self.prompt_kv(path, d);
        let hd = d / heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let mut out = Vec::with_capacity(x.len());
        for i in 0..x.len() {
            let ci = coord(i);
            // materialized key/value list with its bias column
            let mut keys: Vec<(&Vec<f64>, &Vec<f64>, Option<usize>)> = Vec::new();
            if let Some((pk, pv)) = &prefix {
                for (a, b) in pk.iter().zip(pv) {
                    keys.push((a, b, None));
                }
            }
            for j in 0..x.len() {
                let cj = coord(j);
                if wid(cj) != wid(ci) {
                    continue;
                }
                let (li, lj) = (local(ci), local(cj));
                let r: [usize; 3] = std::array::from_fn(|a| li[a] + win[a] - 1 - lj[a]);
                keys.push((&k[j], &v[j], Some((r[0] * span[1] + r[1]) * span[2] + r[2])));
            }
            if let Some((pk, pv)) = &prompt {
                for (a, b) in pk.iter().zip(pv) {
                    keys.push((a, b, None));
                }
            }
            let mut row = vec![0.0; d];
            for h in 0..heads {
                let qh = &q[i][h * hd..(h + 1) * hd];
                let logits: Vec<f64> = keys
                    .iter()
                    .map(|(kk, _, rel)| {
                        let dot: f64 = qh.iter().zip(&kk[h * hd..(h + 1) * hd]).map(|(a, b)| a * b).sum();
                        dot * scale + rel.map_or(0.0, |r| table[r * heads + h])
                    })
                    .collect();
                let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
                let z: f64 = e.iter().sum();
                for (p, (_, vv, _)) in e.iter().zip(&keys) {
                    for c in 0..hd {
                        row[h * hd + c] += p / z * vv[h * hd + c];
                    }
                }
            }
            out.push(self.linear_row(&row, &format!("{path}.attn.proj"), d, true));
        }
        out
    }

    pub fn block(&self, x: &Rows, grid: [usize; 3], d: usize, heads: usize, shifted: bool, path: &str) -> Rows {
        let att = self.attention(x, grid, d, heads, shifted, path);
        let attached = self.spec.attached(self.stage_of(path));
        let hidden = d * self.cfg.ffn_ratio;
        x.iter()
            .zip(&att)
            .map(|(xr, ar)| {
                let x_hat: Vec<f64> = xr.iter().zip(ar).map(|(a, b)| a + b).collect();
                let ln2 = self.ln_row(&x_hat, &format!("{path}.norm2"));
                let h1: Vec<f64> = self
                    .linear_row(&ln2, &format!("{path}.mlp.fc1"), hidden, true)
                    .into_iter()
                    .map(gelu)
                    .collect();
                let f = self.linear_row(&h1, &format!("{path}.mlp.fc2"), d, true);
                let mut z: Vec<f64> = x_hat.iter().zip(&f).map(|(a, b)| a + b).collect();
                let adapter = format!("{path}.adapter");
                if attached && self.has(&format!("{adapter}.down.weight")) {
                    let input = if self.spec.has(Mechanism::AdapterSequential) { &f } else { &ln2 };
                    let hd: Vec<f64> = self
                        .linear_row(input, &format!("{adapter}.down"), self.spec.d_bottle, true)
                        .into_iter()
                        .map(|v| v.max(0.0))
                        .collect();
                    let up = self.linear_row(&hd, &format!("{adapter}.up"), d, true);
                    for (o, u) in z.iter_mut().zip(&up) {
                        *o += self.spec.s_adapter * u;
                    }
                }
                z
            })
            .collect()
    }
}

/// Gives every PETL up-projection random values so branches are active.
pub fn randomize_petl(reg: &mut ParameterRegistry, seed: u64, std: f64) {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    for p in reg.iter_mut() {
        if matches!(p.group(), petl_lab::registry::Group::Petl(_)) && p.path().contains(".up") {
            let shape = p.shape().to_vec();
            let fresh = Tensor::randn(&shape, std, &mut rng);
            p.tensor_mut().data_mut().copy_from_slice(fresh.data());
        }
    }
}

pub fn random_clip(cfg: &ModelConfig, seed: u64) -> Tensor {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let [t, h, w] = cfg.input;
    Tensor::randn(&[t, h, w, 3], 1.0, &mut rng)
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
