use std::rc::Rc;
use std::str::FromStr;

use super::dense::numel;
use super::kernels::{self, gemm_nn, gemm_nt, gemm_tn};
use super::tape::{OpKind, Var};
use crate::error::{Error, Result};

const SQRT_2: f64 = std::f64::consts::SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Elementwise nonlinearity.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    /// Exact form `x·Φ(x)` with the Gaussian CDF.
    Gelu,
    Tanh,
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "relu" => Ok(Activation::Relu),
            "gelu" => Ok(Activation::Gelu),
            "tanh" => Ok(Activation::Tanh),
            other => Err(Error::config(format!("unknown activation `{other}`"))),
        }
    }
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / SQRT_2)) + x * INV_SQRT_2PI * (-0.5 * x * x).exp()
}

fn check_axis(op: &'static str, axis: usize, rank: usize) -> Result<()> {
    if axis >= rank {
        Err(Error::InvalidAxis { op, axis, rank })
    } else {
        Ok(())
    }
}

/// Splits `shape` around `axis` into (outer, len, inner).
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<'t> Var<'t> {
    /// `[..., i, k] × [k, j] → [..., i, j]`
    pub fn matmul(self, rhs: Var<'t>) -> Result<Var<'t>> {
        let ash = self.shape();
        let bsh = rhs.shape();
        if ash.len() < 2 || bsh.len() != 2 || ash[ash.len() - 1] != bsh[0] {
            return Err(Error::Dimension {
                op: "matmul",
                lhs: ash,
                rhs: bsh,
            });
        }
        let k = bsh[0];
        let n = bsh[1];
        let m = numel(&ash[..ash.len() - 1]);
        let a = self.data_rc();
        let b = rhs.data_rc();
        let mut out = vec![0.0; m * n];
        gemm_nn(&a, &b, m, k, n, &mut out);
        let mut shape = ash.clone();
        *shape.last_mut().unwrap() = n;
        let need = [self.requires_grad(), rhs.requires_grad()];
        self.tape.record(OpKind::MatMul, shape, out, &[self, rhs], move || {
            move |g: &[f64]| {
                let ga = need[0].then(|| {
                    let mut ga = vec![0.0; m * k];
                    gemm_nt(g, &b, m, n, k, &mut ga);
                    ga
                });
                let gb = need[1].then(|| {
                    let mut gb = vec![0.0; k * n];
                    gemm_tn(&a, g, m, k, n, &mut gb);
                    gb
                });
                vec![ga, gb]
            }
        })
    }

    /// Batched product of rank-3 operands: `[b, i, k] × [b, k, j]`, or
    /// `[b, i, k] × [b, j, k]ᵀ` when `transpose_rhs` is set.
    pub fn bmm(self, rhs: Var<'t>, transpose_rhs: bool) -> Result<Var<'t>> {
        let ash = self.shape();
        let bsh = rhs.shape();
        let bad = || Error::Dimension {
            op: "bmm",
            lhs: ash.clone(),
            rhs: bsh.clone(),
        };
        if ash.len() != 3 || bsh.len() != 3 || ash[0] != bsh[0] {
            return Err(bad());
        }
        let (batch, m, k) = (ash[0], ash[1], ash[2]);
        let n = if transpose_rhs {
            if bsh[2] != k {
                return Err(bad());
            }
            bsh[1]
        } else {
            if bsh[1] != k {
                return Err(bad());
            }
            bsh[2]
        };
        let a = self.data_rc();
        let b = rhs.data_rc();
        let mut out = vec![0.0; batch * m * n];
        for bi in 0..batch {
            let ab = &a[bi * m * k..(bi + 1) * m * k];
            let bb = &b[bi * k * n..(bi + 1) * k * n];
            let ob = &mut out[bi * m * n..(bi + 1) * m * n];
            if transpose_rhs {
                gemm_nt(ab, bb, m, k, n, ob);
            } else {
                gemm_nn(ab, bb, m, k, n, ob);
            }
        }
        let need = [self.requires_grad(), rhs.requires_grad()];
        self.tape
            .record(OpKind::BatchMatMul, vec![batch, m, n], out, &[self, rhs], move || {
                move |g: &[f64]| {
                    let ga = need[0].then(|| {
                        let mut ga = vec![0.0; batch * m * k];
                        for bi in 0..batch {
                            let gb = &g[bi * m * n..(bi + 1) * m * n];
                            let bb = &b[bi * k * n..(bi + 1) * k * n];
                            let out = &mut ga[bi * m * k..(bi + 1) * m * k];
                            if transpose_rhs {
                                gemm_nn(gb, bb, m, n, k, out);
                            } else {
                                gemm_nt(gb, bb, m, n, k, out);
                            }
                        }
                        ga
                    });
                    let gb = need[1].then(|| {
                        let mut gr = vec![0.0; batch * k * n];
                        for bi in 0..batch {
                            let gb = &g[bi * m * n..(bi + 1) * m * n];
                            let ab = &a[bi * m * k..(bi + 1) * m * k];
                            let out = &mut gr[bi * k * n..(bi + 1) * k * n];
                            if transpose_rhs {
                                // d(B)[n×k] = gᵀ[n×m] · a[m×k]
                                gemm_tn(gb, ab, m, n, k, out);
                            } else {
                                gemm_tn(ab, gb, m, k, n, out);
                            }
                        }
                        gr
                    });
                    vec![ga, gb]
                }
            })
    }

    /// Elementwise sum. `rhs` may have a shape that is a suffix of `self`'s
    /// shape, in which case it is broadcast over the leading axes.
    pub fn add(self, rhs: Var<'t>) -> Result<Var<'t>> {
        let ash = self.shape();
        let bsh = rhs.shape();
        if bsh.len() > ash.len() || ash[ash.len() - bsh.len()..] != bsh[..] {
            return Err(Error::Dimension {
                op: "add",
                lhs: ash,
                rhs: bsh,
            });
        }
        let a = self.data_rc();
        let b = rhs.data_rc();
        let period = b.len();
        let mut out = a.as_ref().clone();
        if period > 0 {
            for chunk in out.chunks_mut(period) {
                kernels::add_assign(chunk, &b);
            }
        }
        let need = [self.requires_grad(), rhs.requires_grad()];
        self.tape.record(OpKind::Add, ash, out, &[self, rhs], move || {
            move |g: &[f64]| {
                let ga = need[0].then(|| g.to_vec());
                let gb = need[1].then(|| {
                    let mut gb = vec![0.0; period];
                    if period > 0 {
                        for chunk in g.chunks(period) {
                            kernels::add_assign(&mut gb, chunk);
                        }
                    }
                    gb
                });
                vec![ga, gb]
            }
        })
    }

    /// Elementwise product of equally shaped operands.
    pub fn mul(self, rhs: Var<'t>) -> Result<Var<'t>> {
        let ash = self.shape();
        let bsh = rhs.shape();
        if ash != bsh {
            return Err(Error::Dimension {
                op: "mul",
                lhs: ash,
                rhs: bsh,
            });
        }
        let a = self.data_rc();
        let b = rhs.data_rc();
        let out = a.iter().zip(b.iter()).map(|(x, y)| x * y).collect();
        let need = [self.requires_grad(), rhs.requires_grad()];
        self.tape.record(OpKind::Mul, ash, out, &[self, rhs], move || {
            move |g: &[f64]| {
                let ga = need[0].then(|| g.iter().zip(b.iter()).map(|(g, y)| g * y).collect());
                let gb = need[1].then(|| g.iter().zip(a.iter()).map(|(g, x)| g * x).collect());
                vec![ga, gb]
            }
        })
    }

    pub fn scale(self, factor: f64) -> Result<Var<'t>> {
        let out = self.data_rc().iter().map(|x| x * factor).collect();
        self.tape
            .record(OpKind::Scale, self.shape(), out, &[self], move || {
                move |g: &[f64]| vec![Some(g.iter().map(|g| g * factor).collect())]
            })
    }

    /// Sum of all entries as a rank-0 tensor.
    pub fn sum(self) -> Result<Var<'t>> {
        let d = self.data_rc();
        let n = d.len();
        let total = d.iter().fold(0.0, |acc, v| acc + v);
        self.tape.record(OpKind::Sum, vec![], vec![total], &[self], move || {
            move |g: &[f64]| vec![Some(vec![g[0]; n])]
        })
    }

    /// Mean over one axis, which is removed from the shape.
    pub fn mean_axis(self, axis: usize) -> Result<Var<'t>> {
        let shape = self.shape();
        check_axis("mean_axis", axis, shape.len())?;
        let (outer, len, inner) = split_axis(&shape, axis);
        if len == 0 {
            return Err(Error::shape("mean over an empty axis"));
        }
        let d = self.data_rc();
        let mut out = vec![0.0; outer * inner];
        let inv = 1.0 / len as f64;
        for o in 0..outer {
            for l in 0..len {
                let src = &d[(o * len + l) * inner..(o * len + l + 1) * inner];
                kernels::add_assign(&mut out[o * inner..(o + 1) * inner], src);
            }
        }
        out.iter_mut().for_each(|v| *v *= inv);
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        self.tape
            .record(OpKind::MeanAxis, out_shape, out, &[self], move || {
                move |g: &[f64]| {
                    let mut gx = vec![0.0; outer * len * inner];
                    for o in 0..outer {
                        let src = &g[o * inner..(o + 1) * inner];
                        for l in 0..len {
                            let dst = &mut gx[(o * len + l) * inner..(o * len + l + 1) * inner];
                            for (d, s) in dst.iter_mut().zip(src) {
                                *d = s * inv;
                            }
                        }
                    }
                    vec![Some(gx)]
                }
            })
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(self, axis: usize) -> Result<Var<'t>> {
        let shape = self.shape();
        check_axis("softmax", axis, shape.len())?;
        let (outer, len, inner) = split_axis(&shape, axis);
        let x = self.data_rc();
        let mut y = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| (o * len + l) * inner + i;
                let mut max = f64::NEG_INFINITY;
                for l in 0..len {
                    max = max.max(x[at(l)]);
                }
                let mut sum = 0.0;
                for l in 0..len {
                    let e = (x[at(l)] - max).exp();
                    y[at(l)] = e;
                    sum += e;
                }
                for l in 0..len {
                    y[at(l)] /= sum;
                }
            }
        }
        let y = Rc::new(y);
        let yb = Rc::clone(&y);
        self.tape
            .record_checked_shared(OpKind::Softmax, shape, y, &[self], move || {
                move |g: &[f64]| {
                    let mut gx = vec![0.0; g.len()];
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |l: usize| (o * len + l) * inner + i;
                            let mut dot = 0.0;
                            for l in 0..len {
                                dot += g[at(l)] * yb[at(l)];
                            }
                            for l in 0..len {
                                gx[at(l)] = yb[at(l)] * (g[at(l)] - dot);
                            }
                        }
                    }
                    vec![Some(gx)]
                }
            })
    }

    /// Softmax over the last axis where masked-out entries get exactly zero
    /// probability. Row `r` uses mask row `(r / group) % mask_rows`; the mask
    /// is `mask_rows × L` with `true` meaning "attend".
    pub fn masked_softmax(
        self,
        mask: Rc<Vec<bool>>,
        mask_rows: usize,
        group: usize,
    ) -> Result<Var<'t>> {
        let shape = self.shape();
        let len = *shape
            .last()
            .ok_or_else(|| Error::shape("masked_softmax on a scalar"))?;
        if mask.len() != mask_rows * len || group == 0 || mask_rows == 0 {
            return Err(Error::shape(format!(
                "mask of {} entries does not fit {mask_rows} rows of length {len}",
                mask.len()
            )));
        }
        let x = self.data_rc();
        let rows = if len == 0 { 0 } else { x.len() / len };
        let mut y = vec![0.0; x.len()];
        for r in 0..rows {
            let mrow = &mask[((r / group) % mask_rows) * len..][..len];
            let xr = &x[r * len..(r + 1) * len];
            let yr = &mut y[r * len..(r + 1) * len];
            let mut max = f64::NEG_INFINITY;
            for (v, &keep) in xr.iter().zip(mrow) {
                if keep {
                    max = max.max(*v);
                }
            }
            if max == f64::NEG_INFINITY {
                return Err(Error::shape("masked_softmax row with every entry masked"));
            }
            let mut sum = 0.0;
            for ((o, v), &keep) in yr.iter_mut().zip(xr).zip(mrow) {
                if keep {
                    *o = (v - max).exp();
                    sum += *o;
                }
            }
            for o in yr.iter_mut() {
                *o /= sum;
            }
        }
        let y = Rc::new(y);
        let yb = Rc::clone(&y);
        self.tape
            .record_checked_shared(OpKind::MaskedSoftmax, shape, y, &[self], move || {
                move |g: &[f64]| {
                    let mut gx = vec![0.0; g.len()];
                    for r in 0..rows {
                        let gr = &g[r * len..(r + 1) * len];
                        let yr = &yb[r * len..(r + 1) * len];
                        let mut dot = 0.0;
                        for (a, b) in gr.iter().zip(yr) {
                            dot += a * b;
                        }
                        for ((o, a), b) in gx[r * len..(r + 1) * len].iter_mut().zip(gr).zip(yr) {
                            *o = b * (a - dot);
                        }
                    }
                    vec![Some(gx)]
                }
            })
    }

    /// Normalizes over the last axis, then applies `gamma`/`beta`.
    pub fn layer_norm(self, gamma: Var<'t>, beta: Var<'t>, eps: f64) -> Result<Var<'t>> {
        let shape = self.shape();
        let c = *shape
            .last()
            .ok_or_else(|| Error::shape("layer_norm on a scalar"))?;
        if gamma.shape() != [c] || beta.shape() != [c] {
            return Err(Error::Dimension {
                op: "layer_norm",
                lhs: shape,
                rhs: gamma.shape(),
            });
        }
        let x = self.data_rc();
        let gm = gamma.data_rc();
        let bt = beta.data_rc();
        let rows = if c == 0 { 0 } else { x.len() / c };
        let mut xhat = vec![0.0; x.len()];
        let mut rstd = vec![0.0; rows];
        let mut y = vec![0.0; x.len()];
        let inv_c = 1.0 / c as f64;
        for r in 0..rows {
            let xr = &x[r * c..(r + 1) * c];
            let mean = xr.iter().fold(0.0, |a, v| a + v) * inv_c;
            let var = xr.iter().fold(0.0, |a, v| a + (v - mean) * (v - mean)) * inv_c;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..c {
                let h = (xr[j] - mean) * rs;
                xhat[r * c + j] = h;
                y[r * c + j] = h * gm[j] + bt[j];
            }
        }
        let need = [
            self.requires_grad(),
            gamma.requires_grad(),
            beta.requires_grad(),
        ];
        self.tape
            .record(OpKind::LayerNorm, shape, y, &[self, gamma, beta], move || {
                move |g: &[f64]| {
                    let gx = need[0].then(|| {
                        let mut gx = vec![0.0; g.len()];
                        for r in 0..rows {
                            let gr = &g[r * c..(r + 1) * c];
                            let hr = &xhat[r * c..(r + 1) * c];
                            let mut mean_dh = 0.0;
                            let mut mean_dh_h = 0.0;
                            for j in 0..c {
                                let dh = gr[j] * gm[j];
                                mean_dh += dh;
                                mean_dh_h += dh * hr[j];
                            }
                            mean_dh *= inv_c;
                            mean_dh_h *= inv_c;
                            for j in 0..c {
                                let dh = gr[j] * gm[j];
                                gx[r * c + j] = rstd[r] * (dh - mean_dh - hr[j] * mean_dh_h);
                            }
                        }
                        gx
                    });
                    let gg = need[1].then(|| {
                        let mut gg = vec![0.0; c];
                        for r in 0..rows {
                            for j in 0..c {
                                gg[j] += g[r * c + j] * xhat[r * c + j];
                            }
                        }
                        gg
                    });
                    let gb = need[2].then(|| {
                        let mut gb = vec![0.0; c];
                        for r in 0..rows {
                            kernels::add_assign(&mut gb, &g[r * c..(r + 1) * c]);
                        }
                        gb
                    });
                    vec![gx, gg, gb]
                }
            })
    }

    pub fn activation(self, kind: Activation) -> Result<Var<'t>> {
        let x = self.data_rc();
        let shape = self.shape();
        match kind {
            Activation::Relu => {
                let y = x.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
                self.tape.record(OpKind::Relu, shape, y, &[self], move || {
                    move |g: &[f64]| {
                        vec![Some(
                            g.iter()
                                .zip(x.iter())
                                .map(|(g, &v)| if v > 0.0 { *g } else { 0.0 })
                                .collect(),
                        )]
                    }
                })
            }
            Activation::Gelu => {
                let y = x.iter().map(|&v| gelu(v)).collect();
                self.tape.record(OpKind::Gelu, shape, y, &[self], move || {
                    move |g: &[f64]| {
                        vec![Some(
                            g.iter().zip(x.iter()).map(|(g, &v)| g * gelu_grad(v)).collect(),
                        )]
                    }
                })
            }
            Activation::Tanh => {
                let y: Rc<Vec<f64>> = Rc::new(x.iter().map(|v| v.tanh()).collect());
                let yb = Rc::clone(&y);
                self.tape
                    .record_checked_shared(OpKind::Tanh, shape, y, &[self], move || {
                        move |g: &[f64]| {
                            vec![Some(
                                g.iter().zip(yb.iter()).map(|(g, y)| g * (1.0 - y * y)).collect(),
                            )]
                        }
                    })
            }
        }
    }

    pub fn relu(self) -> Result<Var<'t>> {
        self.activation(Activation::Relu)
    }

    pub fn gelu(self) -> Result<Var<'t>> {
        self.activation(Activation::Gelu)
    }

    pub fn tanh(self) -> Result<Var<'t>> {
        self.activation(Activation::Tanh)
    }

    /// Same data, new shape. The buffer is shared, not copied.
    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let old = self.shape();
        if numel(&old) != numel(shape) {
            return Err(Error::Dimension {
                op: "reshape",
                lhs: old,
                rhs: shape.to_vec(),
            });
        }
        self.tape
            .record_shared(OpKind::Reshape, shape.to_vec(), self.data_rc(), &[self], || {
                |g: &[f64]| vec![Some(g.to_vec())]
            })
    }

    /// Output axis `i` is input axis `axes[i]`.
    pub fn permute(self, axes: &[usize]) -> Result<Var<'t>> {
        let shape = self.shape();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len()
            || axes.iter().any(|&a| a >= shape.len() || std::mem::replace(&mut seen[a], true))
        {
            return Err(Error::shape(format!(
                "permute: {axes:?} is not a permutation of rank {}",
                shape.len()
            )));
        }
        let out = kernels::permute(&self.data_rc(), &shape, axes);
        let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
        let mut inverse = vec![0; axes.len()];
        for (i, &a) in axes.iter().enumerate() {
            inverse[a] = i;
        }
        let back_shape = out_shape.clone();
        self.tape
            .record(OpKind::Permute, out_shape, out, &[self], move || {
                move |g: &[f64]| vec![Some(kernels::permute(g, &back_shape, &inverse))]
            })
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Result<Var<'t>> {
        let shape = self.shape();
        check_axis("narrow", axis, shape.len())?;
        if start + len > shape[axis] {
            return Err(Error::shape(format!(
                "narrow: [{start}, {}) exceeds extent {} of axis {axis}",
                start + len,
                shape[axis]
            )));
        }
        let (outer, full, inner) = split_axis(&shape, axis);
        let d = self.data_rc();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(&d[(o * full + start) * inner..(o * full + start + len) * inner]);
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        self.tape
            .record(OpKind::Narrow, out_shape, out, &[self], move || {
                move |g: &[f64]| {
                    let mut gx = vec![0.0; outer * full * inner];
                    for o in 0..outer {
                        gx[(o * full + start) * inner..(o * full + start + len) * inner]
                            .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                    }
                    vec![Some(gx)]
                }
            })
    }

    /// Concatenation along `axis`; all other extents must agree.
    pub fn concat(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat of zero tensors"))?;
        let tape = first.tape;
        let base = first.shape();
        check_axis("concat", axis, base.len())?;
        let shapes: Vec<Vec<usize>> = parts.iter().map(|p| p.shape()).collect();
        for s in &shapes {
            let ok = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(Error::Dimension {
                    op: "concat",
                    lhs: base.clone(),
                    rhs: s.clone(),
                });
            }
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let lens: Vec<usize> = shapes.iter().map(|s| s[axis]).collect();
        let total: usize = lens.iter().sum();
        let datas: Vec<Rc<Vec<f64>>> = parts.iter().map(|p| p.data_rc()).collect();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (d, &l) in datas.iter().zip(&lens) {
                out.extend_from_slice(&d[o * l * inner..(o + 1) * l * inner]);
            }
        }
        let mut out_shape = base.clone();
        out_shape[axis] = total;
        let need: Vec<bool> = parts.iter().map(|p| p.requires_grad()).collect();
        tape.record(OpKind::Concat, out_shape, out, parts, move || {
            move |g: &[f64]| {
                let mut grads: Vec<Option<Vec<f64>>> = need
                    .iter()
                    .zip(&lens)
                    .map(|(&n, &l)| n.then(|| Vec::with_capacity(outer * l * inner)))
                    .collect();
                let mut off = 0;
                for _ in 0..outer {
                    for (gp, &l) in grads.iter_mut().zip(&lens) {
                        if let Some(gp) = gp {
                            gp.extend_from_slice(&g[off..off + l * inner]);
                        }
                        off += l * inner;
                    }
                }
                grads
            }
        })
    }

    /// `x: [b, L, c]` → `[b, idx.len(), c]`, row `i` being `x[:, idx[i], :]`
    /// or zeros for `None`.
    pub fn gather_rows(self, idx: Rc<Vec<Option<usize>>>) -> Result<Var<'t>> {
        let shape = self.shape();
        if shape.len() != 3 {
            return Err(Error::shape(format!("gather_rows expects rank 3, got {shape:?}")));
        }
        let (b, l, c) = (shape[0], shape[1], shape[2]);
        if let Some(bad) = idx.iter().flatten().find(|&&i| i >= l) {
            return Err(Error::shape(format!("gather_rows index {bad} out of range {l}")));
        }
        let n = idx.len();
        let x = self.data_rc();
        let mut out = vec![0.0; b * n * c];
        for bi in 0..b {
            for (i, src) in idx.iter().enumerate() {
                if let Some(s) = src {
                    let from = &x[(bi * l + s) * c..(bi * l + s + 1) * c];
                    out[(bi * n + i) * c..(bi * n + i + 1) * c].copy_from_slice(from);
                }
            }
        }
        self.tape
            .record(OpKind::GatherRows, vec![b, n, c], out, &[self], move || {
                move |g: &[f64]| {
                    let mut gx = vec![0.0; b * l * c];
                    for bi in 0..b {
                        for (i, src) in idx.iter().enumerate() {
                            if let Some(s) = src {
                                kernels::add_assign(
                                    &mut gx[(bi * l + s) * c..(bi * l + s + 1) * c],
                                    &g[(bi * n + i) * c..(bi * n + i + 1) * c],
                                );
                            }
                        }
                    }
                    vec![Some(gx)]
                }
            })
    }

    /// Flat gather: `out.flat[i] = self.flat[idx[i]]`, zero for `None`.
    pub fn gather_flat(self, idx: Rc<Vec<Option<usize>>>, shape: &[usize]) -> Result<Var<'t>> {
        if numel(shape) != idx.len() {
            return Err(Error::shape(format!(
                "gather_flat: {} indices for shape {shape:?}",
                idx.len()
            )));
        }
        let x = self.data_rc();
        let n = x.len();
        if let Some(bad) = idx.iter().flatten().find(|&&i| i >= n) {
            return Err(Error::shape(format!("gather_flat index {bad} out of range {n}")));
        }
        let out = idx.iter().map(|i| i.map_or(0.0, |i| x[i])).collect();
        self.tape
            .record(OpKind::GatherFlat, shape.to_vec(), out, &[self], move || {
                move |g: &[f64]| {
                    let mut gx = vec![0.0; n];
                    for (gv, i) in g.iter().zip(idx.iter()) {
                        if let Some(i) = i {
                            gx[*i] += gv;
                        }
                    }
                    vec![Some(gx)]
                }
            })
    }

    /// Repeats the tensor along a new leading axis of extent `n`.
    pub fn broadcast_leading(self, n: usize) -> Result<Var<'t>> {
        let shape = self.shape();
        let x = self.data_rc();
        let period = x.len();
        let mut out = Vec::with_capacity(n * period);
        for _ in 0..n {
            out.extend_from_slice(&x);
        }
        let mut out_shape = vec![n];
        out_shape.extend_from_slice(&shape);
        self.tape
            .record(OpKind::BroadcastLeading, out_shape, out, &[self], move || {
                move |g: &[f64]| {
                    let mut gx = vec![0.0; period];
                    if period > 0 {
                        for chunk in g.chunks(period) {
                            kernels::add_assign(&mut gx, chunk);
                        }
                    }
                    vec![Some(gx)]
                }
            })
    }

    /// Mean softmax cross-entropy of `[batch, classes]` logits.
    pub fn cross_entropy(self, labels: &[usize]) -> Result<Var<'t>> {
        let shape = self.shape();
        if shape.len() != 2 || shape[0] != labels.len() || shape[0] == 0 {
            return Err(Error::shape(format!(
                "cross_entropy: logits {shape:?} with {} labels",
                labels.len()
            )));
        }
        let (b, c) = (shape[0], shape[1]);
        if let Some(bad) = labels.iter().find(|&&y| y >= c) {
            return Err(Error::shape(format!("label {bad} out of range for {c} classes")));
        }
        let z = self.data_rc();
        let mut probs = vec![0.0; b * c];
        let mut total = 0.0;
        for r in 0..b {
            let zr = &z[r * c..(r + 1) * c];
            let max = zr.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (p, v) in probs[r * c..(r + 1) * c].iter_mut().zip(zr) {
                *p = (v - max).exp();
                sum += *p;
            }
            probs[r * c..(r + 1) * c].iter_mut().for_each(|p| *p /= sum);
            total += max + sum.ln() - zr[labels[r]];
        }
        let loss = total / b as f64;
        let labels = labels.to_vec();
        self.tape
            .record(OpKind::CrossEntropy, vec![], vec![loss], &[self], move || {
                move |g: &[f64]| {
                    let scale = g[0] / b as f64;
                    let mut gz = probs;
                    for (r, &y) in labels.iter().enumerate() {
                        gz[r * c + y] -= 1.0;
                    }
                    gz.iter_mut().for_each(|v| *v *= scale);
                    vec![Some(gz)]
                }
            })
    }
}
