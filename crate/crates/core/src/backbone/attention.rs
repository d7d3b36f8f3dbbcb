use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::Var;

/// Per-group key mask. Group `g` of the attention batch reads mask row
/// `g % rows`; each row covers every key.
#[derive(Clone, Debug)]
pub struct KeyMask {
    pub mask: Rc<Vec<bool>>,
    pub rows: usize,
}

pub struct AttentionOutput<'t> {
    /// `[groups, queries, d]`, heads concatenated.
    pub out: Var<'t>,
    /// `[groups, heads, queries, keys]`
    pub probs: Var<'t>,
}

/// Splits the last axis of `[g, n, d]` into heads: `[g·heads, n, d/heads]`.
pub fn split_heads<'t>(x: Var<'t>, heads: usize) -> Result<Var<'t>> {
    let s = x.shape();
    let (g, n, d) = (s[0], s[1], s[2]);
    x.reshape(&[g, n, heads, d / heads])?
        .permute(&[0, 2, 1, 3])?
        .reshape(&[g * heads, n, d / heads])
}

/// Inverse of [`split_heads`].
pub fn merge_heads<'t>(x: Var<'t>, heads: usize) -> Result<Var<'t>> {
    let s = x.shape();
    let (gh, n, hd) = (s[0], s[1], s[2]);
    x.reshape(&[gh / heads, heads, n, hd])?
        .permute(&[0, 2, 1, 3])?
        .reshape(&[gh / heads, n, heads * hd])
}

/// Scaled dot-product attention over `groups` independent token sets.
///
/// `q: [g, n, d]`, `k, v: [g, m, d]`. Heads are contiguous `d/heads`-wide
/// slices. `bias`, when given, is added to the `[g, heads, n, m]` logits,
/// repeating over leading groups; its element count must divide theirs.
pub fn multi_head_attention<'t>(
    q: Var<'t>,
    k: Var<'t>,
    v: Var<'t>,
    heads: usize,
    bias: Option<Var<'t>>,
    mask: Option<&KeyMask>,
) -> Result<AttentionOutput<'t>> {
    let (qs, ks, vs) = (q.shape(), k.shape(), v.shape());
    if qs.len() != 3 || ks.len() != 3 || ks != vs || qs[0] != ks[0] || qs[2] != ks[2] {
        return Err(Error::Dimension {
            op: "attention",
            lhs: qs,
            rhs: ks,
        });
    }
    let (g, n, d) = (qs[0], qs[1], qs[2]);
    let m = ks[1];
    if heads == 0 || d % heads != 0 {
        return Err(Error::shape(format!("width {d} does not split into {heads} heads")));
    }
    let hd = d / heads;
    let qh = split_heads(q, heads)?.scale(1.0 / (hd as f64).sqrt())?;
    let kh = split_heads(k, heads)?;
    let vh = split_heads(v, heads)?;
    let mut logits = qh.bmm(kh, true)?;
    if let Some(bias) = bias {
        let period = bias.shape().iter().product::<usize>();
        let total = g * heads * n * m;
        if period == 0 || !total.is_multiple_of(period) {
            return Err(Error::Dimension {
                op: "attention bias",
                lhs: vec![g, heads, n, m],
                rhs: bias.shape(),
            });
        }
        logits = logits
            .reshape(&[total / period, period])?
            .add(bias.reshape(&[period])?)?
            .reshape(&[g * heads, n, m])?;
    }
    let probs = match mask {
        Some(km) => logits.masked_softmax(Rc::clone(&km.mask), km.rows, heads * n)?,
        None => logits.masked_softmax(Rc::new(vec![true; m]), 1, 1)?,
    };
    let out = merge_heads(probs.bmm(vh, false)?, heads)?;
    Ok(AttentionOutput {
        out,
        probs: probs.reshape(&[g, heads, n, m])?,
    })
}
