//! Spatial-aware local-temporal attention: convolutional q/k/v projections
//! keep spatial structure, multi-head attention runs along the temporal
//! axis at every spatial location, and a 3D-convolutional feed-forward
//! mixes local spacetime. Residual connections preserve the token shape
//! `[T,H,W,C]`.

use std::sync::Arc;

use super::layers::{Conv2dLayer, Conv3dLayer, GroupNormLayer};
use super::{Fwd, Params};
use crate::error::Result;
use crate::real::Real;
use crate::tensor::{AttentionMask, Var};

pub struct SaltBlock {
    norm1: GroupNormLayer,
    q: Conv2dLayer,
    k: Conv2dLayer,
    v: Conv2dLayer,
    proj: Conv2dLayer,
    norm2: GroupNormLayer,
    ffn1: Conv3dLayer,
    ffn2: Conv3dLayer,
    heads: usize,
}

impl SaltBlock {
    /// `causal` makes the feed-forward see only steps `<= t`, which decoder
    /// stacks need for prefix-invariant forecasts.
    pub fn new<S: Real>(
        p: &mut Params<S>,
        name: &str,
        width: usize,
        heads: usize,
        causal: bool,
        seed: u64,
    ) -> Self {
        SaltBlock {
            norm1: GroupNormLayer::new(p, &format!("{name}.norm1"), width),
            q: Conv2dLayer::new(p, &format!("{name}.q"), 3, width, width, 1, 1, seed, false),
            k: Conv2dLayer::new(p, &format!("{name}.k"), 3, width, width, 1, 1, seed, false),
            v: Conv2dLayer::new(p, &format!("{name}.v"), 3, width, width, 1, 1, seed, false),
            proj: Conv2dLayer::new(p, &format!("{name}.proj"), 1, width, width, 1, 0, seed, false),
            norm2: GroupNormLayer::new(p, &format!("{name}.norm2"), width),
            ffn1: Conv3dLayer::new(p, &format!("{name}.ffn1"), 3, 3, width, width, causal, seed),
            ffn2: Conv3dLayer::new(p, &format!("{name}.ffn2"), 3, 3, width, width, causal, seed),
            heads,
        }
    }

    /// `tokens` is `[T,H,W,C]`; `mask` (over `T x T`) gates the temporal
    /// attention; `segments` split the T axis for the feed-forward so
    /// separate modalities never mix except through (masked) attention.
    pub fn forward<S: Real>(
        &self,
        f: &mut Fwd<S>,
        tokens: Var,
        mask: Option<&AttentionMask>,
        segments: &[usize],
    ) -> Result<Var> {
        let shape = f.g.shape(tokens).to_vec();
        let (t, h, w, c) = (shape[0], shape[1], shape[2], shape[3]);
        debug_assert_eq!(segments.iter().sum::<usize>(), t);

        // temporal attention over conv-projected maps
        let normed = self.norm1.forward_frames(f, tokens)?;
        let q = self.q.forward_frames(f, normed)?;
        let k = self.k.forward_frames(f, normed)?;
        let v = self.v.forward_frames(f, normed)?;
        let qb = to_location_batches(f, q, t, h * w, c)?;
        let kb = to_location_batches(f, k, t, h * w, c)?;
        let vb = to_location_batches(f, v, t, h * w, c)?;
        let att = f.g.multi_head_attention(qb, kb, vb, self.heads, mask)?;
        let att = from_location_batches(f, att, t, h, w, c)?;
        let att = self.proj.forward_frames(f, att)?;
        let x = f.g.add(tokens, att)?;

        // per-segment 3D-convolutional feed-forward
        let normed = self.norm2.forward_frames(f, x)?;
        let mut outs = Vec::with_capacity(segments.len());
        let mut start = 0usize;
        for &len in segments {
            let seg = f.g.slice_first(normed, start, len)?;
            let y = self.ffn1.forward(f, seg)?;
            let y = f.g.silu(y);
            let y = self.ffn2.forward(f, y)?;
            outs.push(y);
            start += len;
        }
        let ffn = if outs.len() == 1 { outs[0] } else { f.g.concat_first(&outs)? };
        f.g.add(x, ffn)
    }
}

/// `[T,H,W,C] -> [HW,T,C]`: per-location temporal sequences.
pub fn to_location_batches<S: Real>(
    f: &mut Fwd<S>,
    x: Var,
    t: usize,
    hw: usize,
    c: usize,
) -> Result<Var> {
    let mut idx = Vec::with_capacity(t * hw * c);
    for loc in 0..hw {
        for step in 0..t {
            for ch in 0..c {
                idx.push(((step * hw + loc) * c + ch) as u32);
            }
        }
    }
    f.g.gather_flat(x, Arc::new(idx), vec![hw, t, c])
}

/// Inverse of [`to_location_batches`].
pub fn from_location_batches<S: Real>(
    f: &mut Fwd<S>,
    x: Var,
    t: usize,
    h: usize,
    w: usize,
    c: usize,
) -> Result<Var> {
    let hw = h * w;
    let mut idx = Vec::with_capacity(t * hw * c);
    for step in 0..t {
        for loc in 0..hw {
            for ch in 0..c {
                idx.push(((loc * t + step) * c + ch) as u32);
            }
        }
    }
    f.g.gather_flat(x, Arc::new(idx), vec![t, h, w, c])
}

/// History rows attend history; future row `i` additionally attends future
/// rows up to itself. Keeps every forecast a pure function of the history
/// prefix, so growing `n_future` never changes earlier frames.
pub fn causal_decoder_mask(n_memory: usize, n_future: usize) -> AttentionMask {
    let t = n_memory + n_future;
    let mut m = AttentionMask::all_allowed(t, t);
    for iq in 0..t {
        for ik in 0..t {
            let allowed = if iq < n_memory {
                ik < n_memory
            } else {
                ik < n_memory || ik <= iq
            };
            m.set(iq, ik, allowed);
        }
    }
    m
}

/// Occupancy rows may not attend image rows; image rows see everything.
pub fn cross_modal_mask(n_occ: usize, n_img: usize) -> AttentionMask {
    let t = n_occ + n_img;
    let mut m = AttentionMask::all_allowed(t, t);
    for iq in 0..n_occ {
        for ik in n_occ..t {
            m.set(iq, ik, false);
        }
    }
    m
}
