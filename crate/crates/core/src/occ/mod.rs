//! Occupancy-grid data model: semantic voxel grids with spatial metadata,
//! class embedding, BEV collapse and patch tokenization. Class id 0 is
//! reserved for empty/free space; whether a class is dynamic is data-driven
//! via the per-grid class table.

pub mod io;

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::{Graph, Tensor, Var};

/// One row of the class table.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassDef {
    pub name: String,
    pub dynamic: bool,
}

impl ClassDef {
    pub fn fixed(name: &str) -> Self {
        ClassDef { name: name.to_string(), dynamic: false }
    }

    pub fn moving(name: &str) -> Self {
        ClassDef { name: name.to_string(), dynamic: true }
    }
}

/// Dense semantic voxel grid in the ego frame. `classes` is row-major over
/// `(h, w, d)`; `origin` is the ego-frame position (meters) of the corner of
/// voxel `(0,0,0)`. Axis `h` runs along ego x (forward), `w` along ego y,
/// `d` along ego z.
#[derive(Clone, Debug, PartialEq)]
pub struct OccupancyGrid {
    pub dims: [usize; 3],
    pub voxel_size: [f32; 3],
    pub origin: [f32; 3],
    pub classes: Vec<u8>,
    pub table: Vec<ClassDef>,
}

/// Reserved id of empty/free space.
pub const FREE: u8 = 0;

impl OccupancyGrid {
    pub fn new(
        dims: [usize; 3],
        voxel_size: [f32; 3],
        origin: [f32; 3],
        classes: Vec<u8>,
        table: Vec<ClassDef>,
    ) -> Result<Self> {
        if table.is_empty() || table.len() > 256 {
            return Err(Error::config(format!("class table size {} out of range", table.len())));
        }
        if table[0].dynamic {
            return Err(Error::config("class id 0 (free space) cannot be dynamic"));
        }
        let numel = dims[0] * dims[1] * dims[2];
        if classes.len() != numel {
            return Err(Error::data(format!(
                "grid {dims:?} needs {numel} voxels, got {}",
                classes.len()
            )));
        }
        if let Some(pos) = classes.iter().position(|&c| c as usize >= table.len()) {
            let (h, w, d) = Self::unindex(dims, pos);
            return Err(Error::data(format!(
                "class id {} at voxel ({h},{w},{d}) exceeds table of {} classes",
                classes[pos],
                table.len()
            )));
        }
        Ok(OccupancyGrid { dims, voxel_size, origin, classes, table })
    }

    pub fn free(dims: [usize; 3], voxel_size: [f32; 3], origin: [f32; 3], table: Vec<ClassDef>) -> Result<Self> {
        let numel = dims[0] * dims[1] * dims[2];
        Self::new(dims, voxel_size, origin, vec![FREE; numel], table)
    }

    #[inline]
    pub fn index(&self, h: usize, w: usize, d: usize) -> usize {
        (h * self.dims[1] + w) * self.dims[2] + d
    }

    fn unindex(dims: [usize; 3], idx: usize) -> (usize, usize, usize) {
        let d = idx % dims[2];
        let w = (idx / dims[2]) % dims[1];
        let h = idx / (dims[2] * dims[1]);
        (h, w, d)
    }

    #[inline]
    pub fn class_at(&self, h: usize, w: usize, d: usize) -> u8 {
        self.classes[self.index(h, w, d)]
    }

    pub fn num_classes(&self) -> usize {
        self.table.len()
    }

    /// Ego-frame coordinates (meters) of the center of voxel `(h, w, d)`.
    pub fn voxel_center(&self, h: usize, w: usize, d: usize) -> [f64; 3] {
        [
            self.origin[0] as f64 + (h as f64 + 0.5) * self.voxel_size[0] as f64,
            self.origin[1] as f64 + (w as f64 + 0.5) * self.voxel_size[1] as f64,
            self.origin[2] as f64 + (d as f64 + 0.5) * self.voxel_size[2] as f64,
        ]
    }

    /// Inverse of [`Self::voxel_center`] on the ground plane, fractional.
    pub fn cell_coords(&self, x: f64, y: f64) -> (f64, f64) {
        (
            (x - self.origin[0] as f64) / self.voxel_size[0] as f64 - 0.5,
            (y - self.origin[1] as f64) / self.voxel_size[1] as f64 - 0.5,
        )
    }

    /// Fraction of voxels, per class, that equal the class (diagnostics).
    pub fn class_histogram(&self) -> Vec<usize> {
        let mut hist = vec![0usize; self.table.len()];
        for &c in &self.classes {
            hist[c as usize] += 1;
        }
        hist
    }
}

/// Learnable per-class embedding table; rows must match the class table.
#[derive(Clone, Debug)]
pub struct ClassEmbedding<S> {
    pub table: Tensor<S>,
}

impl<S: Real> ClassEmbedding<S> {
    pub fn new(table: Tensor<S>, num_classes: usize) -> Result<Self> {
        if table.shape().len() != 2 || table.shape()[0] != num_classes {
            return Err(Error::config(format!(
                "class embedding shape {:?} does not cover {num_classes} classes",
                table.shape()
            )));
        }
        Ok(ClassEmbedding { table })
    }

    pub fn dim(&self) -> usize {
        self.table.shape()[1]
    }
}

/// Per-voxel table lookup: `[H0,W0,D0]` class ids against a `[K,C0]` table
/// gives `[H0,W0,D0,C0]`, differentiable w.r.t. the table.
pub fn embed_classes<S: Real>(g: &mut Graph<S>, grid: &OccupancyGrid, table: Var) -> Result<Var> {
    let k = g.shape(table)[0];
    if let Some(pos) = grid.classes.iter().position(|&c| c as usize >= k) {
        let (h, w, d) = OccupancyGrid::unindex(grid.dims, pos);
        return Err(Error::data(format!(
            "class id {} at voxel ({h},{w},{d}) out of embedding range {k}",
            grid.classes[pos]
        )));
    }
    let ids: Arc<Vec<u32>> = Arc::new(grid.classes.iter().map(|&c| c as u32).collect());
    let flat = g.embed(table, ids)?;
    let c0 = g.shape(flat)[1];
    g.reshape(flat, vec![grid.dims[0], grid.dims[1], grid.dims[2], c0])
}

/// Folds the height axis into channels: `[H0,W0,D0,C0] -> [H0,W0,D0*C0]`,
/// d-major (channel index = `d*C0 + c`). Pure reshape, hence invertible.
pub fn collapse_to_bev<S: Real>(g: &mut Graph<S>, emb: Var) -> Result<Var> {
    let s = g.shape(emb).to_vec();
    if s.len() != 4 {
        return Err(Error::dim("collapse_to_bev", &s, &[0, 0, 0, 0]));
    }
    g.reshape(emb, vec![s[0], s[1], s[2] * s[3]])
}

/// Inverse of [`collapse_to_bev`].
pub fn expand_from_bev<S: Real>(g: &mut Graph<S>, bev: Var, d0: usize) -> Result<Var> {
    let s = g.shape(bev).to_vec();
    if s.len() != 3 || s[2] % d0 != 0 {
        return Err(Error::dim("expand_from_bev", &s, &[d0]));
    }
    g.reshape(bev, vec![s[0], s[1], d0, s[2] / d0])
}

/// Flat gather indices realizing patchify: output token channel layout is
/// `(pi*P + pj)*Cb + c` for within-patch offset `(pi, pj)`.
pub fn patchify_indices(h0: usize, w0: usize, cb: usize, p: usize) -> Vec<u32> {
    let (h, w) = (h0 / p, w0 / p);
    let cw = p * p * cb;
    let mut idx = vec![0u32; h0 * w0 * cb];
    for th in 0..h {
        for tw in 0..w {
            for pi in 0..p {
                for pj in 0..p {
                    for c in 0..cb {
                        let o = ((th * w + tw) * cw) + (pi * p + pj) * cb + c;
                        let src = ((th * p + pi) * w0 + (tw * p + pj)) * cb + c;
                        idx[o] = src as u32;
                    }
                }
            }
        }
    }
    idx
}

pub fn unpatchify_indices(h0: usize, w0: usize, cb: usize, p: usize) -> Vec<u32> {
    let fwd = patchify_indices(h0, w0, cb, p);
    let mut inv = vec![0u32; fwd.len()];
    for (o, &src) in fwd.iter().enumerate() {
        inv[src as usize] = o as u32;
    }
    inv
}

/// Decomposes a BEV map `[H0,W0,Cb]` into non-overlapping `P x P` patches:
/// `[H0/P, W0/P, P*P*Cb]`.
pub fn patchify<S: Real>(g: &mut Graph<S>, bev: Var, p: usize) -> Result<Var> {
    let s = g.shape(bev).to_vec();
    if s.len() != 3 {
        return Err(Error::dim("patchify", &s, &[0, 0, 0]));
    }
    if p == 0 || s[0] % p != 0 || s[1] % p != 0 {
        return Err(Error::config(format!(
            "patchify: spatial dims {}x{} not divisible by patch size {p}",
            s[0], s[1]
        )));
    }
    let idx = Arc::new(patchify_indices(s[0], s[1], s[2], p));
    g.gather_flat(bev, idx, vec![s[0] / p, s[1] / p, p * p * s[2]])
}

/// Exact inverse of [`patchify`].
pub fn unpatchify<S: Real>(g: &mut Graph<S>, tokens: Var, p: usize) -> Result<Var> {
    let s = g.shape(tokens).to_vec();
    if s.len() != 3 || s[2] % (p * p) != 0 {
        return Err(Error::config(format!(
            "unpatchify: token shape {s:?} incompatible with patch size {p}"
        )));
    }
    let cb = s[2] / (p * p);
    let (h0, w0) = (s[0] * p, s[1] * p);
    let idx = Arc::new(unpatchify_indices(h0, w0, cb, p));
    g.gather_flat(tokens, idx, vec![h0, w0, cb])
}

/// Token view of a BEV map plus the metadata needed to invert it.
#[derive(Clone, Debug)]
pub struct PatchTokens<S> {
    pub tokens: Tensor<S>,
    pub patch: usize,
    /// `(H0, W0, D0, C0)` of the grid the tokens came from.
    pub provenance: (usize, usize, usize, usize),
}
