//! Ego-pose algebra on SE(2), BEV flow fields and their frame transform,
//! dynamic/static decoupling, backward-warping of BEV features by flow, and
//! grid-level static transport. Forecast-time semantics: a future cell is
//! filled by *sampling* the current map at `center - flow` (gather, never
//! splat); static cells sample at the pure ego-motion displacement instead.

pub mod io;

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::occ::{OccupancyGrid, FREE};
use crate::real::Real;
use crate::tensor::{Graph, Tensor, Var};

// ------------------------------------------------------------------ SE(2)

/// Ego pose in the global frame; `yaw` is normalized to `(-pi, pi]`.
/// A pose maps local coordinates to global ones: `g = R(yaw) l + t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EgoPose {
    pub x: f64,
    pub y: f64,
    pub yaw: f64,
}

pub fn normalize_angle(a: f64) -> f64 {
    let mut a = (a + PI).rem_euclid(2.0 * PI) - PI;
    if a == -PI {
        a = PI;
    }
    a
}

impl EgoPose {
    pub fn new(x: f64, y: f64, yaw: f64) -> Self {
        EgoPose { x, y, yaw: normalize_angle(yaw) }
    }

    pub fn identity() -> Self {
        EgoPose { x: 0.0, y: 0.0, yaw: 0.0 }
    }

    /// `(self . other)(p) = self(other(p))`.
    pub fn compose(&self, other: &EgoPose) -> EgoPose {
        let (s, c) = self.yaw.sin_cos();
        EgoPose::new(
            self.x + c * other.x - s * other.y,
            self.y + s * other.x + c * other.y,
            self.yaw + other.yaw,
        )
    }

    pub fn inverse(&self) -> EgoPose {
        let (s, c) = self.yaw.sin_cos();
        EgoPose::new(-(c * self.x + s * self.y), -(-s * self.x + c * self.y), -self.yaw)
    }

    /// `to` expressed in `from`'s frame: `from^-1 . to`.
    pub fn relative(from: &EgoPose, to: &EgoPose) -> EgoPose {
        from.inverse().compose(to)
    }

    pub fn transform_point(&self, p: [f64; 2]) -> [f64; 2] {
        let (s, c) = self.yaw.sin_cos();
        [self.x + c * p[0] - s * p[1], self.y + s * p[0] + c * p[1]]
    }

    pub fn rotate_vector(&self, v: [f64; 2]) -> [f64; 2] {
        let (s, c) = self.yaw.sin_cos();
        [c * v[0] - s * v[1], s * v[0] + c * v[1]]
    }
}

/// Per-step `(dx, dy, dyaw)` of a trajectory, each expressed in the earlier
/// pose's frame; shape `[(N-1), 3]`.
pub fn relative_displacements<S: Real>(trajectory: &[EgoPose]) -> Result<Tensor<S>> {
    if trajectory.len() < 2 {
        return Err(Error::config("relative_displacements needs at least 2 poses"));
    }
    let mut data = Vec::with_capacity((trajectory.len() - 1) * 3);
    for pair in trajectory.windows(2) {
        let rel = EgoPose::relative(&pair[0], &pair[1]);
        data.extend_from_slice(&[S::of(rel.x), S::of(rel.y), S::of(rel.yaw)]);
    }
    Tensor::new(vec![trajectory.len() - 1, 3], data)
}

// ------------------------------------------------------------- BEV layout

/// Geometric binding of a `HxW` BEV map: ego-frame position of cell (0,0)'s
/// corner and the cell pitch in meters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BevLayout {
    pub h: usize,
    pub w: usize,
    pub origin: [f64; 2],
    pub cell: [f64; 2],
}

impl BevLayout {
    pub fn from_grid(grid: &OccupancyGrid) -> Self {
        BevLayout {
            h: grid.dims[0],
            w: grid.dims[1],
            origin: [grid.origin[0] as f64, grid.origin[1] as f64],
            cell: [grid.voxel_size[0] as f64, grid.voxel_size[1] as f64],
        }
    }

    /// The same area at `1/p` resolution (token grid).
    pub fn coarser(&self, p: usize) -> Self {
        BevLayout {
            h: self.h / p,
            w: self.w / p,
            origin: self.origin,
            cell: [self.cell[0] * p as f64, self.cell[1] * p as f64],
        }
    }

    pub fn center(&self, i: usize, j: usize) -> [f64; 2] {
        [
            self.origin[0] + (i as f64 + 0.5) * self.cell[0],
            self.origin[1] + (j as f64 + 0.5) * self.cell[1],
        ]
    }

    /// Fractional cell coordinates of an ego-frame point.
    pub fn coords(&self, p: [f64; 2]) -> [f64; 2] {
        [
            (p[0] - self.origin[0]) / self.cell[0] - 0.5,
            (p[1] - self.origin[1]) / self.cell[1] - 0.5,
        ]
    }
}

// ------------------------------------------------------------- flow field

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FlowFrame {
    /// Flow as decoded, expressed in the current ego frame.
    Current,
    /// Flow after the current-to-future transform.
    Future,
}

/// Dense per-BEV-cell displacement maps in meters, one per future frame;
/// layout `(n, h, w, 2)`. The frame tag flips exactly once, via
/// [`transform_flow`].
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub frame: FlowFrame,
    pub data: Vec<f32>,
}

impl FlowField {
    pub fn new(frames: usize, height: usize, width: usize, frame: FlowFrame, data: Vec<f32>) -> Result<Self> {
        if data.len() != frames * height * width * 2 {
            return Err(Error::data(format!(
                "flow field {frames}x{height}x{width}x2 needs {} values, got {}",
                frames * height * width * 2,
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::data(format!("non-finite flow value at element {pos}")));
        }
        Ok(FlowField { frames, height, width, frame, data })
    }

    pub fn zeros(frames: usize, height: usize, width: usize, frame: FlowFrame) -> Self {
        FlowField { frames, height, width, frame, data: vec![0.0; frames * height * width * 2] }
    }

    #[inline]
    pub fn at(&self, n: usize, i: usize, j: usize) -> [f32; 2] {
        let base = ((n * self.height + i) * self.width + j) * 2;
        [self.data[base], self.data[base + 1]]
    }

    pub fn frame_slice(&self, n: usize) -> &[f32] {
        let sz = self.height * self.width * 2;
        &self.data[n * sz..(n + 1) * sz]
    }
}

/// Applies an SE(2) map to every flow vector: `out = R * f + T`.
pub fn apply_se2_to_flow(data: &[f32], rel: &EgoPose) -> Vec<f32> {
    let (s, c) = rel.yaw.sin_cos();
    let mut out = vec![0.0f32; data.len()];
    for (o, f) in out.chunks_exact_mut(2).zip(data.chunks_exact(2)) {
        let (fx, fy) = (f[0] as f64, f[1] as f64);
        o[0] = (c * fx - s * fy + rel.x) as f32;
        o[1] = (s * fx + c * fy + rel.y) as f32;
    }
    out
}

/// The current-to-future point transform `M_cf = future^-1 . current`,
/// i.e. the map taking current-ego coordinates to future-ego coordinates.
pub fn current_to_future(current: &EgoPose, future: &EgoPose) -> EgoPose {
    EgoPose::relative(future, current)
}

/// Converts a current-frame flow map into future frames by the
/// current-to-future transform of each frame's pose (`R*f + T` per cell).
/// `futures` supplies one pose per flow frame.
pub fn transform_flow(flow: &FlowField, current: &EgoPose, futures: &[EgoPose]) -> Result<FlowField> {
    if flow.frame != FlowFrame::Current {
        return Err(Error::state("flow already transformed into future frames"));
    }
    if futures.len() != flow.frames {
        return Err(Error::config(format!(
            "{} future poses for {} flow frames",
            futures.len(),
            flow.frames
        )));
    }
    let sz = flow.height * flow.width * 2;
    let mut data = vec![0.0f32; flow.data.len()];
    for (n, fut) in futures.iter().enumerate() {
        let rel = current_to_future(current, fut);
        let piece = apply_se2_to_flow(&flow.data[n * sz..(n + 1) * sz], &rel);
        data[n * sz..(n + 1) * sz].copy_from_slice(&piece);
    }
    Ok(FlowField { frames: flow.frames, height: flow.height, width: flow.width, frame: FlowFrame::Future, data })
}

/// Graph-side Eq of [`apply_se2_to_flow`] for one frame: flow `[H,W,2]` in
/// the current frame becomes future-frame flow, differentiably.
pub fn transform_flow_graph<S: Real>(
    g: &mut Graph<S>,
    flow: Var,
    current: &EgoPose,
    future: &EgoPose,
) -> Result<Var> {
    let s = g.shape(flow).to_vec();
    let m: usize = s[..s.len() - 1].iter().product();
    let rel = current_to_future(current, future);
    let (sn, cs) = (rel.yaw.sin(), rel.yaw.cos());
    // row-vector convention: out = f * R^T + T
    let rt = Tensor::new(vec![2, 2], vec![S::of(cs), S::of(sn), S::of(-sn), S::of(cs)])?;
    let t = Tensor::new(vec![2], vec![S::of(rel.x), S::of(rel.y)])?;
    let flat = g.reshape(flow, vec![m, 2])?;
    let rtv = g.constant(&rt);
    let rotated = g.matmul(flat, rtv)?;
    let tv = g.constant(&t);
    let shifted = g.add(rotated, tv)?;
    g.reshape(shifted, s)
}

// ----------------------------------------------------------- dynamic mask

/// Per-BEV-cell dynamic indicator; true where the column holds at least one
/// voxel of a dynamic class.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DynamicMask {
    pub h: usize,
    pub w: usize,
    pub mask: Vec<bool>,
}

impl DynamicMask {
    #[inline]
    pub fn get(&self, i: usize, j: usize) -> bool {
        self.mask[i * self.w + j]
    }

    pub fn none(h: usize, w: usize) -> Self {
        DynamicMask { h, w, mask: vec![false; h * w] }
    }

    pub fn all(h: usize, w: usize) -> Self {
        DynamicMask { h, w, mask: vec![true; h * w] }
    }

    /// Coarsens to a token grid: a token is dynamic iff any covered cell is.
    pub fn coarser(&self, p: usize) -> DynamicMask {
        let (h, w) = (self.h / p, self.w / p);
        let mut mask = vec![false; h * w];
        for th in 0..h {
            for tw in 0..w {
                'scan: for pi in 0..p {
                    for pj in 0..p {
                        if self.get(th * p + pi, tw * p + pj) {
                            mask[th * w + tw] = true;
                            break 'scan;
                        }
                    }
                }
            }
        }
        DynamicMask { h, w, mask }
    }
}

pub fn dynamic_mask(grid: &OccupancyGrid) -> DynamicMask {
    let [h0, w0, d0] = grid.dims;
    let mut mask = vec![false; h0 * w0];
    for h in 0..h0 {
        for w in 0..w0 {
            for d in 0..d0 {
                if grid.table[grid.class_at(h, w, d) as usize].dynamic {
                    mask[h * w0 + w] = true;
                    break;
                }
            }
        }
    }
    DynamicMask { h: h0, w: w0, mask }
}

// ------------------------------------------------------------- warping

/// Source sample position (ego meters) for an output cell on the dynamic
/// branch: `center - flow`.
fn dynamic_source(layout: &BevLayout, i: usize, j: usize, f: [f32; 2]) -> [f64; 2] {
    let c = layout.center(i, j);
    [c[0] - f[0] as f64, c[1] - f[1] as f64]
}

/// Source sample position on the static branch: the exact future-to-current
/// point transform ("flow is zero" transport).
fn static_source(layout: &BevLayout, i: usize, j: usize, fut_to_cur: &EgoPose) -> [f64; 2] {
    fut_to_cur.transform_point(layout.center(i, j))
}

/// Differentiable decoupled warp of one future frame. `feat` `[H,W,C]` and
/// `flow_future` `[H,W,2]` (future frame, meters) live on the graph; the
/// gradient reaches both, but only through dynamic cells — static cells
/// sample at constant coordinates. Out-of-grid samples return `fill`.
#[allow(clippy::too_many_arguments)]
pub fn warp_features_graph<S: Real>(
    g: &mut Graph<S>,
    feat: Var,
    flow_future: Var,
    mask: &DynamicMask,
    layout: &BevLayout,
    current: &EgoPose,
    future: &EgoPose,
    fill: Var,
) -> Result<Var> {
    let (h, w) = (layout.h, layout.w);
    let c = {
        let s = g.shape(feat);
        if s.len() != 3 || s[0] != h || s[1] != w {
            return Err(Error::dim("warp_features feat", s, &[h, w, 0]));
        }
        s[2]
    };
    if g.shape(flow_future) != [h, w, 2] {
        return Err(Error::dim("warp_features flow", g.shape(flow_future), &[h, w, 2]));
    }
    if mask.h != h || mask.w != w {
        return Err(Error::dim("warp_features mask", &[mask.h, mask.w], &[h, w]));
    }
    if g.values(flow_future).iter().any(|v| !v.f64().is_finite()) {
        return Err(Error::data("NaN/inf in flow field"));
    }
    let m = h * w;
    // dynamic coords: integer cell index minus flow in cell units
    let mut ij = Vec::with_capacity(m * 2);
    for i in 0..h {
        for j in 0..w {
            ij.push(S::of(i as f64));
            ij.push(S::of(j as f64));
        }
    }
    let ij = g.constant(&Tensor::new(vec![m, 2], ij)?);
    let inv_cell = Tensor::new(vec![2], vec![S::of(1.0 / layout.cell[0]), S::of(1.0 / layout.cell[1])])?;
    let inv_cell = g.constant(&inv_cell);
    let flow_flat = g.reshape(flow_future, vec![m, 2])?;
    let flow_cells = g.mul(flow_flat, inv_cell)?;
    let coords_dyn = g.sub(ij, flow_cells)?;
    // static coords: exact SE(2) transport, constant
    let fut_to_cur = EgoPose::relative(current, future);
    let mut stat = Vec::with_capacity(m * 2);
    for i in 0..h {
        for j in 0..w {
            let s = static_source(layout, i, j, &fut_to_cur);
            let cc = layout.coords(s);
            stat.push(S::of(cc[0]));
            stat.push(S::of(cc[1]));
        }
    }
    let coords_stat = g.constant(&Tensor::new(vec![m, 2], stat)?);
    let dyn_s = g.sample_bilinear(feat, coords_dyn, fill)?;
    let stat_s = g.sample_bilinear(feat, coords_stat, fill)?;
    let mvec: Vec<S> = mask.mask.iter().map(|&b| if b { S::one() } else { S::zero() }).collect();
    let mvar = g.constant(&Tensor::new(vec![m, 1], mvec)?);
    let inv = g.affine(mvar, -1.0, 1.0);
    let a = g.mul(mvar, dyn_s)?;
    let b = g.mul(inv, stat_s)?;
    let blended = g.add(a, b)?;
    g.reshape(blended, vec![h, w, c])
}

/// Non-graph wrapper over [`warp_features_graph`] for one or all frames of
/// a future-tagged flow field. Output `[N_f,H,W,C]`.
#[allow(clippy::too_many_arguments)]
pub fn warp_features<S: Real>(
    feat: &Tensor<S>,
    flow: &FlowField,
    masks: &[DynamicMask],
    layout: &BevLayout,
    current: &EgoPose,
    futures: &[EgoPose],
    fill: &Tensor<S>,
) -> Result<Tensor<S>> {
    if flow.frame != FlowFrame::Future {
        return Err(Error::state("warp_features expects a future-frame flow"));
    }
    if masks.len() != flow.frames || futures.len() != flow.frames {
        return Err(Error::config(format!(
            "{} masks and {} poses for {} flow frames",
            masks.len(),
            futures.len(),
            flow.frames
        )));
    }
    let mut g = Graph::new();
    let featv = g.constant(feat);
    let fillv = g.constant(fill);
    let mut frames = Vec::with_capacity(flow.frames);
    for n in 0..flow.frames {
        let fdata: Vec<S> = flow.frame_slice(n).iter().map(|&v| S::of(v as f64)).collect();
        let fvar = g.constant(&Tensor::new(vec![flow.height, flow.width, 2], fdata)?);
        let warped = warp_features_graph(
            &mut g, featv, fvar, &masks[n], layout, current, &futures[n], fillv,
        )?;
        frames.push(g.reshape(warped, vec![1, layout.h, layout.w, feat.shape()[2]])?);
    }
    let out = g.concat_first(&frames)?;
    Ok(g.detach(out))
}

/// Brute-force reference for [`warp_features`]: an explicit per-cell
/// 4-neighbor interpolation loop in f64 sharing no code with the graph path.
#[allow(clippy::too_many_arguments)]
pub fn warp_oracle<S: Real>(
    feat: &Tensor<S>,
    flow: &FlowField,
    masks: &[DynamicMask],
    layout: &BevLayout,
    current: &EgoPose,
    futures: &[EgoPose],
    fill: &Tensor<S>,
) -> Tensor<S> {
    assert_eq!(flow.frame, FlowFrame::Future);
    let (h, w) = (layout.h, layout.w);
    let c = feat.shape()[2];
    let fv: Vec<f64> = feat.to_f64_vec();
    let fillv: Vec<f64> = fill.to_f64_vec();
    let mut out = vec![S::zero(); flow.frames * h * w * c];
    for n in 0..flow.frames {
        // future -> current point map written out long-hand:
        // c = R(yaw_f - yaw_c) u + R(-yaw_c)(t_f - t_c)
        let rel_yaw = futures[n].yaw - current.yaw;
        let (rs, rc) = rel_yaw.sin_cos();
        let dxg = futures[n].x - current.x;
        let dyg = futures[n].y - current.y;
        let (cs, cc) = current.yaw.sin_cos();
        let tx = cc * dxg + cs * dyg;
        let ty = -cs * dxg + cc * dyg;
        for i in 0..h {
            for j in 0..w {
                let cx = layout.origin[0] + (i as f64 + 0.5) * layout.cell[0];
                let cy = layout.origin[1] + (j as f64 + 0.5) * layout.cell[1];
                let (sx, sy) = if masks[n].get(i, j) {
                    let f = flow.at(n, i, j);
                    (cx - f[0] as f64, cy - f[1] as f64)
                } else {
                    (rc * cx - rs * cy + tx, rs * cx + rc * cy + ty)
                };
                let gx = (sx - layout.origin[0]) / layout.cell[0] - 0.5;
                let gy = (sy - layout.origin[1]) / layout.cell[1] - 0.5;
                let opix = &mut out[((n * h + i) * w + j) * c..][..c];
                if gx < 0.0 || gx > (h - 1) as f64 || gy < 0.0 || gy > (w - 1) as f64 {
                    for (o, &f) in opix.iter_mut().zip(&fillv) {
                        *o = S::of(f);
                    }
                    continue;
                }
                // one-sided lower-cell rule at exact integers, re-derived
                let (x0, wx) = if gx == gx.floor() && gx >= 1.0 {
                    (gx as usize - 1, 1.0)
                } else {
                    (gx.floor() as usize, gx - gx.floor())
                };
                let (y0, wy) = if gy == gy.floor() && gy >= 1.0 {
                    (gy as usize - 1, 1.0)
                } else {
                    (gy.floor() as usize, gy - gy.floor())
                };
                let x1 = (x0 + 1).min(h - 1);
                let y1 = (y0 + 1).min(w - 1);
                for ch in 0..c {
                    let v00 = fv[(x0 * w + y0) * c + ch];
                    let v01 = fv[(x0 * w + y1) * c + ch];
                    let v10 = fv[(x1 * w + y0) * c + ch];
                    let v11 = fv[(x1 * w + y1) * c + ch];
                    let v = (1.0 - wx) * ((1.0 - wy) * v00 + wy * v01)
                        + wx * ((1.0 - wy) * v10 + wy * v11);
                    opix[ch] = S::of(v);
                }
            }
        }
    }
    Tensor::new(vec![flow.frames, h, w, c], out).unwrap()
}

/// Transports a dynamic mask to a future frame through the same backward
/// flow lookup the warp uses: a destination cell is dynamic iff its
/// dynamic-branch source cell (nearest neighbor) is dynamic.
pub fn warp_mask(
    mask: &DynamicMask,
    flow: &FlowField,
    frame_idx: usize,
    layout: &BevLayout,
) -> DynamicMask {
    assert_eq!(flow.frame, FlowFrame::Future);
    let (h, w) = (layout.h, layout.w);
    let mut out = vec![false; h * w];
    for i in 0..h {
        for j in 0..w {
            let f = flow.at(frame_idx, i, j);
            let s = dynamic_source(layout, i, j, f);
            let cc = layout.coords(s);
            let si = cc[0].round();
            let sj = cc[1].round();
            if si < 0.0 || sj < 0.0 || si >= h as f64 || sj >= w as f64 {
                continue;
            }
            out[i * w + j] = mask.get(si as usize, sj as usize);
        }
    }
    DynamicMask { h, w, mask: out }
}

// -------------------------------------------------------- static transport

/// Re-indexes the static content of `grid` into the future ego frame by the
/// exact SE(2) transform, nearest-neighbor. Dynamic-source and out-of-grid
/// cells become free.
pub fn static_transport(grid: &OccupancyGrid, current: &EgoPose, future: &EgoPose) -> OccupancyGrid {
    let [h0, w0, d0] = grid.dims;
    let layout = BevLayout::from_grid(grid);
    let fut_to_cur = EgoPose::relative(current, future);
    let mut out = vec![FREE; grid.classes.len()];
    for i in 0..h0 {
        for j in 0..w0 {
            let s = static_source(&layout, i, j, &fut_to_cur);
            let cc = layout.coords(s);
            let si = cc[0].round();
            let sj = cc[1].round();
            if si < 0.0 || sj < 0.0 || si >= h0 as f64 || sj >= w0 as f64 {
                continue;
            }
            let (si, sj) = (si as usize, sj as usize);
            for d in 0..d0 {
                let cls = grid.class_at(si, sj, d);
                if !grid.table[cls as usize].dynamic {
                    out[(i * w0 + j) * d0 + d] = cls;
                }
            }
        }
    }
    OccupancyGrid {
        dims: grid.dims,
        voxel_size: grid.voxel_size,
        origin: grid.origin,
        classes: out,
        table: grid.table.clone(),
    }
}

/// Builds the flat `[M,2]` coordinate table mapping every cell of `dst` to
/// its sampling position in `src` under pure ego motion (used by decoders
/// that need constant static-branch coordinates).
pub fn static_sample_coords(
    layout: &BevLayout,
    current: &EgoPose,
    future: &EgoPose,
) -> Vec<f64> {
    let fut_to_cur = EgoPose::relative(current, future);
    let mut out = Vec::with_capacity(layout.h * layout.w * 2);
    for i in 0..layout.h {
        for j in 0..layout.w {
            let s = static_source(layout, i, j, &fut_to_cur);
            let cc = layout.coords(s);
            out.push(cc[0]);
            out.push(cc[1]);
        }
    }
    out
}

/// Constant-velocity extrapolation of the last history step, used to realize
/// future ego frames when only history is given: repeatedly composes the
/// last relative step onto the last pose.
pub fn extrapolate_poses(history: &[EgoPose], n_future: usize) -> Vec<EgoPose> {
    assert!(!history.is_empty());
    let step = if history.len() >= 2 {
        EgoPose::relative(&history[history.len() - 2], &history[history.len() - 1])
    } else {
        EgoPose::identity()
    };
    let mut out = Vec::with_capacity(n_future);
    let mut cur = *history.last().unwrap();
    for _ in 0..n_future {
        cur = cur.compose(&step);
        out.push(cur);
    }
    out
}

