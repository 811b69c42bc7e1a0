//! Training losses (cross entropy, Lovasz-softmax, image L2, pose L1, the
//! weighted total) and the three evaluation protocols: occupancy mIoU/IoU,
//! planning L2/collision rate, and ray-cast point-cloud Chamfer distance,
//! plus the copy-last-frame baseline they are all compared against.

use std::path::Path;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::exec;
use crate::geometry::EgoPose;
use crate::occ::{OccupancyGrid, FREE};
use crate::real::Real;
use crate::tensor::{Graph, Var};

// ------------------------------------------------------------------ losses

/// Mean per-voxel cross entropy plus Lovasz-softmax over `[M,K]` logits.
pub fn occ_loss<S: Real>(g: &mut Graph<S>, logits: Var, targets: &[u8]) -> Result<(Var, Var)> {
    let shape = g.shape(logits).to_vec();
    let k = *shape.last().ok_or_else(|| Error::config("occ_loss: scalar logits"))?;
    let m: usize = shape[..shape.len() - 1].iter().product();
    if targets.len() != m {
        return Err(Error::dim("occ_loss targets", &[targets.len()], &[m]));
    }
    let flat = g.reshape(logits, vec![m, k])?;
    let ids: Arc<Vec<u32>> = Arc::new(targets.iter().map(|&t| t as u32).collect());
    let logp = g.log_softmax_lastdim(flat)?;
    let picked = g.gather_lastdim(logp, ids)?;
    let nll = g.mean_all(picked);
    let ce = g.scale(nll, -1.0);
    let lovasz = lovasz_softmax(g, flat, targets)?;
    Ok((ce, lovasz))
}

/// Lovasz-softmax: per present class, the dot product of descending-sorted
/// prediction errors with the gradient of the Jaccard-loss extension,
/// averaged over classes present in the target.
pub fn lovasz_softmax<S: Real>(g: &mut Graph<S>, logits: Var, targets: &[u8]) -> Result<Var> {
    let shape = g.shape(logits).to_vec();
    let k = shape[1];
    let m = shape[0];
    let probs = g.softmax_lastdim(logits)?;
    let mut present: Vec<u8> = targets.to_vec();
    present.sort_unstable();
    present.dedup();
    let mut class_losses = Vec::new();
    for &c in &present {
        let fg: Vec<f64> = targets.iter().map(|&t| if t == c { 1.0 } else { 0.0 }).collect();
        // p_c column of the softmax
        let col_idx: Arc<Vec<u32>> = Arc::new((0..m).map(|r| (r * k + c as usize) as u32).collect());
        let pc = g.gather_flat(probs, col_idx, vec![m])?;
        // errors = fg + (1 - 2 fg) * p_c  (== |fg - p_c| since p in [0,1])
        let coeff = g.constant(&crate::tensor::Tensor::new(
            vec![m],
            fg.iter().map(|&f| S::of(1.0 - 2.0 * f)).collect(),
        )?);
        let fgv = g.constant(&crate::tensor::Tensor::new(
            vec![m],
            fg.iter().map(|&f| S::of(f)).collect(),
        )?);
        let scaled = g.mul(pc, coeff)?;
        let errors = g.add(scaled, fgv)?;
        // sort descending by the eagerly-computed error values
        let mut order: Vec<u32> = (0..m as u32).collect();
        let vals = g.values(errors);
        order.sort_by(|&a, &b| {
            vals[b as usize]
                .partial_cmp(&vals[a as usize])
                .unwrap()
                .then(a.cmp(&b))
        });
        let fg_sorted: Vec<f64> = order.iter().map(|&i| fg[i as usize]).collect();
        let grad = lovasz_jaccard_grad(&fg_sorted);
        let sorted = g.gather_flat(errors, Arc::new(order), vec![m])?;
        let gradv = g.constant(&crate::tensor::Tensor::new(
            vec![m],
            grad.iter().map(|&v| S::of(v)).collect(),
        )?);
        let prod = g.mul(sorted, gradv)?;
        class_losses.push(g.sum_all(prod));
    }
    let mut total = class_losses[0];
    for &l in &class_losses[1..] {
        total = g.add(total, l)?;
    }
    Ok(g.scale(total, 1.0 / class_losses.len() as f64))
}

/// Gradient of the Jaccard-loss extension for a descending-sorted 0/1
/// ground-truth vector.
pub fn lovasz_jaccard_grad(fg_sorted: &[f64]) -> Vec<f64> {
    let p: f64 = fg_sorted.iter().sum();
    let mut jaccard = Vec::with_capacity(fg_sorted.len());
    let mut cum = 0.0;
    for (i, &f) in fg_sorted.iter().enumerate() {
        cum += f;
        let intersection = p - cum;
        let union = p + (i as f64 + 1.0) - cum;
        jaccard.push(1.0 - intersection / union);
    }
    let mut grad = jaccard.clone();
    for i in (1..grad.len()).rev() {
        grad[i] -= jaccard[i - 1];
    }
    grad
}

/// Mean squared error over pixels.
pub fn img_loss<S: Real>(g: &mut Graph<S>, pred: Var, gt: Var) -> Result<Var> {
    if g.shape(pred) != g.shape(gt) {
        return Err(Error::dim("img_loss", g.shape(pred), g.shape(gt)));
    }
    let d = g.sub(pred, gt)?;
    let sq = g.mul(d, d)?;
    Ok(g.mean_all(sq))
}

/// Mean absolute error over waypoints.
pub fn pose_loss<S: Real>(g: &mut Graph<S>, pred: Var, gt: Var) -> Result<Var> {
    if g.shape(pred) != g.shape(gt) {
        return Err(Error::dim("pose_loss", g.shape(pred), g.shape(gt)));
    }
    let d = g.sub(pred, gt)?;
    let a = g.abs(d);
    Ok(g.mean_all(a))
}

/// Balancing weights of the total objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub occ: f64,
    pub img: f64,
    pub pose: f64,
    pub rpc: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { occ: 1.0, img: 0.1, pose: 1.0, rpc: 0.1 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("occ", self.occ), ("img", self.img), ("pose", self.pose), ("rpc", self.rpc)] {
            if v < 0.0 || !v.is_finite() {
                return Err(Error::config(format!("loss weight {name} = {v} must be >= 0")));
            }
        }
        Ok(())
    }
}

/// Scalar loss parts on the graph; absent branches contribute nothing.
pub struct LossParts {
    pub occ_ce: Var,
    pub occ_lovasz: Var,
    pub img: Option<Var>,
    pub pose: Var,
    pub rpc: Option<Var>,
}

/// All components of one training step's objective, recorded for logging.
#[derive(Clone, Copy, Debug, Default)]
pub struct LossBreakdown {
    pub occ_ce: f64,
    pub occ_lovasz: f64,
    pub img_l2: f64,
    pub pose_l1: f64,
    pub rpc: f64,
    pub total: f64,
}

/// `total = w.occ (ce + lovasz) + w.img img + w.pose pose + w.rpc rpc`.
pub fn total_loss<S: Real>(
    g: &mut Graph<S>,
    parts: &LossParts,
    weights: &LossWeights,
) -> Result<(Var, LossBreakdown)> {
    weights.validate()?;
    let occ = g.add(parts.occ_ce, parts.occ_lovasz)?;
    let mut total = g.scale(occ, weights.occ);
    let mut bd = LossBreakdown {
        occ_ce: g.values(parts.occ_ce)[0].f64(),
        occ_lovasz: g.values(parts.occ_lovasz)[0].f64(),
        ..Default::default()
    };
    if let Some(img) = parts.img {
        bd.img_l2 = g.values(img)[0].f64();
        let w = g.scale(img, weights.img);
        total = g.add(total, w)?;
    }
    bd.pose_l1 = g.values(parts.pose)[0].f64();
    let wp = g.scale(parts.pose, weights.pose);
    total = g.add(total, wp)?;
    if let Some(rpc) = parts.rpc {
        bd.rpc = g.values(rpc)[0].f64();
        let w = g.scale(rpc, weights.rpc);
        total = g.add(total, w)?;
    }
    bd.total = g.values(total)[0].f64();
    Ok((total, bd))
}

// ------------------------------------------------------------- mIoU / IoU

/// Intersection/union tallies, per class, accumulated over samples.
#[derive(Clone, Debug, Default)]
pub struct IouCounts {
    /// (intersection, union) per class id.
    pub per_class: Vec<(u64, u64)>,
    /// occupied-vs-free binary tallies
    pub bin_inter: u64,
    pub bin_union: u64,
    /// classes observed anywhere in the ground truth
    pub gt_present: Vec<bool>,
}

impl IouCounts {
    pub fn new(num_classes: usize) -> Self {
        IouCounts {
            per_class: vec![(0, 0); num_classes],
            bin_inter: 0,
            bin_union: 0,
            gt_present: vec![false; num_classes],
        }
    }

    pub fn add(&mut self, pred: &OccupancyGrid, gt: &OccupancyGrid) -> Result<()> {
        if pred.dims != gt.dims {
            return Err(Error::dim("miou_iou", &pred.dims, &gt.dims));
        }
        for (&p, &t) in pred.classes.iter().zip(&gt.classes) {
            if t != FREE {
                self.gt_present[t as usize] = true;
            }
            if p != FREE || t != FREE {
                self.bin_union += 1;
                if p != FREE && t != FREE {
                    self.bin_inter += 1;
                }
            }
            for c in 1..self.per_class.len() as u8 {
                let pi = p == c;
                let ti = t == c;
                if pi || ti {
                    self.per_class[c as usize].1 += 1;
                    if pi && ti {
                        self.per_class[c as usize].0 += 1;
                    }
                }
            }
        }
        Ok(())
    }

    /// Percentages. mIoU averages per-class IoU over classes present in the
    /// ground truth (free excluded); `dynamic_of` restricts it further.
    pub fn miou(&self, restrict: Option<&[bool]>) -> f64 {
        let mut sum = 0.0;
        let mut n = 0usize;
        for c in 1..self.per_class.len() {
            if !self.gt_present[c] {
                continue;
            }
            if let Some(dynamic) = restrict {
                if !dynamic[c] {
                    continue;
                }
            }
            let (i, u) = self.per_class[c];
            let iou = if u == 0 { 1.0 } else { i as f64 / u as f64 };
            sum += iou;
            n += 1;
        }
        if n == 0 {
            100.0
        } else {
            100.0 * sum / n as f64
        }
    }

    pub fn iou(&self) -> f64 {
        if self.bin_union == 0 {
            100.0
        } else {
            100.0 * self.bin_inter as f64 / self.bin_union as f64
        }
    }
}

/// Single-pair convenience: `(mIoU %, IoU %)`.
pub fn miou_iou(pred: &OccupancyGrid, gt: &OccupancyGrid) -> Result<(f64, f64)> {
    let mut c = IouCounts::new(gt.num_classes());
    c.add(pred, gt)?;
    Ok((c.miou(None), c.iou()))
}

// ---------------------------------------------------------------- planning

/// Axis-aligned footprint collision in the grid's own ego frame: true iff
/// the rectangle (center, half extents, meters) overlaps, with positive
/// area, any occupied voxel whose height interval intersects `z_band`
/// (the ego body's height range — the road surface sits below it).
pub fn footprint_collides(
    grid: &OccupancyGrid,
    center: [f64; 2],
    half: [f64; 2],
    z_band: (f64, f64),
) -> bool {
    let [h0, w0, d0] = grid.dims;
    let (sx, sy, sz) = (
        grid.voxel_size[0] as f64,
        grid.voxel_size[1] as f64,
        grid.voxel_size[2] as f64,
    );
    let (ox, oy, oz) = (grid.origin[0] as f64, grid.origin[1] as f64, grid.origin[2] as f64);
    let rx = (center[0] - half[0], center[0] + half[0]);
    let ry = (center[1] - half[1], center[1] + half[1]);
    for i in 0..h0 {
        let cx = (ox + i as f64 * sx, ox + (i + 1) as f64 * sx);
        if cx.1.min(rx.1) - cx.0.max(rx.0) <= 0.0 {
            continue;
        }
        for j in 0..w0 {
            let cy = (oy + j as f64 * sy, oy + (j + 1) as f64 * sy);
            if cy.1.min(ry.1) - cy.0.max(ry.0) <= 0.0 {
                continue;
            }
            for d in 0..d0 {
                let cz = (oz + d as f64 * sz, oz + (d + 1) as f64 * sz);
                if cz.1.min(z_band.1) - cz.0.max(z_band.0) <= 0.0 {
                    continue;
                }
                if grid.class_at(i, j, d) != FREE {
                    return true;
                }
            }
        }
    }
    false
}

/// L2 waypoint error and footprint collision rate, accumulated per horizon.
#[derive(Clone, Debug)]
pub struct PlanningCounts {
    pub l2_sum: Vec<f64>,
    pub collisions: Vec<u64>,
    pub samples: Vec<u64>,
    pub half_extents: [f64; 2],
    /// Height band of the ego body; obstacles outside it (the road layer)
    /// do not count as collisions.
    pub z_band: (f64, f64),
}

impl PlanningCounts {
    pub fn new(n_horizons: usize, half_extents: [f64; 2], z_band: (f64, f64)) -> Self {
        PlanningCounts {
            l2_sum: vec![0.0; n_horizons],
            collisions: vec![0; n_horizons],
            samples: vec![0; n_horizons],
            half_extents,
            z_band,
        }
    }

    /// `pred`/`gt` are future waypoints in the current ego frame (one per
    /// future frame); `gt_poses` and `gt_grids` realize the future frames.
    pub fn add(
        &mut self,
        horizons: &[usize],
        pred: &[[f64; 2]],
        gt: &[[f64; 2]],
        current: &EgoPose,
        gt_poses: &[EgoPose],
        gt_grids: &[OccupancyGrid],
    ) -> Result<()> {
        for (hi, &f) in horizons.iter().enumerate() {
            if f >= pred.len() || f >= gt.len() || f >= gt_grids.len() {
                return Err(Error::config(format!("horizon frame {f} beyond forecast length")));
            }
            let dx = pred[f][0] - gt[f][0];
            let dy = pred[f][1] - gt[f][1];
            self.l2_sum[hi] += (dx * dx + dy * dy).sqrt();
            self.samples[hi] += 1;
            // predicted waypoint expressed in the future GT ego frame
            let global = current.transform_point(pred[f]);
            let in_future = gt_poses[f].inverse().transform_point(global);
            if footprint_collides(&gt_grids[f], in_future, self.half_extents, self.z_band) {
                self.collisions[hi] += 1;
            }
        }
        Ok(())
    }

    pub fn l2(&self, hi: usize) -> f64 {
        if self.samples[hi] == 0 {
            0.0
        } else {
            self.l2_sum[hi] / self.samples[hi] as f64
        }
    }

    pub fn collision_pct(&self, hi: usize) -> f64 {
        if self.samples[hi] == 0 {
            0.0
        } else {
            100.0 * self.collisions[hi] as f64 / self.samples[hi] as f64
        }
    }
}

// ----------------------------------------------------------------- chamfer

/// Deterministic lidar-like ray fan: `n_az` azimuths x one direction per
/// elevation (radians).
pub fn lidar_rays(n_az: usize, elevations: &[f64]) -> Vec<[f64; 3]> {
    let mut out = Vec::with_capacity(n_az * elevations.len());
    for &el in elevations {
        let (se, ce) = el.sin_cos();
        for a in 0..n_az {
            let az = a as f64 / n_az as f64 * std::f64::consts::TAU;
            let (sa, ca) = az.sin_cos();
            out.push([ce * ca, ce * sa, se]);
        }
    }
    out
}

/// First occupied-voxel intersection of a ray with the grid (voxel-entry
/// point), via Amanatides-Woo traversal. Distances are capped at `t_max`.
pub fn first_hit(grid: &OccupancyGrid, origin: [f64; 3], dir: [f64; 3], t_max: f64) -> Option<[f64; 3]> {
    let [h0, w0, d0] = grid.dims;
    let dims = [h0 as f64, w0 as f64, d0 as f64];
    let vox = [
        grid.voxel_size[0] as f64,
        grid.voxel_size[1] as f64,
        grid.voxel_size[2] as f64,
    ];
    let org = [grid.origin[0] as f64, grid.origin[1] as f64, grid.origin[2] as f64];
    // entry time into the volume box
    let mut t0 = 0.0f64;
    let mut t1 = t_max;
    for a in 0..3 {
        let lo = org[a];
        let hi = org[a] + dims[a] * vox[a];
        if dir[a].abs() < 1e-12 {
            if origin[a] < lo || origin[a] > hi {
                return None;
            }
            continue;
        }
        let ta = (lo - origin[a]) / dir[a];
        let tb = (hi - origin[a]) / dir[a];
        let (ta, tb) = if ta <= tb { (ta, tb) } else { (tb, ta) };
        t0 = t0.max(ta);
        t1 = t1.min(tb);
        if t0 > t1 {
            return None;
        }
    }
    let eps = 1e-9;
    let start = [
        origin[0] + (t0 + eps) * dir[0],
        origin[1] + (t0 + eps) * dir[1],
        origin[2] + (t0 + eps) * dir[2],
    ];
    let mut cell = [0isize; 3];
    for a in 0..3 {
        cell[a] = (((start[a] - org[a]) / vox[a]).floor() as isize).clamp(0, dims[a] as isize - 1);
    }
    let mut t_next = [0.0f64; 3];
    let mut t_delta = [f64::INFINITY; 3];
    let mut step = [0isize; 3];
    for a in 0..3 {
        if dir[a] > 1e-12 {
            step[a] = 1;
            t_next[a] = ((cell[a] as f64 + 1.0) * vox[a] + org[a] - origin[a]) / dir[a];
            t_delta[a] = vox[a] / dir[a];
        } else if dir[a] < -1e-12 {
            step[a] = -1;
            t_next[a] = (cell[a] as f64 * vox[a] + org[a] - origin[a]) / dir[a];
            t_delta[a] = -vox[a] / dir[a];
        } else {
            t_next[a] = f64::INFINITY;
        }
    }
    let mut t_entry = t0.max(0.0);
    loop {
        let (h, w, d) = (cell[0] as usize, cell[1] as usize, cell[2] as usize);
        if grid.class_at(h, w, d) != FREE {
            return Some([
                origin[0] + t_entry * dir[0],
                origin[1] + t_entry * dir[1],
                origin[2] + t_entry * dir[2],
            ]);
        }
        // advance to the next voxel boundary
        let a = if t_next[0] <= t_next[1] && t_next[0] <= t_next[2] {
            0
        } else if t_next[1] <= t_next[2] {
            1
        } else {
            2
        };
        t_entry = t_next[a];
        if t_entry > t1.min(t_max) {
            return None;
        }
        cell[a] += step[a];
        if cell[a] < 0 || cell[a] >= dims[a] as isize {
            return None;
        }
        t_next[a] += t_delta[a];
    }
}

/// Surface point cloud of a grid: one point per ray that hits anything.
pub fn raycast_cloud(grid: &OccupancyGrid, origin: [f64; 3], rays: &[[f64; 3]], t_max: f64) -> Vec<[f64; 3]> {
    let hits = exec::map_indexed(rays.len(), |i| first_hit(grid, origin, rays[i], t_max));
    hits.into_iter().flatten().collect()
}

/// Symmetric Chamfer distance in m^2: the mean over both directions of
/// squared nearest-neighbor distances. An empty cloud (when the other is
/// not) is scored as `far^2` and flagged.
pub fn chamfer(pred: &[[f64; 3]], gt: &[[f64; 3]], far: f64) -> (f64, bool) {
    if pred.is_empty() && gt.is_empty() {
        return (0.0, false);
    }
    if pred.is_empty() || gt.is_empty() {
        return (far * far, true);
    }
    let dir = |a: &[[f64; 3]], b: &[[f64; 3]]| -> f64 {
        let sums = exec::map_indexed(a.len(), |i| {
            let p = a[i];
            let mut best = f64::INFINITY;
            for q in b {
                let d = (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2);
                if d < best {
                    best = d;
                }
            }
            best
        });
        sums.iter().sum::<f64>() / a.len() as f64
    };
    ((dir(pred, gt) + dir(gt, pred)) / 2.0, false)
}

// ---------------------------------------------------------------- baseline

/// Copy-last-frame forecaster: repeats the last observed grid for every
/// future horizon, optionally transporting it by ego motion (all classes
/// ride along; the baseline has no notion of dynamics).
pub fn copy_last_baseline(
    history: &[OccupancyGrid],
    current: &EgoPose,
    futures: &[EgoPose],
    transport: bool,
) -> Result<Vec<OccupancyGrid>> {
    let last = history.last().ok_or_else(|| Error::config("empty history"))?;
    let mut out = Vec::with_capacity(futures.len());
    for fut in futures {
        if transport {
            out.push(pose_transport_all(last, current, fut));
        } else {
            out.push(last.clone());
        }
    }
    Ok(out)
}

/// Nearest-neighbor reindex of *all* voxel content into a future frame
/// (unlike [`static_transport`], dynamic classes are carried along).
pub fn pose_transport_all(grid: &OccupancyGrid, current: &EgoPose, future: &EgoPose) -> OccupancyGrid {
    let [h0, w0, d0] = grid.dims;
    let layout = crate::geometry::BevLayout::from_grid(grid);
    let fut_to_cur = EgoPose::relative(current, future);
    let mut out = vec![FREE; grid.classes.len()];
    for i in 0..h0 {
        for j in 0..w0 {
            let c = layout.center(i, j);
            let s = fut_to_cur.transform_point(c);
            let cc = layout.coords(s);
            let si = cc[0].round();
            let sj = cc[1].round();
            if si < 0.0 || sj < 0.0 || si >= h0 as f64 || sj >= w0 as f64 {
                continue;
            }
            for d in 0..d0 {
                out[(i * w0 + j) * d0 + d] = grid.class_at(si as usize, sj as usize, d);
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

// ------------------------------------------------------------------ report

/// One row of the metric CSV.
#[derive(Clone, Copy, Debug, Default)]
pub struct MetricRow {
    pub miou: f64,
    pub iou: f64,
    pub miou_dynamic: f64,
    pub l2_m: f64,
    pub collision_pct: f64,
    pub chamfer_m2: f64,
    pub baseline_miou: f64,
    pub baseline_iou: f64,
    pub baseline_miou_dynamic: f64,
    pub baseline_chamfer_m2: f64,
}

/// Per-horizon metrics plus the arithmetic-mean `avg` row.
#[derive(Clone, Debug)]
pub struct MetricReport {
    pub horizons_s: Vec<f64>,
    pub rows: Vec<MetricRow>,
}

impl MetricReport {
    pub fn avg(&self) -> MetricRow {
        let n = self.rows.len().max(1) as f64;
        let mut a = MetricRow::default();
        for r in &self.rows {
            a.miou += r.miou / n;
            a.iou += r.iou / n;
            a.miou_dynamic += r.miou_dynamic / n;
            a.l2_m += r.l2_m / n;
            a.collision_pct += r.collision_pct / n;
            a.chamfer_m2 += r.chamfer_m2 / n;
            a.baseline_miou += r.baseline_miou / n;
            a.baseline_iou += r.baseline_iou / n;
            a.baseline_miou_dynamic += r.baseline_miou_dynamic / n;
            a.baseline_chamfer_m2 += r.baseline_chamfer_m2 / n;
        }
        a
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "horizon_s,miou,iou,l2_m,collision_pct,chamfer_m2,miou_dynamic,baseline_miou,baseline_iou,baseline_miou_dynamic,baseline_chamfer_m2\n",
        );
        let fmt_row = |label: &str, r: &MetricRow| {
            format!(
                "{label},{:.4},{:.4},{:.4},{:.4},{:.6},{:.4},{:.4},{:.4},{:.4},{:.6}\n",
                r.miou,
                r.iou,
                r.l2_m,
                r.collision_pct,
                r.chamfer_m2,
                r.miou_dynamic,
                r.baseline_miou,
                r.baseline_iou,
                r.baseline_miou_dynamic,
                r.baseline_chamfer_m2
            )
        };
        for (h, r) in self.horizons_s.iter().zip(&self.rows) {
            out.push_str(&fmt_row(&format!("{h:.1}"), r));
        }
        out.push_str(&fmt_row("avg", &self.avg()));
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}
