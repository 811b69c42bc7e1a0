//! Image-assisted training machinery: pinhole rays, stratified sampling
//! with trilinear feature gathering, differentiable depth rendering from
//! densities, photometric reprojection, SSIM, and the reprojection
//! consistency loss with per-pixel minimum over sources and auto-masking.

pub mod image_io;

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::geometry::EgoPose;
use crate::occ::OccupancyGrid;
use crate::real::Real;
use crate::tensor::{Graph, Tensor, Var};

/// SSIM variance regularizer for unit-range images.
pub const SSIM_C2: f64 = 0.03 * 0.03;
/// Weight of the SSIM term in the photometric error.
pub const PHOTO_ALPHA: f64 = 0.85;
/// Rays whose rendering weights sum below this are treated as seeing
/// nothing and excluded from photometric supervision.
pub const LOW_OPACITY: f64 = 0.05;

// ----------------------------------------------------------------- rigid 3D

/// Rigid 3D transform (row-major rotation + translation).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Iso3 {
    pub r: [[f64; 3]; 3],
    pub t: [f64; 3],
}

impl Iso3 {
    pub fn identity() -> Self {
        Iso3 { r: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]], t: [0.0; 3] }
    }

    /// Intrinsic rotations applied as yaw (z), then pitch (y), then roll (x).
    pub fn from_yaw_pitch_roll(t: [f64; 3], yaw: f64, pitch: f64, roll: f64) -> Self {
        let (sy, cy) = yaw.sin_cos();
        let (sp, cp) = pitch.sin_cos();
        let (sr, cr) = roll.sin_cos();
        let r = [
            [cy * cp, cy * sp * sr - sy * cr, cy * sp * cr + sy * sr],
            [sy * cp, sy * sp * sr + cy * cr, sy * sp * cr - cy * sr],
            [-sp, cp * sr, cp * cr],
        ];
        Iso3 { r, t }
    }

    pub fn from_se2(p: &EgoPose) -> Self {
        Iso3::from_yaw_pitch_roll([p.x, p.y, 0.0], p.yaw, 0.0, 0.0)
    }

    pub fn compose(&self, other: &Iso3) -> Iso3 {
        let mut r = [[0.0; 3]; 3];
        let mut t = self.t;
        for i in 0..3 {
            for j in 0..3 {
                for k in 0..3 {
                    r[i][j] += self.r[i][k] * other.r[k][j];
                }
            }
            for k in 0..3 {
                t[i] += self.r[i][k] * other.t[k];
            }
        }
        Iso3 { r, t }
    }

    pub fn inverse(&self) -> Iso3 {
        let mut r = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                r[i][j] = self.r[j][i];
            }
        }
        let mut t = [0.0; 3];
        for i in 0..3 {
            for k in 0..3 {
                t[i] -= r[i][k] * self.t[k];
            }
        }
        Iso3 { r, t }
    }

    pub fn transform(&self, p: [f64; 3]) -> [f64; 3] {
        let mut out = self.t;
        for i in 0..3 {
            for k in 0..3 {
                out[i] += self.r[i][k] * p[k];
            }
        }
        out
    }

    pub fn rotate(&self, v: [f64; 3]) -> [f64; 3] {
        let mut out = [0.0; 3];
        for i in 0..3 {
            for k in 0..3 {
                out[i] += self.r[i][k] * v[k];
            }
        }
        out
    }
}

// ------------------------------------------------------------------ camera

/// Pinhole camera: intrinsics in pixels plus the camera-to-ego extrinsic.
/// Camera axes are x right, y down, z forward; pixel centers sit at
/// `(u + 0.5, v + 0.5)`.
#[derive(Clone, Debug, PartialEq)]
pub struct CameraRig {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    pub cam_to_ego: Iso3,
}

/// A ray in the ego frame with unit direction.
#[derive(Clone, Copy, Debug)]
pub struct Ray {
    pub origin: [f64; 3],
    pub dir: [f64; 3],
}

impl CameraRig {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: usize,
        height: usize,
        cam_to_ego: Iso3,
    ) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0) || width == 0 || height == 0 {
            return Err(Error::config(format!(
                "camera intrinsics must have positive focal lengths and size, got fx={fx} fy={fy} {width}x{height}"
            )));
        }
        Ok(CameraRig { fx, fy, cx, cy, width, height, cam_to_ego })
    }

    /// Ray through pixel `(u, v)` (column, row), in the ego frame.
    pub fn ray(&self, u: usize, v: usize) -> Ray {
        self.ray_at(u as f64 + 0.5, v as f64 + 0.5)
    }

    /// Ray through an arbitrary pixel-plane position.
    pub fn ray_at(&self, up: f64, vp: f64) -> Ray {
        let dx = (up - self.cx) / self.fx;
        let dy = (vp - self.cy) / self.fy;
        let n = (dx * dx + dy * dy + 1.0).sqrt();
        let dir_cam = [dx / n, dy / n, 1.0 / n];
        Ray { origin: self.cam_to_ego.t, dir: self.cam_to_ego.rotate(dir_cam) }
    }

    /// Projects an ego-frame point; returns pixel-plane coordinates and the
    /// camera-frame depth (`None` when behind the camera).
    pub fn project(&self, p_ego: [f64; 3]) -> Option<(f64, f64, f64)> {
        let pc = self.cam_to_ego.inverse().transform(p_ego);
        if pc[2] <= 1e-9 {
            return None;
        }
        Some((self.fx * pc[0] / pc[2] + self.cx, self.fy * pc[1] / pc[2] + self.cy, pc[2]))
    }
}

/// Rays for an explicit pixel list.
pub fn generate_rays(rig: &CameraRig, pixels: &[(usize, usize)]) -> Vec<Ray> {
    pixels.iter().map(|&(u, v)| rig.ray(u, v)).collect()
}

/// Regular subsampled pixel grid of rays, row-major over `(v, u)`.
#[derive(Clone, Debug)]
pub struct RayGrid {
    pub hs: usize,
    pub ws: usize,
    pub stride: usize,
    /// Full-resolution pixel-plane positions `(u+0.5, v+0.5)` per ray.
    pub pix: Vec<(f64, f64)>,
    pub origins: Vec<f64>,
    pub dirs: Vec<f64>,
}

pub fn ray_grid(rig: &CameraRig, stride: usize) -> RayGrid {
    let hs = rig.height / stride;
    let ws = rig.width / stride;
    let mut pix = Vec::with_capacity(hs * ws);
    let mut origins = Vec::with_capacity(hs * ws * 3);
    let mut dirs = Vec::with_capacity(hs * ws * 3);
    for i in 0..hs {
        for j in 0..ws {
            let (u, v) = (j * stride, i * stride);
            let ray = rig.ray(u, v);
            pix.push((u as f64 + 0.5, v as f64 + 0.5));
            origins.extend_from_slice(&ray.origin);
            dirs.extend_from_slice(&ray.dir);
        }
    }
    RayGrid { hs, ws, stride, pix, origins, dirs }
}

// ------------------------------------------------------------- volume geom

/// Geometric binding of a feature/occupancy volume in the ego frame.
#[derive(Clone, Copy, Debug)]
pub struct VolumeGeom {
    pub dims: [usize; 3],
    pub voxel: [f64; 3],
    pub origin: [f64; 3],
}

impl VolumeGeom {
    pub fn from_grid(grid: &OccupancyGrid) -> Self {
        VolumeGeom {
            dims: grid.dims,
            voxel: [
                grid.voxel_size[0] as f64,
                grid.voxel_size[1] as f64,
                grid.voxel_size[2] as f64,
            ],
            origin: [grid.origin[0] as f64, grid.origin[1] as f64, grid.origin[2] as f64],
        }
    }

    /// Fractional voxel coordinates of an ego-frame point.
    pub fn coords(&self, p: [f64; 3]) -> [f64; 3] {
        [
            (p[0] - self.origin[0]) / self.voxel[0] - 0.5,
            (p[1] - self.origin[1]) / self.voxel[1] - 0.5,
            (p[2] - self.origin[2]) / self.voxel[2] - 0.5,
        ]
    }

    pub fn diagonal(&self) -> f64 {
        let dx = self.dims[0] as f64 * self.voxel[0];
        let dy = self.dims[1] as f64 * self.voxel[1];
        let dz = self.dims[2] as f64 * self.voxel[2];
        (dx * dx + dy * dy + dz * dz).sqrt()
    }

    fn bounds(&self) -> ([f64; 3], [f64; 3]) {
        let hi = [
            self.origin[0] + self.dims[0] as f64 * self.voxel[0],
            self.origin[1] + self.dims[1] as f64 * self.voxel[1],
            self.origin[2] + self.dims[2] as f64 * self.voxel[2],
        ];
        (self.origin, hi)
    }

    /// Does the ray segment `[near, far]` intersect the volume box?
    pub fn intersects(&self, ray: &Ray, near: f64, far: f64) -> bool {
        let (lo, hi) = self.bounds();
        let mut t0 = near;
        let mut t1 = far;
        for a in 0..3 {
            let d = ray.dir[a];
            if d.abs() < 1e-12 {
                if ray.origin[a] < lo[a] || ray.origin[a] > hi[a] {
                    return false;
                }
                continue;
            }
            let ta = (lo[a] - ray.origin[a]) / d;
            let tb = (hi[a] - ray.origin[a]) / d;
            let (ta, tb) = if ta <= tb { (ta, tb) } else { (tb, ta) };
            t0 = t0.max(ta);
            t1 = t1.min(tb);
            if t0 > t1 {
                return false;
            }
        }
        true
    }
}

// ---------------------------------------------------------------- sampling

/// Ordered per-ray sample points along `[near, far]`, shared across a ray
/// batch: `dists` are the `N_p` bin centers, so spacing is constant and
/// strictly positive and `dists` is strictly increasing.
#[derive(Clone, Debug)]
pub struct RaySamples {
    pub n_rays: usize,
    pub n_samples: usize,
    pub near: f64,
    pub far: f64,
    pub dists: Vec<f64>,
    pub delta: f64,
    pub valid: Vec<bool>,
    /// Volume-unit sample coordinates, `[R * N_p, 3]`.
    pub coords: Arc<Vec<f64>>,
}

pub fn sample_rays(rays: &RayGrid, geom: &VolumeGeom, near: f64, far: f64, n_samples: usize) -> Result<RaySamples> {
    if !(near < far) || n_samples == 0 {
        return Err(Error::config(format!("bad sampling range near={near} far={far} n={n_samples}")));
    }
    let n_rays = rays.pix.len();
    let delta = (far - near) / n_samples as f64;
    let dists: Vec<f64> = (0..n_samples).map(|i| near + (i as f64 + 0.5) * delta).collect();
    let mut valid = vec![false; n_rays];
    let mut coords = vec![0.0f64; n_rays * n_samples * 3];
    for r in 0..n_rays {
        let ray = Ray {
            origin: [rays.origins[3 * r], rays.origins[3 * r + 1], rays.origins[3 * r + 2]],
            dir: [rays.dirs[3 * r], rays.dirs[3 * r + 1], rays.dirs[3 * r + 2]],
        };
        valid[r] = geom.intersects(&ray, near, far);
        for (i, &d) in dists.iter().enumerate() {
            let p = [
                ray.origin[0] + d * ray.dir[0],
                ray.origin[1] + d * ray.dir[1],
                ray.origin[2] + d * ray.dir[2],
            ];
            let c = geom.coords(p);
            let base = (r * n_samples + i) * 3;
            coords[base] = c[0];
            coords[base + 1] = c[1];
            coords[base + 2] = c[2];
        }
    }
    Ok(RaySamples {
        n_rays,
        n_samples,
        near,
        far,
        dists,
        delta,
        valid,
        coords: Arc::new(coords),
    })
}

/// Trilinear gather of per-voxel features at the sample points:
/// `[R * N_p, C]`; out-of-volume points contribute zero features.
pub fn gather_volume<S: Real>(g: &mut Graph<S>, volume: Var, samples: &RaySamples) -> Result<Var> {
    g.sample_trilinear(volume, Arc::clone(&samples.coords))
}

// --------------------------------------------------------------- rendering

/// Differentiable depth rendering outputs, all on the graph.
pub struct RenderedDepth {
    /// `[R]` expected ray distance.
    pub depth: Var,
    /// `[R, N_p]` rendering weights `w_i = T_i (1 - exp(-sigma_i delta_i))`.
    pub weights: Var,
    /// `[R, N_p]` transmittances `T_i`.
    pub transmittance: Var,
    /// `[R]` total weight (opacity proxy).
    pub weight_sum: Var,
}

/// Volume-rendering depth: `T_i = exp(-sum_{j<i} sigma_j delta_j)`,
/// `w_i = T_i (1 - exp(-sigma_i delta_i))`, `depth = sum_i w_i d_i`.
pub fn render_depth_graph<S: Real>(
    g: &mut Graph<S>,
    sigma: Var,
    samples: &RaySamples,
) -> Result<RenderedDepth> {
    let (r, n) = (samples.n_rays, samples.n_samples);
    if g.shape(sigma) != [r, n] {
        return Err(Error::dim("render_depth sigma", g.shape(sigma), &[r, n]));
    }
    let sd = g.scale(sigma, samples.delta);
    let acc = g.cumsum_exclusive_lastdim(sd)?;
    let neg = g.scale(acc, -1.0);
    let trans = g.exp(neg);
    let nsd = g.scale(sd, -1.0);
    let esd = g.exp(nsd);
    let alpha = g.affine(esd, -1.0, 1.0);
    let weights = g.mul(trans, alpha)?;
    let dconst = {
        let d: Vec<S> = samples.dists.iter().map(|&v| S::of(v)).collect();
        let t = Tensor::new(vec![n], d)?;
        g.constant(&t)
    };
    let wd = g.mul(weights, dconst)?;
    let depth = g.sum_lastdim(wd)?;
    let weight_sum = g.sum_lastdim(weights)?;
    Ok(RenderedDepth { depth, weights, transmittance: trans, weight_sum })
}

// ------------------------------------------------------------- reprojection

/// Differentiable reprojection: back-projects every target ray at its
/// rendered depth, maps it into the source frame, projects with the rig and
/// bilinearly samples `source` `[H,W,3]`. Returns the warped image
/// `[hs, ws, 3]` and a per-ray in-frame validity mask (computed from the
/// forward values; out-of-frame pixels sample black and must be masked).
pub fn reproject_graph<S: Real>(
    g: &mut Graph<S>,
    source: Var,
    depth: Var,
    rays: &RayGrid,
    pose_target: &EgoPose,
    pose_source: &EgoPose,
    rig: &CameraRig,
) -> Result<(Var, Vec<bool>)> {
    let r = rays.pix.len();
    if g.values(depth).len() != r {
        return Err(Error::dim("reproject depth", g.shape(depth), &[r]));
    }
    let (sh, sw) = (g.shape(source)[0], g.shape(source)[1]);
    // target ego point: p = o + d * dir
    let dirs = g.constant(&Tensor::new(vec![r, 3], rays.dirs.iter().map(|&v| S::of(v)).collect())?);
    let orig = g.constant(&Tensor::new(vec![r, 3], rays.origins.iter().map(|&v| S::of(v)).collect())?);
    let dcol = g.reshape(depth, vec![r, 1])?;
    let scaled = g.mul(dcol, dirs)?;
    let pts = g.add(scaled, orig)?;
    // fold target-ego -> source-ego -> camera into one rigid transform
    let m = rig
        .cam_to_ego
        .inverse()
        .compose(&Iso3::from_se2(pose_source).inverse())
        .compose(&Iso3::from_se2(pose_target));
    let rt = {
        // row-vector convention: p_cam = p * R^T + t
        let mut rt = vec![S::zero(); 9];
        for i in 0..3 {
            for j in 0..3 {
                rt[j * 3 + i] = S::of(m.r[i][j]);
            }
        }
        g.constant(&Tensor::new(vec![3, 3], rt)?)
    };
    let tv = g.constant(&Tensor::new(vec![3], m.t.iter().map(|&v| S::of(v)).collect())?);
    let rot = g.matmul(pts, rt)?;
    let cam = g.add(rot, tv)?;
    let x = g.slice_last(cam, 0, 1)?;
    let y = g.slice_last(cam, 1, 1)?;
    let z = g.slice_last(cam, 2, 1)?;
    let xz = g.div(x, z)?;
    let yz = g.div(y, z)?;
    let u = g.affine(xz, rig.fx, rig.cx);
    let v = g.affine(yz, rig.fy, rig.cy);
    // image grid units: row = v - 0.5, col = u - 0.5
    let row = g.affine(v, 1.0, -0.5);
    let col = g.affine(u, 1.0, -0.5);
    let coords = g.concat_last(&[row, col])?;
    // snap sub-epsilon fp noise at the frame boundary back inside; the
    // correction is a constant, so gradients are untouched
    let coords = {
        let eps = 1e-6;
        let bounds = [(sh - 1) as f64, (sw - 1) as f64];
        let vals = g.values(coords);
        let mut corr = vec![S::zero(); vals.len()];
        let mut any = false;
        for (i, &cv) in vals.iter().enumerate() {
            let b = bounds[i % 2];
            let c = cv.f64();
            if c < 0.0 && c >= -eps {
                corr[i] = S::of(-c);
                any = true;
            } else if c > b && c <= b + eps {
                corr[i] = S::of(b - c);
                any = true;
            }
        }
        if any {
            let cc = g.constant(&Tensor::new(vec![r, 2], corr)?);
            g.add(coords, cc)?
        } else {
            coords
        }
    };
    let black = g.zeros(vec![3]);
    let warped = g.sample_bilinear(source, coords, black)?;
    let mut valid = vec![false; r];
    for i in 0..r {
        let zc = g.values(z)[i].f64();
        let rr = g.values(coords)[2 * i].f64();
        let cc = g.values(coords)[2 * i + 1].f64();
        valid[i] = zc > 1e-6 && rr >= 0.0 && rr <= (sh - 1) as f64 && cc >= 0.0 && cc <= (sw - 1) as f64;
    }
    let out = g.reshape(warped, vec![rays.hs, rays.ws, 3])?;
    Ok((out, valid))
}

// -------------------------------------------------------- photometric error

/// Per-pixel structural similarity over 3x3 reflect-padded windows,
/// channelwise; output `[H,W,C]` in `[-1, 1]`. Uses the structure/contrast
/// form `(2 cov + c2) / (var_a + var_b + c2)`, which is exactly 1 for any
/// pair of constant images (the luminance term would not be).
pub fn ssim_graph<S: Real>(g: &mut Graph<S>, a: Var, b: Var) -> Result<Var> {
    if g.shape(a) != g.shape(b) {
        return Err(Error::dim("ssim", g.shape(a), g.shape(b)));
    }
    let mu_a = g.box_mean3x3(a)?;
    let mu_b = g.box_mean3x3(b)?;
    let aa = g.mul(a, a)?;
    let bb = g.mul(b, b)?;
    let ab = g.mul(a, b)?;
    let e_aa = g.box_mean3x3(aa)?;
    let e_bb = g.box_mean3x3(bb)?;
    let e_ab = g.box_mean3x3(ab)?;
    let mu_a2 = g.mul(mu_a, mu_a)?;
    let mu_b2 = g.mul(mu_b, mu_b)?;
    let mu_ab = g.mul(mu_a, mu_b)?;
    let var_a = g.sub(e_aa, mu_a2)?;
    let var_b = g.sub(e_bb, mu_b2)?;
    let cov = g.sub(e_ab, mu_ab)?;
    let num = {
        let two_cov = g.scale(cov, 2.0);
        g.affine(two_cov, 1.0, SSIM_C2)
    };
    let den = {
        let s = g.add(var_a, var_b)?;
        g.affine(s, 1.0, SSIM_C2)
    };
    g.div(num, den)
}

/// `pe = alpha/2 (1 - SSIM) + (1 - alpha) |a - b|`, reduced over channels;
/// output `[H,W]`.
pub fn photometric_error_graph<S: Real>(g: &mut Graph<S>, a: Var, b: Var) -> Result<Var> {
    let s = ssim_graph(g, a, b)?;
    let one_minus = g.affine(s, -0.5 * PHOTO_ALPHA, 0.5 * PHOTO_ALPHA);
    let d = g.sub(a, b)?;
    let l1 = g.abs(d);
    let l1w = g.scale(l1, 1.0 - PHOTO_ALPHA);
    let per_chan = g.add(one_minus, l1w)?;
    let summed = g.sum_lastdim(per_chan)?;
    let c = *g.shape(a).last().unwrap();
    Ok(g.scale(summed, 1.0 / c as f64))
}

// -------------------------------------------------------------------- RPC

/// One source frame entering the reprojection loss.
pub struct RpcSource {
    /// Full-resolution source image on the graph (usually a constant).
    pub image: Var,
    pub pose: EgoPose,
}

/// Outcome of the reprojection-consistency loss for one target frame.
pub struct RpcOut {
    pub loss: Var,
    /// Pixels that survived validity + auto-masking.
    pub used_pixels: usize,
    /// True when auto-masking plus validity removed every pixel; the loss
    /// is exactly 0 then.
    pub all_masked: bool,
}

/// Per-pixel minimum photometric reprojection error with auto-masking.
/// `target` is the subsampled target image `[hs,ws,3]` matching `rays`;
/// `ray_valid` marks rays that both hit the volume and rendered enough
/// opacity.
#[allow(clippy::too_many_arguments)]
pub fn rpc_loss<S: Real>(
    g: &mut Graph<S>,
    target: Var,
    sources: &[RpcSource],
    depth: Var,
    rays: &RayGrid,
    pose_target: &EgoPose,
    rig: &CameraRig,
    ray_valid: &[bool],
) -> Result<RpcOut> {
    if sources.is_empty() {
        return Err(Error::config("rpc_loss needs at least one source frame"));
    }
    let (hs, ws) = (rays.hs, rays.ws);
    let n = hs * ws;
    let mut pe_warped: Option<Var> = None;
    let mut pe_raw: Option<Var> = None;
    let mut reproj_valid = vec![true; n];
    for src in sources {
        let (warped, valid) = reproject_graph(g, src.image, depth, rays, pose_target, &src.pose, rig)?;
        let pe_w = photometric_error_graph(g, target, warped)?;
        pe_warped = Some(match pe_warped {
            None => pe_w,
            Some(prev) => g.minimum(prev, pe_w)?,
        });
        // identity reprojection: the raw source resampled at the target's
        // own pixel grid (no warping)
        let raw = subsample_image(g, src.image, rays)?;
        let pe_r = photometric_error_graph(g, target, raw)?;
        pe_raw = Some(match pe_raw {
            None => pe_r,
            Some(prev) => g.minimum(prev, pe_r)?,
        });
        for (i, v) in valid.iter().enumerate() {
            reproj_valid[i] &= v;
        }
    }
    let pe_warped = pe_warped.unwrap();
    let pe_raw = pe_raw.unwrap();
    // auto-mask: drop pixels where the unwarped source already matches at
    // least as well (stationary pixels), plus anything invalid. The margin
    // makes exact ties (identical frames, zero motion) count as stationary
    // despite fp noise between the two sampling paths.
    let margin = S::of(1e-6);
    let mut keep = vec![false; n];
    let mut used = 0usize;
    for i in 0..n {
        let stationary = g.values(pe_raw)[i] <= g.values(pe_warped)[i] + margin;
        keep[i] = ray_valid[i] && reproj_valid[i] && !stationary;
        if keep[i] {
            used += 1;
        }
    }
    if used == 0 {
        return Ok(RpcOut { loss: g.scalar(0.0), used_pixels: 0, all_masked: true });
    }
    let maskv: Vec<S> = keep.iter().map(|&k| if k { S::one() } else { S::zero() }).collect();
    let mask = g.constant(&Tensor::new(vec![hs, ws], maskv)?);
    let masked = g.mul(pe_warped, mask)?;
    let total = g.sum_all(masked);
    let loss = g.scale(total, 1.0 / used as f64);
    Ok(RpcOut { loss, used_pixels: used, all_masked: false })
}

/// Bilinearly resamples a full-resolution image at a ray grid's pixel
/// positions, giving the `[hs,ws,3]` view the loss operates on.
pub fn subsample_image<S: Real>(g: &mut Graph<S>, image: Var, rays: &RayGrid) -> Result<Var> {
    let n = rays.pix.len();
    let mut coords = Vec::with_capacity(n * 2);
    for &(u, v) in &rays.pix {
        coords.push(S::of(v - 0.5));
        coords.push(S::of(u - 0.5));
    }
    let cv = g.constant(&Tensor::new(vec![n, 2], coords)?);
    let black = g.zeros(vec![3]);
    let s = g.sample_bilinear(image, cv, black)?;
    g.reshape(s, vec![rays.hs, rays.ws, 3])
}
