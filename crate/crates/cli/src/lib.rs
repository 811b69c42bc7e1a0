//! Operator surface: data generation, training, forecasting, evaluation,
//! depth rendering and throughput benchmarking. Every command is a plain
//! function so tests can drive the pipeline in-process; `main` only parses
//! arguments and maps errors to a single machine-parsable line.

use std::path::{Path, PathBuf};
use std::time::Instant;

use ow4d_core::ckpt;
use ow4d_core::config::RunConfig;
use ow4d_core::error::{Error, Result};
use ow4d_core::geometry::EgoPose;
use ow4d_core::metrics::{
    chamfer, copy_last_baseline, lidar_rays, raycast_cloud, IouCounts, MetricReport, MetricRow,
    PlanningCounts,
};
use ow4d_core::model::{Fwd, ModelInput, WorldModel};
use ow4d_core::occ::io::{grid_read, grid_write};
use ow4d_core::real::Real;
use ow4d_core::render::image_io::{write_pgm_depth, write_ppm, DepthMap};
use ow4d_core::render::{
    gather_volume, ray_grid, render_depth_graph, sample_rays, VolumeGeom, LOW_OPACITY,
};
use ow4d_core::scene::dataset::{dataset_read, dataset_write, list_scenes};
use ow4d_core::scene::{generate, Scene};
use ow4d_core::train::{self, loss_csv};

/// Ego footprint half extents (meters) for the collision metric: a 4.0 m by
/// 1.8 m rectangle.
pub const FOOTPRINT_HALF: [f64; 2] = [2.0, 0.9];

/// Ego body height band: from just above the road layer to roof height.
pub fn ego_z_band(voxel_size: f64) -> (f64, f64) {
    (voxel_size, 2.0)
}

/// Default data root when a path argument is omitted.
pub fn data_root() -> Option<PathBuf> {
    std::env::var_os("OW4D_DATA_DIR").map(PathBuf::from)
}

fn require_dir(opt: Option<PathBuf>, what: &str) -> Result<PathBuf> {
    opt.or_else(data_root).ok_or_else(|| {
        Error::config(format!("{what} not given and OW4D_DATA_DIR is unset"))
    })
}

// --------------------------------------------------------------------- gen

/// Generates `cfg.scene.scenes` scenes under `out`, plus a `dataset.cfg`
/// copy of the configuration.
pub fn cmd_gen(cfg: &RunConfig, out: Option<PathBuf>) -> Result<PathBuf> {
    let out = require_dir(out, "--out")?;
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let scenes: Vec<Result<Scene>> = ow4d_core::exec::map_indexed(cfg.scene.scenes, |i| {
        generate(&cfg.scene_spec(i as u64))
    });
    for scene in scenes {
        dataset_write(&scene?, &out)?;
    }
    cfg.save(&out.join("dataset.cfg"))?;
    Ok(out)
}

// ------------------------------------------------------------------- train

/// Trains from scratch on a generated dataset; writes `model.ow4d`,
/// `loss.csv` and `run.cfg` into `out`.
pub fn cmd_train<S: Real>(cfg: &RunConfig, data: Option<PathBuf>, out: &Path) -> Result<()> {
    let data = require_dir(data, "--data")?;
    let dirs = list_scenes(&data)?;
    if dirs.is_empty() {
        return Err(Error::data(format!("no scene directories under {}", data.display())));
    }
    let mut scenes = Vec::with_capacity(dirs.len());
    for d in &dirs {
        scenes.push(dataset_read(d)?);
    }
    let mut model: WorldModel<S> = WorldModel::new(cfg.model.clone(), cfg.train.seed)?;
    let log = train::train(&mut model, &scenes, &cfg.train)?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    ckpt::save(&model.params, &out.join("model.ow4d"))?;
    std::fs::write(out.join("loss.csv"), loss_csv(&log)).map_err(|e| Error::io(out, e))?;
    cfg.save(&out.join("run.cfg"))?;
    Ok(())
}

// ---------------------------------------------------------------- forecast

fn load_model<S: Real>(cfg: &RunConfig, checkpoint: &Path) -> Result<WorldModel<S>> {
    let mut model: WorldModel<S> = WorldModel::new(cfg.model.clone(), cfg.train.seed)?;
    model.params.load(ckpt::load(checkpoint)?)?;
    Ok(model)
}

/// Runs the model on one scene directory and writes predicted future grids
/// (`frame_<k>.ogrd`), the predicted trajectory (`poses.csv`) and predicted
/// images (`image_<k>.ppm`) into `out`. Grids are realized in the ground
/// truth future frames so they can be compared cell-by-cell.
pub fn cmd_forecast<S: Real>(
    cfg: &RunConfig,
    checkpoint: &Path,
    scene_dir: &Path,
    out: &Path,
    no_images: bool,
) -> Result<()> {
    let mut cfg = cfg.clone();
    if no_images {
        cfg.model.use_images = false;
        cfg.model.weights.img = 0.0;
        cfg.model.weights.rpc = 0.0;
    }
    let model = load_model::<S>(&cfg, checkpoint)?;
    let scene = dataset_read(scene_dir)?;
    let n_h = cfg.model.n_history;
    if scene.frames.len() < n_h + cfg.model.n_future {
        return Err(Error::data(format!(
            "scene {} holds {} frames, need {}",
            scene_dir.display(),
            scene.frames.len(),
            n_h + cfg.model.n_future
        )));
    }
    let grids: Vec<_> = scene.frames[..n_h].iter().map(|f| f.grid.clone()).collect();
    let poses: Vec<_> = scene.frames[..n_h].iter().map(|f| f.pose).collect();
    let images: Vec<_> = scene.frames[..n_h].iter().map(|f| f.image.clone()).collect();
    let future_poses: Vec<EgoPose> = scene.frames[n_h..n_h + cfg.model.n_future]
        .iter()
        .map(|f| f.pose)
        .collect();
    let fc = model.forecast_with_frames(
        &grids,
        &poses,
        cfg.model.use_images.then_some(images.as_slice()),
        future_poses,
    )?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut csv = String::from("frame,x,y,yaw\n");
    for (fi, grid) in fc.grids.iter().enumerate() {
        let k = n_h + fi;
        grid_write(grid, &out.join(format!("frame_{k}.ogrd")))?;
        let p = fc.trajectory[fi];
        csv.push_str(&format!("{k},{},{},{}\n", p.x, p.y, p.yaw));
    }
    let poses_path = out.join("poses.csv");
    std::fs::write(&poses_path, csv).map_err(|e| Error::io(&poses_path, e))?;
    if let Some(imgs) = &fc.images {
        for (fi, img) in imgs.iter().enumerate() {
            write_ppm(img, &out.join(format!("image_{}.ppm", n_h + fi)))?;
        }
    }
    Ok(())
}

// -------------------------------------------------------------------- eval

struct EvalAcc {
    model_iou: Vec<IouCounts>,
    base_iou: Vec<IouCounts>,
    planning: PlanningCounts,
    chamfer_sum: Vec<f64>,
    base_chamfer_sum: Vec<f64>,
    chamfer_n: Vec<u64>,
}

/// Evaluates predictions against ground truth and writes the metric CSV
/// (per-horizon rows plus the average, model and copy-last baseline side by
/// side). `pred` mirrors the dataset layout: `pred/scene_<seed>/...`.
pub fn cmd_eval(cfg: &RunConfig, pred: &Path, gt: Option<PathBuf>, out: &Path) -> Result<MetricReport> {
    let gt = require_dir(gt, "--gt")?;
    let gt_dirs = list_scenes(&gt)?;
    if gt_dirs.is_empty() {
        return Err(Error::data(format!("no scene directories under {}", gt.display())));
    }
    let m = &cfg.model;
    let horizons = m.horizon_frames();
    if horizons.is_empty() {
        return Err(Error::config("no 1s/2s/3s horizons fit inside n_future at this fps"));
    }
    let n_h = m.n_history;
    let num_classes = m.num_classes;
    let rays = lidar_rays(96, &[-0.12, 0.0, 0.12]);
    let origin = [0.0, 0.0, 1.0];
    let mut acc = EvalAcc {
        model_iou: vec![IouCounts::new(num_classes); horizons.len()],
        base_iou: vec![IouCounts::new(num_classes); horizons.len()],
        planning: PlanningCounts::new(horizons.len(), FOOTPRINT_HALF, ego_z_band(m.voxel_size)),
        chamfer_sum: vec![0.0; horizons.len()],
        base_chamfer_sum: vec![0.0; horizons.len()],
        chamfer_n: vec![0; horizons.len()],
    };
    let mut scenes_seen = 0usize;
    for gt_dir in &gt_dirs {
        let name = gt_dir.file_name().unwrap();
        let pred_dir = pred.join(name);
        if !pred_dir.exists() {
            continue;
        }
        scenes_seen += 1;
        let scene = dataset_read(gt_dir)?;
        let current = scene.frames[n_h - 1].pose;
        let gt_future = &scene.frames[n_h..n_h + m.n_future];
        // predictions
        let mut pred_grids = Vec::with_capacity(m.n_future);
        for fi in 0..m.n_future {
            pred_grids.push(grid_read(&pred_dir.join(format!("frame_{}.ogrd", n_h + fi)))?);
        }
        let pred_traj = read_pred_poses(&pred_dir.join("poses.csv"), m.n_future)?;
        // baseline: last observation transported by the true ego motion
        let history: Vec<_> = scene.frames[..n_h].iter().map(|f| f.grid.clone()).collect();
        let fut_poses: Vec<EgoPose> = gt_future.iter().map(|f| f.pose).collect();
        let baseline = copy_last_baseline(&history, &current, &fut_poses, true)?;

        let gt_far = VolumeGeom::from_grid(&scene.frames[0].grid).diagonal();
        for (hi, &fidx) in horizons.iter().enumerate() {
            acc.model_iou[hi].add(&pred_grids[fidx], &gt_future[fidx].grid)?;
            acc.base_iou[hi].add(&baseline[fidx], &gt_future[fidx].grid)?;
            let gt_cloud = raycast_cloud(&gt_future[fidx].grid, origin, &rays, gt_far);
            let pred_cloud = raycast_cloud(&pred_grids[fidx], origin, &rays, gt_far);
            let base_cloud = raycast_cloud(&baseline[fidx], origin, &rays, gt_far);
            acc.chamfer_sum[hi] += chamfer(&pred_cloud, &gt_cloud, gt_far).0;
            acc.base_chamfer_sum[hi] += chamfer(&base_cloud, &gt_cloud, gt_far).0;
            acc.chamfer_n[hi] += 1;
        }
        // planning: waypoints in the current ego frame
        let gt_wp: Vec<[f64; 2]> = fut_poses
            .iter()
            .map(|p| {
                let rel = EgoPose::relative(&current, p);
                [rel.x, rel.y]
            })
            .collect();
        let pred_wp: Vec<[f64; 2]> = pred_traj
            .iter()
            .map(|p| {
                let rel = EgoPose::relative(&current, p);
                [rel.x, rel.y]
            })
            .collect();
        let gt_grids: Vec<_> = gt_future.iter().map(|f| f.grid.clone()).collect();
        acc.planning.add(&horizons, &pred_wp, &gt_wp, &current, &fut_poses, &gt_grids)?;
    }
    if scenes_seen == 0 {
        return Err(Error::data(format!(
            "no prediction directories under {} match the ground truth",
            pred.display()
        )));
    }
    let dynamic_flags: Vec<bool> = {
        // class table is carried by any gt grid
        let scene = dataset_read(&gt_dirs[0])?;
        scene.frames[0].grid.table.iter().map(|c| c.dynamic).collect()
    };
    let mut rows = Vec::with_capacity(horizons.len());
    for hi in 0..horizons.len() {
        let n = acc.chamfer_n[hi].max(1) as f64;
        rows.push(MetricRow {
            miou: acc.model_iou[hi].miou(None),
            iou: acc.model_iou[hi].iou(),
            miou_dynamic: acc.model_iou[hi].miou(Some(&dynamic_flags)),
            l2_m: acc.planning.l2(hi),
            collision_pct: acc.planning.collision_pct(hi),
            chamfer_m2: acc.chamfer_sum[hi] / n,
            baseline_miou: acc.base_iou[hi].miou(None),
            baseline_iou: acc.base_iou[hi].iou(),
            baseline_miou_dynamic: acc.base_iou[hi].miou(Some(&dynamic_flags)),
            baseline_chamfer_m2: acc.base_chamfer_sum[hi] / n,
        });
    }
    let report = MetricReport {
        horizons_s: horizons.iter().map(|&f| (f + 1) as f64 / m.fps).collect(),
        rows,
    };
    report.write_csv(out)?;
    Ok(report)
}

fn read_pred_poses(path: &Path, n: usize) -> Result<Vec<EgoPose>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::with_capacity(n);
    for line in text.lines().skip(1) {
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 4 {
            return Err(Error::data(format!("{}: malformed row '{line}'", path.display())));
        }
        let num = |s: &str| -> Result<f64> {
            s.parse().map_err(|_| Error::data(format!("{}: bad number {s}", path.display())))
        };
        out.push(EgoPose::new(num(cols[1])?, num(cols[2])?, num(cols[3])?));
    }
    if out.len() != n {
        return Err(Error::data(format!(
            "{} holds {} trajectory rows, expected {n}",
            path.display(),
            out.len()
        )));
    }
    Ok(out)
}

// ------------------------------------------------------------ render-depth

/// Renders a depth map per future frame from the model's predicted volumes
/// and writes 16-bit PGMs (`depth_<k>.pgm` plus sidecars) into `out`.
pub fn cmd_render_depth<S: Real>(
    cfg: &RunConfig,
    checkpoint: &Path,
    scene_dir: &Path,
    out: &Path,
) -> Result<()> {
    let model = load_model::<S>(cfg, checkpoint)?;
    let scene = dataset_read(scene_dir)?;
    let m = &cfg.model;
    let n_h = m.n_history;
    let grids: Vec<_> = scene.frames[..n_h].iter().map(|f| f.grid.clone()).collect();
    let poses: Vec<_> = scene.frames[..n_h].iter().map(|f| f.pose).collect();
    let images: Vec<_> = scene.frames[..n_h].iter().map(|f| f.image.clone()).collect();
    let future_poses: Vec<EgoPose> = scene.frames[n_h..n_h + m.n_future].iter().map(|f| f.pose).collect();
    let mut f = Fwd::new(&model.params);
    let input = ModelInput {
        grids: &grids,
        poses: &poses,
        images: m.use_images.then_some(images.as_slice()),
        future_poses,
    };
    let fout = model.forward(&mut f, &input)?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let geom = VolumeGeom::from_grid(&grids[0]);
    let far = geom.diagonal();
    let rays = ray_grid(&scene.rig, 1);
    for fi in 0..m.n_future {
        let samples = sample_rays(&rays, &geom, m.render_near, far, m.render_samples)?;
        let vol = f.g.slice_first(fout.volume, fi, 1)?;
        let vs = f.g.shape(vol)[1..].to_vec();
        let vol = f.g.reshape(vol, vs)?;
        let feats = gather_volume(&mut f.g, vol, &samples)?;
        let sigma = model.density(&mut f, feats)?;
        let sigma = f.g.reshape(sigma, vec![samples.n_rays, samples.n_samples])?;
        let rendered = render_depth_graph(&mut f.g, sigma, &samples)?;
        let mut map = DepthMap::new(rays.ws, rays.hs, m.render_near as f32, far as f32);
        for r in 0..samples.n_rays {
            let wsum = f.g.values(rendered.weight_sum)[r].f64();
            if samples.valid[r] && wsum >= LOW_OPACITY {
                // expected distance under the weight distribution
                map.depth[r] = (f.g.values(rendered.depth)[r].f64() / wsum) as f32;
                map.valid[r] = true;
            }
        }
        write_pgm_depth(&map, &out.join(format!("depth_{}.pgm", n_h + fi)))?;
    }
    Ok(())
}

// ------------------------------------------------------------------- bench

/// Benchmarks forecast throughput over warm iterations; returns
/// forecasts/second.
pub fn cmd_bench<S: Real>(cfg: &RunConfig, checkpoint: Option<&Path>, iterations: usize) -> Result<f64> {
    let model: WorldModel<S> = match checkpoint {
        Some(path) => load_model(cfg, path)?,
        None => WorldModel::new(cfg.model.clone(), cfg.train.seed)?,
    };
    let scene = generate(&cfg.scene_spec(0))?;
    let n_h = cfg.model.n_history;
    let grids: Vec<_> = scene.frames[..n_h].iter().map(|f| f.grid.clone()).collect();
    let poses: Vec<_> = scene.frames[..n_h].iter().map(|f| f.pose).collect();
    let images: Vec<_> = scene.frames[..n_h].iter().map(|f| f.image.clone()).collect();
    let imgs = cfg.model.use_images.then_some(images.as_slice());
    // warm-up
    for _ in 0..3 {
        model.forecast(&grids, &poses, imgs)?;
    }
    let start = Instant::now();
    for _ in 0..iterations {
        model.forecast(&grids, &poses, imgs)?;
    }
    let dt = start.elapsed().as_secs_f64();
    Ok(iterations as f64 / dt)
}
