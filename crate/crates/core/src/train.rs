//! Training: the per-scene loss graph (occupancy CE + Lovasz, image L2,
//! pose L1, and rendering-based photometric consistency on the predicted
//! future volumes), plus plain SGD with momentum. Batches run as
//! independent graphs; gradients fold in a fixed order, so results are
//! identical under any thread count.

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::exec;
use crate::geometry::EgoPose;
use crate::metrics::{img_loss, occ_loss, pose_loss, total_loss, LossBreakdown, LossParts};
use crate::model::{Fwd, ModelInput, WorldModel};
use crate::real::Real;
use crate::render::{
    gather_volume, ray_grid, render_depth_graph, rpc_loss, sample_rays, subsample_image,
    RpcSource, VolumeGeom, LOW_OPACITY,
};
use crate::scene::Scene;
use crate::tensor::{seeded_rng, Tensor, Var};

/// Builds the complete training loss for one scene. Returns the episode
/// (so gradients can be read off after `backward`), the total-loss node and
/// the logged breakdown.
pub fn build_loss<'m, S: Real>(
    model: &'m WorldModel<S>,
    scene: &Scene,
) -> Result<(Fwd<'m, S>, Var, LossBreakdown)> {
    let cfg = &model.cfg;
    let n_h = cfg.n_history;
    if scene.frames.len() < n_h + cfg.n_future {
        return Err(Error::config(format!(
            "scene holds {} frames, model needs {}",
            scene.frames.len(),
            n_h + cfg.n_future
        )));
    }
    let history_grids: Vec<_> = scene.frames[..n_h].iter().map(|f| f.grid.clone()).collect();
    let history_poses: Vec<EgoPose> = scene.frames[..n_h].iter().map(|f| f.pose).collect();
    let history_images: Vec<_> = scene.frames[..n_h].iter().map(|f| f.image.clone()).collect();
    let future = &scene.frames[n_h..n_h + cfg.n_future];
    let future_poses: Vec<EgoPose> = future.iter().map(|f| f.pose).collect();

    let mut f = Fwd::new(&model.params);
    let input = ModelInput {
        grids: &history_grids,
        poses: &history_poses,
        images: cfg.use_images.then_some(history_images.as_slice()),
        future_poses: future_poses.clone(),
    };
    let out = model.forward(&mut f, &input)?;

    // occupancy loss over every future voxel
    let targets: Vec<u8> = future.iter().flat_map(|fr| fr.grid.classes.iter().copied()).collect();
    let (ce, lovasz) = occ_loss(&mut f.g, out.logits, &targets)?;

    // image L2 at the BEV-matched resolution
    let img = match out.images {
        Some(pred) => {
            let [h0, w0, _] = cfg.grid_dims;
            let mut gt = Vec::with_capacity(cfg.n_future * h0 * w0 * 3);
            for fr in future {
                let resized = fr.image.resized(w0, h0);
                gt.extend(resized.data.iter().map(|&v| S::of(v as f64)));
            }
            let gtv = f.g.constant(&Tensor::new(vec![cfg.n_future, h0, w0, 3], gt)?);
            Some(img_loss(&mut f.g, pred, gtv)?)
        }
        None => None,
    };

    // pose L1 on cumulative waypoints in the current ego frame
    let current = history_poses[n_h - 1];
    let mut wp_gt = Vec::with_capacity(cfg.n_future * 2);
    for fp in &future_poses {
        let rel = EgoPose::relative(&current, fp);
        wp_gt.push(S::of(rel.x));
        wp_gt.push(S::of(rel.y));
    }
    let wp_gt = f.g.constant(&Tensor::new(vec![cfg.n_future, 2], wp_gt)?);
    let pose = pose_loss(&mut f.g, out.waypoints, wp_gt)?;

    // rendering-based photometric consistency on predicted future volumes
    let rpc = if cfg.use_images && cfg.weights.rpc > 0.0 {
        rpc_over_futures(model, &mut f, scene, out.volume, &future_poses)?
    } else {
        None
    };

    let parts = LossParts { occ_ce: ce, occ_lovasz: lovasz, img, pose, rpc };
    let (total, breakdown) = total_loss(&mut f.g, &parts, &cfg.weights)?;
    Ok((f, total, breakdown))
}

/// Renders a depth map per future frame from the predicted volume and
/// scores it against adjacent source images; frames whose pixels are all
/// masked contribute nothing.
fn rpc_over_futures<S: Real>(
    model: &WorldModel<S>,
    f: &mut Fwd<S>,
    scene: &Scene,
    volume: Var,
    future_poses: &[EgoPose],
) -> Result<Option<Var>> {
    let cfg = &model.cfg;
    let n_h = cfg.n_history;
    let rays = ray_grid(&scene.rig, cfg.rpc_stride);
    let geom = VolumeGeom::from_grid(&scene.frames[0].grid);
    let far = geom.diagonal();
    let mut frame_losses = Vec::new();
    for fi in 0..cfg.n_future {
        let frame_idx = n_h + fi;
        let samples = sample_rays(&rays, &geom, cfg.render_near, far, cfg.render_samples)?;
        let vol = f.g.slice_first(volume, fi, 1)?;
        let vs = f.g.shape(vol)[1..].to_vec();
        let vol = f.g.reshape(vol, vs)?;
        let feats = gather_volume(&mut f.g, vol, &samples)?;
        let sigma = model.density(f, feats)?;
        let sigma = f.g.reshape(sigma, vec![samples.n_rays, samples.n_samples])?;
        let rendered = render_depth_graph(&mut f.g, sigma, &samples)?;
        let mut ray_valid = samples.valid.clone();
        for (r, v) in ray_valid.iter_mut().enumerate() {
            *v = *v && f.g.values(rendered.weight_sum)[r].f64() >= LOW_OPACITY;
        }
        let target_full = image_var(f, &scene.frames[frame_idx].image)?;
        let target = subsample_image(&mut f.g, target_full, &rays)?;
        let mut sources = Vec::new();
        if frame_idx >= 1 {
            sources.push(RpcSource {
                image: image_var(f, &scene.frames[frame_idx - 1].image)?,
                pose: scene.frames[frame_idx - 1].pose,
            });
        }
        if frame_idx + 1 < scene.frames.len() {
            sources.push(RpcSource {
                image: image_var(f, &scene.frames[frame_idx + 1].image)?,
                pose: scene.frames[frame_idx + 1].pose,
            });
        }
        let pose_t = future_poses[fi];
        let out = rpc_loss(&mut f.g, target, &sources, rendered.depth, &rays, &pose_t, &scene.rig, &ray_valid)?;
        if !out.all_masked {
            frame_losses.push(out.loss);
        }
    }
    if frame_losses.is_empty() {
        return Ok(None);
    }
    let mut total = frame_losses[0];
    for &l in &frame_losses[1..] {
        total = f.g.add(total, l)?;
    }
    Ok(Some(f.g.scale(total, 1.0 / frame_losses.len() as f64)))
}

fn image_var<S: Real>(f: &mut Fwd<S>, img: &crate::render::image_io::ImageBuf) -> Result<Var> {
    let data: Vec<S> = img.data.iter().map(|&v| S::of(v as f64)).collect();
    let t = Tensor::new(vec![img.height, img.width, 3], data)?;
    Ok(f.g.constant(&t))
}

// --------------------------------------------------------------------- SGD

/// Stochastic gradient descent with momentum.
pub struct Sgd<S> {
    pub lr: f64,
    pub momentum: f64,
    velocity: Vec<Vec<S>>,
}

impl<S: Real> Sgd<S> {
    pub fn new(model: &WorldModel<S>, lr: f64, momentum: f64) -> Self {
        let velocity = model.params.iter().map(|(_, t)| vec![S::zero(); t.numel()]).collect();
        Sgd { lr, momentum, velocity }
    }

    /// `v = mu v + g; p -= lr v` per parameter, skipping untouched ones.
    pub fn step(&mut self, model: &mut WorldModel<S>, grads: &[Option<Vec<S>>]) {
        let mu = S::of(self.momentum);
        let lr = S::of(self.lr);
        for (idx, grad) in grads.iter().enumerate() {
            let Some(grad) = grad else { continue };
            let vel = &mut self.velocity[idx];
            let id = crate::model::ParamId(idx);
            let mut tensor = model.params.get(id).clone();
            let data = tensor.data_mut();
            for ((p, v), &g) in data.iter_mut().zip(vel.iter_mut()).zip(grad.iter()) {
                *v = mu * *v + g;
                *p = *p - lr * *v;
            }
            model.params.set(id, tensor);
        }
    }
}

/// One logged training step.
#[derive(Clone, Copy, Debug)]
pub struct StepLog {
    pub step: usize,
    pub loss: LossBreakdown,
}

/// Runs SGD for `tc.steps` over the scenes in a seeded shuffled order.
/// Batch members build independent graphs (parallel when enabled); their
/// gradients average in index order.
pub fn train<S: Real>(model: &mut WorldModel<S>, scenes: &[Scene], tc: &TrainConfig) -> Result<Vec<StepLog>> {
    if scenes.is_empty() {
        return Err(Error::config("training needs at least one scene"));
    }
    let mut order: Vec<usize> = (0..scenes.len()).collect();
    let mut rng = seeded_rng(tc.seed, "train-order");
    let mut opt = Sgd::new(model, tc.lr, tc.momentum);
    let mut cursor = 0usize;
    let mut log = Vec::with_capacity(tc.steps);
    shuffle(&mut order, &mut rng);
    for step in 0..tc.steps {
        let mut batch = Vec::with_capacity(tc.batch);
        for _ in 0..tc.batch.max(1) {
            if cursor == order.len() {
                cursor = 0;
                shuffle(&mut order, &mut rng);
            }
            batch.push(order[cursor]);
            cursor += 1;
        }
        let frozen: &WorldModel<S> = model;
        let results: Vec<Result<(Vec<Option<Vec<S>>>, LossBreakdown)>> =
            exec::map_indexed(batch.len(), |bi| {
                let (mut f, total, bd) = build_loss(frozen, &scenes[batch[bi]])?;
                f.g.backward(total)?;
                Ok((f.gradients(), bd))
            });
        let mut grads: Vec<Option<Vec<S>>> = vec![None; model.params.len()];
        let mut bd_sum = LossBreakdown::default();
        let n = batch.len() as f64;
        let scale = S::of(1.0 / n);
        for r in results {
            let (g, bd) = r?;
            for (slot, piece) in grads.iter_mut().zip(g) {
                let Some(piece) = piece else { continue };
                match slot {
                    Some(acc) => {
                        for (a, p) in acc.iter_mut().zip(piece) {
                            *a = *a + p * scale;
                        }
                    }
                    None => {
                        let mut piece = piece;
                        for p in piece.iter_mut() {
                            *p = *p * scale;
                        }
                        *slot = Some(piece);
                    }
                }
            }
            bd_sum.occ_ce += bd.occ_ce / n;
            bd_sum.occ_lovasz += bd.occ_lovasz / n;
            bd_sum.img_l2 += bd.img_l2 / n;
            bd_sum.pose_l1 += bd.pose_l1 / n;
            bd_sum.rpc += bd.rpc / n;
            bd_sum.total += bd.total / n;
        }
        clip_gradients(&mut grads, tc.grad_clip);
        opt.step(model, &grads);
        log.push(StepLog { step, loss: bd_sum });
    }
    Ok(log)
}

/// Scales all gradients down when their global norm exceeds `clip`.
fn clip_gradients<S: Real>(grads: &mut [Option<Vec<S>>], clip: f64) {
    if clip <= 0.0 {
        return;
    }
    let mut sq = 0.0f64;
    for g in grads.iter().flatten() {
        for v in g {
            sq += v.f64() * v.f64();
        }
    }
    let norm = sq.sqrt();
    if norm <= clip {
        return;
    }
    let scale = S::of(clip / norm);
    for g in grads.iter_mut().flatten() {
        for v in g.iter_mut() {
            *v = *v * scale;
        }
    }
}

/// Fisher-Yates with our seeded rng.
fn shuffle(order: &mut [usize], rng: &mut rand_chacha::ChaCha8Rng) {
    use rand::Rng;
    for i in (1..order.len()).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
}

/// Loss-curve CSV: one row per step.
pub fn loss_csv(log: &[StepLog]) -> String {
    let mut out = String::from("step,total,occ_ce,occ_lovasz,img_l2,pose_l1,rpc\n");
    for row in log {
        let l = &row.loss;
        out.push_str(&format!(
            "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
            row.step, l.total, l.occ_ce, l.occ_lovasz, l.img_l2, l.pose_l1, l.rpc
        ));
    }
    out
}

/// Central-finite-difference check of the full training loss against the
/// reverse-mode gradients, parameter by parameter. Large tensors are
/// subsampled to `max_coords_per_param` evenly-strided coordinates.
/// Returns `(worst relative error, parameter name, coords checked)`.
pub fn check_training_gradients(
    model: &mut WorldModel<f64>,
    scene: &Scene,
    eps: f64,
    max_coords_per_param: usize,
) -> Result<(f64, String, usize)> {
    let (mut f, total, _) = build_loss(model, scene)?;
    f.g.backward(total)?;
    let grads = f.gradients();
    drop(f);
    let mut worst = 0.0f64;
    let mut worst_name = String::new();
    let mut checked = 0usize;
    for idx in 0..model.params.len() {
        let id = crate::model::ParamId(idx);
        let Some(grad) = grads[idx].clone() else { continue };
        let name = model.params.name_of(id).to_string();
        let n = grad.len();
        let stride = (n / max_coords_per_param.max(1)).max(1);
        for c in (0..n).step_by(stride) {
            let base = model.params.get(id).clone();
            let eval = |m: &WorldModel<f64>| -> Result<f64> {
                let (f, total, _) = build_loss(m, scene)?;
                Ok(f.g.values(total)[0])
            };
            let mut plus = base.clone();
            plus.data_mut()[c] += eps;
            model.params.set(id, plus);
            let lp = eval(model)?;
            let mut minus = base.clone();
            minus.data_mut()[c] -= eps;
            model.params.set(id, minus);
            let lm = eval(model)?;
            model.params.set(id, base);
            let numeric = (lp - lm) / (2.0 * eps);
            let analytic = grad[c];
            let denom = analytic.abs().max(numeric.abs()).max(1e-3);
            let rel = (analytic - numeric).abs() / denom;
            checked += 1;
            if rel > worst {
                worst = rel;
                worst_name = format!("{name}[{c}]");
            }
        }
    }
    Ok((worst, worst_name, checked))
}
