//! Decoders: future-token stacks driven by temporal-embedding queries, the
//! flow head with decoupled warping and refinement, the occupancy head that
//! expands tokens back to per-voxel logits, the image head, the pose
//! decoder, and the density head used for depth rendering.

use super::encoder::{Encoded, Tokenizers};
use super::layers::{Conv2dLayer, GroupNormLayer, Linear};
use super::salt::{causal_decoder_mask, SaltBlock};
use super::{ForecastMode, Fwd, ParamId, Params, WorldModelConfig};
use crate::error::{Error, Result};
use crate::geometry::{
    transform_flow_graph, warp_features_graph, warp_mask, BevLayout, DynamicMask, EgoPose,
    FlowField, FlowFrame,
};
use crate::real::Real;
use crate::tensor::{AttentionMask, Var};

pub struct Decoders {
    future_blocks: Vec<SaltBlock>,
    flow_head: Conv2dLayer,
    warp_fill: ParamId,
    refine_conv1: Conv2dLayer,
    refine_gn: GroupNormLayer,
    refine_conv2: Conv2dLayer,
    occ_head: Conv2dLayer,
    logit_head: Linear,
    img_blocks: Vec<SaltBlock>,
    img_head: Conv2dLayer,
    pose_queries: ParamId,
    pose_self: AttnLayer,
    pose_cross: AttnLayer,
    pose_fc1: Linear,
    pose_fc2: Linear,
    pose_head: Linear,
    density_fc1: Linear,
    density_fc2: Linear,
}

struct AttnLayer {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    heads: usize,
}

impl AttnLayer {
    fn new<S: Real>(p: &mut Params<S>, name: &str, width: usize, heads: usize, seed: u64) -> Self {
        AttnLayer {
            q: Linear::new(p, &format!("{name}.q"), width, width, seed, false),
            k: Linear::new(p, &format!("{name}.k"), width, width, seed, false),
            v: Linear::new(p, &format!("{name}.v"), width, width, seed, false),
            o: Linear::new(p, &format!("{name}.o"), width, width, seed, false),
            heads,
        }
    }

    /// `x` `[Tq,C]` attends `mem` `[Tk,C]`; residual included.
    fn forward<S: Real>(
        &self,
        f: &mut Fwd<S>,
        x: Var,
        mem: Var,
        mask: Option<&AttentionMask>,
    ) -> Result<Var> {
        let (tq, c) = (f.g.shape(x)[0], f.g.shape(x)[1]);
        let tk = f.g.shape(mem)[0];
        let q = self.q.forward(f, x)?;
        let k = self.k.forward(f, mem)?;
        let v = self.v.forward(f, mem)?;
        let qb = f.g.reshape(q, vec![1, tq, c])?;
        let kb = f.g.reshape(k, vec![1, tk, c])?;
        let vb = f.g.reshape(v, vec![1, tk, c])?;
        let att = f.g.multi_head_attention(qb, kb, vb, self.heads, mask)?;
        let att = f.g.reshape(att, vec![tq, c])?;
        let att = self.o.forward(f, att)?;
        f.g.add(x, att)
    }
}

impl Decoders {
    pub fn new<S: Real>(p: &mut Params<S>, cfg: &WorldModelConfig, seed: u64) -> Self {
        let zero = cfg.zero_init_heads;
        let w = cfg.width;
        let future_blocks = (0..cfg.decoder_layers)
            .map(|i| SaltBlock::new(p, &format!("future_dec.{i}"), w, cfg.heads, true, seed))
            .collect();
        let img_blocks = (0..cfg.decoder_layers)
            .map(|i| SaltBlock::new(p, &format!("img_dec.{i}"), w, cfg.heads, true, seed))
            .collect();
        let d0 = cfg.grid_dims[2];
        let occ_out = cfg.patch * cfg.patch * d0 * cfg.voxel_feat;
        Decoders {
            future_blocks,
            flow_head: Conv2dLayer::new(p, "flow_head", 1, w, 2, 1, 0, seed, zero),
            warp_fill: p.add_zeros("warp_fill", vec![w]),
            refine_conv1: Conv2dLayer::new(p, "refine.conv1", 3, w, w, 1, 1, seed, false),
            refine_gn: GroupNormLayer::new(p, "refine.gn", w),
            refine_conv2: Conv2dLayer::new(p, "refine.conv2", 3, w, w, 1, 1, seed, false),
            occ_head: Conv2dLayer::new(p, "occ_head", 1, w, occ_out, 1, 0, seed, false),
            logit_head: Linear::new(p, "logit_head", cfg.voxel_feat, cfg.num_classes, seed, false),
            img_blocks,
            img_head: Conv2dLayer::new(p, "img_head", 1, w, cfg.patch * cfg.patch * 3, 1, 0, seed, false),
            pose_queries: p.add_rowwise("pose_queries", cfg.n_future, w, w, seed),
            pose_self: AttnLayer::new(p, "pose_dec.self", w, cfg.heads, seed),
            pose_cross: AttnLayer::new(p, "pose_dec.cross", w, cfg.heads, seed),
            pose_fc1: Linear::new(p, "pose_dec.fc1", w, w, seed, false),
            pose_fc2: Linear::new(p, "pose_dec.fc2", w, w, seed, false),
            pose_head: Linear::new(p, "pose_head", w, 2, seed, zero),
            density_fc1: Linear::new(p, "density.fc1", cfg.voxel_feat, 16, seed, false),
            density_fc2: Linear::new(p, "density.fc2", 16, 1, seed, false),
        }
    }

    /// Future token maps `[N_f,H,W,C]` decoded from memory rows plus
    /// temporal-embedding queries (prefix-invariant causal stack).
    pub fn future_tokens<S: Real>(
        &self,
        f: &mut Fwd<S>,
        cfg: &WorldModelConfig,
        tok: &Tokenizers,
        memory: Var,
        blocks: DecoderStack,
    ) -> Result<Var> {
        let mem_shape = f.g.shape(memory).to_vec();
        let (t_mem, h, w, c) = (mem_shape[0], mem_shape[1], mem_shape[2], mem_shape[3]);
        let n_f = cfg.n_future;
        let temb = tok.temb_rows(f, cfg.n_history, n_f)?;
        let zeros = f.g.zeros(vec![n_f, h, w, c]);
        let queries = f.g.add(zeros, temb)?;
        let mut seq = f.g.concat_first(&[memory, queries])?;
        let mask = causal_decoder_mask(t_mem, n_f);
        let blocks = match blocks {
            DecoderStack::Future => &self.future_blocks,
            DecoderStack::Image => &self.img_blocks,
        };
        for block in blocks {
            seq = block.forward(f, seq, Some(&mask), &[t_mem + n_f])?;
        }
        f.g.slice_first(seq, t_mem, n_f)
    }

    /// Per-frame flow maps in the current ego frame, meters:
    /// `[N_f,H,W,2]`.
    pub fn flow(&self, f: &mut Fwd<impl Real>, future_tokens: Var) -> Result<Var> {
        self.flow_head.forward_frames(f, future_tokens)
    }

    /// Decoupled warping of the last history token map by the predicted
    /// flow, followed by shared-weight refinement. Also returns the
    /// token-resolution destination masks and the future-frame flow values
    /// for grid-level assembly.
    #[allow(clippy::too_many_arguments)]
    pub fn warp_refine<S: Real>(
        &self,
        f: &mut Fwd<S>,
        cfg: &WorldModelConfig,
        feat_now: Var,
        flow: Var,
        token_layout: &BevLayout,
        current_mask_tokens: &DynamicMask,
        current: &EgoPose,
        futures: &[EgoPose],
    ) -> Result<Refined> {
        let (h, w) = (token_layout.h, token_layout.w);
        let fill = f.var(self.warp_fill);
        let mut frames = Vec::with_capacity(cfg.n_future);
        let mut masks = Vec::with_capacity(cfg.n_future);
        let mut flow_future = Vec::with_capacity(cfg.n_future);
        for (fi, fut) in futures.iter().enumerate() {
            let flow_f = f.g.slice_first(flow, fi, 1)?;
            let flow_f = f.g.reshape(flow_f, vec![h, w, 2])?;
            let flow_fut = transform_flow_graph(&mut f.g, flow_f, current, fut)?;
            let flow_vals: Vec<f32> = f.g.values(flow_fut).iter().map(|v| v.f64() as f32).collect();
            let field = FlowField::new(1, h, w, FlowFrame::Future, flow_vals.clone())?;
            let mask = match cfg.mode {
                ForecastMode::Decoupled => warp_mask(current_mask_tokens, &field, 0, token_layout),
                _ => DynamicMask::all(h, w),
            };
            let warped = warp_features_graph(
                &mut f.g,
                feat_now,
                flow_fut,
                &mask,
                token_layout,
                current,
                fut,
                fill,
            )?;
            let mut shape = vec![1];
            shape.extend_from_slice(f.g.shape(warped));
            frames.push(f.g.reshape(warped, shape)?);
            masks.push(mask);
            flow_future.push(flow_vals);
        }
        let coarse = f.g.concat_first(&frames)?;
        let refined = self.refine(f, coarse)?;
        Ok(Refined { tokens: refined, masks_tokens: masks, flow_future })
    }

    /// Shared-weight residual refinement applied to each frame.
    pub fn refine<S: Real>(&self, f: &mut Fwd<S>, tokens: Var) -> Result<Var> {
        let y = self.refine_conv1.forward_frames(f, tokens)?;
        let y = {
            // per-frame norm keeps frames independent
            let t = f.g.shape(y)[0];
            let mut outs = Vec::with_capacity(t);
            for k in 0..t {
                let fr = f.g.slice_first(y, k, 1)?;
                let n = self.refine_gn.forward(f, fr)?;
                outs.push(n);
            }
            f.g.concat_first(&outs)?
        };
        let y = f.g.silu(y);
        let y = self.refine_conv2.forward_frames(f, y)?;
        f.g.add(tokens, y)
    }

    /// Expands refined tokens to the per-voxel feature volume and class
    /// logits.
    pub fn decode_occupancy<S: Real>(
        &self,
        f: &mut Fwd<S>,
        cfg: &WorldModelConfig,
        refined: Var,
    ) -> Result<DecodeOut> {
        let [h0, w0, d0] = cfg.grid_dims;
        let k = cfg.num_classes;
        let cv = cfg.voxel_feat;
        let n_f = f.g.shape(refined)[0];
        let raw = self.occ_head.forward_frames(f, refined)?;
        let mut volumes = Vec::with_capacity(n_f);
        for fi in 0..n_f {
            let fr = f.g.slice_first(raw, fi, 1)?;
            let s = f.g.shape(fr)[1..].to_vec();
            let fr = f.g.reshape(fr, s)?;
            let bev = crate::occ::unpatchify(&mut f.g, fr, cfg.patch)?;
            let vol = f.g.reshape(bev, vec![1, h0, w0, d0, cv])?;
            volumes.push(vol);
        }
        let volume = f.g.concat_first(&volumes)?;
        let m = n_f * h0 * w0 * d0;
        let flat = f.g.reshape(volume, vec![m, cv])?;
        let logits = self.logit_head.forward(f, flat)?;
        let logits = f.g.reshape(logits, vec![n_f, h0, w0, d0, k])?;
        Ok(DecodeOut { logits, volume })
    }

    /// Future RGB predictions `[N_f,H0,W0,3]` in `[0,1]`.
    pub fn decode_image<S: Real>(
        &self,
        f: &mut Fwd<S>,
        cfg: &WorldModelConfig,
        tok: &Tokenizers,
        enc: &Encoded,
    ) -> Result<Var> {
        if !cfg.use_images {
            return Err(Error::config("image decoding requires use_images"));
        }
        let tokens = self.future_tokens(f, cfg, tok, enc.all, DecoderStack::Image)?;
        let raw = self.img_head.forward_frames(f, tokens)?;
        let [h0, w0, _] = cfg.grid_dims;
        let mut frames = Vec::with_capacity(cfg.n_future);
        for fi in 0..cfg.n_future {
            let fr = f.g.slice_first(raw, fi, 1)?;
            let s = f.g.shape(fr)[1..].to_vec();
            let fr = f.g.reshape(fr, s)?;
            let img = crate::occ::unpatchify(&mut f.g, fr, cfg.patch)?;
            let img = f.g.reshape(img, vec![1, h0, w0, 3])?;
            frames.push(img);
        }
        let stack = f.g.concat_first(&frames)?;
        Ok(f.g.sigmoid(stack))
    }

    /// Future relative waypoints `[N_f, 2]` (dx, dy in the current ego
    /// frame, cumulative) decoded from ego queries cross-attending the
    /// refined future features, frame-causally.
    pub fn decode_pose<S: Real>(
        &self,
        f: &mut Fwd<S>,
        cfg: &WorldModelConfig,
        tok: &Tokenizers,
        refined: Var,
    ) -> Result<Var> {
        let n_f = cfg.n_future;
        let c = cfg.width;
        let queries = f.var(self.pose_queries);
        let temb = tok.temb_rows(f, cfg.n_history, n_f)?;
        let temb = f.g.reshape(temb, vec![n_f, c])?;
        let x = f.g.add(queries, temb)?;
        // self-attention, causal over future steps
        let self_mask = {
            let mut m = AttentionMask::all_allowed(n_f, n_f);
            for iq in 0..n_f {
                for ik in (iq + 1)..n_f {
                    m.set(iq, ik, false);
                }
            }
            m
        };
        let x = self.pose_self.forward(f, x, x, Some(&self_mask))?;
        // cross-attention into refined future token maps, frame-causal
        let rs = f.g.shape(refined).to_vec();
        let (h, w) = (rs[1], rs[2]);
        let mem = f.g.reshape(refined, vec![n_f * h * w, c])?;
        let cross_mask = {
            let mut m = AttentionMask::all_allowed(n_f, n_f * h * w);
            for iq in 0..n_f {
                for ik in 0..n_f * h * w {
                    m.set(iq, ik, ik / (h * w) <= iq);
                }
            }
            m
        };
        let x = self.pose_cross.forward(f, x, mem, Some(&cross_mask))?;
        let y = self.pose_fc1.forward(f, x)?;
        let y = f.g.relu(y);
        let y = self.pose_fc2.forward(f, y)?;
        let x = f.g.add(x, y)?;
        let steps = self.pose_head.forward(f, x)?;
        // accumulate per-step displacements into waypoints
        let mut acc = Vec::with_capacity(n_f);
        let mut prev: Option<Var> = None;
        for fi in 0..n_f {
            let step = f.g.slice_first(steps, fi, 1)?;
            let wp = match prev {
                None => step,
                Some(p) => f.g.add(p, step)?,
            };
            prev = Some(wp);
            acc.push(wp);
        }
        f.g.concat_first(&acc)
    }

    /// Densities from gathered voxel features: a two-layer head with a
    /// softplus output, `[M, Cv] -> [M]`.
    pub fn density<S: Real>(&self, f: &mut Fwd<S>, feats: Var) -> Result<Var> {
        let y = self.density_fc1.forward(f, feats)?;
        let y = f.g.relu(y);
        let y = self.density_fc2.forward(f, y)?;
        let m = f.g.shape(y)[0];
        let y = f.g.reshape(y, vec![m])?;
        Ok(f.g.softplus(y))
    }
}

/// Which decoder stack to run for future tokens.
#[derive(Clone, Copy)]
pub enum DecoderStack {
    Future,
    Image,
}

/// Warped-and-refined future features plus the routing data the grid-level
/// assembly needs.
pub struct Refined {
    /// `[N_f,H,W,C]`
    pub tokens: Var,
    pub masks_tokens: Vec<DynamicMask>,
    /// Future-frame flow values per frame, `(h*w*2)` each.
    pub flow_future: Vec<Vec<f32>>,
}

/// Occupancy decode outputs.
pub struct DecodeOut {
    /// `[N_f,H0,W0,D0,K]`
    pub logits: Var,
    /// `[N_f,H0,W0,D0,Cv]` feature volume densities gather from.
    pub volume: Var,
}
