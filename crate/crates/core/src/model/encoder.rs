//! Tokenization (occupancy, image, ego pose) and the cross-modal
//! spatial-temporal encoder. Occupancy and image tokens are concatenated
//! along the temporal axis; with masked attention on, occupancy rows are
//! structurally independent of image content.

use super::layers::{Conv2dLayer, GroupNormLayer, Linear};
use super::salt::{cross_modal_mask, SaltBlock};
use super::{Fwd, ParamId, Params, WorldModelConfig};
use crate::error::{Error, Result};
use crate::geometry::{relative_displacements, EgoPose};
use crate::occ::{collapse_to_bev, embed_classes, patchify, OccupancyGrid};
use crate::real::Real;
use crate::render::image_io::ImageBuf;
use crate::tensor::{Tensor, Var};

/// A Conv-GroupNorm-SiLU stack behind a 1x1 channel projection; one per
/// modality.
pub struct PatchEncoder {
    proj: Conv2dLayer,
    conv1: Conv2dLayer,
    gn1: GroupNormLayer,
    conv2: Conv2dLayer,
    gn2: GroupNormLayer,
}

impl PatchEncoder {
    pub fn new<S: Real>(p: &mut Params<S>, name: &str, in_ch: usize, width: usize, seed: u64) -> Self {
        PatchEncoder {
            proj: Conv2dLayer::new(p, &format!("{name}.proj"), 1, in_ch, width, 1, 0, seed, false),
            conv1: Conv2dLayer::new(p, &format!("{name}.conv1"), 3, width, width, 1, 1, seed, false),
            gn1: GroupNormLayer::new(p, &format!("{name}.gn1"), width),
            conv2: Conv2dLayer::new(p, &format!("{name}.conv2"), 3, width, width, 1, 1, seed, false),
            gn2: GroupNormLayer::new(p, &format!("{name}.gn2"), width),
        }
    }

    /// One frame of raw patch tokens `[H,W,C_in] -> [H,W,width]`.
    pub fn forward<S: Real>(&self, f: &mut Fwd<S>, x: Var) -> Result<Var> {
        let x = self.proj.forward(f, x)?;
        let y = self.conv1.forward(f, x)?;
        let y = self.gn1.forward(f, y)?;
        let y = f.g.silu(y);
        let y = self.conv2.forward(f, y)?;
        let y = self.gn2.forward(f, y)?;
        Ok(f.g.silu(y))
    }
}

pub struct Tokenizers {
    pub class_emb: ParamId,
    pub temb: ParamId,
    occ: PatchEncoder,
    img: PatchEncoder,
    ego1: Linear,
    ego2: Linear,
}

impl Tokenizers {
    pub fn new<S: Real>(p: &mut Params<S>, cfg: &WorldModelConfig, seed: u64) -> Self {
        let class_emb = p.add_rowwise(
            "class_embedding",
            cfg.num_classes,
            cfg.class_embed,
            cfg.class_embed,
            seed,
        );
        let temb = p.add_rowwise(
            "temporal_embedding",
            cfg.n_history + cfg.n_future,
            cfg.width,
            cfg.width,
            seed,
        );
        Tokenizers {
            class_emb,
            temb,
            occ: PatchEncoder::new(p, "occ_enc", cfg.occ_patch_channels(), cfg.width, seed),
            img: PatchEncoder::new(p, "img_enc", cfg.patch * cfg.patch * 3, cfg.width, seed),
            ego1: Linear::new(p, "ego_enc.fc1", 3, cfg.width, seed, false),
            ego2: Linear::new(p, "ego_enc.fc2", cfg.width, cfg.width, seed, false),
        }
    }

    /// `[N_h, H, W, C]` occupancy spacetime tokens.
    pub fn occ_tokens<S: Real>(
        &self,
        f: &mut Fwd<S>,
        cfg: &WorldModelConfig,
        grids: &[OccupancyGrid],
    ) -> Result<Var> {
        let table = f.var(self.class_emb);
        let mut frames = Vec::with_capacity(grids.len());
        for grid in grids {
            let emb = embed_classes(&mut f.g, grid, table)?;
            let bev = collapse_to_bev(&mut f.g, emb)?;
            let tokens = patchify(&mut f.g, bev, cfg.patch)?;
            let enc = self.occ.forward(f, tokens)?;
            let mut shape = vec![1];
            shape.extend_from_slice(f.g.shape(enc));
            frames.push(f.g.reshape(enc, shape)?);
        }
        f.g.concat_first(&frames)
    }

    /// `[N_h, H, W, C]` image spacetime tokens; inputs are resized to the
    /// BEV resolution before patching.
    pub fn img_tokens<S: Real>(
        &self,
        f: &mut Fwd<S>,
        cfg: &WorldModelConfig,
        images: &[ImageBuf],
    ) -> Result<Var> {
        let (h0, w0) = (cfg.grid_dims[0], cfg.grid_dims[1]);
        let mut frames = Vec::with_capacity(images.len());
        for img in images {
            let resized = img.resized(w0, h0);
            let data: Vec<S> = resized.data.iter().map(|&v| S::of(v as f64)).collect();
            let t = Tensor::new(vec![h0, w0, 3], data)?;
            let v = f.g.constant(&t);
            let tokens = patchify(&mut f.g, v, cfg.patch)?;
            let enc = self.img.forward(f, tokens)?;
            let mut shape = vec![1];
            shape.extend_from_slice(f.g.shape(enc));
            frames.push(f.g.reshape(enc, shape)?);
        }
        f.g.concat_first(&frames)
    }

    /// `[N_h, C]` ego tokens from per-step relative displacements (frame 0
    /// gets a zero displacement).
    pub fn ego_tokens<S: Real>(
        &self,
        f: &mut Fwd<S>,
        cfg: &WorldModelConfig,
        poses: &[EgoPose],
    ) -> Result<Var> {
        if poses.len() != cfg.n_history {
            return Err(Error::config(format!(
                "ego encoder expects {} poses, got {}",
                cfg.n_history,
                poses.len()
            )));
        }
        let rel: Tensor<S> = relative_displacements(poses)?;
        let mut data = vec![S::zero(); 3];
        data.extend_from_slice(rel.data());
        let t = Tensor::new(vec![cfg.n_history, 3], data)?;
        let v = f.g.constant(&t);
        let x = self.ego1.forward(f, v)?;
        let x = f.g.relu(x);
        self.ego2.forward(f, x)
    }

    /// Temporal-embedding rows `[start, start+len)` as `[len, 1, 1, C]`.
    pub fn temb_rows<S: Real>(&self, f: &mut Fwd<S>, start: usize, len: usize) -> Result<Var> {
        let table = f.var(self.temb);
        let rows = f.g.slice_first(table, start, len)?;
        let c = f.g.shape(rows)[1];
        f.g.reshape(rows, vec![len, 1, 1, c])
    }
}

/// Encoder outputs: the occupancy rows and the full multi-modal sequence.
pub struct Encoded {
    /// `[N_h, H, W, C]`
    pub occ: Var,
    /// `[T, H, W, C]`, `T = N_h` or `2 N_h`
    pub all: Var,
    pub n_img: usize,
}

pub struct CrossModalEncoder {
    blocks: Vec<SaltBlock>,
}

impl CrossModalEncoder {
    pub fn new<S: Real>(p: &mut Params<S>, cfg: &WorldModelConfig, seed: u64) -> Self {
        let blocks = (0..cfg.layers)
            .map(|i| SaltBlock::new(p, &format!("encoder.{i}"), cfg.width, cfg.heads, false, seed))
            .collect();
        CrossModalEncoder { blocks }
    }

    /// Adds ego and temporal embeddings, concatenates modalities along the
    /// temporal axis and runs the masked SALT stack.
    pub fn forward<S: Real>(
        &self,
        f: &mut Fwd<S>,
        cfg: &WorldModelConfig,
        tok: &Tokenizers,
        occ_tokens: Var,
        img_tokens: Option<Var>,
        ego_tokens: Var,
    ) -> Result<Encoded> {
        let n_h = cfg.n_history;
        if let Some(img) = img_tokens {
            if f.g.shape(img)[0] != n_h {
                return Err(Error::config(format!(
                    "image modality has {} frames, occupancy has {n_h}",
                    f.g.shape(img)[0]
                )));
            }
        }
        let c = cfg.width;
        let ego = f.g.reshape(ego_tokens, vec![n_h, 1, 1, c])?;
        let temb = tok.temb_rows(f, 0, n_h)?;
        let occ = f.g.add(occ_tokens, ego)?;
        let occ = f.g.add(occ, temb)?;
        let (mut seq, n_img) = match img_tokens {
            Some(img) => {
                let img = f.g.add(img, ego)?;
                let img = f.g.add(img, temb)?;
                (f.g.concat_first(&[occ, img])?, n_h)
            }
            None => (occ, 0),
        };
        let mask = (n_img > 0 && cfg.masked_attention).then(|| cross_modal_mask(n_h, n_img));
        let segments: Vec<usize> = if n_img > 0 { vec![n_h, n_img] } else { vec![n_h] };
        for block in &self.blocks {
            seq = block.forward(f, seq, mask.as_ref(), &segments)?;
        }
        let occ = f.g.slice_first(seq, 0, n_h)?;
        Ok(Encoded { occ, all: seq, n_img })
    }
}
