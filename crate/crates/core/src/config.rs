//! Run configuration: a flat `key = value` text format covering the model,
//! the synthetic-data generator and the training loop. Unknown keys are
//! rejected with the full list of valid ones, and a persisted config
//! reproduces the run bit-for-bit given the same seed.

use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{ForecastMode, WorldModelConfig};
use crate::scene::{default_camera, default_class_table, SceneSpec};
use crate::tensor::seeded_rng;

/// Training hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub momentum: f64,
    /// Global gradient-norm ceiling (0 disables clipping).
    pub grad_clip: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { steps: 400, batch: 2, lr: 0.02, momentum: 0.9, grad_clip: 10.0, seed: 1 }
    }
}

/// Dataset-generation knobs beyond the model's grid geometry.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneConfig {
    pub scenes: usize,
    pub buildings: usize,
    pub dynamic_objects: usize,
    pub camera_width: usize,
    pub camera_height: usize,
    pub ego_speed: f64,
    pub ego_yaw_rate: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            scenes: 200,
            buildings: 6,
            dynamic_objects: 2,
            camera_width: 64,
            camera_height: 64,
            ego_speed: 1.0,
            ego_yaw_rate: 0.0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct RunConfig {
    pub model: WorldModelConfig,
    pub scene: SceneConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: WorldModelConfig { num_classes: default_class_table().len(), ..Default::default() },
            scene: SceneConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

const VALID_KEYS: &[&str] = &[
    "grid_h", "grid_w", "grid_d", "voxel_size", "n_history", "n_future", "patch", "width",
    "layers", "decoder_layers", "heads", "fps", "class_embed", "voxel_feat", "use_images",
    "masked_attention", "mode", "lambda_occ", "lambda_img", "lambda_pose", "lambda_rpc",
    "render_samples", "render_near", "rpc_stride", "scenes", "buildings", "dynamic_objects",
    "camera_width", "camera_height", "ego_speed", "ego_yaw_rate", "steps", "batch", "lr",
    "momentum", "grad_clip", "seed",
];

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (ln, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("config line {}: expected key = value, got '{raw}'", ln + 1)))?;
            let key = key.trim();
            let value = value.trim();
            cfg.apply(key, value).map_err(|e| {
                Error::config(format!("config line {}: {e}", ln + 1))
            })?;
        }
        cfg.model.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::config(format!("key {key}: cannot parse '{v}'")))
        }
        fn flag(key: &str, v: &str) -> Result<bool> {
            match v {
                "true" | "1" | "on" => Ok(true),
                "false" | "0" | "off" => Ok(false),
                _ => Err(Error::config(format!("key {key}: expected true/false, got '{v}'"))),
            }
        }
        let m = &mut self.model;
        match key {
            "grid_h" => m.grid_dims[0] = num(key, value)?,
            "grid_w" => m.grid_dims[1] = num(key, value)?,
            "grid_d" => m.grid_dims[2] = num(key, value)?,
            "voxel_size" => m.voxel_size = num(key, value)?,
            "n_history" => m.n_history = num(key, value)?,
            "n_future" => m.n_future = num(key, value)?,
            "patch" => m.patch = num(key, value)?,
            "width" => m.width = num(key, value)?,
            "layers" => m.layers = num(key, value)?,
            "decoder_layers" => m.decoder_layers = num(key, value)?,
            "heads" => m.heads = num(key, value)?,
            "fps" => m.fps = num(key, value)?,
            "class_embed" => m.class_embed = num(key, value)?,
            "voxel_feat" => m.voxel_feat = num(key, value)?,
            "use_images" => m.use_images = flag(key, value)?,
            "masked_attention" => m.masked_attention = flag(key, value)?,
            "mode" => m.mode = ForecastMode::parse(value)?,
            "lambda_occ" => m.weights.occ = num(key, value)?,
            "lambda_img" => m.weights.img = num(key, value)?,
            "lambda_pose" => m.weights.pose = num(key, value)?,
            "lambda_rpc" => m.weights.rpc = num(key, value)?,
            "render_samples" => m.render_samples = num(key, value)?,
            "render_near" => m.render_near = num(key, value)?,
            "rpc_stride" => m.rpc_stride = num(key, value)?,
            "scenes" => self.scene.scenes = num(key, value)?,
            "buildings" => self.scene.buildings = num(key, value)?,
            "dynamic_objects" => self.scene.dynamic_objects = num(key, value)?,
            "camera_width" => self.scene.camera_width = num(key, value)?,
            "camera_height" => self.scene.camera_height = num(key, value)?,
            "ego_speed" => self.scene.ego_speed = num(key, value)?,
            "ego_yaw_rate" => self.scene.ego_yaw_rate = num(key, value)?,
            "steps" => self.train.steps = num(key, value)?,
            "batch" => self.train.batch = num(key, value)?,
            "lr" => self.train.lr = num(key, value)?,
            "momentum" => self.train.momentum = num(key, value)?,
            "grad_clip" => self.train.grad_clip = num(key, value)?,
            "seed" => self.train.seed = num(key, value)?,
            other => {
                return Err(Error::config(format!(
                    "unknown key '{other}'; valid keys: {}",
                    VALID_KEYS.join(", ")
                )))
            }
        }
        Ok(())
    }

    pub fn serialize(&self) -> String {
        let m = &self.model;
        let s = &self.scene;
        let t = &self.train;
        format!(
            "grid_h = {}\ngrid_w = {}\ngrid_d = {}\nvoxel_size = {}\n\
             n_history = {}\nn_future = {}\npatch = {}\nwidth = {}\nlayers = {}\n\
             decoder_layers = {}\nheads = {}\nfps = {}\nclass_embed = {}\nvoxel_feat = {}\n\
             use_images = {}\nmasked_attention = {}\nmode = {}\n\
             lambda_occ = {}\nlambda_img = {}\nlambda_pose = {}\nlambda_rpc = {}\n\
             render_samples = {}\nrender_near = {}\nrpc_stride = {}\n\
             scenes = {}\nbuildings = {}\ndynamic_objects = {}\ncamera_width = {}\ncamera_height = {}\n\
             ego_speed = {}\nego_yaw_rate = {}\n\
             steps = {}\nbatch = {}\nlr = {}\nmomentum = {}\ngrad_clip = {}\nseed = {}\n",
            m.grid_dims[0], m.grid_dims[1], m.grid_dims[2], m.voxel_size,
            m.n_history, m.n_future, m.patch, m.width, m.layers,
            m.decoder_layers, m.heads, m.fps, m.class_embed, m.voxel_feat,
            m.use_images, m.masked_attention, m.mode.as_str(),
            m.weights.occ, m.weights.img, m.weights.pose, m.weights.rpc,
            m.render_samples, m.render_near, m.rpc_stride,
            s.scenes, s.buildings, s.dynamic_objects, s.camera_width, s.camera_height,
            s.ego_speed, s.ego_yaw_rate,
            t.steps, t.batch, t.lr, t.momentum, t.grad_clip, t.seed,
        )
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.serialize()).map_err(|e| Error::io(path, e))
    }

    /// The generation spec of scene `idx`: ego speeds vary mildly per scene
    /// (deterministically) so the dataset covers a range of motions. Scene
    /// seeds mix the run seed, so different run seeds give disjoint
    /// datasets (train vs held-out evaluation).
    pub fn scene_spec(&self, idx: u64) -> SceneSpec {
        use rand::Rng;
        let mut rng = seeded_rng(self.train.seed, &format!("scene-spec.{idx}"));
        let speed_scale = rng.gen_range(0.6..1.4);
        let seed = self.train.seed.wrapping_mul(1_000_000).wrapping_add(idx);
        SceneSpec {
            dims: self.model.grid_dims,
            voxel: self.model.voxel_size,
            n_history: self.model.n_history,
            n_future: self.model.n_future,
            fps: self.model.fps,
            ego_speed: self.scene.ego_speed * speed_scale,
            ego_yaw_rate: self.scene.ego_yaw_rate,
            n_buildings: self.scene.buildings,
            n_dynamic: self.scene.dynamic_objects,
            seed,
            texture_seed: seed ^ 0x7ea5_eed5,
            camera: default_camera(self.scene.camera_width, self.scene.camera_height),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_through_text() {
        let mut cfg = RunConfig::default();
        cfg.model.width = 16;
        cfg.model.mode = ForecastMode::Flow;
        cfg.model.use_images = false;
        cfg.train.steps = 77;
        let text = cfg.serialize();
        let back = RunConfig::parse(&text).unwrap();
        assert_eq!(back.model.width, 16);
        assert_eq!(back.model.mode, ForecastMode::Flow);
        assert!(!back.model.use_images);
        assert_eq!(back.train.steps, 77);
        assert_eq!(back.serialize(), text);
    }

    #[test]
    fn unknown_key_lists_valid_keys() {
        let err = RunConfig::parse("wdith = 32\n").unwrap_err().to_string();
        assert!(err.contains("unknown key 'wdith'"), "{err}");
        assert!(err.contains("width"), "{err}");
        assert!(err.contains("lambda_rpc"), "{err}");
    }

    #[test]
    fn comments_and_blanks_are_ignored() {
        let cfg = RunConfig::parse("# a comment\n\nwidth = 24 # inline\n").unwrap();
        assert_eq!(cfg.model.width, 24);
    }

    #[test]
    fn invalid_model_shapes_are_rejected() {
        assert!(RunConfig::parse("width = 30\nheads = 4\n").is_err());
        assert!(RunConfig::parse("grid_h = 30\npatch = 4\n").is_err());
    }
}
