//! The world model: tokenizers, the cross-modal spatial-temporal encoder
//! built from spatial-aware local-temporal attention blocks, and the flow /
//! occupancy / image / pose decoders that emit every future frame in one
//! non-autoregressive pass.

mod decoder;
mod encoder;
mod forecast;
mod layers;
mod salt;

pub use decoder::{DecodeOut, DecoderStack, Refined};
pub use encoder::Encoded;
pub use forecast::{Forecast, ForwardOut, ModelInput, WorldModel};
pub use salt::{causal_decoder_mask, cross_modal_mask, SaltBlock};

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::metrics::LossWeights;
use crate::real::Real;
use crate::tensor::{seeded_rng, Graph, Tensor, Var};

/// How future occupancy is realized.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ForecastMode {
    /// Direct regression of future features, no warping.
    Direct,
    /// Every cell warped by the predicted flow.
    Flow,
    /// Dynamic cells warped by flow, static cells transported by ego motion.
    Decoupled,
}

impl ForecastMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "direct" => Ok(ForecastMode::Direct),
            "flow" => Ok(ForecastMode::Flow),
            "decoupled" => Ok(ForecastMode::Decoupled),
            other => Err(Error::config(format!(
                "unknown mode '{other}' (expected direct|flow|decoupled)"
            ))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            ForecastMode::Direct => "direct",
            ForecastMode::Flow => "flow",
            ForecastMode::Decoupled => "decoupled",
        }
    }
}

/// Everything that fixes the model's shape and training objective.
#[derive(Clone, Debug)]
pub struct WorldModelConfig {
    pub grid_dims: [usize; 3],
    pub voxel_size: f64,
    pub num_classes: usize,
    pub n_history: usize,
    pub n_future: usize,
    pub patch: usize,
    pub width: usize,
    pub layers: usize,
    pub decoder_layers: usize,
    pub heads: usize,
    pub fps: f64,
    pub class_embed: usize,
    pub voxel_feat: usize,
    pub use_images: bool,
    pub masked_attention: bool,
    pub mode: ForecastMode,
    pub weights: LossWeights,
    pub render_samples: usize,
    pub render_near: f64,
    pub rpc_stride: usize,
    /// Zero-init the flow/pose heads so the untrained model predicts "no
    /// motion". Gradient-check setups turn this off to keep sampling
    /// coordinates away from interpolation-cell boundaries.
    pub zero_init_heads: bool,
}

impl Default for WorldModelConfig {
    fn default() -> Self {
        WorldModelConfig {
            grid_dims: [32, 32, 8],
            voxel_size: 0.5,
            num_classes: 4,
            n_history: 4,
            n_future: 6,
            patch: 4,
            width: 32,
            layers: 2,
            decoder_layers: 2,
            heads: 4,
            fps: 2.0,
            class_embed: 8,
            voxel_feat: 8,
            use_images: true,
            masked_attention: true,
            mode: ForecastMode::Decoupled,
            weights: LossWeights::default(),
            render_samples: 48,
            render_near: 0.5,
            rpc_stride: 4,
            zero_init_heads: true,
        }
    }
}

impl WorldModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positives = [
            ("n_history", self.n_history),
            ("n_future", self.n_future),
            ("patch", self.patch),
            ("width", self.width),
            ("layers", self.layers),
            ("decoder_layers", self.decoder_layers),
            ("heads", self.heads),
            ("class_embed", self.class_embed),
            ("voxel_feat", self.voxel_feat),
            ("num_classes", self.num_classes),
            ("render_samples", self.render_samples),
            ("rpc_stride", self.rpc_stride),
        ];
        for (name, v) in positives {
            if v == 0 {
                return Err(Error::config(format!("{name} must be positive")));
            }
        }
        if self.fps <= 0.0 || self.voxel_size <= 0.0 || self.render_near <= 0.0 {
            return Err(Error::config("fps, voxel_size and render_near must be positive"));
        }
        if self.grid_dims[0] % self.patch != 0 || self.grid_dims[1] % self.patch != 0 {
            return Err(Error::config(format!(
                "grid {}x{} not divisible by patch size {}",
                self.grid_dims[0], self.grid_dims[1], self.patch
            )));
        }
        if self.width % self.heads != 0 {
            return Err(Error::config(format!(
                "width {} not divisible by {} heads",
                self.width, self.heads
            )));
        }
        if self.width % norm_groups(self.width) != 0 {
            return Err(Error::config("width must allow 4-channel norm groups"));
        }
        self.weights.validate()
    }

    /// Token grid height/width.
    pub fn token_hw(&self) -> (usize, usize) {
        (self.grid_dims[0] / self.patch, self.grid_dims[1] / self.patch)
    }

    /// Channel width of a raw occupancy patch token (`P^2 * D0 * C0`).
    pub fn occ_patch_channels(&self) -> usize {
        self.patch * self.patch * self.grid_dims[2] * self.class_embed
    }

    /// Frame indices (0-based, within the future block) of the 1s/2s/3s
    /// horizons.
    pub fn horizon_frames(&self) -> Vec<usize> {
        [1.0, 2.0, 3.0]
            .iter()
            .filter_map(|s| {
                let idx = (s * self.fps).round() as usize;
                (idx >= 1 && idx <= self.n_future).then(|| idx - 1)
            })
            .collect()
    }
}

pub(crate) fn norm_groups(width: usize) -> usize {
    if width % 4 == 0 {
        4
    } else {
        1
    }
}

// ------------------------------------------------------------------ params

/// Handle to a named parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

/// Named parameter store; iteration order is insertion order, which also
/// fixes the checkpoint layout.
#[derive(Clone, Debug, Default)]
pub struct Params<S> {
    entries: Vec<(String, Tensor<S>)>,
    index: BTreeMap<String, usize>,
}

impl<S: Real> Params<S> {
    pub fn new() -> Self {
        Params { entries: Vec::new(), index: BTreeMap::new() }
    }

    pub fn add(&mut self, name: &str, tensor: Tensor<S>) -> ParamId {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter name {name}"
        );
        self.entries.push((name.to_string(), tensor));
        self.index.insert(name.to_string(), self.entries.len() - 1);
        ParamId(self.entries.len() - 1)
    }

    /// Uniform init in `[-1/sqrt(fan_in), +1/sqrt(fan_in)]`, seeded per
    /// parameter name so sibling layouts never shift each other's draws.
    pub fn add_uniform(&mut self, name: &str, shape: Vec<usize>, fan_in: usize, seed: u64) -> ParamId {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let mut rng = seeded_rng(seed, name);
        self.add(name, Tensor::uniform(shape, bound, &mut rng))
    }

    pub fn add_zeros(&mut self, name: &str, shape: Vec<usize>) -> ParamId {
        self.add(name, Tensor::zeros(shape))
    }

    /// A table whose rows draw from per-row streams: row `i` is identical
    /// across tables of different row counts (prefix slicing, not
    /// re-initialization).
    pub fn add_rowwise(&mut self, name: &str, rows: usize, cols: usize, fan_in: usize, seed: u64) -> ParamId {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            let mut rng = seeded_rng(seed, &format!("{name}.row{r}"));
            for _ in 0..cols {
                data.push(S::of(rand::Rng::gen_range(&mut rng, -bound..=bound)));
            }
        }
        self.add(name, Tensor::new(vec![rows, cols], data).expect("rowwise table"))
    }

    pub fn get(&self, id: ParamId) -> &Tensor<S> {
        &self.entries[id.0].1
    }

    pub fn set(&mut self, id: ParamId, t: Tensor<S>) {
        debug_assert_eq!(self.entries[id.0].1.shape(), t.shape());
        self.entries[id.0].1 = t;
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<S>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn by_name(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn name_of(&self, id: ParamId) -> &str {
        &self.entries[id.0].0
    }

    /// Replaces every tensor from `(name, tensor)` pairs; names and shapes
    /// must match exactly.
    pub fn load(&mut self, loaded: Vec<(String, Tensor<S>)>) -> Result<()> {
        if loaded.len() != self.entries.len() {
            return Err(Error::data(format!(
                "checkpoint holds {} parameters, model has {}",
                loaded.len(),
                self.entries.len()
            )));
        }
        for (name, tensor) in loaded {
            let idx = *self
                .index
                .get(&name)
                .ok_or_else(|| Error::data(format!("checkpoint parameter {name} unknown to the model")))?;
            if self.entries[idx].1.shape() != tensor.shape() {
                return Err(Error::data(format!(
                    "checkpoint parameter {name} has shape {:?}, model expects {:?}",
                    tensor.shape(),
                    self.entries[idx].1.shape()
                )));
            }
            self.entries[idx].1 = tensor;
        }
        Ok(())
    }

    pub fn total_values(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    /// Adds a small seeded uniform offset to every value. Gradient-check
    /// setups use this to move zero-initialized biases off exact activation
    /// kinks, where central differences measure the wrong one-sided slope.
    pub fn jitter(&mut self, seed: u64, amplitude: f64) {
        for (name, tensor) in self.entries.iter_mut() {
            let mut rng = seeded_rng(seed, &format!("jitter.{name}"));
            for v in tensor.data_mut() {
                *v = *v + S::of(rand::Rng::gen_range(&mut rng, -amplitude..=amplitude));
            }
        }
    }
}

// --------------------------------------------------------------- episodes

/// One forward episode: a graph plus lazily-bound parameter leaves. The
/// graph mutates; the parameter store is read-only during the episode.
pub struct Fwd<'m, S: Real> {
    pub g: Graph<S>,
    params: &'m Params<S>,
    bound: Vec<Option<Var>>,
}

impl<'m, S: Real> Fwd<'m, S> {
    pub fn new(params: &'m Params<S>) -> Self {
        Fwd { g: Graph::new(), params, bound: vec![None; params.len()] }
    }

    /// The graph leaf for a parameter, bound on first use.
    pub fn var(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let v = self.g.parameter(self.params.get(id));
        self.bound[id.0] = Some(v);
        v
    }

    /// Post-backward gradient per parameter (insertion order); `None` for
    /// parameters the episode never touched.
    pub fn gradients(&self) -> Vec<Option<Vec<S>>> {
        self.bound
            .iter()
            .map(|b| b.and_then(|v| self.g.grad(v).map(|s| s.to_vec())))
            .collect()
    }
}
