//! Parameterized layers over the autodiff graph. Convolutions operate on
//! channels-last maps; every layer is a plain struct of parameter handles.

use super::{norm_groups, Fwd, ParamId, Params};
use crate::error::Result;
use crate::real::Real;
use crate::tensor::Var;

pub struct Linear {
    w: ParamId,
    b: ParamId,
}

impl Linear {
    pub fn new<S: Real>(p: &mut Params<S>, name: &str, inp: usize, out: usize, seed: u64, zero: bool) -> Self {
        let w = if zero {
            p.add_zeros(&format!("{name}.w"), vec![inp, out])
        } else {
            p.add_uniform(&format!("{name}.w"), vec![inp, out], inp, seed)
        };
        let b = p.add_zeros(&format!("{name}.b"), vec![out]);
        Linear { w, b }
    }

    /// `x` is `[M, in]`.
    pub fn forward<S: Real>(&self, f: &mut Fwd<S>, x: Var) -> Result<Var> {
        let w = f.var(self.w);
        let b = f.var(self.b);
        let y = f.g.matmul(x, w)?;
        f.g.add(y, b)
    }
}

pub struct Conv2dLayer {
    w: ParamId,
    b: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2dLayer {
    pub fn new<S: Real>(
        p: &mut Params<S>,
        name: &str,
        k: usize,
        ci: usize,
        co: usize,
        stride: usize,
        pad: usize,
        seed: u64,
        zero: bool,
    ) -> Self {
        let fan_in = k * k * ci;
        let w = if zero {
            p.add_zeros(&format!("{name}.w"), vec![k, k, ci, co])
        } else {
            p.add_uniform(&format!("{name}.w"), vec![k, k, ci, co], fan_in, seed)
        };
        let b = p.add_zeros(&format!("{name}.b"), vec![co]);
        Conv2dLayer { w, b, stride, pad }
    }

    /// `x` is `[H,W,Ci]`.
    pub fn forward<S: Real>(&self, f: &mut Fwd<S>, x: Var) -> Result<Var> {
        let w = f.var(self.w);
        let b = f.var(self.b);
        let y = f.g.conv2d(x, w, self.stride, self.pad)?;
        f.g.add(y, b)
    }

    /// Applies the same convolution to each leading-axis frame of
    /// `[T,H,W,Ci]` (weights shared across frames).
    pub fn forward_frames<S: Real>(&self, f: &mut Fwd<S>, x: Var) -> Result<Var> {
        let t = f.g.shape(x)[0];
        let mut outs = Vec::with_capacity(t);
        for k in 0..t {
            let frame = f.g.slice_first(x, k, 1)?;
            let s = f.g.shape(frame)[1..].to_vec();
            let frame = f.g.reshape(frame, s)?;
            let y = self.forward(f, frame)?;
            let mut ys = vec![1];
            ys.extend_from_slice(f.g.shape(y));
            let y = f.g.reshape(y, ys)?;
            outs.push(y);
        }
        f.g.concat_first(&outs)
    }
}

pub struct Conv3dLayer {
    w: ParamId,
    b: ParamId,
    pub pad_s: usize,
    pub causal: bool,
}

impl Conv3dLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new<S: Real>(
        p: &mut Params<S>,
        name: &str,
        kt: usize,
        ks: usize,
        ci: usize,
        co: usize,
        causal: bool,
        seed: u64,
    ) -> Self {
        let fan_in = kt * ks * ks * ci;
        let w = p.add_uniform(&format!("{name}.w"), vec![kt, ks, ks, ci, co], fan_in, seed);
        let b = p.add_zeros(&format!("{name}.b"), vec![co]);
        Conv3dLayer { w, b, pad_s: ks / 2, causal }
    }

    /// `x` is `[T,H,W,Ci]`; output keeps `T` (causal or centered padding).
    pub fn forward<S: Real>(&self, f: &mut Fwd<S>, x: Var) -> Result<Var> {
        let w = f.var(self.w);
        let b = f.var(self.b);
        let kt = f.g.shape(w)[0];
        let y = if self.causal {
            f.g.conv3d_causal(x, w, self.pad_s)?
        } else {
            f.g.conv3d_padded(x, w, ((kt - 1) / 2, kt / 2), self.pad_s)?
        };
        f.g.add(y, b)
    }
}

/// Group normalization with learnable per-channel affine, applied to each
/// leading-axis frame independently (per-frame statistics keep frames and
/// modalities from leaking into one another).
pub struct GroupNormLayer {
    gamma: ParamId,
    beta: ParamId,
    groups: usize,
    eps: f64,
}

impl GroupNormLayer {
    pub fn new<S: Real>(p: &mut Params<S>, name: &str, channels: usize) -> Self {
        let gamma = p.add(&format!("{name}.gamma"), crate::tensor::Tensor::filled(vec![channels], S::one()));
        let beta = p.add_zeros(&format!("{name}.beta"), vec![channels]);
        GroupNormLayer { gamma, beta, groups: norm_groups(channels), eps: 1e-5 }
    }

    /// Normalizes one map `[...,C]` as a whole.
    pub fn forward<S: Real>(&self, f: &mut Fwd<S>, x: Var) -> Result<Var> {
        let gamma = f.var(self.gamma);
        let beta = f.var(self.beta);
        let y = f.g.group_norm(x, self.groups, self.eps)?;
        let y = f.g.mul(y, gamma)?;
        f.g.add(y, beta)
    }

    /// Normalizes each leading-axis frame of `[T,...,C]` separately.
    pub fn forward_frames<S: Real>(&self, f: &mut Fwd<S>, x: Var) -> Result<Var> {
        let t = f.g.shape(x)[0];
        let mut outs = Vec::with_capacity(t);
        for k in 0..t {
            let frame = f.g.slice_first(x, k, 1)?;
            let y = self.forward(f, frame)?;
            outs.push(y);
        }
        f.g.concat_first(&outs)
    }
}
