//! Reverse-mode autodiff graph. Ops record their inputs in creation order
//! (values are computed eagerly); `backward` walks the records in reverse —
//! the visitation order is exactly the reverse of forward creation order —
//! and accumulates gradients additively on shared nodes.

use std::sync::Arc;

use super::kernels as kn;
use super::Tensor;
use crate::error::{Error, Result};
use crate::real::Real;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Var(usize);

/// Boolean attendability matrix for [`Graph::multi_head_attention`];
/// `allow[iq * tk + ik] == true` means query `iq` may attend key `ik`.
#[derive(Clone, Debug)]
pub struct AttentionMask {
    pub tq: usize,
    pub tk: usize,
    pub allow: Vec<bool>,
}

impl AttentionMask {
    pub fn all_allowed(tq: usize, tk: usize) -> Self {
        AttentionMask {
            tq,
            tk,
            allow: vec![true; tq * tk],
        }
    }

    pub fn set(&mut self, iq: usize, ik: usize, allowed: bool) {
        self.allow[iq * self.tk + ik] = allowed;
    }
}

enum Op<S: Real> {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Minimum(Var, Var),
    Affine { x: Var, mul: S },
    Exp(Var),
    Relu(Var),
    Silu(Var),
    Sigmoid(Var),
    Softplus(Var),
    Abs(Var),
    MatMul(Var, Var),
    Conv2d { input: Var, kernel: Var, stride: usize, pad: usize },
    Conv3d { input: Var, kernel: Var, pad_t: (usize, usize), pad_s: usize },
    Softmax(Var),
    LogSoftmax(Var),
    GroupNorm { x: Var, groups: usize, rstd: Vec<S> },
    Mha { q: Var, k: Var, v: Var, heads: usize, weights: Arc<Vec<S>> },
    Embed { table: Var, ids: Arc<Vec<u32>> },
    GatherFlat { x: Var, idx: Arc<Vec<u32>> },
    GatherLast { x: Var, ids: Arc<Vec<u32>> },
    SumAll(Var),
    SumLast(Var),
    CumsumExclusive(Var),
    Reshape(Var),
    ConcatFirst(Vec<Var>),
    SliceFirst { x: Var, start: usize },
    ConcatLast(Vec<Var>),
    SliceLast { x: Var, start: usize },
    SampleBilinear { feat: Var, coords: Var, fill: Var },
    SampleTrilinear { vol: Var, coords: Arc<Vec<f64>> },
    BoxMean3(Var),
}

struct Node<S: Real> {
    shape: Vec<usize>,
    values: Arc<Vec<S>>,
    grad: Option<Vec<S>>,
    needs_grad: bool,
    op: Op<S>,
}

/// One computation episode: topologically ordered op records plus leaves.
#[derive(Default)]
pub struct Graph<S: Real> {
    nodes: Vec<Node<S>>,
}

impl<S: Real> Graph<S> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, values: Vec<S>, op: Op<S>, needs_grad: bool) -> Var {
        self.push_shared(shape, Arc::new(values), op, needs_grad)
    }

    fn push_shared(
        &mut self,
        shape: Vec<usize>,
        values: Arc<Vec<S>>,
        op: Op<S>,
        needs_grad: bool,
    ) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        self.nodes.push(Node {
            shape,
            values,
            grad: None,
            needs_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    // ------------------------------------------------------------- access

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn values(&self, v: Var) -> &[S] {
        &self.nodes[v.0].values
    }

    pub fn grad(&self, v: Var) -> Option<&[S]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn detach(&self, v: Var) -> Tensor<S> {
        Tensor {
            shape: self.nodes[v.0].shape.clone(),
            data: Arc::clone(&self.nodes[v.0].values),
        }
    }

    /// Saved attention weights of an MHA node, laid out `[B, heads, Tq, Tk]`.
    pub fn mha_weights(&self, v: Var) -> Option<&[S]> {
        match &self.nodes[v.0].op {
            Op::Mha { weights, .. } => Some(weights),
            _ => None,
        }
    }

    // ------------------------------------------------------------- leaves

    /// Non-differentiable leaf (input data, fixed coefficients).
    pub fn constant(&mut self, t: &Tensor<S>) -> Var {
        self.push_shared(t.shape().to_vec(), t.buffer(), Op::Leaf, false)
    }

    /// Differentiable leaf; `backward` leaves its gradient readable.
    pub fn parameter(&mut self, t: &Tensor<S>) -> Var {
        self.push_shared(t.shape().to_vec(), t.buffer(), Op::Leaf, true)
    }

    pub fn zeros(&mut self, shape: impl Into<Vec<usize>>) -> Var {
        let shape = shape.into();
        let n = shape.iter().product();
        self.push(shape, vec![S::zero(); n], Op::Leaf, false)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.push(vec![], vec![S::of(v)], Op::Leaf, false)
    }

    // -------------------------------------------------------- elementwise

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        context: &'static str,
        f: impl Fn(S, S) -> S + Sync,
        op: impl Fn(Var, Var) -> Op<S>,
    ) -> Result<Var> {
        let out_shape = kn::broadcast_shape(self.shape(a), self.shape(b))
            .ok_or_else(|| Error::dim(context, self.shape(a), self.shape(b)))?;
        let values = kn::binary_broadcast(
            self.values(a),
            self.shape(a),
            self.values(b),
            self.shape(b),
            &out_shape,
            f,
        );
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out_shape, values, op(a, b), needs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "div", |x, y| x / y, Op::Div)
    }

    /// Elementwise minimum of two same-shape tensors; the gradient follows
    /// the smaller operand (ties go to `a`).
    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim("minimum", self.shape(a), self.shape(b)));
        }
        self.binary(a, b, "minimum", |x, y| if x <= y { x } else { y }, Op::Minimum)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let nb = self.affine(b, -1.0, 0.0);
        self.add(a, nb)
    }

    /// `mul * x + add`, scalar coefficients.
    pub fn affine(&mut self, x: Var, mul: f64, add: f64) -> Var {
        let (m, a) = (S::of(mul), S::of(add));
        let values = self.values(x).iter().map(|&v| m * v + a).collect();
        let needs = self.needs(x);
        let shape = self.shape(x).to_vec();
        self.push(shape, values, Op::Affine { x, mul: m }, needs)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.affine(x, c, 0.0)
    }

    fn unary(&mut self, x: Var, f: impl Fn(S) -> S, op: impl Fn(Var) -> Op<S>) -> Var {
        let values = self.values(x).iter().map(|&v| f(v)).collect();
        let needs = self.needs(x);
        let shape = self.shape(x).to_vec();
        self.push(shape, values, op(x), needs)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.exp(), Op::Exp)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| if v > S::zero() { v } else { S::zero() }, Op::Relu)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * sigmoid_s(v), Op::Silu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid_s, Op::Sigmoid)
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, softplus_s, Op::Softplus)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.abs(), Op::Abs)
    }

    // ------------------------------------------------------ linear algebra

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let values = kn::matmul(self.values(a), self.values(b), m, k, n);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(vec![m, n], values, Op::MatMul(a, b), needs))
    }

    /// 2D cross-correlation with zero padding. Input `[H,W,Ci]`, kernel
    /// `[Kh,Kw,Ci,Co]`; output spatial size `(in + 2*pad - k)/stride + 1`.
    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, pad: usize) -> Result<Var> {
        let (si, sk) = (self.shape(input), self.shape(kernel));
        if si.len() != 3 || sk.len() != 4 || si[2] != sk[2] {
            return Err(Error::dim("conv2d", si, sk));
        }
        let (h, w, ci) = (si[0], si[1], si[2]);
        let (kh, kw, co) = (sk[0], sk[1], sk[3]);
        if stride == 0 || h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(Error::config(format!(
                "conv2d produces non-positive output for input {:?}, kernel {:?}, stride {stride}, pad {pad}",
                si, sk
            )));
        }
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (w + 2 * pad - kw) / stride + 1;
        let values = kn::conv2d(self.values(input), (h, w, ci), self.values(kernel), (kh, kw, co), stride, pad);
        let needs = self.needs(input) || self.needs(kernel);
        Ok(self.push(vec![ho, wo, co], values, Op::Conv2d { input, kernel, stride, pad }, needs))
    }

    /// 3D cross-correlation, stride 1, symmetric spatial pad and an
    /// explicit (front, back) pad on the leading axis.
    pub fn conv3d_padded(
        &mut self,
        input: Var,
        kernel: Var,
        pad_t: (usize, usize),
        pad_s: usize,
    ) -> Result<Var> {
        let (si, sk) = (self.shape(input), self.shape(kernel));
        if si.len() != 4 || sk.len() != 5 || si[3] != sk[3] {
            return Err(Error::dim("conv3d", si, sk));
        }
        let (t, h, w, _ci) = (si[0], si[1], si[2], si[3]);
        let (kt, kh, kw, co) = (sk[0], sk[1], sk[2], sk[4]);
        if t + pad_t.0 + pad_t.1 + 1 <= kt || h + 2 * pad_s + 1 <= kh || w + 2 * pad_s + 1 <= kw {
            return Err(Error::config(format!(
                "conv3d produces non-positive output for input {:?}, kernel {:?}",
                si, sk
            )));
        }
        let to = t + pad_t.0 + pad_t.1 + 1 - kt;
        let ho = h + 2 * pad_s + 1 - kh;
        let wo = w + 2 * pad_s + 1 - kw;
        let values = kn::conv3d(
            self.values(input),
            (t, h, w, si[3]),
            self.values(kernel),
            (kt, kh, kw, co),
            pad_t,
            pad_s,
        );
        let needs = self.needs(input) || self.needs(kernel);
        Ok(self.push(
            vec![to, ho, wo, co],
            values,
            Op::Conv3d { input, kernel, pad_t, pad_s },
            needs,
        ))
    }

    /// Symmetric-pad 3D convolution (stride 1).
    pub fn conv3d(&mut self, input: Var, kernel: Var, pad: usize) -> Result<Var> {
        self.conv3d_padded(input, kernel, (pad, pad), pad)
    }

    /// Causal 3D convolution along the leading axis: output at step `t`
    /// sees inputs at steps `<= t` only.
    pub fn conv3d_causal(&mut self, input: Var, kernel: Var, pad_s: usize) -> Result<Var> {
        let kt = self.shape(kernel)[0];
        self.conv3d_padded(input, kernel, (kt - 1, 0), pad_s)
    }

    // ---------------------------------------------------- softmax / norms

    fn lastdim_rows(&self, v: Var, context: &'static str) -> Result<(usize, usize)> {
        let s = self.shape(v);
        let k = *s.last().ok_or_else(|| Error::config(format!("{context}: scalar input")))?;
        Ok((self.values(v).len() / k, k))
    }

    pub fn softmax_lastdim(&mut self, x: Var) -> Result<Var> {
        let (rows, k) = self.lastdim_rows(x, "softmax")?;
        let values = kn::softmax_lastdim(self.values(x), rows, k);
        let needs = self.needs(x);
        let shape = self.shape(x).to_vec();
        Ok(self.push(shape, values, Op::Softmax(x), needs))
    }

    pub fn log_softmax_lastdim(&mut self, x: Var) -> Result<Var> {
        let (rows, k) = self.lastdim_rows(x, "log_softmax")?;
        let values = kn::log_softmax_lastdim(self.values(x), rows, k);
        let needs = self.needs(x);
        let shape = self.shape(x).to_vec();
        Ok(self.push(shape, values, Op::LogSoftmax(x), needs))
    }

    /// Per-group zero-mean/unit-variance normalization over all leading
    /// positions (pre-affine); channels are the last axis.
    pub fn group_norm(&mut self, x: Var, groups: usize, eps: f64) -> Result<Var> {
        let s = self.shape(x);
        let channels = *s.last().ok_or_else(|| Error::config("group_norm: scalar input"))?;
        if groups == 0 || channels % groups != 0 {
            return Err(Error::config(format!(
                "group_norm: {channels} channels not divisible into {groups} groups"
            )));
        }
        let lead = self.values(x).len() / channels;
        let (values, _mean, rstd) = kn::group_norm(self.values(x), lead, channels, groups, eps);
        let needs = self.needs(x);
        let shape = s.to_vec();
        Ok(self.push(shape, values, Op::GroupNorm { x, groups, rstd }, needs))
    }

    /// Fused multi-head attention over `[B,T,C]` operands. Masked positions
    /// receive exactly zero weight; a mask row with no attendable key is an
    /// error.
    pub fn multi_head_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        mask: Option<&AttentionMask>,
    ) -> Result<Var> {
        let (sq, sk, sv) = (self.shape(q), self.shape(k), self.shape(v));
        if sq.len() != 3 || sk.len() != 3 || sv.len() != 3 || sq[0] != sk[0] || sk != sv || sq[2] != sk[2] {
            return Err(Error::dim("multi_head_attention", sq, sk));
        }
        let (batch, tq, c) = (sq[0], sq[1], sq[2]);
        let tk = sk[1];
        if heads == 0 || c % heads != 0 {
            return Err(Error::config(format!(
                "attention width {c} not divisible by {heads} heads"
            )));
        }
        if let Some(m) = mask {
            if m.tq != tq || m.tk != tk {
                return Err(Error::dim("attention mask", &[m.tq, m.tk], &[tq, tk]));
            }
            for iq in 0..tq {
                if !m.allow[iq * tk..(iq + 1) * tk].iter().any(|&a| a) {
                    return Err(Error::config(format!(
                        "attention mask row {iq} has no attendable key"
                    )));
                }
            }
        }
        let (values, weights) = kn::mha(
            self.values(q),
            self.values(k),
            self.values(v),
            batch,
            tq,
            tk,
            c,
            heads,
            mask.map(|m| m.allow.as_slice()),
        );
        let needs = self.needs(q) || self.needs(k) || self.needs(v);
        Ok(self.push(
            vec![batch, tq, c],
            values,
            Op::Mha { q, k, v, heads, weights: Arc::new(weights) },
            needs,
        ))
    }

    // ------------------------------------------------------ gather / index

    /// Row lookup: `table` is `[K,C]`, output `[ids.len(), C]`.
    pub fn embed(&mut self, table: Var, ids: Arc<Vec<u32>>) -> Result<Var> {
        let s = self.shape(table);
        if s.len() != 2 {
            return Err(Error::dim("embed", s, &[0, 0]));
        }
        let (k, c) = (s[0], s[1]);
        let mut values = vec![S::zero(); ids.len() * c];
        let tv = self.values(table);
        for (i, &id) in ids.iter().enumerate() {
            if id as usize >= k {
                return Err(Error::data(format!(
                    "embedding id {id} out of table range {k} at element {i}"
                )));
            }
            values[i * c..(i + 1) * c].copy_from_slice(&tv[id as usize * c..(id as usize + 1) * c]);
        }
        let needs = self.needs(table);
        let n = ids.len();
        Ok(self.push(vec![n, c], values, Op::Embed { table, ids }, needs))
    }

    /// `out[i] = x.flat[idx[i]]`, reshaped to `out_shape`. Handles every
    /// static permutation (patchify, transpose, ...).
    pub fn gather_flat(&mut self, x: Var, idx: Arc<Vec<u32>>, out_shape: Vec<usize>) -> Result<Var> {
        let numel: usize = out_shape.iter().product();
        if numel != idx.len() {
            return Err(Error::config(format!(
                "gather_flat: {} indices for shape {:?}",
                idx.len(),
                out_shape
            )));
        }
        let xv = self.values(x);
        let xn = xv.len();
        let mut values = vec![S::zero(); idx.len()];
        for (o, &i) in values.iter_mut().zip(idx.iter()) {
            debug_assert!((i as usize) < xn);
            *o = xv[i as usize];
        }
        let needs = self.needs(x);
        Ok(self.push(out_shape, values, Op::GatherFlat { x, idx }, needs))
    }

    /// `out[r] = x[r, ids[r]]` for `x` viewed as `[R,K]`.
    pub fn gather_lastdim(&mut self, x: Var, ids: Arc<Vec<u32>>) -> Result<Var> {
        let (rows, k) = self.lastdim_rows(x, "gather_lastdim")?;
        if ids.len() != rows {
            return Err(Error::config(format!(
                "gather_lastdim: {} ids for {} rows",
                ids.len(),
                rows
            )));
        }
        let xv = self.values(x);
        let mut values = vec![S::zero(); rows];
        for (r, (o, &id)) in values.iter_mut().zip(ids.iter()).enumerate() {
            debug_assert!((id as usize) < k);
            *o = xv[r * k + id as usize];
        }
        let needs = self.needs(x);
        let mut shape = self.shape(x).to_vec();
        shape.pop();
        Ok(self.push(shape, values, Op::GatherLast { x, ids }, needs))
    }

    // -------------------------------------------------------- reductions

    pub fn sum_all(&mut self, x: Var) -> Var {
        let total = self.values(x).iter().copied().fold(S::zero(), |a, b| a + b);
        let needs = self.needs(x);
        self.push(vec![], vec![total], Op::SumAll(x), needs)
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.values(x).len().max(1);
        let s = self.sum_all(x);
        self.scale(s, 1.0 / n as f64)
    }

    pub fn sum_lastdim(&mut self, x: Var) -> Result<Var> {
        let (rows, k) = self.lastdim_rows(x, "sum_lastdim")?;
        let xv = self.values(x);
        let mut values = vec![S::zero(); rows];
        for (r, o) in values.iter_mut().enumerate() {
            let mut acc = S::zero();
            for &v in &xv[r * k..(r + 1) * k] {
                acc = acc + v;
            }
            *o = acc;
        }
        let needs = self.needs(x);
        let mut shape = self.shape(x).to_vec();
        shape.pop();
        Ok(self.push(shape, values, Op::SumLast(x), needs))
    }

    /// Exclusive prefix sum along the last dimension:
    /// `out[.., j] = sum_{i<j} x[.., i]`.
    pub fn cumsum_exclusive_lastdim(&mut self, x: Var) -> Result<Var> {
        let (rows, k) = self.lastdim_rows(x, "cumsum_exclusive")?;
        let xv = self.values(x);
        let mut values = vec![S::zero(); rows * k];
        for r in 0..rows {
            let mut acc = S::zero();
            for j in 0..k {
                values[r * k + j] = acc;
                acc = acc + xv[r * k + j];
            }
        }
        let needs = self.needs(x);
        let shape = self.shape(x).to_vec();
        Ok(self.push(shape, values, Op::CumsumExclusive(x), needs))
    }

    // ---------------------------------------------------------- reshaping

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        if numel != self.values(x).len() {
            return Err(Error::dim("reshape", self.shape(x), &shape));
        }
        let values = Arc::clone(&self.nodes[x.0].values);
        let needs = self.needs(x);
        Ok(self.push_shared(shape, values, Op::Reshape(x), needs))
    }

    /// Concatenation along axis 0; trailing dims must agree.
    pub fn concat_first(&mut self, xs: &[Var]) -> Result<Var> {
        assert!(!xs.is_empty());
        let rest = self.shape(xs[0])[1..].to_vec();
        let mut t0 = 0usize;
        let mut values = Vec::new();
        for &x in xs {
            let s = self.shape(x);
            if s.is_empty() || s[1..] != rest[..] {
                return Err(Error::dim("concat_first", self.shape(xs[0]), s));
            }
            t0 += s[0];
            values.extend_from_slice(self.values(x));
        }
        let mut shape = vec![t0];
        shape.extend_from_slice(&rest);
        let needs = xs.iter().any(|&x| self.needs(x));
        Ok(self.push(shape, values, Op::ConcatFirst(xs.to_vec()), needs))
    }

    /// `len` leading slots starting at `start` along axis 0.
    pub fn slice_first(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x);
        if s.is_empty() || start + len > s[0] {
            return Err(Error::config(format!(
                "slice_first [{start}..{}] out of bounds for {:?}",
                start + len,
                s
            )));
        }
        let inner: usize = s[1..].iter().product();
        let values = self.values(x)[start * inner..(start + len) * inner].to_vec();
        let mut shape = vec![len];
        shape.extend_from_slice(&s[1..]);
        let needs = self.needs(x);
        Ok(self.push(shape, values, Op::SliceFirst { x, start }, needs))
    }

    /// Concatenation along the last axis; leading dims must agree.
    pub fn concat_last(&mut self, xs: &[Var]) -> Result<Var> {
        assert!(!xs.is_empty());
        let lead_shape = {
            let s = self.shape(xs[0]);
            s[..s.len() - 1].to_vec()
        };
        let rows: usize = lead_shape.iter().product();
        let mut widths = Vec::with_capacity(xs.len());
        for &x in xs {
            let s = self.shape(x);
            if s.is_empty() || s[..s.len() - 1] != lead_shape[..] {
                return Err(Error::dim("concat_last", self.shape(xs[0]), s));
            }
            widths.push(*s.last().unwrap());
        }
        let total: usize = widths.iter().sum();
        let mut values = vec![S::zero(); rows * total];
        let mut off = 0usize;
        for (&x, &wd) in xs.iter().zip(&widths) {
            let xv = self.values(x);
            for r in 0..rows {
                values[r * total + off..r * total + off + wd]
                    .copy_from_slice(&xv[r * wd..(r + 1) * wd]);
            }
            off += wd;
        }
        let mut shape = lead_shape;
        shape.push(total);
        let needs = xs.iter().any(|&x| self.needs(x));
        Ok(self.push(shape, values, Op::ConcatLast(xs.to_vec()), needs))
    }

    pub fn slice_last(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, k) = self.lastdim_rows(x, "slice_last")?;
        if start + len > k {
            return Err(Error::config(format!(
                "slice_last [{start}..{}] out of bounds for width {k}",
                start + len
            )));
        }
        let xv = self.values(x);
        let mut values = vec![S::zero(); rows * len];
        for r in 0..rows {
            values[r * len..(r + 1) * len].copy_from_slice(&xv[r * k + start..r * k + start + len]);
        }
        let mut shape = self.shape(x).to_vec();
        *shape.last_mut().unwrap() = len;
        let needs = self.needs(x);
        Ok(self.push(shape, values, Op::SliceLast { x, start }, needs))
    }

    // ---------------------------------------------------------- sampling

    /// Bilinear gather of `feat` `[H,W,C]` at `coords` `[M,2]` (grid units);
    /// out-of-grid points return `fill` `[C]`. Differentiable in all three.
    pub fn sample_bilinear(&mut self, feat: Var, coords: Var, fill: Var) -> Result<Var> {
        let (sf, sc, sl) = (self.shape(feat), self.shape(coords), self.shape(fill));
        if sf.len() != 3 || sc.last() != Some(&2) || sl != [sf[2]] {
            return Err(Error::dim("sample_bilinear", sf, sc));
        }
        let (h, w, c) = (sf[0], sf[1], sf[2]);
        let values = kn::sample_bilinear(self.values(feat), (h, w, c), self.values(coords), self.values(fill));
        let m = self.values(coords).len() / 2;
        let needs = self.needs(feat) || self.needs(coords) || self.needs(fill);
        Ok(self.push(vec![m, c], values, Op::SampleBilinear { feat, coords, fill }, needs))
    }

    /// Trilinear gather of `vol` `[X,Y,Z,C]` at fixed `coords` `[M,3]` (grid
    /// units); out-of-volume points return zeros. Differentiable in `vol`.
    pub fn sample_trilinear(&mut self, vol: Var, coords: Arc<Vec<f64>>) -> Result<Var> {
        let sv = self.shape(vol);
        if sv.len() != 4 || coords.len() % 3 != 0 {
            return Err(Error::dim("sample_trilinear", sv, &[coords.len()]));
        }
        let dims = (sv[0], sv[1], sv[2], sv[3]);
        let values = kn::sample_trilinear(self.values(vol), dims, &coords);
        let m = coords.len() / 3;
        let needs = self.needs(vol);
        Ok(self.push(vec![m, dims.3], values, Op::SampleTrilinear { vol, coords }, needs))
    }

    /// 3x3 mean filter with reflection padding over `[H,W,C]`.
    pub fn box_mean3x3(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 3 {
            return Err(Error::dim("box_mean3x3", s, &[0, 0, 0]));
        }
        let dims = (s[0], s[1], s[2]);
        let values = kn::box_mean3x3_reflect(self.values(x), dims);
        let needs = self.needs(x);
        let shape = s.to_vec();
        Ok(self.push(shape, values, Op::BoxMean3(x), needs))
    }

    // ---------------------------------------------------------- backward

    fn acc(&mut self, v: Var, contrib: &[S]) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        let n = self.nodes[v.0].values.len();
        let grad = self.nodes[v.0].grad.get_or_insert_with(|| vec![S::zero(); n]);
        for (g, &c) in grad.iter_mut().zip(contrib) {
            *g = *g + c;
        }
    }

    fn acc_vec(&mut self, v: Var, contrib: Vec<S>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut self.nodes[v.0].grad {
            Some(g) => {
                for (gv, c) in g.iter_mut().zip(contrib) {
                    *gv = *gv + c;
                }
            }
            slot @ None => *slot = Some(contrib),
        }
    }

    /// Chain rule over the reverse topological (= reverse creation) order.
    /// Gradients accumulate additively on shared nodes; read them off leaf
    /// nodes with [`Graph::grad`] afterwards.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.values(loss).len() != 1 {
            return Err(Error::state(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let n = self.nodes.len();
        self.nodes[loss.0].grad = Some(vec![S::one()]);
        for idx in (0..=loss.0.min(n - 1)).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let Some(g) = self.nodes[idx].grad.clone() else {
                continue;
            };
            self.backprop_node(idx, &g)?;
        }
        Ok(())
    }

    fn backprop_node(&mut self, idx: usize, g: &[S]) -> Result<()> {
        // Cheap clones: shapes and handles only; value buffers are Arc'd.
        let out_shape = self.nodes[idx].shape.clone();
        let out_values = Arc::clone(&self.nodes[idx].values);
        match &self.nodes[idx].op {
            Op::Leaf => {}
            &Op::Add(a, b) => {
                for v in [a, b] {
                    if self.needs(v) {
                        let mut acc = vec![S::zero(); self.values(v).len()];
                        kn::reduce_broadcast_grad(g, &out_shape, &mut acc, self.shape(v));
                        self.acc_vec(v, acc);
                    }
                }
            }
            &Op::Mul(a, b) => {
                self.grad_mul_like(a, b, g, &out_shape, false)?;
            }
            &Op::Div(a, b) => {
                self.grad_mul_like(a, b, g, &out_shape, true)?;
            }
            &Op::Minimum(a, b) => {
                let (av, bv) = (Arc::clone(&self.nodes[a.0].values), Arc::clone(&self.nodes[b.0].values));
                let da: Vec<S> = g
                    .iter()
                    .zip(av.iter().zip(bv.iter()))
                    .map(|(&gv, (&x, &y))| if x <= y { gv } else { S::zero() })
                    .collect();
                let db: Vec<S> = g
                    .iter()
                    .zip(av.iter().zip(bv.iter()))
                    .map(|(&gv, (&x, &y))| if x <= y { S::zero() } else { gv })
                    .collect();
                self.acc_vec(a, da);
                self.acc_vec(b, db);
            }
            &Op::Affine { x, mul } => {
                let dx: Vec<S> = g.iter().map(|&gv| gv * mul).collect();
                self.acc_vec(x, dx);
            }
            &Op::Exp(x) => {
                let dx: Vec<S> = g.iter().zip(out_values.iter()).map(|(&gv, &y)| gv * y).collect();
                self.acc_vec(x, dx);
            }
            &Op::Relu(x) => {
                let xv = Arc::clone(&self.nodes[x.0].values);
                let dx: Vec<S> = g
                    .iter()
                    .zip(xv.iter())
                    .map(|(&gv, &v)| if v > S::zero() { gv } else { S::zero() })
                    .collect();
                self.acc_vec(x, dx);
            }
            &Op::Silu(x) => {
                let xv = Arc::clone(&self.nodes[x.0].values);
                let dx: Vec<S> = g
                    .iter()
                    .zip(xv.iter())
                    .map(|(&gv, &v)| {
                        let s = sigmoid_s(v);
                        gv * s * (S::one() + v * (S::one() - s))
                    })
                    .collect();
                self.acc_vec(x, dx);
            }
            &Op::Sigmoid(x) => {
                let dx: Vec<S> = g
                    .iter()
                    .zip(out_values.iter())
                    .map(|(&gv, &y)| gv * y * (S::one() - y))
                    .collect();
                self.acc_vec(x, dx);
            }
            &Op::Softplus(x) => {
                let xv = Arc::clone(&self.nodes[x.0].values);
                let dx: Vec<S> = g
                    .iter()
                    .zip(xv.iter())
                    .map(|(&gv, &v)| gv * sigmoid_s(v))
                    .collect();
                self.acc_vec(x, dx);
            }
            &Op::Abs(x) => {
                let xv = Arc::clone(&self.nodes[x.0].values);
                let dx: Vec<S> = g
                    .iter()
                    .zip(xv.iter())
                    .map(|(&gv, &v)| {
                        if v > S::zero() {
                            gv
                        } else if v < S::zero() {
                            -gv
                        } else {
                            S::zero()
                        }
                    })
                    .collect();
                self.acc_vec(x, dx);
            }
            &Op::MatMul(a, b) => {
                let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
                let n = self.shape(b)[1];
                let (av, bv) = (Arc::clone(&self.nodes[a.0].values), Arc::clone(&self.nodes[b.0].values));
                if self.needs(a) {
                    let da = kn::matmul_grad_a(g, &bv, m, k, n);
                    self.acc_vec(a, da);
                }
                if self.needs(b) {
                    let db = kn::matmul_grad_b(g, &av, m, k, n);
                    self.acc_vec(b, db);
                }
            }
            &Op::Conv2d { input, kernel, stride, pad } => {
                let si = self.shape(input).to_vec();
                let sk = self.shape(kernel).to_vec();
                let idims = (si[0], si[1], si[2]);
                let kdims = (sk[0], sk[1], sk[3]);
                let (iv, kv) = (
                    Arc::clone(&self.nodes[input.0].values),
                    Arc::clone(&self.nodes[kernel.0].values),
                );
                if self.needs(input) {
                    let di = kn::conv2d_grad_input(g, idims, &kv, kdims, stride, pad);
                    self.acc_vec(input, di);
                }
                if self.needs(kernel) {
                    let dk = kn::conv2d_grad_kernel(g, &iv, idims, kdims, stride, pad);
                    self.acc_vec(kernel, dk);
                }
            }
            &Op::Conv3d { input, kernel, pad_t, pad_s } => {
                let si = self.shape(input).to_vec();
                let sk = self.shape(kernel).to_vec();
                let idims = (si[0], si[1], si[2], si[3]);
                let kdims = (sk[0], sk[1], sk[2], sk[4]);
                let (iv, kv) = (
                    Arc::clone(&self.nodes[input.0].values),
                    Arc::clone(&self.nodes[kernel.0].values),
                );
                if self.needs(input) {
                    let di = kn::conv3d_grad_input(g, idims, &kv, kdims, pad_t, pad_s);
                    self.acc_vec(input, di);
                }
                if self.needs(kernel) {
                    let dk = kn::conv3d_grad_kernel(g, &iv, idims, kdims, pad_t, pad_s);
                    self.acc_vec(kernel, dk);
                }
            }
            &Op::Softmax(x) => {
                let k = *out_shape.last().unwrap();
                let rows = out_values.len() / k;
                let dx = kn::softmax_backward(g, &out_values, rows, k);
                self.acc_vec(x, dx);
            }
            &Op::LogSoftmax(x) => {
                let k = *out_shape.last().unwrap();
                let rows = out_values.len() / k;
                let dx = kn::log_softmax_backward(g, &out_values, rows, k);
                self.acc_vec(x, dx);
            }
            Op::GroupNorm { x, groups, rstd } => {
                let (x, groups, rstd) = (*x, *groups, rstd.clone());
                let channels = *out_shape.last().unwrap();
                let lead = out_values.len() / channels;
                let dx = kn::group_norm_backward(g, &out_values, &rstd, lead, channels, groups);
                self.acc_vec(x, dx);
            }
            Op::Mha { q, k, v, heads, weights } => {
                let (q, k, v, heads, weights) = (*q, *k, *v, *heads, Arc::clone(weights));
                let (batch, tq, c) = (out_shape[0], out_shape[1], out_shape[2]);
                let tk = self.shape(k)[1];
                let (qv, kv, vv) = (
                    Arc::clone(&self.nodes[q.0].values),
                    Arc::clone(&self.nodes[k.0].values),
                    Arc::clone(&self.nodes[v.0].values),
                );
                let (dq, dk, dv) = kn::mha_backward(g, &qv, &kv, &vv, &weights, batch, tq, tk, c, heads);
                self.acc_vec(q, dq);
                self.acc_vec(k, dk);
                self.acc_vec(v, dv);
            }
            Op::Embed { table, ids } => {
                let (table, ids) = (*table, Arc::clone(ids));
                let c = *out_shape.last().unwrap();
                let mut dt = vec![S::zero(); self.values(table).len()];
                for (i, &id) in ids.iter().enumerate() {
                    let dst = &mut dt[id as usize * c..(id as usize + 1) * c];
                    for (o, &gv) in dst.iter_mut().zip(&g[i * c..(i + 1) * c]) {
                        *o = *o + gv;
                    }
                }
                self.acc_vec(table, dt);
            }
            Op::GatherFlat { x, idx } => {
                let (x, idx) = (*x, Arc::clone(idx));
                let mut dx = vec![S::zero(); self.values(x).len()];
                for (&i, &gv) in idx.iter().zip(g) {
                    dx[i as usize] = dx[i as usize] + gv;
                }
                self.acc_vec(x, dx);
            }
            Op::GatherLast { x, ids } => {
                let (x, ids) = (*x, Arc::clone(ids));
                let k = *self.shape(x).last().unwrap();
                let mut dx = vec![S::zero(); self.values(x).len()];
                for (r, &id) in ids.iter().enumerate() {
                    dx[r * k + id as usize] = dx[r * k + id as usize] + g[r];
                }
                self.acc_vec(x, dx);
            }
            &Op::SumAll(x) => {
                let dx = vec![g[0]; self.values(x).len()];
                self.acc_vec(x, dx);
            }
            &Op::SumLast(x) => {
                let k = *self.shape(x).last().unwrap();
                let mut dx = vec![S::zero(); self.values(x).len()];
                for (r, &gv) in g.iter().enumerate() {
                    for o in &mut dx[r * k..(r + 1) * k] {
                        *o = gv;
                    }
                }
                self.acc_vec(x, dx);
            }
            &Op::CumsumExclusive(x) => {
                let k = *self.shape(x).last().unwrap();
                let rows = self.values(x).len() / k;
                let mut dx = vec![S::zero(); rows * k];
                for r in 0..rows {
                    let mut acc = S::zero();
                    for j in (0..k).rev() {
                        dx[r * k + j] = acc;
                        acc = acc + g[r * k + j];
                    }
                }
                self.acc_vec(x, dx);
            }
            &Op::Reshape(x) => {
                self.acc(x, g);
            }
            Op::ConcatFirst(xs) => {
                let xs = xs.clone();
                let mut off = 0usize;
                for x in xs {
                    let n = self.values(x).len();
                    let piece = g[off..off + n].to_vec();
                    off += n;
                    self.acc_vec(x, piece);
                }
            }
            &Op::SliceFirst { x, start } => {
                let s = self.shape(x);
                let inner: usize = s[1..].iter().product();
                let mut dx = vec![S::zero(); self.values(x).len()];
                dx[start * inner..start * inner + g.len()].copy_from_slice(g);
                self.acc_vec(x, dx);
            }
            Op::ConcatLast(xs) => {
                let xs = xs.clone();
                let total = *out_shape.last().unwrap();
                let rows = out_values.len() / total;
                let mut off = 0usize;
                for x in xs {
                    let wd = *self.shape(x).last().unwrap();
                    let mut dx = vec![S::zero(); self.values(x).len()];
                    for r in 0..rows {
                        dx[r * wd..(r + 1) * wd].copy_from_slice(&g[r * total + off..r * total + off + wd]);
                    }
                    off += wd;
                    self.acc_vec(x, dx);
                }
            }
            &Op::SliceLast { x, start } => {
                let k = *self.shape(x).last().unwrap();
                let len = *out_shape.last().unwrap();
                let rows = out_values.len() / len;
                let mut dx = vec![S::zero(); self.values(x).len()];
                for r in 0..rows {
                    dx[r * k + start..r * k + start + len].copy_from_slice(&g[r * len..(r + 1) * len]);
                }
                self.acc_vec(x, dx);
            }
            &Op::SampleBilinear { feat, coords, fill } => {
                let sf = self.shape(feat).to_vec();
                let dims = (sf[0], sf[1], sf[2]);
                let (fv, cv) = (
                    Arc::clone(&self.nodes[feat.0].values),
                    Arc::clone(&self.nodes[coords.0].values),
                );
                let mut dfeat = self.needs(feat).then(|| vec![S::zero(); fv.len()]);
                let mut dcoords = self.needs(coords).then(|| vec![S::zero(); cv.len()]);
                let mut dfill = self.needs(fill).then(|| vec![S::zero(); dims.2]);
                kn::sample_bilinear_backward(
                    g,
                    &fv,
                    dims,
                    &cv,
                    dfeat.as_deref_mut(),
                    dcoords.as_deref_mut(),
                    dfill.as_deref_mut(),
                );
                if let Some(d) = dfeat {
                    self.acc_vec(feat, d);
                }
                if let Some(d) = dcoords {
                    self.acc_vec(coords, d);
                }
                if let Some(d) = dfill {
                    self.acc_vec(fill, d);
                }
            }
            Op::SampleTrilinear { vol, coords } => {
                let (vol, coords) = (*vol, Arc::clone(coords));
                let sv = self.shape(vol).to_vec();
                let dims = (sv[0], sv[1], sv[2], sv[3]);
                let mut dvol = vec![S::zero(); self.values(vol).len()];
                kn::sample_trilinear_backward(g, dims, &coords, &mut dvol);
                self.acc_vec(vol, dvol);
            }
            &Op::BoxMean3(x) => {
                let s = self.shape(x).to_vec();
                let dx = kn::box_mean3x3_reflect_backward(g, (s[0], s[1], s[2]));
                self.acc_vec(x, dx);
            }
        }
        Ok(())
    }

    /// Shared backward for Mul/Div under broadcasting.
    fn grad_mul_like(
        &mut self,
        a: Var,
        b: Var,
        g: &[S],
        out_shape: &[usize],
        is_div: bool,
    ) -> Result<()> {
        let (av, bv) = (
            Arc::clone(&self.nodes[a.0].values),
            Arc::clone(&self.nodes[b.0].values),
        );
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if self.needs(a) {
            // d/da = g * b (mul) or g / b (div), reduced onto a's shape
            let contrib = kn::binary_broadcast(
                g,
                out_shape,
                &bv,
                &sb,
                out_shape,
                |gv, y| if is_div { gv / y } else { gv * y },
            );
            let mut acc = vec![S::zero(); av.len()];
            kn::reduce_broadcast_grad(&contrib, out_shape, &mut acc, &sa);
            self.acc_vec(a, acc);
        }
        if self.needs(b) {
            // d/db = g * a (mul) or -g * a / b^2 (div)
            let ga = kn::binary_broadcast(g, out_shape, &av, &sa, out_shape, |gv, x| gv * x);
            let contrib = if is_div {
                kn::binary_broadcast(&ga, out_shape, &bv, &sb, out_shape, |gx, y| -gx / (y * y))
            } else {
                ga
            };
            let mut acc = vec![S::zero(); bv.len()];
            kn::reduce_broadcast_grad(&contrib, out_shape, &mut acc, &sb);
            self.acc_vec(b, acc);
        }
        Ok(())
    }
}

#[inline]
fn sigmoid_s<S: Real>(v: S) -> S {
    if v >= S::zero() {
        S::one() / (S::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (S::one() + e)
    }
}

#[inline]
fn softplus_s<S: Real>(v: S) -> S {
    // max(x,0) + ln(1 + exp(-|x|)), overflow-safe
    let m = if v > S::zero() { v } else { S::zero() };
    m + (S::one() + (-v.abs()).exp()).ln()
}
