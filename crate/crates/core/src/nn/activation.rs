//! Rotation-aware activation functions and channel-axis normalization.
//!
//! All functions here act on the *channel vector*: axis 1 of an `[N, C]` or
//! `[N, C, H, W]` tensor (every spatial position of a feature map is treated as an
//! independent vector), or the whole buffer of a rank-1 tensor. Norms are
//! accumulated in `f64`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Below this norm the TSRA and radial activations return zero.
pub const ZERO_GUARD: f64 = 1e-12;

/// Epsilon inside the unlearned RMSNorm.
pub const RMS_EPS: f64 = 1e-6;

/// Partition of a `dim`-dimensional activation space into `U = [0, split)` and
/// `V = [split, dim)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubspaceSplit {
    dim: usize,
    split: usize,
}

impl SubspaceSplit {
    pub fn new(dim: usize, split: usize) -> Result<Self> {
        if split == 0 || split >= dim {
            return Err(Error::contract(format!(
                "subspace split {split} must satisfy 0 < split < {dim}"
            )));
        }
        Ok(Self { dim, split })
    }

    /// Half/half split; `dim` must be even and at least 2.
    pub fn halves(dim: usize) -> Result<Self> {
        if dim % 2 != 0 {
            return Err(Error::contract(format!("halves() needs an even width, got {dim}")));
        }
        Self::new(dim, dim / 2)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn split(&self) -> usize {
        self.split
    }

    pub fn u_range(&self) -> std::ops::Range<usize> {
        0..self.split
    }

    pub fn v_range(&self) -> std::ops::Range<usize> {
        self.split..self.dim
    }

    pub fn u_len(&self) -> usize {
        self.split
    }

    pub fn v_len(&self) -> usize {
        self.dim - self.split
    }
}

/// Logistic coefficients of the two subspace scaling functions.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TsraParams {
    pub a_u: f32,
    pub b_u: f32,
    pub a_v: f32,
    pub b_v: f32,
}

impl Default for TsraParams {
    fn default() -> Self {
        Self {
            a_u: 5.0,
            b_u: 0.5,
            a_v: 5.0,
            b_v: 0.7,
        }
    }
}

impl TsraParams {
    pub fn validate(&self) -> Result<()> {
        let all = [self.a_u, self.b_u, self.a_v, self.b_v];
        if all.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::contract(format!("non-finite TSRA coefficients {self:?}")))
        }
    }

    pub fn f_u(&self, r: f64) -> f64 {
        logistic(self.a_u as f64, self.b_u as f64, r)
    }

    pub fn f_v(&self, r: f64) -> f64 {
        logistic(self.a_v as f64, self.b_v as f64, r)
    }
}

/// `1 / (1 + exp(-a (r - b)))`
pub fn logistic(a: f64, b: f64, r: f64) -> f64 {
    1.0 / (1.0 + (-a * (r - b)).exp())
}

/// Scaling function of the radial rescaling activation, `f(t) = 1 / (1 + t)`.
pub fn radial_scale(t: f64) -> f64 {
    1.0 / (1.0 + t)
}

fn sq_norm(x: &[f32]) -> f64 {
    x.iter().map(|&v| (v as f64) * (v as f64)).sum()
}

fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

/// TSRA on one vector: `f_U(r) x_U + f_V(r) x_V` with `r = |x_U| / |x|`.
pub fn tsra_vec(x: &[f32], split: usize, p: &TsraParams, out: &mut [f32]) {
    let nu2 = sq_norm(&x[..split]);
    let nv2 = sq_norm(&x[split..]);
    let n = (nu2 + nv2).sqrt();
    if n < ZERO_GUARD {
        out.iter_mut().for_each(|o| *o = 0.0);
        return;
    }
    let r = nu2.sqrt() / n;
    let (lu, lv) = (p.f_u(r), p.f_v(r));
    for (o, &v) in out[..split].iter_mut().zip(&x[..split]) {
        *o = (lu * v as f64) as f32;
    }
    for (o, &v) in out[split..].iter_mut().zip(&x[split..]) {
        *o = (lv * v as f64) as f32;
    }
}

/// Vector-Jacobian product of [`tsra_vec`].
pub fn tsra_vec_backward(x: &[f32], split: usize, p: &TsraParams, g: &[f32], dx: &mut [f32]) {
    let nu2 = sq_norm(&x[..split]);
    let nv2 = sq_norm(&x[split..]);
    let n2 = nu2 + nv2;
    let n = n2.sqrt();
    if n < ZERO_GUARD {
        dx.iter_mut().for_each(|d| *d = 0.0);
        return;
    }
    let a = nu2.sqrt();
    let r = a / n;
    let (lu, lv) = (p.f_u(r), p.f_v(r));
    let dlu = p.a_u as f64 * lu * (1.0 - lu);
    let dlv = p.a_v as f64 * lv * (1.0 - lv);
    let su = dot(&g[..split], &x[..split]);
    let sv = dot(&g[split..], &x[split..]);
    let c = dlu * su + dlv * sv;
    let n3 = n2 * n;
    // dr/dx_j = x_j (1/(a n) - a/n^3) on U and -a x_j / n^3 on V
    let coef_u = if a > 0.0 { 1.0 / (a * n) - a / n3 } else { 0.0 };
    let coef_v = -a / n3;
    for j in 0..split {
        dx[j] = (lu * g[j] as f64 + c * coef_u * x[j] as f64) as f32;
    }
    for j in split..x.len() {
        dx[j] = (lv * g[j] as f64 + c * coef_v * x[j] as f64) as f32;
    }
}

/// Radial rescaling `f(|x|) x`.
pub fn radial_vec(x: &[f32], out: &mut [f32]) {
    let n = sq_norm(x).sqrt();
    if n < ZERO_GUARD {
        out.iter_mut().for_each(|o| *o = 0.0);
        return;
    }
    let f = radial_scale(n);
    for (o, &v) in out.iter_mut().zip(x) {
        *o = (f * v as f64) as f32;
    }
}

pub fn radial_vec_backward(x: &[f32], g: &[f32], dx: &mut [f32]) {
    let n = sq_norm(x).sqrt();
    if n < ZERO_GUARD {
        dx.iter_mut().for_each(|d| *d = 0.0);
        return;
    }
    let f = radial_scale(n);
    let df = -1.0 / ((1.0 + n) * (1.0 + n));
    let c = df * dot(g, x) / n;
    for j in 0..x.len() {
        dx[j] = (f * g[j] as f64 + c * x[j] as f64) as f32;
    }
}

/// Returns `1 / sqrt(mean(x^2) + eps)` and writes the normalized vector.
pub fn rmsnorm_vec(x: &[f32], out: &mut [f32]) -> f64 {
    let inv = 1.0 / (sq_norm(x) / x.len() as f64 + RMS_EPS).sqrt();
    for (o, &v) in out.iter_mut().zip(x) {
        *o = (v as f64 * inv) as f32;
    }
    inv
}

pub fn rmsnorm_vec_backward(x: &[f32], g: &[f32], dx: &mut [f32]) {
    let d = x.len() as f64;
    let inv = 1.0 / (sq_norm(x) / d + RMS_EPS).sqrt();
    let c = dot(g, x) * inv * inv * inv / d;
    for j in 0..x.len() {
        dx[j] = (g[j] as f64 * inv - c * x[j] as f64) as f32;
    }
}

/// Layout of the channel axis inside a flat buffer: `outer` vectors of length
/// `chans` spaced `inner` apart.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ChannelView {
    pub outer: usize,
    pub chans: usize,
    pub inner: usize,
}

impl ChannelView {
    pub fn of(shape: &[usize]) -> ChannelView {
        match shape.len() {
            1 => ChannelView {
                outer: 1,
                chans: shape[0],
                inner: 1,
            },
            _ => ChannelView {
                outer: shape[0],
                chans: shape[1],
                inner: shape[2..].iter().product(),
            },
        }
    }
}

/// Applies `f` to every channel vector of `x`, writing into `out`.
pub(crate) fn map_channels(
    shape: &[usize],
    x: &[f32],
    out: &mut [f32],
    mut f: impl FnMut(&[f32], &mut [f32]),
) {
    let v = ChannelView::of(shape);
    if v.inner == 1 {
        for (xs, os) in x.chunks_exact(v.chans).zip(out.chunks_exact_mut(v.chans)) {
            f(xs, os);
        }
        return;
    }
    let mut xb = vec![0.0f32; v.chans];
    let mut ob = vec![0.0f32; v.chans];
    for n in 0..v.outer {
        let base = n * v.chans * v.inner;
        for s in 0..v.inner {
            for c in 0..v.chans {
                xb[c] = x[base + c * v.inner + s];
            }
            f(&xb, &mut ob);
            for c in 0..v.chans {
                out[base + c * v.inner + s] = ob[c];
            }
        }
    }
}

/// Backward counterpart of [`map_channels`]: `f(x_vec, g_vec, dx_vec)`.
pub(crate) fn map_channels_backward(
    shape: &[usize],
    x: &[f32],
    g: &[f32],
    dx: &mut [f32],
    mut f: impl FnMut(&[f32], &[f32], &mut [f32]),
) {
    let v = ChannelView::of(shape);
    if v.inner == 1 {
        for ((xs, gs), ds) in x
            .chunks_exact(v.chans)
            .zip(g.chunks_exact(v.chans))
            .zip(dx.chunks_exact_mut(v.chans))
        {
            f(xs, gs, ds);
        }
        return;
    }
    let mut xb = vec![0.0f32; v.chans];
    let mut gb = vec![0.0f32; v.chans];
    let mut db = vec![0.0f32; v.chans];
    for n in 0..v.outer {
        let base = n * v.chans * v.inner;
        for s in 0..v.inner {
            for c in 0..v.chans {
                xb[c] = x[base + c * v.inner + s];
                gb[c] = g[base + c * v.inner + s];
            }
            f(&xb, &gb, &mut db);
            for c in 0..v.chans {
                dx[base + c * v.inner + s] = db[c];
            }
        }
    }
}

fn channel_map(x: &Tensor, f: impl FnMut(&[f32], &mut [f32])) -> Tensor {
    let mut out = vec![0.0; x.len()];
    map_channels(x.shape(), x.data(), &mut out, f);
    Tensor::new(x.shape().to_vec(), out).expect("same shape")
}

pub(crate) fn check_split(shape: &[usize], split: &SubspaceSplit) -> Result<()> {
    let d = ChannelView::of(shape).chans;
    if d != split.dim() {
        return Err(Error::dim(format!(
            "TSRA split expects {} channels, input {:?} has {d}",
            split.dim(),
            shape
        )));
    }
    Ok(())
}

/// TSRA over the channel axis of `x`.
pub fn tsra_forward(x: &Tensor, split: &SubspaceSplit, p: &TsraParams) -> Result<Tensor> {
    check_split(x.shape(), split)?;
    let k = split.split();
    Ok(channel_map(x, |xs, os| tsra_vec(xs, k, p, os)))
}

/// Radial rescaling `x / (1 + |x|)` over the channel axis.
pub fn radial_forward(x: &Tensor) -> Tensor {
    channel_map(x, radial_vec)
}

/// Unlearned RMSNorm over the channel axis.
pub fn rmsnorm_forward(x: &Tensor) -> Tensor {
    channel_map(x, |xs, os| {
        rmsnorm_vec(xs, os);
    })
}

pub fn relu_forward(x: &Tensor) -> Tensor {
    let data = x.data().iter().map(|&v| v.max(0.0)).collect();
    Tensor::new(x.shape().to_vec(), data).expect("same shape")
}
