//! Dense numeric kernels with exact hand-derived gradients.
//!
//! Everything here is generic over [`Scalar`] so the same code runs in f32
//! for training and in f64 for finite-difference verification. Kernels are
//! plain loops with a fixed accumulation order per output element, which
//! keeps results bit-identical across repeated runs.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use crate::error::{Error, Result};

/// Floating-point element type for tensors and parameters.
pub trait Scalar:
    num_traits::Float
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        f64::from(self)
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
}

// ---------------------------------------------------------------------------
// Tensor4
// ---------------------------------------------------------------------------

/// Dense rank-4 tensor in N x C x H x W row-major layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4<S> {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    data: Vec<S>,
}

impl<S: Scalar> Tensor4<S> {
    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Self {
        Tensor4 {
            n,
            c,
            h,
            w,
            data: vec![S::zero(); n * c * h * w],
        }
    }

    pub fn from_vec(n: usize, c: usize, h: usize, w: usize, data: Vec<S>) -> Result<Self> {
        if data.len() != n * c * h * w {
            return Err(Error::shape(
                "Tensor4::from_vec",
                n * c * h * w,
                data.len(),
            ));
        }
        Ok(Tensor4 { n, c, h, w, data })
    }

    pub fn dims(&self) -> (usize, usize, usize, usize) {
        (self.n, self.c, self.h, self.w)
    }

    pub fn batch(&self) -> usize {
        self.n
    }

    pub fn channels(&self) -> usize {
        self.c
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> S {
        self.data[((n * self.c + c) * self.h + h) * self.w + w]
    }

    pub fn set(&mut self, n: usize, c: usize, h: usize, w: usize, v: S) {
        self.data[((n * self.c + c) * self.h + h) * self.w + w] = v;
    }

    /// One H x W plane for a given (sample, channel).
    pub fn plane(&self, n: usize, c: usize) -> &[S] {
        let start = (n * self.c + c) * self.h * self.w;
        &self.data[start..start + self.h * self.w]
    }

    pub fn plane_mut(&mut self, n: usize, c: usize) -> &mut [S] {
        let start = (n * self.c + c) * self.h * self.w;
        let len = self.h * self.w;
        &mut self.data[start..start + len]
    }

    /// Diagnostic finiteness check. A cheap whole-tensor sum catches any
    /// NaN/Inf; only on failure is the exact index located.
    pub fn check_finite(&self, context: &str) -> Result<()> {
        let total: S = self.data.iter().copied().sum();
        if total.is_finite() {
            return Ok(());
        }
        let index = self.data.iter().position(|v| !v.is_finite());
        Err(Error::NonFinite {
            context: context.to_string(),
            index,
        })
    }
}

fn slice_finite<S: Scalar>(data: &[S], context: &str) -> Result<()> {
    let total: S = data.iter().copied().sum();
    if total.is_finite() {
        return Ok(());
    }
    let index = data.iter().position(|v| !v.is_finite());
    Err(Error::NonFinite {
        context: context.to_string(),
        index,
    })
}

// ---------------------------------------------------------------------------
// 2-D convolution (cross-correlation with zero padding)
// ---------------------------------------------------------------------------

/// Saved forward state for [`conv2d_backward`].
#[derive(Debug, Clone)]
pub struct Conv2dCache<S> {
    x: Tensor4<S>,
    k_out: usize,
    k_in: usize,
    k: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
}

impl<S> Conv2dCache<S> {
    pub fn out_dims(&self) -> (usize, usize) {
        (self.out_h, self.out_w)
    }
}

/// Loop bounds such that `o + k_off - pad` stays inside `[0, in_len)`.
#[inline]
fn conv_span(out_len: usize, in_len: usize, k_off: usize, pad: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(k_off);
    let hi_signed = (in_len + pad) as isize - k_off as isize;
    let hi = hi_signed.clamp(0, out_len as isize) as usize;
    (lo, hi.max(lo))
}

/// Cross-correlation of `x` with `k_out` filters `w` (layout
/// K_out x K_in x k x k) plus bias, zero-padded by `pad` on each side.
/// Output spatial size is `H + 2*pad - k + 1`.
pub fn conv2d_forward<S: Scalar>(
    x: &Tensor4<S>,
    w: &[S],
    b: &[S],
    k_out: usize,
    k_in: usize,
    k: usize,
    pad: usize,
) -> Result<(Tensor4<S>, Conv2dCache<S>)> {
    let (n, c, h, width) = x.dims();
    if c != k_in {
        return Err(Error::shape("conv2d_forward input channels", k_in, c));
    }
    if w.len() != k_out * k_in * k * k {
        return Err(Error::shape(
            "conv2d_forward weight length",
            k_out * k_in * k * k,
            w.len(),
        ));
    }
    if b.len() != k_out {
        return Err(Error::shape("conv2d_forward bias length", k_out, b.len()));
    }
    if h + 2 * pad < k || width + 2 * pad < k {
        return Err(Error::InvalidArg(format!(
            "conv2d_forward: kernel {k} larger than padded input {}x{}",
            h + 2 * pad,
            width + 2 * pad
        )));
    }
    let out_h = h + 2 * pad - k + 1;
    let out_w = width + 2 * pad - k + 1;
    let mut y = Tensor4::zeros(n, k_out, out_h, out_w);

    // Patch-mode fast path: a single output position per sample turns the
    // convolution into one dot product per (sample, filter) over the whole
    // input plane, which shares the weight layout exactly.
    if pad == 0 && out_h == 1 && out_w == 1 {
        let flen = k_in * k * k;
        for ni in 0..n {
            let x_all = &x.data()[ni * flen..(ni + 1) * flen];
            let y_row = &mut y.data_mut()[ni * k_out..(ni + 1) * k_out];
            for (co, yv) in y_row.iter_mut().enumerate() {
                let w_row = &w[co * flen..(co + 1) * flen];
                let mut acc = b[co];
                for (wv, xv) in w_row.iter().zip(x_all.iter()) {
                    acc += *wv * *xv;
                }
                *yv = acc;
            }
        }
        y.check_finite("conv2d_forward output")?;
        let cache = Conv2dCache {
            x: x.clone(),
            k_out,
            k_in,
            k,
            pad,
            out_h,
            out_w,
        };
        return Ok((y, cache));
    }

    for ni in 0..n {
        for co in 0..k_out {
            let bias = b[co];
            {
                let y_plane = y.plane_mut(ni, co);
                for v in y_plane.iter_mut() {
                    *v = bias;
                }
            }
            for ci in 0..k_in {
                let x_plane = x.plane(ni, ci);
                for kh in 0..k {
                    let (oh_lo, oh_hi) = conv_span(out_h, h, kh, pad);
                    for kw in 0..k {
                        let wv = w[((co * k_in + ci) * k + kh) * k + kw];
                        if wv == S::zero() {
                            continue;
                        }
                        let (ow_lo, ow_hi) = conv_span(out_w, width, kw, pad);
                        if ow_hi <= ow_lo {
                            continue;
                        }
                        let y_plane = y.plane_mut(ni, co);
                        for oh in oh_lo..oh_hi {
                            let ih = oh + kh - pad;
                            let iw0 = ow_lo + kw - pad;
                            let x_row = &x_plane[ih * width + iw0..];
                            let y_row = &mut y_plane[oh * out_w + ow_lo..oh * out_w + ow_hi];
                            for (yv, xv) in y_row.iter_mut().zip(x_row.iter()) {
                                *yv += wv * *xv;
                            }
                        }
                    }
                }
            }
        }
    }
    y.check_finite("conv2d_forward output")?;
    let cache = Conv2dCache {
        x: x.clone(),
        k_out,
        k_in,
        k,
        pad,
        out_h,
        out_w,
    };
    Ok((y, cache))
}

/// Exact gradients of [`conv2d_forward`]: returns `(dx, dw, db)`.
pub fn conv2d_backward<S: Scalar>(
    cache: &Conv2dCache<S>,
    w: &[S],
    dy: &Tensor4<S>,
) -> Result<(Tensor4<S>, Vec<S>, Vec<S>)> {
    let (n, _, h, width) = cache.x.dims();
    let (k_out, k_in, k, pad) = (cache.k_out, cache.k_in, cache.k, cache.pad);
    let (dn, dc, dh, dw_) = dy.dims();
    if dn != n || dc != k_out || dh != cache.out_h || dw_ != cache.out_w {
        return Err(Error::shape(
            "conv2d_backward dy",
            format!("{}x{}x{}x{}", n, k_out, cache.out_h, cache.out_w),
            format!("{dn}x{dc}x{dh}x{dw_}"),
        ));
    }
    if w.len() != k_out * k_in * k * k {
        return Err(Error::shape(
            "conv2d_backward weight length",
            k_out * k_in * k * k,
            w.len(),
        ));
    }
    let out_h = cache.out_h;
    let out_w = cache.out_w;

    let mut dx = Tensor4::zeros(n, k_in, h, width);
    let mut dw = vec![S::zero(); w.len()];
    let mut db = vec![S::zero(); k_out];

    // fast path matching the forward's single-output-position case
    if pad == 0 && out_h == 1 && out_w == 1 {
        let flen = k_in * k * k;
        for ni in 0..n {
            let x_all = &cache.x.data()[ni * flen..(ni + 1) * flen];
            let dy_row = &dy.data()[ni * k_out..(ni + 1) * k_out];
            let dx_all = &mut dx.data_mut()[ni * flen..(ni + 1) * flen];
            for (co, dyv) in dy_row.iter().enumerate() {
                db[co] += *dyv;
                if *dyv == S::zero() {
                    continue;
                }
                let w_row = &w[co * flen..(co + 1) * flen];
                let dw_row = &mut dw[co * flen..(co + 1) * flen];
                for ((dxv, dwv), (wv, xv)) in dx_all
                    .iter_mut()
                    .zip(dw_row.iter_mut())
                    .zip(w_row.iter().zip(x_all.iter()))
                {
                    *dxv += *wv * *dyv;
                    *dwv += *xv * *dyv;
                }
            }
        }
        dx.check_finite("conv2d_backward dx")?;
        slice_finite(&dw, "conv2d_backward dw")?;
        slice_finite(&db, "conv2d_backward db")?;
        return Ok((dx, dw, db));
    }

    for ni in 0..n {
        for co in 0..k_out {
            let dy_plane = dy.plane(ni, co);
            db[co] += dy_plane.iter().copied().sum();
            for ci in 0..k_in {
                let x_plane = cache.x.plane(ni, ci);
                for kh in 0..k {
                    let (oh_lo, oh_hi) = conv_span(out_h, h, kh, pad);
                    for kw in 0..k {
                        let (ow_lo, ow_hi) = conv_span(out_w, width, kw, pad);
                        if ow_hi <= ow_lo {
                            continue;
                        }
                        let widx = ((co * k_in + ci) * k + kh) * k + kw;
                        let wv = w[widx];
                        let mut wacc = S::zero();
                        let dx_plane = dx.plane_mut(ni, ci);
                        for oh in oh_lo..oh_hi {
                            let ih = oh + kh - pad;
                            let iw0 = ow_lo + kw - pad;
                            let dy_row = &dy_plane[oh * out_w + ow_lo..oh * out_w + ow_hi];
                            let x_row = &x_plane[ih * width + iw0..ih * width + iw0 + dy_row.len()];
                            let dx_row =
                                &mut dx_plane[ih * width + iw0..ih * width + iw0 + dy_row.len()];
                            for ((dxv, xv), dyv) in
                                dx_row.iter_mut().zip(x_row.iter()).zip(dy_row.iter())
                            {
                                wacc += *dyv * *xv;
                                *dxv += wv * *dyv;
                            }
                        }
                        dw[widx] += wacc;
                    }
                }
            }
        }
    }
    dx.check_finite("conv2d_backward dx")?;
    slice_finite(&dw, "conv2d_backward dw")?;
    slice_finite(&db, "conv2d_backward db")?;
    Ok((dx, dw, db))
}

// ---------------------------------------------------------------------------
// ReLU
// ---------------------------------------------------------------------------

/// Mask of strictly-positive forward inputs; the gradient at exactly 0 is 0.
#[derive(Debug, Clone)]
pub struct ReluCache {
    mask: Vec<bool>,
}

pub fn relu_forward<S: Scalar>(x: &Tensor4<S>) -> (Tensor4<S>, ReluCache) {
    let mut y = x.clone();
    let mut mask = vec![false; x.numel()];
    for (v, m) in y.data_mut().iter_mut().zip(mask.iter_mut()) {
        if *v > S::zero() {
            *m = true;
        } else {
            *v = S::zero();
        }
    }
    (y, ReluCache { mask })
}

pub fn relu_backward<S: Scalar>(cache: &ReluCache, dy: &Tensor4<S>) -> Result<Tensor4<S>> {
    if cache.mask.len() != dy.numel() {
        return Err(Error::shape("relu_backward", cache.mask.len(), dy.numel()));
    }
    let mut dx = dy.clone();
    for (v, m) in dx.data_mut().iter_mut().zip(cache.mask.iter()) {
        if !*m {
            *v = S::zero();
        }
    }
    Ok(dx)
}

// ---------------------------------------------------------------------------
// Max pooling (stride 1, no padding)
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct Pool2dCache {
    argmax: Vec<u32>,
    in_h: usize,
    in_w: usize,
    k: usize,
}

/// k x k max pooling with stride 1 over valid positions. Ties go to the
/// first element in row-major window order, so backward is deterministic.
pub fn maxpool2d_forward<S: Scalar>(x: &Tensor4<S>, k: usize) -> Result<(Tensor4<S>, Pool2dCache)> {
    let (n, c, h, w) = x.dims();
    if k == 0 || k > h || k > w {
        return Err(Error::InvalidArg(format!(
            "maxpool2d_forward: window {k} does not fit {h}x{w}"
        )));
    }
    let out_h = h - k + 1;
    let out_w = w - k + 1;
    let mut y = Tensor4::zeros(n, c, out_h, out_w);
    let mut argmax = vec![0u32; n * c * out_h * out_w];
    let mut pos = 0usize;
    for ni in 0..n {
        for ci in 0..c {
            let plane = x.plane(ni, ci);
            let y_plane = y.plane_mut(ni, ci);
            for oh in 0..out_h {
                for ow in 0..out_w {
                    let mut best = plane[oh * w + ow];
                    let mut best_idx = oh * w + ow;
                    for kh in 0..k {
                        for kw in 0..k {
                            let idx = (oh + kh) * w + ow + kw;
                            if plane[idx] > best {
                                best = plane[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    y_plane[oh * out_w + ow] = best;
                    argmax[pos] = best_idx as u32;
                    pos += 1;
                }
            }
        }
    }
    Ok((
        y,
        Pool2dCache {
            argmax,
            in_h: h,
            in_w: w,
            k,
        },
    ))
}

pub fn maxpool2d_backward<S: Scalar>(cache: &Pool2dCache, dy: &Tensor4<S>) -> Result<Tensor4<S>> {
    let (n, c, out_h, out_w) = dy.dims();
    if cache.argmax.len() != n * c * out_h * out_w
        || out_h != cache.in_h - cache.k + 1
        || out_w != cache.in_w - cache.k + 1
    {
        return Err(Error::shape(
            "maxpool2d_backward dy",
            cache.argmax.len(),
            dy.numel(),
        ));
    }
    let mut dx = Tensor4::zeros(n, c, cache.in_h, cache.in_w);
    let mut pos = 0usize;
    for ni in 0..n {
        for ci in 0..c {
            let dy_plane = dy.plane(ni, ci);
            let dx_plane = dx.plane_mut(ni, ci);
            for v in dy_plane.iter() {
                dx_plane[cache.argmax[pos] as usize] += *v;
                pos += 1;
            }
        }
    }
    Ok(dx)
}

// ---------------------------------------------------------------------------
// L2 normalization
// ---------------------------------------------------------------------------

/// `v / max(||v||, eps)`; returns the unit vector and the norm for backward.
pub fn l2_normalize<S: Scalar>(v: &[S], eps: S) -> (Vec<S>, S) {
    let norm = v.iter().map(|x| *x * *x).sum::<S>().sqrt();
    let denom = norm.max(eps);
    (v.iter().map(|x| *x / denom).collect(), norm)
}

/// Exact Jacobian-vector product of [`l2_normalize`].
///
/// On the normalized branch (`norm > eps`, with `z = v/norm`):
/// `dv = (dz - z * (z . dz)) / norm`. On the eps branch the map is linear:
/// `dv = dz / eps`.
pub fn l2_normalize_backward<S: Scalar>(z: &[S], norm: S, eps: S, dz: &[S]) -> Vec<S> {
    if norm > eps {
        let zdz = z.iter().zip(dz.iter()).map(|(a, b)| *a * *b).sum::<S>();
        z.iter()
            .zip(dz.iter())
            .map(|(zi, di)| (*di - *zi * zdz) / norm)
            .collect()
    } else {
        dz.iter().map(|di| *di / eps).collect()
    }
}

// ---------------------------------------------------------------------------
// Softmax cross-entropy
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct XentCache<S> {
    probs: Vec<S>,
    n: usize,
    c: usize,
}

/// Mean softmax cross-entropy over a batch of logit vectors
/// (`logits` is N x C x 1 x 1; `labels` are 0-based class indices).
pub fn softmax_xent_forward<S: Scalar>(
    logits: &Tensor4<S>,
    labels: &[usize],
) -> Result<(S, XentCache<S>)> {
    let (n, c, h, w) = logits.dims();
    if h != 1 || w != 1 {
        return Err(Error::shape(
            "softmax_xent_forward logits",
            "N x C x 1 x 1",
            format!("{n}x{c}x{h}x{w}"),
        ));
    }
    if labels.len() != n {
        return Err(Error::shape("softmax_xent_forward labels", n, labels.len()));
    }
    let mut probs = vec![S::zero(); n * c];
    let mut loss = S::zero();
    for (i, &label) in labels.iter().enumerate() {
        if label >= c {
            return Err(Error::InvalidArg(format!(
                "softmax_xent_forward: label {label} out of range for {c} classes"
            )));
        }
        let row = &logits.data()[i * c..(i + 1) * c];
        let max = row.iter().copied().fold(S::neg_infinity(), S::max);
        let mut denom = S::zero();
        for (j, &v) in row.iter().enumerate() {
            let e = (v - max).exp();
            probs[i * c + j] = e;
            denom += e;
        }
        for p in &mut probs[i * c..(i + 1) * c] {
            *p /= denom;
        }
        loss += denom.ln() - (row[label] - max);
    }
    loss /= S::from_f64(n as f64);
    if !loss.is_finite() {
        return Err(Error::NonFinite {
            context: "softmax_xent_forward loss".to_string(),
            index: None,
        });
    }
    Ok((loss, XentCache { probs, n, c }))
}

/// Gradient of the mean loss w.r.t. logits: `(softmax - onehot) / N`.
pub fn softmax_xent_backward<S: Scalar>(
    cache: &XentCache<S>,
    labels: &[usize],
) -> Result<Tensor4<S>> {
    if labels.len() != cache.n {
        return Err(Error::shape(
            "softmax_xent_backward labels",
            cache.n,
            labels.len(),
        ));
    }
    let inv_n = S::from_f64(1.0 / cache.n as f64);
    let mut grad = cache.probs.clone();
    for (i, &label) in labels.iter().enumerate() {
        grad[i * cache.c + label] -= S::one();
    }
    for g in &mut grad {
        *g *= inv_n;
    }
    Tensor4::from_vec(cache.n, cache.c, 1, 1, grad)
}

// ---------------------------------------------------------------------------
// Parameters and SGD
// ---------------------------------------------------------------------------

/// Learning-rate group of a parameter tensor. During finetuning the
/// domain-specific group runs at a multiple of the shared rate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LrGroup {
    Shared,
    DomainSpecific,
}

/// A trainable tensor with its gradient and momentum buffers.
#[derive(Debug, Clone)]
pub struct ParamTensor<S> {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<S>,
    pub grad: Vec<S>,
    pub momentum: Vec<S>,
    pub lr_group: LrGroup,
    /// Weight decay applies to weights only, never to biases.
    pub weight_decay: bool,
}

impl<S: Scalar> ParamTensor<S> {
    pub fn zeros(
        name: impl Into<String>,
        shape: Vec<usize>,
        lr_group: LrGroup,
        weight_decay: bool,
    ) -> Self {
        let numel = shape.iter().product();
        ParamTensor {
            name: name.into(),
            shape,
            value: vec![S::zero(); numel],
            grad: vec![S::zero(); numel],
            momentum: vec![S::zero(); numel],
            lr_group,
            weight_decay,
        }
    }

    pub fn numel(&self) -> usize {
        self.value.len()
    }

    pub fn zero_grad(&mut self) {
        for g in &mut self.grad {
            *g = S::zero();
        }
    }

    pub fn add_to_grad(&mut self, delta: &[S]) {
        debug_assert_eq!(delta.len(), self.grad.len());
        for (g, d) in self.grad.iter_mut().zip(delta.iter()) {
            *g += *d;
        }
    }
}

/// SGD hyperparameters and step-decay schedule.
#[derive(Debug, Clone)]
pub struct SgdConfig {
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Multiplicative decay applied at each milestone.
    pub gamma: f64,
    /// Iteration indices at which the learning rate decays; strictly increasing.
    pub milestones: Vec<usize>,
    /// Optional global gradient-norm clip applied before the update. `None`
    /// leaves the plain update rule untouched; training pipelines enable it
    /// to keep full-batch steps bounded.
    pub max_grad_norm: Option<f64>,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            base_lr: 0.03,
            momentum: 0.9,
            weight_decay: 0.005,
            gamma: 0.1,
            milestones: vec![120, 160],
            max_grad_norm: None,
        }
    }
}

impl SgdConfig {
    /// The downstream schedule: decays at 60 and 80 over 100 iterations.
    pub fn finetune_default() -> Self {
        SgdConfig {
            milestones: vec![60, 80],
            ..SgdConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0) || !(self.momentum >= 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::InvalidArg(
                "SgdConfig: base_lr must be positive, momentum and weight_decay non-negative"
                    .to_string(),
            ));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::InvalidArg(format!(
                "SgdConfig: gamma must lie in (0,1), got {}",
                self.gamma
            )));
        }
        if self.milestones.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidArg(
                "SgdConfig: milestones must be strictly increasing".to_string(),
            ));
        }
        if let Some(c) = self.max_grad_norm {
            if !(c > 0.0) {
                return Err(Error::InvalidArg(format!(
                    "SgdConfig: max_grad_norm must be positive, got {c}"
                )));
            }
        }
        Ok(())
    }
}

/// Step-decayed learning rate: `base_lr * gamma^(#milestones <= iter)`.
pub fn lr_at(iter: usize, cfg: &SgdConfig) -> f64 {
    let decays = cfg.milestones.iter().filter(|&&m| m <= iter).count();
    cfg.base_lr * cfg.gamma.powi(decays as i32)
}

/// One SGD-with-momentum update over a set of parameters.
///
/// The effective rate is `lr_at(iter)` for the shared group and
/// `domain_lr_multiplier` times that for the domain-specific group
/// (1x during pretraining and scratch training, 10x during finetuning).
/// Update rule: `m <- momentum*m + (grad + wd*value); value <- value - lr*m`,
/// with the gradient rescaled beforehand when a global-norm clip is set and
/// exceeded.
pub fn sgd_step<'a, S: Scalar>(
    params: impl IntoIterator<Item = &'a mut ParamTensor<S>>,
    cfg: &SgdConfig,
    iter: usize,
    domain_lr_multiplier: f64,
) -> Result<()> {
    let params: Vec<&mut ParamTensor<S>> = params.into_iter().collect();
    let mut clip_scale = S::one();
    if let Some(max_norm) = cfg.max_grad_norm {
        let total: f64 = params
            .iter()
            .map(|pt| {
                pt.grad
                    .iter()
                    .map(|g| {
                        let g = Scalar::to_f64(*g);
                        g * g
                    })
                    .sum::<f64>()
            })
            .sum();
        let norm = total.sqrt();
        if norm > max_norm {
            clip_scale = S::from_f64(max_norm / norm);
        }
    }
    let lr_shared = lr_at(iter, cfg);
    let lr_domain = lr_shared * domain_lr_multiplier;
    let momentum = S::from_f64(cfg.momentum);
    let wd = S::from_f64(cfg.weight_decay);
    for pt in params {
        slice_finite(&pt.grad, &format!("sgd_step grad of {}", pt.name))?;
        let lr = S::from_f64(match pt.lr_group {
            LrGroup::Shared => lr_shared,
            LrGroup::DomainSpecific => lr_domain,
        });
        let decay = if pt.weight_decay { wd } else { S::zero() };
        for ((v, g), m) in pt
            .value
            .iter_mut()
            .zip(pt.grad.iter())
            .zip(pt.momentum.iter_mut())
        {
            *m = momentum * *m + (*g * clip_scale + decay * *v);
            *v -= lr * *m;
        }
    }
    Ok(())
}
