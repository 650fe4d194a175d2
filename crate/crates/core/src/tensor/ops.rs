//! Operation catalog: forward evaluation and vector-Jacobian products.
//!
//! Each op validates shapes, computes a detached result, and (when the tape
//! is recording and at least one input is attached) registers a record for
//! the backward pass. Gradients at ReLU's kink and under probability
//! clamping use the zero subgradient.

use super::kernels;
use super::tape::Tape;
use super::{Scalar, Tensor};
use crate::codec::gaussian;
use crate::{Error, Result};

pub(crate) const LAYERNORM_EPS: f64 = 1e-5;
/// Scale floor for the entropy model; keeps bin probabilities bounded away
/// from degenerate spikes.
pub const SIGMA_FLOOR: f64 = 1e-2;
/// Probability floor inside the rate op; below this the op is flat.
pub(crate) const RATE_MIN_P: f64 = 1e-12;

/// One differentiable operation, with its static attributes.
#[derive(Clone, Debug, PartialEq)]
pub enum OpSpec {
    /// inputs: x `[h,w,cin]`, weights `[kh,kw,cin,cout]`, bias `[cout]`.
    /// Same-style zero padding; stride 2 halves even dims (floor).
    Conv2d { stride: usize },
    Relu,
    Sigmoid,
    Add,
    Sub,
    Mul,
    /// inputs: x, alpha (scalar), beta (scalar); y = alpha*x + beta.
    ScalarAffine,
    /// inputs: x `[..,c]`, alpha `[c]`, beta `[c]`; per-channel affine.
    ChannelAffine,
    /// inputs: a `[m,k]` or `[b,m,k]`, rhs `[k,n]`/`[b,k,n]`
    /// (or `[n,k]`/`[b,n,k]` when `tb`).
    MatMul { tb: bool },
    /// Last-axis softmax.
    Softmax,
    /// inputs: x `[..,c]`, gain `[c]`, bias `[c]`; normalizes the last axis.
    LayerNorm,
    /// `[h,w,c]` -> `[c]`.
    GlobalAvgPool,
    /// `[h,w,c]` -> `[h/f,w/f,c]` by block averaging.
    AreaDownsample { factor: usize },
    /// n inputs concatenated along the last axis.
    Concat,
    /// Last-axis slice `[start, start+len)`.
    Narrow { start: usize, len: usize },
    /// Same data, new shape (element counts must agree).
    Reshape { shape: Vec<usize> },
    /// `[h,w,c]` -> `[h/2,w/2,4c]`; output channel `p*c + ch` holds input
    /// phase `(p/2, p%2)`.
    SpaceToDepth,
    /// Inverse of `SpaceToDepth`.
    DepthToSpace,
    /// `[h,w,c]` -> `[(h/ws)*(w/ws), ws*ws, c]`, windows and tokens row-major.
    WindowPartition { ws: usize },
    /// Inverse of `WindowPartition` for a known `[h,w]`.
    WindowMerge { ws: usize, h: usize, w: usize },
    /// Mean squared error -> scalar.
    Mse,
    /// Sum of all elements -> scalar.
    Sum,
    /// inputs: values `[..,c]`, mean `[c]`, log-scale `[c]`. Per-element
    /// code length in bits under a discretized Gaussian with unit bins.
    GaussianRateBits,
}

impl OpSpec {
    pub fn name(&self) -> &'static str {
        match self {
            OpSpec::Conv2d { .. } => "conv2d",
            OpSpec::Relu => "relu",
            OpSpec::Sigmoid => "sigmoid",
            OpSpec::Add => "add",
            OpSpec::Sub => "sub",
            OpSpec::Mul => "mul",
            OpSpec::ScalarAffine => "scalar-affine",
            OpSpec::ChannelAffine => "channel-affine",
            OpSpec::MatMul { .. } => "matmul",
            OpSpec::Softmax => "softmax",
            OpSpec::LayerNorm => "layernorm",
            OpSpec::GlobalAvgPool => "global-avg-pool",
            OpSpec::AreaDownsample { .. } => "area-downsample",
            OpSpec::Concat => "concat",
            OpSpec::Narrow { .. } => "narrow",
            OpSpec::Reshape { .. } => "reshape",
            OpSpec::SpaceToDepth => "space-to-depth",
            OpSpec::DepthToSpace => "depth-to-space",
            OpSpec::WindowPartition { .. } => "window-partition",
            OpSpec::WindowMerge { .. } => "window-merge",
            OpSpec::Mse => "mse",
            OpSpec::Sum => "sum",
            OpSpec::GaussianRateBits => "gaussian-rate-bits",
        }
    }
}

fn want(op: &'static str, cond: bool, detail: impl Fn() -> String) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::shape(op, detail()))
    }
}

/// Forward evaluation. Returns the output shape and data.
pub(super) fn forward<T: Scalar>(op: &OpSpec, inputs: &[&Tensor<T>]) -> Result<(Vec<usize>, Vec<T>)> {
    let name = op.name();
    let arity_ok = match op {
        OpSpec::Concat => inputs.len() >= 2,
        OpSpec::Conv2d { .. } | OpSpec::ChannelAffine | OpSpec::ScalarAffine | OpSpec::LayerNorm | OpSpec::GaussianRateBits => {
            inputs.len() == 3
        }
        OpSpec::Add | OpSpec::Sub | OpSpec::Mul | OpSpec::MatMul { .. } | OpSpec::Mse => inputs.len() == 2,
        _ => inputs.len() == 1,
    };
    want(name, arity_ok, || format!("wrong number of inputs: {}", inputs.len()))?;

    match op {
        OpSpec::Conv2d { stride } => {
            let (x, w, b) = (inputs[0], inputs[1], inputs[2]);
            want(name, *stride == 1 || *stride == 2, || format!("unsupported stride {stride}"))?;
            want(name, x.rank() == 3 && w.rank() == 4 && b.rank() == 1, || {
                format!("want x[h,w,c], w[kh,kw,cin,cout], b[cout]; got {:?} {:?} {:?}", x.shape(), w.shape(), b.shape())
            })?;
            let (h, wd, cin) = (x.shape()[0], x.shape()[1], x.shape()[2]);
            let (kh, kw, wcin, cout) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
            want(name, kh % 2 == 1 && kw % 2 == 1, || format!("kernel dims must be odd, got {kh}x{kw}"))?;
            want(name, wcin == cin, || format!("input has {cin} channels, kernel expects {wcin}"))?;
            want(name, b.shape()[0] == cout, || format!("bias len {} != cout {}", b.shape()[0], cout))?;
            if *stride == 2 {
                want(name, h % 2 == 0 && wd % 2 == 0, || format!("stride 2 needs even dims, got {h}x{wd}"))?;
            }
            let geom = kernels::ConvGeom::new(h, wd, cin, cout, kh, kw, *stride);
            let out = kernels::conv2d_forward(x.data(), w.data(), b.data(), &geom);
            Ok((vec![geom.oh, geom.ow, cout], out))
        }
        OpSpec::Relu => {
            let x = inputs[0];
            let out = x.data().iter().map(|&v| v.max(T::ZERO)).collect();
            Ok((x.shape().to_vec(), out))
        }
        OpSpec::Sigmoid => {
            let x = inputs[0];
            let out = x
                .data()
                .iter()
                .map(|&v| T::from_f64(1.0 / (1.0 + (-v.to_f64()).exp())))
                .collect();
            Ok((x.shape().to_vec(), out))
        }
        OpSpec::Add | OpSpec::Sub | OpSpec::Mul => {
            let (a, b) = (inputs[0], inputs[1]);
            want(name, a.shape() == b.shape(), || format!("shape mismatch {:?} vs {:?}", a.shape(), b.shape()))?;
            let out = a
                .data()
                .iter()
                .zip(b.data().iter())
                .map(|(&x, &y)| match op {
                    OpSpec::Add => x + y,
                    OpSpec::Sub => x - y,
                    _ => x * y,
                })
                .collect();
            Ok((a.shape().to_vec(), out))
        }
        OpSpec::ScalarAffine => {
            let (x, a, b) = (inputs[0], inputs[1], inputs[2]);
            want(name, a.len() == 1 && b.len() == 1, || {
                format!("alpha/beta must be scalars, got {:?} and {:?}", a.shape(), b.shape())
            })?;
            let (av, bv) = (a.item(), b.item());
            let out = x.data().iter().map(|&v| av.mul_add(v, bv)).collect();
            Ok((x.shape().to_vec(), out))
        }
        OpSpec::ChannelAffine => {
            let (x, a, b) = (inputs[0], inputs[1], inputs[2]);
            let c = *x.shape().last().ok_or_else(|| Error::shape(name, "input must have rank >= 1"))?;
            want(name, a.shape() == [c] && b.shape() == [c], || {
                format!("alpha/beta must be [{c}], got {:?} and {:?}", a.shape(), b.shape())
            })?;
            let (ad, bd) = (a.data(), b.data());
            let mut out = Vec::with_capacity(x.len());
            for row in x.data().chunks(c) {
                for (ch, &v) in row.iter().enumerate() {
                    out.push(ad[ch].mul_add(v, bd[ch]));
                }
            }
            Ok((x.shape().to_vec(), out))
        }
        OpSpec::MatMul { tb } => matmul_forward(inputs[0], inputs[1], *tb),
        OpSpec::Softmax => {
            let x = inputs[0];
            let c = *x.shape().last().ok_or_else(|| Error::shape(name, "input must have rank >= 1"))?;
            want(name, c > 0, || "empty softmax axis".into())?;
            let mut out = Vec::with_capacity(x.len());
            for row in x.data().chunks(c) {
                let mut mx = row[0];
                for &v in row {
                    mx = mx.max(v);
                }
                let mut denom = T::ZERO;
                let start = out.len();
                for &v in row {
                    let e = (v - mx).exp();
                    denom += e;
                    out.push(e);
                }
                for v in &mut out[start..] {
                    *v = *v / denom;
                }
            }
            Ok((x.shape().to_vec(), out))
        }
        OpSpec::LayerNorm => {
            let (x, gain, bias) = (inputs[0], inputs[1], inputs[2]);
            let c = *x.shape().last().ok_or_else(|| Error::shape(name, "input must have rank >= 1"))?;
            want(name, gain.shape() == [c] && bias.shape() == [c], || {
                format!("gain/bias must be [{c}], got {:?} and {:?}", gain.shape(), bias.shape())
            })?;
            let inv_c = T::from_f64(1.0 / c as f64);
            let eps = T::from_f64(LAYERNORM_EPS);
            let (gd, bd) = (gain.data(), bias.data());
            let mut out = Vec::with_capacity(x.len());
            for row in x.data().chunks(c) {
                let mut mean = T::ZERO;
                for &v in row {
                    mean += v;
                }
                mean *= inv_c;
                let mut var = T::ZERO;
                for &v in row {
                    let d = v - mean;
                    var = d.mul_add(d, var);
                }
                var *= inv_c;
                let inv_std = T::ONE / (var + eps).sqrt();
                for (ch, &v) in row.iter().enumerate() {
                    let xhat = (v - mean) * inv_std;
                    out.push(gd[ch].mul_add(xhat, bd[ch]));
                }
            }
            Ok((x.shape().to_vec(), out))
        }
        OpSpec::GlobalAvgPool => {
            let x = inputs[0];
            want(name, x.rank() == 3, || format!("want [h,w,c], got {:?}", x.shape()))?;
            let (h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
            let mut out = vec![T::ZERO; c];
            for row in x.data().chunks(c) {
                for (ch, &v) in row.iter().enumerate() {
                    out[ch] += v;
                }
            }
            let inv = T::from_f64(1.0 / (h * w) as f64);
            for v in &mut out {
                *v *= inv;
            }
            Ok((vec![c], out))
        }
        OpSpec::AreaDownsample { factor } => {
            let x = inputs[0];
            let f = *factor;
            want(name, x.rank() == 3, || format!("want [h,w,c], got {:?}", x.shape()))?;
            want(name, f >= 1, || "factor must be >= 1".into())?;
            let (h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
            want(name, h % f == 0 && w % f == 0, || format!("{h}x{w} not divisible by factor {f}"))?;
            let (oh, ow) = (h / f, w / f);
            let inv = T::from_f64(1.0 / (f * f) as f64);
            let xd = x.data();
            let mut out = vec![T::ZERO; oh * ow * c];
            for i in 0..h {
                let oi = i / f;
                for j in 0..w {
                    let oj = j / f;
                    let src = &xd[(i * w + j) * c..][..c];
                    let dst = &mut out[(oi * ow + oj) * c..][..c];
                    for ch in 0..c {
                        dst[ch] += src[ch];
                    }
                }
            }
            for v in &mut out {
                *v *= inv;
            }
            Ok((vec![oh, ow, c], out))
        }
        OpSpec::Concat => {
            let lead = &inputs[0].shape()[..inputs[0].rank() - 1];
            let mut ctot = 0usize;
            for t in inputs {
                want(name, t.rank() >= 1 && &t.shape()[..t.rank() - 1] == lead, || {
                    format!("leading dims differ: {:?} vs {:?}", t.shape(), inputs[0].shape())
                })?;
                ctot += t.shape()[t.rank() - 1];
            }
            let rows: usize = lead.iter().product();
            let mut out = Vec::with_capacity(rows * ctot);
            for r in 0..rows {
                for t in inputs {
                    let c = t.shape()[t.rank() - 1];
                    out.extend_from_slice(&t.data()[r * c..(r + 1) * c]);
                }
            }
            let mut shape = lead.to_vec();
            shape.push(ctot);
            Ok((shape, out))
        }
        OpSpec::Narrow { start, len } => {
            let x = inputs[0];
            let c = *x.shape().last().ok_or_else(|| Error::shape(name, "input must have rank >= 1"))?;
            want(name, start + len <= c && *len > 0, || format!("range {start}..{} out of {c} channels", start + len))?;
            let rows = x.len() / c;
            let mut out = Vec::with_capacity(rows * len);
            for r in 0..rows {
                out.extend_from_slice(&x.data()[r * c + start..r * c + start + len]);
            }
            let mut shape = x.shape().to_vec();
            *shape.last_mut().unwrap() = *len;
            Ok((shape, out))
        }
        OpSpec::Reshape { shape } => {
            let x = inputs[0];
            let n: usize = shape.iter().product();
            want(name, n == x.len(), || {
                format!("cannot view {:?} ({} elements) as {shape:?} ({n})", x.shape(), x.len())
            })?;
            Ok((shape.clone(), x.data().to_vec()))
        }
        OpSpec::SpaceToDepth => {
            let x = inputs[0];
            want(name, x.rank() == 3, || format!("want [h,w,c], got {:?}", x.shape()))?;
            let (h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
            want(name, h % 2 == 0 && w % 2 == 0, || format!("needs even dims, got {h}x{w}"))?;
            let (oh, ow) = (h / 2, w / 2);
            let xd = x.data();
            let mut out = vec![T::ZERO; xd.len()];
            for i in 0..oh {
                for j in 0..ow {
                    let dst = &mut out[(i * ow + j) * 4 * c..][..4 * c];
                    for p in 0..4 {
                        let (di, dj) = (p / 2, p % 2);
                        let src = &xd[((2 * i + di) * w + 2 * j + dj) * c..][..c];
                        dst[p * c..(p + 1) * c].copy_from_slice(src);
                    }
                }
            }
            Ok((vec![oh, ow, 4 * c], out))
        }
        OpSpec::DepthToSpace => {
            let x = inputs[0];
            want(name, x.rank() == 3, || format!("want [h,w,c], got {:?}", x.shape()))?;
            let (h, w, c4) = (x.shape()[0], x.shape()[1], x.shape()[2]);
            want(name, c4 % 4 == 0, || format!("channels must be divisible by 4, got {c4}"))?;
            let c = c4 / 4;
            let (oh, ow) = (2 * h, 2 * w);
            let xd = x.data();
            let mut out = vec![T::ZERO; xd.len()];
            for i in 0..h {
                for j in 0..w {
                    let src = &xd[(i * w + j) * c4..][..c4];
                    for p in 0..4 {
                        let (di, dj) = (p / 2, p % 2);
                        let dst = &mut out[((2 * i + di) * ow + 2 * j + dj) * c..][..c];
                        dst.copy_from_slice(&src[p * c..(p + 1) * c]);
                    }
                }
            }
            Ok((vec![oh, ow, c], out))
        }
        OpSpec::WindowPartition { ws } => {
            let x = inputs[0];
            let ws = *ws;
            want(name, x.rank() == 3, || format!("want [h,w,c], got {:?}", x.shape()))?;
            let (h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
            want(name, ws > 0 && h % ws == 0 && w % ws == 0, || {
                format!("window {ws} does not divide {h}x{w}")
            })?;
            let (nh, nw) = (h / ws, w / ws);
            let xd = x.data();
            let mut out = vec![T::ZERO; xd.len()];
            for i in 0..h {
                for j in 0..w {
                    let wi = (i / ws) * nw + j / ws;
                    let t = (i % ws) * ws + j % ws;
                    let dst = &mut out[(wi * ws * ws + t) * c..][..c];
                    dst.copy_from_slice(&xd[(i * w + j) * c..][..c]);
                }
            }
            Ok((vec![nh * nw, ws * ws, c], out))
        }
        OpSpec::WindowMerge { ws, h, w } => {
            let x = inputs[0];
            let (ws, h, w) = (*ws, *h, *w);
            want(name, x.rank() == 3, || format!("want [nw,t,c], got {:?}", x.shape()))?;
            want(name, ws > 0 && h % ws == 0 && w % ws == 0, || {
                format!("window {ws} does not divide {h}x{w}")
            })?;
            let (nh, nw) = (h / ws, w / ws);
            let c = x.shape()[2];
            want(name, x.shape()[0] == nh * nw && x.shape()[1] == ws * ws, || {
                format!("got {:?}, want [{},{},c]", x.shape(), nh * nw, ws * ws)
            })?;
            let xd = x.data();
            let mut out = vec![T::ZERO; xd.len()];
            for i in 0..h {
                for j in 0..w {
                    let wi = (i / ws) * nw + j / ws;
                    let t = (i % ws) * ws + j % ws;
                    let dst = &mut out[(i * w + j) * c..][..c];
                    dst.copy_from_slice(&xd[(wi * ws * ws + t) * c..][..c]);
                }
            }
            Ok((vec![h, w, c], out))
        }
        OpSpec::Mse => {
            let (a, b) = (inputs[0], inputs[1]);
            want(name, a.shape() == b.shape(), || format!("shape mismatch {:?} vs {:?}", a.shape(), b.shape()))?;
            want(name, a.len() > 0, || "empty input".into())?;
            let mut acc = T::ZERO;
            for (&x, &y) in a.data().iter().zip(b.data().iter()) {
                let d = x - y;
                acc = d.mul_add(d, acc);
            }
            Ok((vec![], vec![acc * T::from_f64(1.0 / a.len() as f64)]))
        }
        OpSpec::Sum => {
            let x = inputs[0];
            let mut acc = T::ZERO;
            for &v in x.data() {
                acc += v;
            }
            Ok((vec![], vec![acc]))
        }
        OpSpec::GaussianRateBits => {
            let (v, mu, ls) = (inputs[0], inputs[1], inputs[2]);
            let c = *v.shape().last().ok_or_else(|| Error::shape(name, "values must have rank >= 1"))?;
            want(name, mu.shape() == [c] && ls.shape() == [c], || {
                format!("mean/log-scale must be [{c}], got {:?} and {:?}", mu.shape(), ls.shape())
            })?;
            let sigmas: Vec<f64> = ls.data().iter().map(|&s| s.to_f64().exp().max(SIGMA_FLOOR)).collect();
            let mut out = Vec::with_capacity(v.len());
            for (i, &val) in v.data().iter().enumerate() {
                let ch = i % c;
                let p = gaussian::bin_probability(val.to_f64(), mu.data()[ch].to_f64(), sigmas[ch]);
                out.push(T::from_f64(-(p.max(RATE_MIN_P)).log2()));
            }
            Ok((v.shape().to_vec(), out))
        }
    }
}

fn matmul_forward<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, tb: bool) -> Result<(Vec<usize>, Vec<T>)> {
    let name = "matmul";
    let (ra, rb) = (a.rank(), b.rank());
    want(name, (2..=3).contains(&ra) && (2..=3).contains(&rb) && ra >= rb, || {
        format!("unsupported ranks {:?} x {:?}", a.shape(), b.shape())
    })?;
    let batch = if ra == 3 { a.shape()[0] } else { 1 };
    if rb == 3 {
        want(name, b.shape()[0] == batch, || {
            format!("batch mismatch {:?} vs {:?}", a.shape(), b.shape())
        })?;
    }
    let (m, k) = (a.shape()[ra - 2], a.shape()[ra - 1]);
    let (bk, n) = if tb { (b.shape()[rb - 1], b.shape()[rb - 2]) } else { (b.shape()[rb - 2], b.shape()[rb - 1]) };
    want(name, bk == k, || format!("inner dims differ: {:?} x {:?} (tb={tb})", a.shape(), b.shape()))?;
    let mut out = vec![T::ZERO; batch * m * n];
    let bstride = if rb == 3 { b.shape()[1] * b.shape()[2] } else { 0 };
    for bi in 0..batch {
        let av = &a.data()[bi * m * k..(bi + 1) * m * k];
        let bv = &b.data()[bi * bstride..bi * bstride + b.shape()[rb - 2] * b.shape()[rb - 1]];
        let ov = &mut out[bi * m * n..(bi + 1) * m * n];
        if tb {
            kernels::matmul_bt_acc(av, bv, ov, m, k, n);
        } else {
            kernels::matmul_acc(av, bv, ov, m, k, n);
        }
    }
    let shape = if ra == 3 { vec![batch, m, n] } else { vec![m, n] };
    Ok((shape, out))
}

/// Vector-Jacobian product: gradients of each input given the output
/// gradient. `needs[i]` is false for detached inputs; those slots come back
/// as `None` and are never computed.
pub(super) fn vjp<T: Scalar>(
    op: &OpSpec,
    inputs: &[Tensor<T>],
    output: &Tensor<T>,
    gout: &[T],
    needs: &[bool],
) -> Result<Vec<Option<Vec<T>>>> {
    let mut grads: Vec<Option<Vec<T>>> = vec![None; inputs.len()];
    match op {
        OpSpec::Conv2d { stride } => {
            let (x, w) = (&inputs[0], &inputs[1]);
            let (h, wd, cin) = (x.shape()[0], x.shape()[1], x.shape()[2]);
            let (kh, kw, cout) = (w.shape()[0], w.shape()[1], w.shape()[3]);
            let geom = kernels::ConvGeom::new(h, wd, cin, cout, kh, kw, *stride);
            if needs[0] {
                grads[0] = Some(kernels::conv2d_backward_x(gout, w.data(), &geom));
            }
            if needs[1] || needs[2] {
                let (gw, gb) = kernels::conv2d_backward_w(x.data(), gout, &geom);
                if needs[1] {
                    grads[1] = Some(gw);
                }
                if needs[2] {
                    grads[2] = Some(gb);
                }
            }
        }
        OpSpec::Relu => {
            if needs[0] {
                let g = inputs[0]
                    .data()
                    .iter()
                    .zip(gout.iter())
                    .map(|(&x, &g)| if x > T::ZERO { g } else { T::ZERO })
                    .collect();
                grads[0] = Some(g);
            }
        }
        OpSpec::Sigmoid => {
            if needs[0] {
                let g = output
                    .data()
                    .iter()
                    .zip(gout.iter())
                    .map(|(&y, &g)| g * y * (T::ONE - y))
                    .collect();
                grads[0] = Some(g);
            }
        }
        OpSpec::Add => {
            if needs[0] {
                grads[0] = Some(gout.to_vec());
            }
            if needs[1] {
                grads[1] = Some(gout.to_vec());
            }
        }
        OpSpec::Sub => {
            if needs[0] {
                grads[0] = Some(gout.to_vec());
            }
            if needs[1] {
                grads[1] = Some(gout.iter().map(|&g| -g).collect());
            }
        }
        OpSpec::Mul => {
            let (a, b) = (&inputs[0], &inputs[1]);
            if needs[0] {
                grads[0] = Some(b.data().iter().zip(gout.iter()).map(|(&y, &g)| g * y).collect());
            }
            if needs[1] {
                grads[1] = Some(a.data().iter().zip(gout.iter()).map(|(&x, &g)| g * x).collect());
            }
        }
        OpSpec::ScalarAffine => {
            let (x, a) = (&inputs[0], &inputs[1]);
            let av = a.item();
            if needs[0] {
                grads[0] = Some(gout.iter().map(|&g| g * av).collect());
            }
            if needs[1] {
                let mut acc = T::ZERO;
                for (&xv, &g) in x.data().iter().zip(gout.iter()) {
                    acc = xv.mul_add(g, acc);
                }
                grads[1] = Some(vec![acc]);
            }
            if needs[2] {
                let mut acc = T::ZERO;
                for &g in gout {
                    acc += g;
                }
                grads[2] = Some(vec![acc]);
            }
        }
        OpSpec::ChannelAffine => {
            let (x, a) = (&inputs[0], &inputs[1]);
            let c = *x.shape().last().unwrap();
            let ad = a.data();
            if needs[0] {
                let g = gout
                    .iter()
                    .enumerate()
                    .map(|(i, &g)| g * ad[i % c])
                    .collect();
                grads[0] = Some(g);
            }
            if needs[1] {
                let mut ga = vec![T::ZERO; c];
                for (i, (&xv, &g)) in x.data().iter().zip(gout.iter()).enumerate() {
                    ga[i % c] = xv.mul_add(g, ga[i % c]);
                }
                grads[1] = Some(ga);
            }
            if needs[2] {
                let mut gb = vec![T::ZERO; c];
                for (i, &g) in gout.iter().enumerate() {
                    gb[i % c] += g;
                }
                grads[2] = Some(gb);
            }
        }
        OpSpec::MatMul { tb } => {
            let (a, b) = (&inputs[0], &inputs[1]);
            let (ra, rb) = (a.rank(), b.rank());
            let batch = if ra == 3 { a.shape()[0] } else { 1 };
            let (m, k) = (a.shape()[ra - 2], a.shape()[ra - 1]);
            let n = if *tb { b.shape()[rb - 2] } else { b.shape()[rb - 1] };
            let bmat = b.shape()[rb - 2] * b.shape()[rb - 1];
            let bstride = if rb == 3 { bmat } else { 0 };
            let mut ga = if needs[0] { Some(vec![T::ZERO; a.len()]) } else { None };
            let mut gb = if needs[1] { Some(vec![T::ZERO; b.len()]) } else { None };
            for bi in 0..batch {
                let av = &a.data()[bi * m * k..(bi + 1) * m * k];
                let bv = &b.data()[bi * bstride..bi * bstride + bmat];
                let gv = &gout[bi * m * n..(bi + 1) * m * n];
                if let Some(ga) = ga.as_mut() {
                    let gout_slot = &mut ga[bi * m * k..(bi + 1) * m * k];
                    if *tb {
                        // c = a b^T, b stored [n,k]: ga = g @ b
                        kernels::matmul_acc(gv, bv, gout_slot, m, n, k);
                    } else {
                        // ga = g @ b^T, b stored [k,n]
                        kernels::matmul_bt_acc(gv, bv, gout_slot, m, n, k);
                    }
                }
                if let Some(gb) = gb.as_mut() {
                    let slot = &mut gb[bi * bstride..bi * bstride + bmat];
                    if *tb {
                        // gb[n,k] = g^T @ a
                        kernels::matmul_at_acc(gv, av, slot, m, n, k);
                    } else {
                        // gb[k,n] = a^T @ g
                        kernels::matmul_at_acc(av, gv, slot, m, k, n);
                    }
                }
            }
            grads[0] = ga;
            grads[1] = gb;
        }
        OpSpec::Softmax => {
            if needs[0] {
                let c = *output.shape().last().unwrap();
                let mut g = Vec::with_capacity(gout.len());
                for (yrow, grow) in output.data().chunks(c).zip(gout.chunks(c)) {
                    let mut dot = T::ZERO;
                    for (&y, &gv) in yrow.iter().zip(grow.iter()) {
                        dot = y.mul_add(gv, dot);
                    }
                    for (&y, &gv) in yrow.iter().zip(grow.iter()) {
                        g.push(y * (gv - dot));
                    }
                }
                grads[0] = Some(g);
            }
        }
        OpSpec::LayerNorm => {
            let (x, gain) = (&inputs[0], &inputs[1]);
            let c = *x.shape().last().unwrap();
            let inv_c = T::from_f64(1.0 / c as f64);
            let eps = T::from_f64(LAYERNORM_EPS);
            let gd = gain.data();
            let mut gx = if needs[0] { Some(Vec::with_capacity(x.len())) } else { None };
            let mut gg = if needs[1] { Some(vec![T::ZERO; c]) } else { None };
            let mut gb = if needs[2] { Some(vec![T::ZERO; c]) } else { None };
            for (xrow, grow) in x.data().chunks(c).zip(gout.chunks(c)) {
                let mut mean = T::ZERO;
                for &v in xrow {
                    mean += v;
                }
                mean *= inv_c;
                let mut var = T::ZERO;
                for &v in xrow {
                    let d = v - mean;
                    var = d.mul_add(d, var);
                }
                var *= inv_c;
                let inv_std = T::ONE / (var + eps).sqrt();
                if let Some(gg) = gg.as_mut() {
                    for ch in 0..c {
                        let xhat = (xrow[ch] - mean) * inv_std;
                        gg[ch] = xhat.mul_add(grow[ch], gg[ch]);
                    }
                }
                if let Some(gb) = gb.as_mut() {
                    for ch in 0..c {
                        gb[ch] += grow[ch];
                    }
                }
                if let Some(gx) = gx.as_mut() {
                    // dL/dx = inv_std * (dy*g - mean(dy*g) - xhat * mean(dy*g*xhat))
                    let mut m1 = T::ZERO;
                    let mut m2 = T::ZERO;
                    for ch in 0..c {
                        let dyg = grow[ch] * gd[ch];
                        let xhat = (xrow[ch] - mean) * inv_std;
                        m1 += dyg;
                        m2 = dyg.mul_add(xhat, m2);
                    }
                    m1 *= inv_c;
                    m2 *= inv_c;
                    for ch in 0..c {
                        let dyg = grow[ch] * gd[ch];
                        let xhat = (xrow[ch] - mean) * inv_std;
                        gx.push(inv_std * (dyg - m1 - xhat * m2));
                    }
                }
            }
            grads[0] = gx;
            grads[1] = gg;
            grads[2] = gb;
        }
        OpSpec::GlobalAvgPool => {
            if needs[0] {
                let x = &inputs[0];
                let (h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
                let inv = T::from_f64(1.0 / (h * w) as f64);
                let mut g = Vec::with_capacity(x.len());
                for _ in 0..h * w {
                    for ch in 0..c {
                        g.push(gout[ch] * inv);
                    }
                }
                grads[0] = Some(g);
            }
        }
        OpSpec::AreaDownsample { factor } => {
            if needs[0] {
                let x = &inputs[0];
                let f = *factor;
                let (h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
                let ow = w / f;
                let inv = T::from_f64(1.0 / (f * f) as f64);
                let mut g = vec![T::ZERO; x.len()];
                for i in 0..h {
                    for j in 0..w {
                        let src = &gout[((i / f) * ow + j / f) * c..][..c];
                        let dst = &mut g[(i * w + j) * c..][..c];
                        for ch in 0..c {
                            dst[ch] = src[ch] * inv;
                        }
                    }
                }
                grads[0] = Some(g);
            }
        }
        OpSpec::Concat => {
            let rows: usize = inputs[0].shape()[..inputs[0].rank() - 1].iter().product();
            let ctot: usize = inputs.iter().map(|t| t.shape()[t.rank() - 1]).sum();
            let mut start = 0usize;
            for (idx, t) in inputs.iter().enumerate() {
                let c = t.shape()[t.rank() - 1];
                if needs[idx] {
                    let mut g = Vec::with_capacity(t.len());
                    for r in 0..rows {
                        g.extend_from_slice(&gout[r * ctot + start..r * ctot + start + c]);
                    }
                    grads[idx] = Some(g);
                }
                start += c;
            }
        }
        OpSpec::Narrow { start, len } => {
            if needs[0] {
                let x = &inputs[0];
                let c = *x.shape().last().unwrap();
                let rows = x.len() / c;
                let mut g = vec![T::ZERO; x.len()];
                for r in 0..rows {
                    g[r * c + start..r * c + start + len].copy_from_slice(&gout[r * len..(r + 1) * len]);
                }
                grads[0] = Some(g);
            }
        }
        OpSpec::Reshape { .. } => {
            if needs[0] {
                grads[0] = Some(gout.to_vec());
            }
        }
        OpSpec::SpaceToDepth => {
            if needs[0] {
                let x = &inputs[0];
                let (h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
                let ow = w / 2;
                let mut g = vec![T::ZERO; x.len()];
                for i in 0..h / 2 {
                    for j in 0..ow {
                        let src = &gout[(i * ow + j) * 4 * c..][..4 * c];
                        for p in 0..4 {
                            let (di, dj) = (p / 2, p % 2);
                            let dst = &mut g[((2 * i + di) * w + 2 * j + dj) * c..][..c];
                            dst.copy_from_slice(&src[p * c..(p + 1) * c]);
                        }
                    }
                }
                grads[0] = Some(g);
            }
        }
        OpSpec::DepthToSpace => {
            if needs[0] {
                let x = &inputs[0];
                let (h, w, c4) = (x.shape()[0], x.shape()[1], x.shape()[2]);
                let c = c4 / 4;
                let ow = 2 * w;
                let mut g = vec![T::ZERO; x.len()];
                for i in 0..h {
                    for j in 0..w {
                        let dst = &mut g[(i * w + j) * c4..][..c4];
                        for p in 0..4 {
                            let (di, dj) = (p / 2, p % 2);
                            let src = &gout[((2 * i + di) * ow + 2 * j + dj) * c..][..c];
                            dst[p * c..(p + 1) * c].copy_from_slice(src);
                        }
                    }
                }
                grads[0] = Some(g);
            }
        }
        OpSpec::WindowPartition { ws } => {
            if needs[0] {
                let x = &inputs[0];
                let (h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
                let nw = w / ws;
                let mut g = vec![T::ZERO; x.len()];
                for i in 0..h {
                    for j in 0..w {
                        let wi = (i / ws) * nw + j / ws;
                        let t = (i % ws) * ws + j % ws;
                        let src = &gout[(wi * ws * ws + t) * c..][..c];
                        g[(i * w + j) * c..(i * w + j) * c + c].copy_from_slice(src);
                    }
                }
                grads[0] = Some(g);
            }
        }
        OpSpec::WindowMerge { ws, h, w } => {
            if needs[0] {
                let c = inputs[0].shape()[2];
                let nw = w / ws;
                let mut g = vec![T::ZERO; inputs[0].len()];
                for i in 0..*h {
                    for j in 0..*w {
                        let wi = (i / ws) * nw + j / ws;
                        let t = (i % ws) * ws + j % ws;
                        let dst = &mut g[(wi * ws * ws + t) * c..][..c];
                        dst.copy_from_slice(&gout[(i * w + j) * c..][..c]);
                    }
                }
                grads[0] = Some(g);
            }
        }
        OpSpec::Mse => {
            let (a, b) = (&inputs[0], &inputs[1]);
            let scale = T::from_f64(2.0 / a.len() as f64) * gout[0];
            if needs[0] {
                grads[0] = Some(
                    a.data().iter().zip(b.data().iter()).map(|(&x, &y)| scale * (x - y)).collect(),
                );
            }
            if needs[1] {
                grads[1] = Some(
                    a.data().iter().zip(b.data().iter()).map(|(&x, &y)| scale * (y - x)).collect(),
                );
            }
        }
        OpSpec::Sum => {
            if needs[0] {
                grads[0] = Some(vec![gout[0]; inputs[0].len()]);
            }
        }
        OpSpec::GaussianRateBits => {
            let (v, mu, ls) = (&inputs[0], &inputs[1], &inputs[2]);
            let c = *v.shape().last().unwrap();
            let ln2 = std::f64::consts::LN_2;
            let mut gv = if needs[0] { Some(vec![T::ZERO; v.len()]) } else { None };
            let mut gmu = if needs[1] { Some(vec![T::ZERO; c]) } else { None };
            let mut gls = if needs[2] { Some(vec![T::ZERO; c]) } else { None };
            for (i, &val) in v.data().iter().enumerate() {
                let ch = i % c;
                let m = mu.data()[ch].to_f64();
                let sig_raw = ls.data()[ch].to_f64().exp();
                let sig = sig_raw.max(SIGMA_FLOOR);
                let x = val.to_f64();
                let a = (x + 0.5 - m) / sig;
                let b = (x - 0.5 - m) / sig;
                let p = gaussian::bin_probability(x, m, sig);
                if p <= RATE_MIN_P {
                    continue; // clamped: flat, zero subgradient
                }
                let (pa, pb) = (gaussian::norm_pdf(a), gaussian::norm_pdf(b));
                let g = gout[i].to_f64();
                let common = g / (p * ln2);
                if let Some(gv) = gv.as_mut() {
                    gv[i] = T::from_f64(-(pa - pb) / sig * common);
                }
                if let Some(gmu) = gmu.as_mut() {
                    gmu[ch] = T::from_f64(gmu[ch].to_f64() + (pa - pb) / sig * common);
                }
                if let Some(gls) = gls.as_mut() {
                    if sig_raw > SIGMA_FLOOR {
                        gls[ch] = T::from_f64(gls[ch].to_f64() + (pa * a - pb * b) * common);
                    }
                }
            }
            grads[0] = gv;
            grads[1] = gmu;
            grads[2] = gls;
        }
    }
    Ok(grads)
}

/// Convenience wrappers. These are thin: every one routes through
/// [`Tape::apply`] so the generic path and the named path cannot diverge.
impl<T: Scalar> Tape<T> {
    pub fn conv2d(&mut self, x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>, stride: usize) -> Result<Tensor<T>> {
        self.apply(&OpSpec::Conv2d { stride }, &[x, w, b])
    }

    pub fn relu(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.apply(&OpSpec::Relu, &[x])
    }

    pub fn sigmoid(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.apply(&OpSpec::Sigmoid, &[x])
    }

    pub fn add(&mut self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        self.apply(&OpSpec::Add, &[a, b])
    }

    pub fn sub(&mut self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        self.apply(&OpSpec::Sub, &[a, b])
    }

    pub fn mul(&mut self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        self.apply(&OpSpec::Mul, &[a, b])
    }

    pub fn scalar_affine(&mut self, x: &Tensor<T>, alpha: &Tensor<T>, beta: &Tensor<T>) -> Result<Tensor<T>> {
        self.apply(&OpSpec::ScalarAffine, &[x, alpha, beta])
    }

    /// `alpha * x + beta` with detached constants.
    pub fn affine_const(&mut self, x: &Tensor<T>, alpha: f64, beta: f64) -> Result<Tensor<T>> {
        let a = Tensor::scalar(T::from_f64(alpha));
        let b = Tensor::scalar(T::from_f64(beta));
        self.apply(&OpSpec::ScalarAffine, &[x, &a, &b])
    }

    pub fn channel_affine(&mut self, x: &Tensor<T>, alpha: &Tensor<T>, beta: &Tensor<T>) -> Result<Tensor<T>> {
        self.apply(&OpSpec::ChannelAffine, &[x, alpha, beta])
    }

    pub fn matmul(&mut self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        self.apply(&OpSpec::MatMul { tb: false }, &[a, b])
    }

    /// `a @ b^T` with `b` stored `[n,k]`.
    pub fn matmul_bt(&mut self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        self.apply(&OpSpec::MatMul { tb: true }, &[a, b])
    }

    pub fn softmax(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.apply(&OpSpec::Softmax, &[x])
    }

    pub fn layernorm(&mut self, x: &Tensor<T>, gain: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
        self.apply(&OpSpec::LayerNorm, &[x, gain, bias])
    }

    pub fn global_avg_pool(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.apply(&OpSpec::GlobalAvgPool, &[x])
    }

    pub fn area_downsample(&mut self, x: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
        self.apply(&OpSpec::AreaDownsample { factor }, &[x])
    }

    pub fn concat(&mut self, parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
        self.apply(&OpSpec::Concat, parts)
    }

    pub fn narrow(&mut self, x: &Tensor<T>, start: usize, len: usize) -> Result<Tensor<T>> {
        self.apply(&OpSpec::Narrow { start, len }, &[x])
    }

    pub fn reshape(&mut self, x: &Tensor<T>, shape: &[usize]) -> Result<Tensor<T>> {
        self.apply(&OpSpec::Reshape { shape: shape.to_vec() }, &[x])
    }

    /// Split the last axis into `parts` equal slices.
    pub fn split(&mut self, x: &Tensor<T>, parts: usize) -> Result<Vec<Tensor<T>>> {
        let c = *x.shape().last().ok_or_else(|| Error::shape("split", "input must have rank >= 1"))?;
        if parts == 0 || c % parts != 0 {
            return Err(Error::shape("split", format!("{c} channels not divisible into {parts} parts")));
        }
        let each = c / parts;
        (0..parts).map(|p| self.narrow(x, p * each, each)).collect()
    }

    pub fn space_to_depth(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.apply(&OpSpec::SpaceToDepth, &[x])
    }

    pub fn depth_to_space(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.apply(&OpSpec::DepthToSpace, &[x])
    }

    pub fn window_partition(&mut self, x: &Tensor<T>, ws: usize) -> Result<Tensor<T>> {
        self.apply(&OpSpec::WindowPartition { ws }, &[x])
    }

    pub fn window_merge(&mut self, x: &Tensor<T>, ws: usize, h: usize, w: usize) -> Result<Tensor<T>> {
        self.apply(&OpSpec::WindowMerge { ws, h, w }, &[x])
    }

    pub fn mse(&mut self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        self.apply(&OpSpec::Mse, &[a, b])
    }

    pub fn sum(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.apply(&OpSpec::Sum, &[x])
    }

    pub fn gaussian_rate_bits(&mut self, v: &Tensor<T>, mu: &Tensor<T>, log_sigma: &Tensor<T>) -> Result<Tensor<T>> {
        self.apply(&OpSpec::GaussianRateBits, &[v, mu, log_sigma])
    }
}
