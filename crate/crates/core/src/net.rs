//! Forward/backward engine.
//!
//! Executes an [`Arch`] over NCHW batches with reverse-mode gradients for
//! every layer kind. The whole engine is generic over [`Scalar`], so the
//! exact same code path runs in f32 (storage precision) and f64
//! (verification runs, finite-difference oracles).
//!
//! Determinism: per-sample work is parallelized with rayon over disjoint
//! output slices and weight gradients are parallelized over output channels,
//! so accumulation order never depends on scheduling — identical inputs and
//! parameters give bit-identical results.
//!
//! Batch norm: training mode normalizes with biased batch statistics;
//! evaluation mode uses the stored running statistics. Running statistics
//! are updated by [`update_running_stats`] with momentum 0.1 and the
//! unbiased batch variance.
//!
//! Max pooling resolves ties by the first index in window scan order.

use crate::arch::{Arch, ArchInfo, Layer, ParamId, ParamName, Shape};
use crate::error::{Error, Result};
use crate::params::{Grads, ParamSet};
use crate::tensor::{Scalar, Tensor};
use rayon::prelude::*;
use std::collections::HashMap;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// What to differentiate with respect to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Wrt {
    /// Parameter gradients and the input gradient.
    All,
    /// Only the input gradient (parameter grads left at zero) — used by
    /// input-space probes where weight gradients would be wasted work.
    InputOnly,
}

/// Per-layer auxiliary state cached by the forward pass for backward.
#[derive(Debug, Clone)]
enum Aux<S> {
    None,
    MaxPool { argmax: Vec<u32> },
    BatchNorm { mean: Vec<S>, inv_std: Vec<S> },
}

/// Cached activations of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardPass<S: Scalar = f32> {
    pub mode: Mode,
    input: Tensor<S>,
    /// `outs[i]` = output of layer `i`; the last entry is the logits.
    pub outs: Vec<Tensor<S>>,
    aux: Vec<Aux<S>>,
}

impl<S: Scalar> ForwardPass<S> {
    pub fn logits(&self) -> &Tensor<S> {
        self.outs.last().expect("non-empty arch")
    }

    pub fn input(&self) -> &Tensor<S> {
        &self.input
    }
}

/// A model: architecture plus parameters, with cached shape inference.
#[derive(Debug, Clone)]
pub struct Model {
    arch: Arch,
    pub params: ParamSet,
    info: ArchInfo,
}

impl Model {
    pub fn new(arch: Arch, params: ParamSet) -> Result<Self> {
        let info = arch.infer()?;
        let expect = arch.param_count();
        if params.len_params() != expect {
            return Err(Error::Internal(format!(
                "param set has {} values, arch needs {expect}",
                params.len_params()
            )));
        }
        Ok(Model { arch, params, info })
    }

    pub fn arch(&self) -> &Arch {
        &self.arch
    }

    pub fn info(&self) -> &ArchInfo {
        &self.info
    }

    pub fn forward(&self, input: &Tensor<f32>, mode: Mode) -> Result<ForwardPass<f32>> {
        forward_pass(&self.arch, &self.info, self.params.tensors(), input, mode)
    }

    /// Eval-mode logits.
    pub fn logits(&self, input: &Tensor<f32>) -> Result<Tensor<f32>> {
        Ok(self.forward(input, Mode::Eval)?.outs.pop_last())
    }

    pub fn backward(
        &self,
        pass: &ForwardPass<f32>,
        dlogits: Tensor<f32>,
        wrt: Wrt,
    ) -> Result<(Grads<f32>, Tensor<f32>)> {
        backward_pass(&self.arch, self.params.tensors(), pass, dlogits, wrt)
    }
}

trait PopLast<T> {
    fn pop_last(self) -> T;
}

impl<T> PopLast<T> for Vec<T> {
    fn pop_last(mut self) -> T {
        self.pop().expect("non-empty")
    }
}

fn param_index(arch: &Arch) -> HashMap<ParamId, usize> {
    arch.param_specs().iter().enumerate().map(|(i, (id, _))| (*id, i)).collect()
}

#[inline]
fn at4(c: usize, h: usize, w: usize, ci: usize, hi: usize, wi: usize) -> usize {
    debug_assert!(ci < c);
    (ci * h + hi) * w + wi
}

/// Run the network over a batch.
///
/// `input` must be `[N, C, H, W]` matching the arch input; vector inputs use
/// H = W = 1. `params` must be in canonical enumeration order.
pub fn forward_pass<S: Scalar>(
    arch: &Arch,
    info: &ArchInfo,
    params: &[Tensor<S>],
    input: &Tensor<S>,
    mode: Mode,
) -> Result<ForwardPass<S>> {
    let (ic, ih, iw) = arch.input;
    if input.shape.len() != 4 || input.shape[1..] != [ic, ih, iw] {
        return Err(Error::InvalidArch(format!(
            "input shape {:?} does not match arch input [N, {ic}, {ih}, {iw}]",
            input.shape
        )));
    }
    if !input.all_finite() {
        return Err(Error::NonFinite("network input".into()));
    }
    let n = input.shape[0];
    let pidx = param_index(arch);
    let mut outs: Vec<Tensor<S>> = Vec::with_capacity(arch.layers.len());
    let mut aux: Vec<Aux<S>> = Vec::with_capacity(arch.layers.len());

    for (idx, layer) in arch.layers.iter().enumerate() {
        let x = if idx == 0 { input } else { &outs[idx - 1] };
        let in_shape = if idx == 0 { arch.input_shape() } else { info.shapes[idx - 1] };
        let out_shape = info.shapes[idx];
        let (y, a) = match *layer {
            Layer::Dense { in_f, out_f } => {
                let w = &params[pidx[&ParamId { layer: idx, name: ParamName::Weight }]];
                let b = &params[pidx[&ParamId { layer: idx, name: ParamName::Bias }]];
                (dense_fwd(x, w, b, n, in_f, out_f), Aux::None)
            }
            Layer::Conv2d { in_c, out_c, k, stride, pad, groups } => {
                let w = &params[pidx[&ParamId { layer: idx, name: ParamName::Weight }]];
                let b = &params[pidx[&ParamId { layer: idx, name: ParamName::Bias }]];
                let (c, h, wd) = map_dims(in_shape);
                debug_assert_eq!(c, in_c);
                let (oc, oh, ow) = map_dims(out_shape);
                debug_assert_eq!(oc, out_c);
                (
                    conv_fwd(x, w, b, ConvDims { n, in_c, h, w: wd, out_c, oh, ow, k, stride, pad, groups }),
                    Aux::None,
                )
            }
            Layer::BatchNorm { c } => {
                let scale = &params[pidx[&ParamId { layer: idx, name: ParamName::BnScale }]];
                let shift = &params[pidx[&ParamId { layer: idx, name: ParamName::BnShift }]];
                let rmean = &params[pidx[&ParamId { layer: idx, name: ParamName::BnMean }]];
                let rvar = &params[pidx[&ParamId { layer: idx, name: ParamName::BnVar }]];
                let (_, h, w) = map_dims(in_shape);
                bn_fwd(x, scale, shift, rmean, rvar, n, c, h * w, mode)
            }
            Layer::Relu => (x.map(|v| v.maxv(S::ZERO)), Aux::None),
            Layer::MaxPool { k, stride } => {
                let (c, h, w) = map_dims(in_shape);
                let (_, oh, ow) = map_dims(out_shape);
                max_pool_fwd(x, n, c, h, w, oh, ow, k, stride)
            }
            Layer::AvgPool { k, stride } => {
                let (c, h, w) = map_dims(in_shape);
                let (_, oh, ow) = map_dims(out_shape);
                (avg_pool_fwd(x, n, c, h, w, oh, ow, k, stride), Aux::None)
            }
            Layer::Flatten => {
                let mut dims = vec![n];
                dims.extend(out_shape.dims());
                (x.clone().reshaped(&dims), Aux::None)
            }
            Layer::ResidualAdd { from } => {
                let mut y = x.clone();
                y.add_assign(&outs[from]);
                (y, Aux::None)
            }
        };
        if !y.all_finite() {
            return Err(Error::NonFinite(format!("output of layer {idx} ({layer:?})")));
        }
        outs.push(y);
        aux.push(a);
    }

    Ok(ForwardPass { mode, input: input.clone(), outs, aux })
}

/// Reverse-mode gradients for a cached forward pass.
///
/// Returns parameter gradients (canonical order; zeros when `wrt` is
/// `InputOnly`) and the gradient with respect to the network input.
pub fn backward_pass<S: Scalar>(
    arch: &Arch,
    params: &[Tensor<S>],
    pass: &ForwardPass<S>,
    dlogits: Tensor<S>,
    wrt: Wrt,
) -> Result<(Grads<S>, Tensor<S>)> {
    let n = pass.input.shape[0];
    let pidx = param_index(arch);
    let mut grads = Grads::zeros_like(params);
    let last = arch.layers.len() - 1;
    if dlogits.shape != pass.outs[last].shape {
        return Err(Error::Internal(format!(
            "dlogits shape {:?} does not match logits {:?}",
            dlogits.shape, pass.outs[last].shape
        )));
    }

    // Accumulated gradient flowing into each layer's output.
    let mut douts: Vec<Option<Tensor<S>>> = vec![None; arch.layers.len()];
    douts[last] = Some(dlogits);
    let mut dinput = Tensor::zeros(&pass.input.shape);

    for idx in (0..arch.layers.len()).rev() {
        let dy = match douts[idx].take() {
            Some(d) => d,
            None => continue, // no gradient reached this output
        };
        let x = if idx == 0 { &pass.input } else { &pass.outs[idx - 1] };
        let dx = match arch.layers[idx] {
            Layer::Dense { in_f, out_f } => {
                let wi = pidx[&ParamId { layer: idx, name: ParamName::Weight }];
                let bi = pidx[&ParamId { layer: idx, name: ParamName::Bias }];
                let (dx, dw, db) = dense_bwd(x, &params[wi], &dy, n, in_f, out_f, wrt);
                if wrt == Wrt::All {
                    grads.tensors[wi].add_assign(&dw);
                    grads.tensors[bi].add_assign(&db);
                }
                dx
            }
            Layer::Conv2d { in_c, out_c, k, stride, pad, groups } => {
                let wi = pidx[&ParamId { layer: idx, name: ParamName::Weight }];
                let bi = pidx[&ParamId { layer: idx, name: ParamName::Bias }];
                let (c, h, wd) = x_dims(x);
                debug_assert_eq!(c, in_c);
                let (_, oh, ow) = x_dims(&pass.outs[idx]);
                let dims = ConvDims { n, in_c, h, w: wd, out_c, oh, ow, k, stride, pad, groups };
                let (dx, dw, db) = conv_bwd(x, &params[wi], &dy, dims, wrt);
                if wrt == Wrt::All {
                    grads.tensors[wi].add_assign(&dw);
                    grads.tensors[bi].add_assign(&db);
                }
                dx
            }
            Layer::BatchNorm { c } => {
                let si = pidx[&ParamId { layer: idx, name: ParamName::BnScale }];
                let hi = pidx[&ParamId { layer: idx, name: ParamName::BnShift }];
                let (_, hh, ww) = x_dims(x);
                let (mean, inv_std) = match &pass.aux[idx] {
                    Aux::BatchNorm { mean, inv_std } => (mean, inv_std),
                    _ => return Err(Error::Internal("missing batchnorm cache".into())),
                };
                let (dx, dscale, dshift) = bn_bwd(
                    x,
                    &params[si],
                    &dy,
                    mean,
                    inv_std,
                    n,
                    c,
                    hh * ww,
                    pass.mode,
                    wrt,
                );
                if wrt == Wrt::All {
                    grads.tensors[si].add_assign(&dscale);
                    grads.tensors[hi].add_assign(&dshift);
                }
                dx
            }
            Layer::Relu => {
                let mut dx = dy;
                for (g, &v) in dx.data.iter_mut().zip(&x.data) {
                    if v <= S::ZERO {
                        *g = S::ZERO;
                    }
                }
                dx
            }
            Layer::MaxPool { .. } => {
                let argmax = match &pass.aux[idx] {
                    Aux::MaxPool { argmax } => argmax,
                    _ => return Err(Error::Internal("missing maxpool cache".into())),
                };
                let mut dx = Tensor::zeros(&x.shape);
                for (o, &src) in argmax.iter().enumerate() {
                    dx.data[src as usize] += dy.data[o];
                }
                dx
            }
            Layer::AvgPool { k, stride } => {
                let (c, h, w) = x_dims(x);
                let (_, oh, ow) = x_dims(&pass.outs[idx]);
                avg_pool_bwd(&dy, n, c, h, w, oh, ow, k, stride)
            }
            Layer::Flatten => dy.reshaped(&x.shape),
            Layer::ResidualAdd { from } => {
                add_into(&mut douts[from], &dy);
                dy
            }
        };
        if idx == 0 {
            dinput.add_assign(&dx);
        } else {
            add_into(&mut douts[idx - 1], &dx);
        }
    }

    if !grads.all_finite() || !dinput.all_finite() {
        return Err(Error::NonFinite("gradients".into()));
    }
    Ok((grads, dinput))
}

fn add_into<S: Scalar>(slot: &mut Option<Tensor<S>>, v: &Tensor<S>) {
    match slot {
        Some(t) => t.add_assign(v),
        None => *slot = Some(v.clone()),
    }
}

fn map_dims(s: Shape) -> (usize, usize, usize) {
    match s {
        Shape::Map { c, h, w } => (c, h, w),
        Shape::Flat { n } => (n, 1, 1),
    }
}

fn x_dims<S: Scalar>(x: &Tensor<S>) -> (usize, usize, usize) {
    match x.shape.len() {
        4 => (x.shape[1], x.shape[2], x.shape[3]),
        2 => (x.shape[1], 1, 1),
        _ => panic!("activation tensor must be rank 2 or 4, got {:?}", x.shape),
    }
}

// ── dense ────────────────────────────────────────────────────────────────

fn dense_fwd<S: Scalar>(
    x: &Tensor<S>,
    w: &Tensor<S>,
    b: &Tensor<S>,
    n: usize,
    in_f: usize,
    out_f: usize,
) -> Tensor<S> {
    let mut y = Tensor::zeros(&[n, out_f]);
    y.data.par_chunks_mut(out_f).enumerate().for_each(|(s, yr)| {
        let xr = &x.data[s * in_f..(s + 1) * in_f];
        for (o, yo) in yr.iter_mut().enumerate() {
            let wr = &w.data[o * in_f..(o + 1) * in_f];
            let mut acc = b.data[o];
            for i in 0..in_f {
                acc += wr[i] * xr[i];
            }
            *yo = acc;
        }
    });
    y
}

fn dense_bwd<S: Scalar>(
    x: &Tensor<S>,
    w: &Tensor<S>,
    dy: &Tensor<S>,
    n: usize,
    in_f: usize,
    out_f: usize,
    wrt: Wrt,
) -> (Tensor<S>, Tensor<S>, Tensor<S>) {
    let mut dx = Tensor::zeros(&[n, in_f]);
    dx.data.par_chunks_mut(in_f).enumerate().for_each(|(s, dxr)| {
        let dyr = &dy.data[s * out_f..(s + 1) * out_f];
        for o in 0..out_f {
            let g = dyr[o];
            let wr = &w.data[o * in_f..(o + 1) * in_f];
            for i in 0..in_f {
                dxr[i] += g * wr[i];
            }
        }
    });
    let mut dw = Tensor::zeros(&[out_f, in_f]);
    let mut db = Tensor::zeros(&[out_f]);
    if wrt == Wrt::All {
        dw.data.par_chunks_mut(in_f).enumerate().for_each(|(o, dwr)| {
            for s in 0..n {
                let g = dy.data[s * out_f + o];
                let xr = &x.data[s * in_f..(s + 1) * in_f];
                for i in 0..in_f {
                    dwr[i] += g * xr[i];
                }
            }
        });
        for o in 0..out_f {
            let mut acc = S::ZERO;
            for s in 0..n {
                acc += dy.data[s * out_f + o];
            }
            db.data[o] = acc;
        }
    }
    (dx, dw, db)
}

// ── conv ─────────────────────────────────────────────────────────────────

#[derive(Clone, Copy)]
struct ConvDims {
    n: usize,
    in_c: usize,
    h: usize,
    w: usize,
    out_c: usize,
    oh: usize,
    ow: usize,
    k: usize,
    stride: usize,
    pad: usize,
    groups: usize,
}

fn conv_fwd<S: Scalar>(x: &Tensor<S>, wt: &Tensor<S>, b: &Tensor<S>, d: ConvDims) -> Tensor<S> {
    let ConvDims { n, in_c, h, w, out_c, oh, ow, k, stride, pad, groups } = d;
    let icg = in_c / groups;
    let ocg = out_c / groups;
    let mut y = Tensor::zeros(&[n, out_c, oh, ow]);
    let sample_out = out_c * oh * ow;
    let sample_in = in_c * h * w;
    y.data.par_chunks_mut(sample_out).enumerate().for_each(|(s, ys)| {
        let xs = &x.data[s * sample_in..(s + 1) * sample_in];
        for oc in 0..out_c {
            let g = oc / ocg;
            for ohh in 0..oh {
                for oww in 0..ow {
                    let mut acc = b.data[oc];
                    let ih0 = (ohh * stride) as isize - pad as isize;
                    let iw0 = (oww * stride) as isize - pad as isize;
                    for icl in 0..icg {
                        let ic = g * icg + icl;
                        for kh in 0..k {
                            let ih = ih0 + kh as isize;
                            if ih < 0 || ih >= h as isize {
                                continue;
                            }
                            for kw in 0..k {
                                let iw = iw0 + kw as isize;
                                if iw < 0 || iw >= w as isize {
                                    continue;
                                }
                                let wv = wt.data[((oc * icg + icl) * k + kh) * k + kw];
                                acc += wv * xs[at4(in_c, h, w, ic, ih as usize, iw as usize)];
                            }
                        }
                    }
                    ys[at4(out_c, oh, ow, oc, ohh, oww)] = acc;
                }
            }
        }
    });
    y
}

fn conv_bwd<S: Scalar>(
    x: &Tensor<S>,
    wt: &Tensor<S>,
    dy: &Tensor<S>,
    d: ConvDims,
    wrt: Wrt,
) -> (Tensor<S>, Tensor<S>, Tensor<S>) {
    let ConvDims { n, in_c, h, w, out_c, oh, ow, k, stride, pad, groups } = d;
    let icg = in_c / groups;
    let ocg = out_c / groups;
    let sample_out = out_c * oh * ow;
    let sample_in = in_c * h * w;

    let mut dx = Tensor::zeros(&x.shape);
    dx.data.par_chunks_mut(sample_in).enumerate().for_each(|(s, dxs)| {
        let dys = &dy.data[s * sample_out..(s + 1) * sample_out];
        for oc in 0..out_c {
            let g = oc / ocg;
            for ohh in 0..oh {
                for oww in 0..ow {
                    let gv = dys[at4(out_c, oh, ow, oc, ohh, oww)];
                    let ih0 = (ohh * stride) as isize - pad as isize;
                    let iw0 = (oww * stride) as isize - pad as isize;
                    for icl in 0..icg {
                        let ic = g * icg + icl;
                        for kh in 0..k {
                            let ih = ih0 + kh as isize;
                            if ih < 0 || ih >= h as isize {
                                continue;
                            }
                            for kw in 0..k {
                                let iw = iw0 + kw as isize;
                                if iw < 0 || iw >= w as isize {
                                    continue;
                                }
                                let wv = wt.data[((oc * icg + icl) * k + kh) * k + kw];
                                dxs[at4(in_c, h, w, ic, ih as usize, iw as usize)] += wv * gv;
                            }
                        }
                    }
                }
            }
        }
    });

    let mut dw = Tensor::zeros(&wt.shape);
    let mut db = Tensor::zeros(&[out_c]);
    if wrt == Wrt::All {
        let per_oc = icg * k * k;
        dw.data.par_chunks_mut(per_oc).enumerate().for_each(|(oc, dwoc)| {
            let g = oc / ocg;
            for s in 0..n {
                let xs = &x.data[s * sample_in..(s + 1) * sample_in];
                let dys = &dy.data[s * sample_out..(s + 1) * sample_out];
                for ohh in 0..oh {
                    for oww in 0..ow {
                        let gv = dys[at4(out_c, oh, ow, oc, ohh, oww)];
                        let ih0 = (ohh * stride) as isize - pad as isize;
                        let iw0 = (oww * stride) as isize - pad as isize;
                        for icl in 0..icg {
                            let ic = g * icg + icl;
                            for kh in 0..k {
                                let ih = ih0 + kh as isize;
                                if ih < 0 || ih >= h as isize {
                                    continue;
                                }
                                for kw in 0..k {
                                    let iw = iw0 + kw as isize;
                                    if iw < 0 || iw >= w as isize {
                                        continue;
                                    }
                                    dwoc[(icl * k + kh) * k + kw] +=
                                        gv * xs[at4(in_c, h, w, ic, ih as usize, iw as usize)];
                                }
                            }
                        }
                    }
                }
            }
        });
        db.data.iter_mut().enumerate().for_each(|(oc, dbo)| {
            let mut acc = S::ZERO;
            for s in 0..n {
                let dys = &dy.data[s * sample_out..(s + 1) * sample_out];
                for ohh in 0..oh {
                    for oww in 0..ow {
                        acc += dys[at4(out_c, oh, ow, oc, ohh, oww)];
                    }
                }
            }
            *dbo = acc;
        });
    }
    (dx, dw, db)
}

// ── batch norm ───────────────────────────────────────────────────────────

#[allow(clippy::too_many_arguments)]
fn bn_fwd<S: Scalar>(
    x: &Tensor<S>,
    scale: &Tensor<S>,
    shift: &Tensor<S>,
    rmean: &Tensor<S>,
    rvar: &Tensor<S>,
    n: usize,
    c: usize,
    spatial: usize,
    mode: Mode,
) -> (Tensor<S>, Aux<S>) {
    let eps = S::from_f64(BN_EPS);
    let (mean, inv_std): (Vec<S>, Vec<S>) = match mode {
        Mode::Train => {
            let cnt = S::from_usize(n * spatial);
            let mut mean = vec![S::ZERO; c];
            let mut var = vec![S::ZERO; c];
            for ci in 0..c {
                let mut acc = S::ZERO;
                for s in 0..n {
                    let base = (s * c + ci) * spatial;
                    for p in 0..spatial {
                        acc += x.data[base + p];
                    }
                }
                mean[ci] = acc / cnt;
            }
            for ci in 0..c {
                let mut acc = S::ZERO;
                for s in 0..n {
                    let base = (s * c + ci) * spatial;
                    for p in 0..spatial {
                        let d = x.data[base + p] - mean[ci];
                        acc += d * d;
                    }
                }
                var[ci] = acc / cnt;
            }
            let inv = var.iter().map(|&v| S::ONE / (v + eps).sqrt()).collect();
            (mean, inv)
        }
        Mode::Eval => {
            let inv = rvar.data.iter().map(|&v| S::ONE / (v + eps).sqrt()).collect();
            (rmean.data.clone(), inv)
        }
    };

    let mut y = Tensor::zeros(&x.shape);
    let per_sample = c * spatial;
    y.data.par_chunks_mut(per_sample).enumerate().for_each(|(s, ys)| {
        let xs = &x.data[s * per_sample..(s + 1) * per_sample];
        for ci in 0..c {
            let m = mean[ci];
            let is = inv_std[ci];
            let sc = scale.data[ci];
            let sh = shift.data[ci];
            for p in 0..spatial {
                let i = ci * spatial + p;
                ys[i] = sc * (xs[i] - m) * is + sh;
            }
        }
    });
    (y, Aux::BatchNorm { mean, inv_std })
}

#[allow(clippy::too_many_arguments)]
fn bn_bwd<S: Scalar>(
    x: &Tensor<S>,
    scale: &Tensor<S>,
    dy: &Tensor<S>,
    mean: &[S],
    inv_std: &[S],
    n: usize,
    c: usize,
    spatial: usize,
    mode: Mode,
    wrt: Wrt,
) -> (Tensor<S>, Tensor<S>, Tensor<S>) {
    let cnt = S::from_usize(n * spatial);
    let mut dx = Tensor::zeros(&x.shape);
    let mut dscale = Tensor::zeros(&[c]);
    let mut dshift = Tensor::zeros(&[c]);

    for ci in 0..c {
        let m = mean[ci];
        let is = inv_std[ci];
        let sc = scale.data[ci];
        // Channel-wise sums over batch and spatial positions.
        let mut sum_dy = S::ZERO;
        let mut sum_dy_xhat = S::ZERO;
        for s in 0..n {
            let base = (s * c + ci) * spatial;
            for p in 0..spatial {
                let g = dy.data[base + p];
                let xhat = (x.data[base + p] - m) * is;
                sum_dy += g;
                sum_dy_xhat += g * xhat;
            }
        }
        if wrt == Wrt::All {
            dscale.data[ci] = sum_dy_xhat;
            dshift.data[ci] = sum_dy;
        }
        match mode {
            Mode::Train => {
                // dx = (scale·inv_std/cnt) · (cnt·dy − Σdy − x̂·Σ(dy·x̂))
                let f = sc * is / cnt;
                for s in 0..n {
                    let base = (s * c + ci) * spatial;
                    for p in 0..spatial {
                        let g = dy.data[base + p];
                        let xhat = (x.data[base + p] - m) * is;
                        dx.data[base + p] = f * (cnt * g - sum_dy - xhat * sum_dy_xhat);
                    }
                }
            }
            Mode::Eval => {
                // Running stats are constants: dx = dy·scale·inv_std.
                let f = sc * is;
                for s in 0..n {
                    let base = (s * c + ci) * spatial;
                    for p in 0..spatial {
                        dx.data[base + p] = dy.data[base + p] * f;
                    }
                }
            }
        }
    }
    (dx, dscale, dshift)
}

/// Fold the batch statistics of a training forward pass into the running
/// mean/var parameters (momentum 0.1, unbiased batch variance).
pub fn update_running_stats(arch: &Arch, params: &mut ParamSet, pass: &ForwardPass<f32>) {
    debug_assert_eq!(pass.mode, Mode::Train);
    let n = pass.input.shape[0];
    for (idx, layer) in arch.layers.iter().enumerate() {
        let Layer::BatchNorm { c } = *layer else { continue };
        let Aux::BatchNorm { mean, inv_std } = &pass.aux[idx] else { continue };
        let spatial = pass.outs[idx].len() / (n * c);
        let cnt = (n * spatial) as f32;
        let unbias = if cnt > 1.0 { cnt / (cnt - 1.0) } else { 1.0 };
        let m = BN_MOMENTUM as f32;
        let eps = BN_EPS as f32;
        let rmean = params.get_mut(ParamId { layer: idx, name: ParamName::BnMean }).unwrap();
        for (r, &b) in rmean.data.iter_mut().zip(mean) {
            *r = (1.0 - m) * *r + m * b;
        }
        let rvar = params.get_mut(ParamId { layer: idx, name: ParamName::BnVar }).unwrap();
        for (r, &is) in rvar.data.iter_mut().zip(inv_std) {
            let biased = 1.0 / (is * is) - eps;
            *r = (1.0 - m) * *r + m * biased * unbias;
        }
    }
}

// ── pooling ──────────────────────────────────────────────────────────────

#[allow(clippy::too_many_arguments)]
fn max_pool_fwd<S: Scalar>(
    x: &Tensor<S>,
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    k: usize,
    stride: usize,
) -> (Tensor<S>, Aux<S>) {
    let mut y = Tensor::zeros(&[n, c, oh, ow]);
    let mut argmax = vec![0u32; n * c * oh * ow];
    let per_out = c * oh * ow;
    let per_in = c * h * w;
    y.data
        .par_chunks_mut(per_out)
        .zip(argmax.par_chunks_mut(per_out))
        .enumerate()
        .for_each(|(s, (ys, ams))| {
            let xs = &x.data[s * per_in..(s + 1) * per_in];
            for ci in 0..c {
                for ohh in 0..oh {
                    for oww in 0..ow {
                        let mut best = S::from_f64(f64::NEG_INFINITY);
                        let mut best_i = 0usize;
                        for kh in 0..k {
                            for kw in 0..k {
                                let ih = ohh * stride + kh;
                                let iw = oww * stride + kw;
                                let i = at4(c, h, w, ci, ih, iw);
                                // strict '>' keeps the first index on ties
                                if xs[i] > best {
                                    best = xs[i];
                                    best_i = i;
                                }
                            }
                        }
                        let o = at4(c, oh, ow, ci, ohh, oww);
                        ys[o] = best;
                        // store the global flat index for direct scatter
                        ams[o] = (s * per_in + best_i) as u32;
                    }
                }
            }
        });
    (y, Aux::MaxPool { argmax })
}

#[allow(clippy::too_many_arguments)]
fn avg_pool_fwd<S: Scalar>(
    x: &Tensor<S>,
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    k: usize,
    stride: usize,
) -> Tensor<S> {
    let mut y = Tensor::zeros(&[n, c, oh, ow]);
    let inv = S::ONE / S::from_usize(k * k);
    let per_out = c * oh * ow;
    let per_in = c * h * w;
    y.data.par_chunks_mut(per_out).enumerate().for_each(|(s, ys)| {
        let xs = &x.data[s * per_in..(s + 1) * per_in];
        for ci in 0..c {
            for ohh in 0..oh {
                for oww in 0..ow {
                    let mut acc = S::ZERO;
                    for kh in 0..k {
                        for kw in 0..k {
                            acc += xs[at4(c, h, w, ci, ohh * stride + kh, oww * stride + kw)];
                        }
                    }
                    ys[at4(c, oh, ow, ci, ohh, oww)] = acc * inv;
                }
            }
        }
    });
    y
}

#[allow(clippy::too_many_arguments)]
fn avg_pool_bwd<S: Scalar>(
    dy: &Tensor<S>,
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    k: usize,
    stride: usize,
) -> Tensor<S> {
    let mut dx = Tensor::zeros(&[n, c, h, w]);
    let inv = S::ONE / S::from_usize(k * k);
    let per_out = c * oh * ow;
    let per_in = c * h * w;
    dx.data.par_chunks_mut(per_in).enumerate().for_each(|(s, dxs)| {
        let dys = &dy.data[s * per_out..(s + 1) * per_out];
        for ci in 0..c {
            for ohh in 0..oh {
                for oww in 0..ow {
                    let g = dys[at4(c, oh, ow, ci, ohh, oww)] * inv;
                    for kh in 0..k {
                        for kw in 0..k {
                            dxs[at4(c, h, w, ci, ohh * stride + kh, oww * stride + kw)] += g;
                        }
                    }
                }
            }
        }
    });
    dx
}

// ── losses ───────────────────────────────────────────────────────────────

/// Mean cross-entropy over the batch with the gradient w.r.t. logits.
pub fn cross_entropy<S: Scalar>(logits: &Tensor<S>, labels: &[usize]) -> (f64, Tensor<S>) {
    let n = logits.shape[0];
    let c = logits.shape[1];
    assert_eq!(labels.len(), n);
    let mut dl = Tensor::zeros(&logits.shape);
    let mut loss = 0.0f64;
    let invn = S::ONE / S::from_usize(n);
    for s in 0..n {
        let row = &logits.data[s * c..(s + 1) * c];
        let mut m = row[0];
        for &v in row.iter() {
            m = m.maxv(v);
        }
        let mut z = S::ZERO;
        for &v in row.iter() {
            z += (v - m).exp();
        }
        let lz = z.ln();
        loss -= ((row[labels[s]] - m) - lz).to_f64();
        for j in 0..c {
            let p = (row[j] - m).exp() / z;
            let t = if j == labels[s] { S::ONE } else { S::ZERO };
            dl.data[s * c + j] = (p - t) * invn;
        }
    }
    (loss / n as f64, dl)
}

/// Fraction of rows whose argmax equals the label.
pub fn accuracy(logits: &Tensor<f32>, labels: &[usize]) -> f64 {
    let n = logits.shape[0];
    let c = logits.shape[1];
    let mut hit = 0usize;
    for s in 0..n {
        if argmax_row(&logits.data[s * c..(s + 1) * c]) == labels[s] {
            hit += 1;
        }
    }
    hit as f64 / n as f64
}

/// Index of the row maximum (first index on ties).
pub fn argmax_row(row: &[f32]) -> usize {
    let mut best = 0usize;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}
