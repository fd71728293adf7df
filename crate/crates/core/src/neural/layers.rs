//! Per-layer forward and backward rules of the sequential engine.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::gemm::gemm;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// One stage of a sequential network.
///
/// Shapes: convolution-type layers take `[planes, frames, bins]`; recurrent,
/// linear and softmax layers take `[frames, features]`. `Flatten` and
/// `Concat` bridge the two.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerSpec {
    /// Stride-1 convolution with 'same' zero padding; kernel sizes must be odd.
    Conv2d {
        in_planes: usize,
        out_planes: usize,
        kernel_h: usize,
        kernel_w: usize,
    },
    Relu,
    /// Inverted dropout, active only in training mode.
    Dropout { p: f64 },
    /// Max over non-overlapping groups of `k` bins (trailing bins dropped).
    MaxPoolFreq { k: usize },
    /// `[planes, frames, bins] -> [frames, planes * bins]`.
    Flatten,
    /// Runs each branch on a plane range of the input and joins the
    /// `[frames, features]` outputs along the feature axis.
    Concat { branches: Vec<Branch> },
    /// Bidirectional LSTM; output is the forward stream then the backward stream.
    BiLstm { input: usize, hidden: usize },
    /// Per-frame affine map.
    Linear { input: usize, output: usize },
    Sigmoid,
    /// Per-frame softmax over features.
    Softmax,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Branch {
    /// Half-open plane range `[start, end)` fed to this branch.
    pub planes: [usize; 2],
    pub layers: Vec<LayerSpec>,
}

impl LayerSpec {
    pub fn name(&self) -> &'static str {
        match self {
            LayerSpec::Conv2d { .. } => "conv2d",
            LayerSpec::Relu => "relu",
            LayerSpec::Dropout { .. } => "dropout",
            LayerSpec::MaxPoolFreq { .. } => "max_pool_freq",
            LayerSpec::Flatten => "flatten",
            LayerSpec::Concat { .. } => "concat",
            LayerSpec::BiLstm { .. } => "bi_lstm",
            LayerSpec::Linear { .. } => "linear",
            LayerSpec::Sigmoid => "sigmoid",
            LayerSpec::Softmax => "softmax",
        }
    }

    pub fn param_count(&self) -> usize {
        match *self {
            LayerSpec::Conv2d {
                in_planes,
                out_planes,
                kernel_h,
                kernel_w,
            } => out_planes * in_planes * kernel_h * kernel_w + out_planes,
            LayerSpec::BiLstm { input, hidden } => 2 * (4 * hidden * input + 4 * hidden * hidden + 4 * hidden),
            LayerSpec::Linear { input, output } => output * input + output,
            LayerSpec::Concat { ref branches } => branches.iter().flat_map(|b| &b.layers).map(|l| l.param_count()).sum(),
            _ => 0,
        }
    }

    pub(crate) fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(format!("{}: {msg}", self.name())));
        match *self {
            LayerSpec::Conv2d {
                in_planes,
                out_planes,
                kernel_h,
                kernel_w,
            } => {
                if in_planes == 0 || out_planes == 0 || kernel_h % 2 == 0 || kernel_w % 2 == 0 {
                    return bad("planes must be positive and kernel sizes odd".into());
                }
            }
            LayerSpec::Dropout { p } if !(0.0..1.0).contains(&p) => return bad(format!("p = {p} outside [0, 1)")),
            LayerSpec::MaxPoolFreq { k } if k == 0 => return bad("k must be positive".into()),
            LayerSpec::BiLstm { input, hidden } if input == 0 || hidden == 0 => return bad("sizes must be positive".into()),
            LayerSpec::Linear { input, output } if input == 0 || output == 0 => return bad("sizes must be positive".into()),
            LayerSpec::Concat { ref branches } => {
                if branches.is_empty() {
                    return bad("needs at least one branch".into());
                }
                for b in branches {
                    if b.planes[0] >= b.planes[1] {
                        return bad(format!("empty plane range {:?}", b.planes));
                    }
                    for l in &b.layers {
                        l.validate()?;
                    }
                }
            }
            _ => {}
        }
        Ok(())
    }

    /// Uniform `±1/sqrt(fan_in)` for weights and biases alike.
    pub(crate) fn init(&self, params: &mut [f64], rng: &mut ChaCha8Rng) {
        let fill = |p: &mut [f64], fan_in: usize, rng: &mut ChaCha8Rng| {
            let a = 1.0 / (fan_in.max(1) as f64).sqrt();
            p.iter_mut().for_each(|v| *v = rng.gen_range(-a..a));
        };
        match *self {
            LayerSpec::Conv2d {
                in_planes,
                kernel_h,
                kernel_w,
                ..
            } => fill(params, in_planes * kernel_h * kernel_w, rng),
            LayerSpec::BiLstm { hidden, .. } => fill(params, hidden, rng),
            LayerSpec::Linear { input, .. } => fill(params, input, rng),
            LayerSpec::Concat { ref branches } => {
                let mut off = 0;
                for l in branches.iter().flat_map(|b| &b.layers) {
                    let n = l.param_count();
                    l.init(&mut params[off..off + n], rng);
                    off += n;
                }
            }
            _ => {}
        }
    }
}

pub(crate) struct Ctx {
    pub train: bool,
    pub rng: ChaCha8Rng,
}

pub(crate) struct LstmTrace {
    /// Post-nonlinearity gates `[T, 4H]` in order i, f, g, o.
    gates: Vec<f64>,
    c: Vec<f64>,
    h: Vec<f64>,
}

pub(crate) enum Cache {
    Conv(Tensor),
    Relu(Tensor),
    Dropout(Option<Vec<f64>>),
    MaxPool { argmax: Vec<usize>, in_shape: Vec<usize> },
    Flatten(Vec<usize>),
    Concat { branches: Vec<Vec<Cache>>, widths: Vec<usize>, in_shape: Vec<usize> },
    BiLstm { x: Tensor, dirs: [LstmTrace; 2] },
    Linear(Tensor),
    Sigmoid(Tensor),
    Softmax(Tensor),
}

fn dim_err(layer: &str, expected: String, got: &[usize]) -> Error {
    Error::Dimension(format!("{layer}: expected input {expected}, got shape {got:?}"))
}

fn expect_3d(x: &Tensor, layer: &LayerSpec, planes: Option<usize>) -> Result<(usize, usize, usize)> {
    match *x.shape() {
        [c, t, f] if planes.map_or(true, |p| p == c) => Ok((c, t, f)),
        _ => Err(dim_err(
            layer.name(),
            format!("[{}, frames, bins]", planes.map_or("planes".into(), |p| p.to_string())),
            x.shape(),
        )),
    }
}

fn expect_2d(x: &Tensor, layer: &LayerSpec, width: Option<usize>) -> Result<(usize, usize)> {
    match *x.shape() {
        [t, d] if width.map_or(true, |w| w == d) => Ok((t, d)),
        _ => Err(dim_err(
            layer.name(),
            format!("[frames, {}]", width.map_or("features".into(), |w| w.to_string())),
            x.shape(),
        )),
    }
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn forward_seq(specs: &[LayerSpec], params: &[f64], mut x: Tensor, ctx: &mut Ctx) -> Result<(Tensor, Vec<Cache>)> {
    let mut caches = Vec::with_capacity(specs.len());
    let mut off = 0;
    for (i, spec) in specs.iter().enumerate() {
        let n = spec.param_count();
        let (y, cache) = forward_layer(spec, &params[off..off + n], x, ctx).map_err(|e| match e {
            Error::Dimension(m) => Error::Dimension(format!("layer {i} ({m})")),
            other => other,
        })?;
        off += n;
        caches.push(cache);
        x = y;
    }
    Ok((x, caches))
}

pub(crate) fn backward_seq(specs: &[LayerSpec], params: &[f64], caches: &[Cache], mut dy: Tensor, grads: &mut [f64]) -> Result<Tensor> {
    if caches.len() != specs.len() {
        return Err(Error::State(format!(
            "backward needs the cache of a training forward pass ({} cached of {} layers)",
            caches.len(),
            specs.len()
        )));
    }
    let offsets: Vec<usize> = specs
        .iter()
        .scan(0, |acc, s| {
            let o = *acc;
            *acc += s.param_count();
            Some(o)
        })
        .collect();
    for (i, spec) in specs.iter().enumerate().rev() {
        let (o, n) = (offsets[i], spec.param_count());
        dy = backward_layer(spec, &params[o..o + n], &caches[i], dy, &mut grads[o..o + n])?;
    }
    Ok(dy)
}

fn forward_layer(spec: &LayerSpec, params: &[f64], x: Tensor, ctx: &mut Ctx) -> Result<(Tensor, Cache)> {
    match *spec {
        LayerSpec::Conv2d {
            in_planes,
            out_planes,
            kernel_h,
            kernel_w,
        } => {
            let (_, t, f) = expect_3d(&x, spec, Some(in_planes))?;
            let y = conv_forward(&x, params, in_planes, out_planes, kernel_h, kernel_w, t, f);
            Ok((y, Cache::Conv(x)))
        }
        LayerSpec::Relu => {
            let mut y = x;
            y.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
            Ok((y.clone(), Cache::Relu(y)))
        }
        LayerSpec::Dropout { p } => {
            if !ctx.train || p == 0.0 {
                return Ok((x, Cache::Dropout(None)));
            }
            let keep = 1.0 / (1.0 - p);
            let mask: Vec<f64> = (0..x.len()).map(|_| if ctx.rng.gen::<f64>() >= p { keep } else { 0.0 }).collect();
            let mut y = x;
            y.data_mut().iter_mut().zip(&mask).for_each(|(v, m)| *v *= m);
            Ok((y, Cache::Dropout(Some(mask))))
        }
        LayerSpec::MaxPoolFreq { k } => {
            let (c, t, f) = expect_3d(&x, spec, None)?;
            let q = f / k;
            let mut y = Vec::with_capacity(c * t * q);
            let mut argmax = Vec::with_capacity(c * t * q);
            let d = x.data();
            for row in 0..c * t {
                for j in 0..q {
                    let base = row * f + j * k;
                    let mut best = base;
                    for r in base + 1..base + k {
                        if d[r] > d[best] {
                            best = r;
                        }
                    }
                    y.push(d[best]);
                    argmax.push(best);
                }
            }
            Ok((
                Tensor::new(vec![c, t, q], y)?,
                Cache::MaxPool {
                    argmax,
                    in_shape: x.shape().to_vec(),
                },
            ))
        }
        LayerSpec::Flatten => {
            let (c, t, f) = expect_3d(&x, spec, None)?;
            let d = x.data();
            let mut y = vec![0.0; c * t * f];
            for p in 0..c {
                for tt in 0..t {
                    y[tt * c * f + p * f..tt * c * f + (p + 1) * f].copy_from_slice(&d[(p * t + tt) * f..(p * t + tt + 1) * f]);
                }
            }
            Ok((Tensor::new(vec![t, c * f], y)?, Cache::Flatten(x.shape().to_vec())))
        }
        LayerSpec::Concat { ref branches } => {
            let (c, t, f) = expect_3d(&x, spec, None)?;
            let mut outs = Vec::with_capacity(branches.len());
            let mut caches = Vec::with_capacity(branches.len());
            let mut off = 0;
            for b in branches {
                let [s, e] = b.planes;
                if e > c {
                    return Err(dim_err(spec.name(), format!("at least {e} planes"), x.shape()));
                }
                let sub = Tensor::new(vec![e - s, t, f], x.data()[s * t * f..e * t * f].to_vec())?;
                let n: usize = b.layers.iter().map(|l| l.param_count()).sum();
                let (y, cache) = forward_seq(&b.layers, &params[off..off + n], sub, ctx)?;
                off += n;
                outs.push(y);
                caches.push(cache);
            }
            let frames = match outs[0].shape() {
                [tt, _] => *tt,
                s => return Err(dim_err(spec.name(), "branch outputs [frames, features]".into(), s)),
            };
            let mut widths = Vec::with_capacity(outs.len());
            for o in &outs {
                match *o.shape() {
                    [tt, w] if tt == frames => widths.push(w),
                    ref s => return Err(dim_err(spec.name(), format!("branch outputs [{frames}, features]"), s)),
                }
            }
            let total: usize = widths.iter().sum();
            let mut y = Vec::with_capacity(frames * total);
            for tt in 0..frames {
                for o in &outs {
                    y.extend_from_slice(o.row(tt));
                }
            }
            Ok((
                Tensor::new(vec![frames, total], y)?,
                Cache::Concat {
                    branches: caches,
                    widths,
                    in_shape: x.shape().to_vec(),
                },
            ))
        }
        LayerSpec::BiLstm { input, hidden } => {
            let (t, _) = expect_2d(&x, spec, Some(input))?;
            let per_dir = 4 * hidden * input + 4 * hidden * hidden + 4 * hidden;
            let fwd = lstm_forward(&x, &params[..per_dir], input, hidden, false);
            let bwd = lstm_forward(&x, &params[per_dir..], input, hidden, true);
            let mut y = vec![0.0; t * 2 * hidden];
            for tt in 0..t {
                y[tt * 2 * hidden..tt * 2 * hidden + hidden].copy_from_slice(&fwd.h[tt * hidden..(tt + 1) * hidden]);
                y[tt * 2 * hidden + hidden..(tt + 1) * 2 * hidden].copy_from_slice(&bwd.h[tt * hidden..(tt + 1) * hidden]);
            }
            Ok((Tensor::new(vec![t, 2 * hidden], y)?, Cache::BiLstm { x, dirs: [fwd, bwd] }))
        }
        LayerSpec::Linear { input, output } => {
            let (t, _) = expect_2d(&x, spec, Some(input))?;
            let (w, b) = params.split_at(output * input);
            let mut y = vec![0.0; t * output];
            for row in y.chunks_mut(output) {
                row.copy_from_slice(b);
            }
            gemm(t, input, output, x.data(), false, w, true, &mut y, true);
            Ok((Tensor::new(vec![t, output], y)?, Cache::Linear(x)))
        }
        LayerSpec::Sigmoid => {
            let mut y = x;
            y.data_mut().iter_mut().for_each(|v| *v = sigmoid(*v));
            Ok((y.clone(), Cache::Sigmoid(y)))
        }
        LayerSpec::Softmax => {
            let (_, d) = expect_2d(&x, spec, None)?;
            let mut y = x;
            for row in y.data_mut().chunks_mut(d) {
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut s = 0.0;
                for v in row.iter_mut() {
                    *v = (*v - m).exp();
                    s += *v;
                }
                row.iter_mut().for_each(|v| *v /= s);
            }
            Ok((y.clone(), Cache::Softmax(y)))
        }
    }
}

fn backward_layer(spec: &LayerSpec, params: &[f64], cache: &Cache, dy: Tensor, grads: &mut [f64]) -> Result<Tensor> {
    let mismatch = || Error::State(format!("{}: cache does not belong to this layer", spec.name()));
    match (spec, cache) {
        (
            &LayerSpec::Conv2d {
                in_planes,
                out_planes,
                kernel_h,
                kernel_w,
            },
            Cache::Conv(x),
        ) => Ok(conv_backward(x, params, &dy, grads, in_planes, out_planes, kernel_h, kernel_w)),
        (LayerSpec::Relu, Cache::Relu(y)) => {
            let mut dx = dy;
            dx.data_mut().iter_mut().zip(y.data()).for_each(|(g, &v)| {
                if v <= 0.0 {
                    *g = 0.0
                }
            });
            Ok(dx)
        }
        (LayerSpec::Dropout { .. }, Cache::Dropout(mask)) => {
            let mut dx = dy;
            if let Some(m) = mask {
                dx.data_mut().iter_mut().zip(m).for_each(|(g, m)| *g *= m);
            }
            Ok(dx)
        }
        (LayerSpec::MaxPoolFreq { .. }, Cache::MaxPool { argmax, in_shape }) => {
            let mut dx = Tensor::zeros(in_shape.clone());
            for (g, &i) in dy.data().iter().zip(argmax) {
                dx.data_mut()[i] += g;
            }
            Ok(dx)
        }
        (LayerSpec::Flatten, Cache::Flatten(in_shape)) => {
            let (c, t, f) = (in_shape[0], in_shape[1], in_shape[2]);
            let mut dx = vec![0.0; c * t * f];
            let d = dy.data();
            for p in 0..c {
                for tt in 0..t {
                    dx[(p * t + tt) * f..(p * t + tt + 1) * f].copy_from_slice(&d[tt * c * f + p * f..tt * c * f + (p + 1) * f]);
                }
            }
            Tensor::new(in_shape.clone(), dx)
        }
        (
            LayerSpec::Concat { branches },
            Cache::Concat {
                branches: caches,
                widths,
                in_shape,
            },
        ) => {
            let (t, f) = (in_shape[1], in_shape[2]);
            let total: usize = widths.iter().sum();
            let frames = dy.shape()[0];
            let mut dx = Tensor::zeros(in_shape.clone());
            let (mut poff, mut col) = (0, 0);
            for ((b, cache), &w) in branches.iter().zip(caches).zip(widths) {
                let n: usize = b.layers.iter().map(|l| l.param_count()).sum();
                let mut dyb = Vec::with_capacity(frames * w);
                for tt in 0..frames {
                    dyb.extend_from_slice(&dy.data()[tt * total + col..tt * total + col + w]);
                }
                let dxb = backward_seq(
                    &b.layers,
                    &params[poff..poff + n],
                    cache,
                    Tensor::new(vec![frames, w], dyb)?,
                    &mut grads[poff..poff + n],
                )?;
                let [s, _] = b.planes;
                for (d, g) in dx.data_mut()[s * t * f..].iter_mut().zip(dxb.data()) {
                    *d += g;
                }
                poff += n;
                col += w;
            }
            Ok(dx)
        }
        (&LayerSpec::BiLstm { input, hidden }, Cache::BiLstm { x, dirs }) => {
            let per_dir = 4 * hidden * input + 4 * hidden * hidden + 4 * hidden;
            let mut dx = Tensor::zeros(x.shape().to_vec());
            let (gf, gb) = grads.split_at_mut(per_dir);
            lstm_backward(x, &params[..per_dir], &dirs[0], &dy, 0, gf, dx.data_mut(), input, hidden, false);
            lstm_backward(x, &params[per_dir..], &dirs[1], &dy, hidden, gb, dx.data_mut(), input, hidden, true);
            Ok(dx)
        }
        (&LayerSpec::Linear { input, output }, Cache::Linear(x)) => {
            let t = x.shape()[0];
            let (w, _) = params.split_at(output * input);
            let (gw, gb) = grads.split_at_mut(output * input);
            gemm(output, t, input, dy.data(), true, x.data(), false, gw, true);
            for row in dy.data().chunks(output) {
                gb.iter_mut().zip(row).for_each(|(g, v)| *g += v);
            }
            let mut dx = vec![0.0; t * input];
            gemm(t, output, input, dy.data(), false, w, false, &mut dx, false);
            Tensor::new(vec![t, input], dx)
        }
        (LayerSpec::Sigmoid, Cache::Sigmoid(y)) => {
            let mut dx = dy;
            dx.data_mut().iter_mut().zip(y.data()).for_each(|(g, &s)| *g *= s * (1.0 - s));
            Ok(dx)
        }
        (LayerSpec::Softmax, Cache::Softmax(y)) => {
            let d = y.shape()[1];
            let mut dx = dy;
            for (g, p) in dx.data_mut().chunks_mut(d).zip(y.data().chunks(d)) {
                let dot: f64 = g.iter().zip(p).map(|(a, b)| a * b).sum();
                g.iter_mut().zip(p).for_each(|(a, b)| *a = b * (*a - dot));
            }
            Ok(dx)
        }
        _ => Err(mismatch()),
    }
}

#[allow(clippy::too_many_arguments)]
fn conv_forward(x: &Tensor, params: &[f64], cin: usize, cout: usize, kh: usize, kw: usize, t: usize, f: usize) -> Tensor {
    let (w, b) = params.split_at(cout * cin * kh * kw);
    let (ph, pw) = (kh / 2, kw / 2);
    let xd = x.data();
    let mut y = vec![0.0; cout * t * f];
    for o in 0..cout {
        let yo = &mut y[o * t * f..(o + 1) * t * f];
        yo.iter_mut().for_each(|v| *v = b[o]);
        for c in 0..cin {
            for i in 0..kh {
                for j in 0..kw {
                    let wv = w[((o * cin + c) * kh + i) * kw + j];
                    if wv == 0.0 {
                        continue;
                    }
                    let (f_lo, f_hi) = (pw.saturating_sub(j), (f + pw).saturating_sub(j).min(f));
                    for tt in 0..t {
                        let ts = tt + i;
                        if ts < ph || ts - ph >= t {
                            continue;
                        }
                        let xr = &xd[(c * t + ts - ph) * f..(c * t + ts - ph + 1) * f];
                        let yr = &mut yo[tt * f..(tt + 1) * f];
                        for ff in f_lo..f_hi {
                            yr[ff] += wv * xr[ff + j - pw];
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![cout, t, f], y).expect("conv output shape")
}

#[allow(clippy::too_many_arguments)]
fn conv_backward(x: &Tensor, params: &[f64], dy: &Tensor, grads: &mut [f64], cin: usize, cout: usize, kh: usize, kw: usize) -> Tensor {
    let (t, f) = (x.shape()[1], x.shape()[2]);
    let nw = cout * cin * kh * kw;
    let w = &params[..nw];
    let (gw, gb) = grads.split_at_mut(nw);
    let (ph, pw) = (kh / 2, kw / 2);
    let xd = x.data();
    let dyd = dy.data();
    let mut dx = vec![0.0; cin * t * f];
    for o in 0..cout {
        let dyo = &dyd[o * t * f..(o + 1) * t * f];
        gb[o] += dyo.iter().sum::<f64>();
        for c in 0..cin {
            for i in 0..kh {
                for j in 0..kw {
                    let widx = ((o * cin + c) * kh + i) * kw + j;
                    let wv = w[widx];
                    let (f_lo, f_hi) = (pw.saturating_sub(j), (f + pw).saturating_sub(j).min(f));
                    let mut acc = 0.0;
                    for tt in 0..t {
                        let ts = tt + i;
                        if ts < ph || ts - ph >= t {
                            continue;
                        }
                        let xrow = (c * t + ts - ph) * f;
                        let gr = &dyo[tt * f..(tt + 1) * f];
                        let xr = &xd[xrow..xrow + f];
                        let dxr = &mut dx[xrow..xrow + f];
                        for ff in f_lo..f_hi {
                            let xi = ff + j - pw;
                            acc += gr[ff] * xr[xi];
                            dxr[xi] += wv * gr[ff];
                        }
                    }
                    gw[widx] += acc;
                }
            }
        }
    }
    Tensor::new(vec![cin, t, f], dx).expect("conv input shape")
}

fn lstm_forward(x: &Tensor, params: &[f64], d: usize, h: usize, reverse: bool) -> LstmTrace {
    let t = x.shape()[0];
    let g4 = 4 * h;
    let w = &params[..g4 * d];
    let u = &params[g4 * d..g4 * d + g4 * h];
    let b = &params[g4 * d + g4 * h..g4 * d + g4 * h + g4];
    let mut gates = vec![0.0; t * g4];
    for row in gates.chunks_mut(g4) {
        row.copy_from_slice(b);
    }
    gemm(t, d, g4, x.data(), false, w, true, &mut gates, true);
    let mut c = vec![0.0; t * h];
    let mut hs = vec![0.0; t * h];
    let zeros = vec![0.0; h];
    for step in 0..t {
        let tt = if reverse { t - 1 - step } else { step };
        let prev = if step == 0 {
            None
        } else if reverse {
            Some(tt + 1)
        } else {
            Some(tt - 1)
        };
        let (h_prev, c_prev): (Vec<f64>, Vec<f64>) = match prev {
            Some(p) => (hs[p * h..(p + 1) * h].to_vec(), c[p * h..(p + 1) * h].to_vec()),
            None => (zeros.clone(), zeros.clone()),
        };
        let g = &mut gates[tt * g4..(tt + 1) * g4];
        for (r, gv) in g.iter_mut().enumerate() {
            let ur = &u[r * h..(r + 1) * h];
            *gv += ur.iter().zip(&h_prev).map(|(a, b)| a * b).sum::<f64>();
        }
        for j in 0..h {
            let i = sigmoid(g[j]);
            let fg = sigmoid(g[h + j]);
            let gg = g[2 * h + j].tanh();
            let o = sigmoid(g[3 * h + j]);
            g[j] = i;
            g[h + j] = fg;
            g[2 * h + j] = gg;
            g[3 * h + j] = o;
            let cv = fg * c_prev[j] + i * gg;
            c[tt * h + j] = cv;
            hs[tt * h + j] = o * cv.tanh();
        }
    }
    LstmTrace { gates, c, h: hs }
}

#[allow(clippy::too_many_arguments)]
fn lstm_backward(
    x: &Tensor,
    params: &[f64],
    tr: &LstmTrace,
    dy: &Tensor,
    col: usize,
    grads: &mut [f64],
    dx: &mut [f64],
    d: usize,
    h: usize,
    reverse: bool,
) {
    let t = x.shape()[0];
    let g4 = 4 * h;
    let w = &params[..g4 * d];
    let u = &params[g4 * d..g4 * d + g4 * h];
    let (gw, rest) = grads.split_at_mut(g4 * d);
    let (gu, gb) = rest.split_at_mut(g4 * h);
    let width = dy.shape()[1];
    let mut dxg = vec![0.0; t * g4];
    let mut dh_next = vec![0.0; h];
    let mut dc_next = vec![0.0; h];
    let zeros = vec![0.0; h];
    for step in (0..t).rev() {
        let tt = if reverse { t - 1 - step } else { step };
        let prev = if step == 0 {
            None
        } else if reverse {
            Some(tt + 1)
        } else {
            Some(tt - 1)
        };
        let (h_prev, c_prev) = match prev {
            Some(p) => (&tr.h[p * h..(p + 1) * h], &tr.c[p * h..(p + 1) * h]),
            None => (&zeros[..], &zeros[..]),
        };
        let g = &tr.gates[tt * g4..(tt + 1) * g4];
        let dg = &mut dxg[tt * g4..(tt + 1) * g4];
        for j in 0..h {
            let dh = dy.data()[tt * width + col + j] + dh_next[j];
            let (i, fg, gg, o) = (g[j], g[h + j], g[2 * h + j], g[3 * h + j]);
            let tc = tr.c[tt * h + j].tanh();
            let dc = dh * o * (1.0 - tc * tc) + dc_next[j];
            dg[j] = dc * gg * i * (1.0 - i);
            dg[h + j] = dc * c_prev[j] * fg * (1.0 - fg);
            dg[2 * h + j] = dc * i * (1.0 - gg * gg);
            dg[3 * h + j] = dh * tc * o * (1.0 - o);
            dc_next[j] = dc * fg;
        }
        dh_next.iter_mut().for_each(|v| *v = 0.0);
        for (r, &dgr) in dg.iter().enumerate() {
            if dgr == 0.0 {
                continue;
            }
            let ur = &u[r * h..(r + 1) * h];
            let gur = &mut gu[r * h..(r + 1) * h];
            for j in 0..h {
                gur[j] += dgr * h_prev[j];
                dh_next[j] += ur[j] * dgr;
            }
        }
    }
    gemm(g4, t, d, &dxg, true, x.data(), false, gw, true);
    for row in dxg.chunks(g4) {
        gb.iter_mut().zip(row).for_each(|(a, b)| *a += b);
    }
    gemm(t, g4, d, &dxg, false, w, false, dx, true);
}
