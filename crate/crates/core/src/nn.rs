//! Differentiable network building blocks.
//!
//! Two levels live here. The free functions (`conv2d`, `batchnorm`,
//! activations, `maxpool2x2`) are tape ops over [`Var`] handles. The layer
//! structs ([`Conv2d`], [`ConvTranspose2d`], [`BatchNorm2d`], [`ResBlock`])
//! own persistent parameters as [`Tensor`]s and are *leased* onto a tape for
//! one step: `lease` installs each parameter as a tape leaf exactly once, so
//! a network that runs forward several times in a step (a discriminator
//! scoring real, fake and mixed batches) accumulates all gradients onto the
//! same leaves.
//!
//! Initialization follows the DCGAN lineage: conv and deconv weights are a
//! truncated Gaussian (mean 0, std 0.02, redrawn beyond 2σ), biases zero,
//! BN gamma ~ N(1, 0.02), beta zero. BN uses eps 1e-5 and momentum 0.1,
//! where the momentum weights the new batch statistic:
//! `running = (1 - momentum) * running + momentum * batch`.

use std::cell::RefCell;
use std::collections::HashMap;

use crate::conv;
use crate::error::{Error, Result};
use crate::ops;
use crate::rng::Rng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const BN_EPS: f32 = 1e-5;
pub const BN_MOMENTUM: f32 = 0.1;
pub const INIT_STD: f32 = 0.02;

// ---------------------------------------------------------------------------
// Activations
// ---------------------------------------------------------------------------

pub fn relu(tape: &mut Tape, x: Var) -> Var {
    let out: Vec<f32> = tape.value(x).data().iter().map(|v| v.max(0.0)).collect();
    let value = Tensor::from_vec(tape.value(x).shape(), out).expect("same shape");
    let rg = tape.requires_grad(x);
    tape.record(
        "relu",
        value,
        rg,
        Box::new(move |t, g, grads| {
            t.accum_grad(grads, x.0, |buf| {
                for ((o, gi), &v) in buf.iter_mut().zip(g.data()).zip(t.value(x).data()) {
                    if v > 0.0 {
                        *o += gi;
                    }
                }
            });
        }),
    )
}

pub fn leaky_relu(tape: &mut Tape, x: Var, slope: f32) -> Var {
    let out: Vec<f32> = tape
        .value(x)
        .data()
        .iter()
        .map(|&v| if v > 0.0 { v } else { slope * v })
        .collect();
    let value = Tensor::from_vec(tape.value(x).shape(), out).expect("same shape");
    let rg = tape.requires_grad(x);
    tape.record(
        "leaky_relu",
        value,
        rg,
        Box::new(move |t, g, grads| {
            t.accum_grad(grads, x.0, |buf| {
                for ((o, gi), &v) in buf.iter_mut().zip(g.data()).zip(t.value(x).data()) {
                    *o += gi * if v > 0.0 { 1.0 } else { slope };
                }
            });
        }),
    )
}

pub fn tanh(tape: &mut Tape, x: Var) -> Var {
    let out: Vec<f32> = tape.value(x).data().iter().map(|v| v.tanh()).collect();
    let value = Tensor::from_vec(tape.value(x).shape(), out).expect("same shape");
    let rg = tape.requires_grad(x);
    let y = out_snapshot(&value);
    tape.record(
        "tanh",
        value,
        rg,
        Box::new(move |t, g, grads| {
            t.accum_grad(grads, x.0, |buf| {
                for ((o, gi), &yv) in buf.iter_mut().zip(g.data()).zip(y.iter()) {
                    *o += gi * (1.0 - yv * yv);
                }
            });
        }),
    )
}

pub fn sigmoid(tape: &mut Tape, x: Var) -> Var {
    let out: Vec<f32> = tape
        .value(x)
        .data()
        .iter()
        .map(|v| 1.0 / (1.0 + (-v).exp()))
        .collect();
    let value = Tensor::from_vec(tape.value(x).shape(), out).expect("same shape");
    let rg = tape.requires_grad(x);
    let y = out_snapshot(&value);
    tape.record(
        "sigmoid",
        value,
        rg,
        Box::new(move |t, g, grads| {
            t.accum_grad(grads, x.0, |buf| {
                for ((o, gi), &yv) in buf.iter_mut().zip(g.data()).zip(y.iter()) {
                    *o += gi * yv * (1.0 - yv);
                }
            });
        }),
    )
}

fn out_snapshot(t: &Tensor) -> std::rc::Rc<[f32]> {
    t.data().into()
}

// ---------------------------------------------------------------------------
// Pooling
// ---------------------------------------------------------------------------

/// 2×2 max pooling with stride 2. Requires even spatial dims. Ties resolve
/// to the first (row-major) occurrence so the backward scatter is unique.
pub fn maxpool2x2(tape: &mut Tape, x: Var) -> Result<Var> {
    let (n, c, h, w) = tape.value(x).dims4()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::contract(format!(
            "maxpool2x2 needs even spatial dims, got {h}x{w}"
        )));
    }
    let (oh, ow) = (h / 2, w / 2);
    let src = tape.value(x).data();
    let mut out = vec![0.0f32; n * c * oh * ow];
    let mut argmax = vec![0usize; n * c * oh * ow];
    for nc in 0..n * c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best_idx = (nc * h + 2 * oy) * w + 2 * ox;
                let mut best = src[best_idx];
                for (dy, dx) in [(0usize, 1usize), (1, 0), (1, 1)] {
                    let idx = (nc * h + 2 * oy + dy) * w + 2 * ox + dx;
                    if src[idx] > best {
                        best = src[idx];
                        best_idx = idx;
                    }
                }
                let o = (nc * oh + oy) * ow + ox;
                out[o] = best;
                argmax[o] = best_idx;
            }
        }
    }
    let value = Tensor::from_vec(&[n, c, oh, ow], out)?;
    let rg = tape.requires_grad(x);
    Ok(tape.record(
        "maxpool2x2",
        value,
        rg,
        Box::new(move |t, g, grads| {
            t.accum_grad(grads, x.0, |buf| {
                for (gi, &src_idx) in g.data().iter().zip(argmax.iter()) {
                    buf[src_idx] += gi;
                }
            });
        }),
    ))
}

// ---------------------------------------------------------------------------
// Convolution ops over tape handles
// ---------------------------------------------------------------------------

/// Cross-correlation (no kernel flip) + per-channel bias. Weight layout
/// `(out_ch, in_ch, kh, kw)`, bias shape `[out_ch]`.
pub fn conv2d(
    tape: &mut Tape,
    x: Var,
    weight: Var,
    bias: Var,
    stride: usize,
    pad: usize,
) -> Result<Var> {
    let value = conv::conv_forward(
        tape.value(x),
        tape.value(weight),
        Some(tape.value(bias).data()),
        stride,
        pad,
    )?;
    let (kh, kw) = {
        let (_, _, kh, kw) = tape.value(weight).dims4()?;
        (kh, kw)
    };
    let (_, _, h, w) = tape.value(x).dims4()?;
    let rg = tape.requires_grad(x) || tape.requires_grad(weight) || tape.requires_grad(bias);
    Ok(tape.record(
        "conv2d",
        value,
        rg,
        Box::new(move |t, g, grads| {
            t.accum_grad(grads, x.0, |buf| {
                let gx = conv::conv_input_grad(g, t.value(weight), stride, pad, (h, w))
                    .expect("shapes validated at forward");
                for (o, v) in buf.iter_mut().zip(gx.data()) {
                    *o += v;
                }
            });
            t.accum_grad(grads, weight.0, |buf| {
                let gw = conv::conv_weight_grad(t.value(x), g, stride, pad, (kh, kw))
                    .expect("shapes validated at forward");
                for (o, v) in buf.iter_mut().zip(gw.data()) {
                    *o += v;
                }
            });
            t.accum_grad(grads, bias.0, |buf| {
                let gb = conv::bias_grad(g).expect("rank validated at forward");
                for (o, v) in buf.iter_mut().zip(gb) {
                    *o += v;
                }
            });
        }),
    ))
}

/// Transposed convolution. Weight layout `(in_ch, out_ch, kh, kw)`, bias
/// shape `[out_ch]`; output spatial size `(n-1)*stride - 2*pad + k`.
pub fn conv2d_transpose(
    tape: &mut Tape,
    x: Var,
    weight: Var,
    bias: Var,
    stride: usize,
    pad: usize,
) -> Result<Var> {
    let value = conv::deconv_forward(
        tape.value(x),
        tape.value(weight),
        Some(tape.value(bias).data()),
        stride,
        pad,
    )?;
    let (kh, kw) = {
        let (_, _, kh, kw) = tape.value(weight).dims4()?;
        (kh, kw)
    };
    let rg = tape.requires_grad(x) || tape.requires_grad(weight) || tape.requires_grad(bias);
    Ok(tape.record(
        "conv2d_transpose",
        value,
        rg,
        Box::new(move |t, g, grads| {
            t.accum_grad(grads, x.0, |buf| {
                let gx = conv::deconv_input_grad(g, t.value(weight), stride, pad)
                    .expect("shapes validated at forward");
                for (o, v) in buf.iter_mut().zip(gx.data()) {
                    *o += v;
                }
            });
            t.accum_grad(grads, weight.0, |buf| {
                let gw = conv::deconv_weight_grad(t.value(x), g, stride, pad, (kh, kw))
                    .expect("shapes validated at forward");
                for (o, v) in buf.iter_mut().zip(gw.data()) {
                    *o += v;
                }
            });
            t.accum_grad(grads, bias.0, |buf| {
                let gb = conv::bias_grad(g).expect("rank validated at forward");
                for (o, v) in buf.iter_mut().zip(gb) {
                    *o += v;
                }
            });
        }),
    ))
}

// ---------------------------------------------------------------------------
// Batch normalization
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

/// Running statistics, updated in place during train-mode forwards. Kept in
/// a `RefCell` so a shared (leased) layer can refresh them mid-step.
#[derive(Debug, Clone)]
pub struct BnRunning {
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
}

/// `gamma * (x - mu) / sqrt(var + eps) + beta` with per-channel statistics
/// over batch and spatial dims. Train mode uses (biased) batch statistics
/// and folds them into `running`; eval mode reads `running` only.
pub fn batchnorm(
    tape: &mut Tape,
    x: Var,
    gamma: Var,
    beta: Var,
    running: &RefCell<BnRunning>,
    eps: f32,
    momentum: f32,
    mode: BnMode,
) -> Result<Var> {
    let (n, c, h, w) = tape.value(x).dims4()?;
    if tape.value(gamma).numel() != c || tape.value(beta).numel() != c {
        return Err(Error::ShapeMismatch {
            op: "batchnorm",
            lhs: tape.value(x).shape().to_vec(),
            rhs: tape.value(gamma).shape().to_vec(),
        });
    }
    let m = n * h * w;
    let (mu, var) = match mode {
        BnMode::Train => {
            if m < 2 {
                return Err(Error::contract(format!(
                    "batchnorm train mode needs >= 2 values per channel for statistics, got {m}"
                )));
            }
            let src = tape.value(x).data();
            let mut mu = vec![0.0f32; c];
            let mut var = vec![0.0f32; c];
            for ci in 0..c {
                let mut s = 0.0f64;
                for b in 0..n {
                    let base = (b * c + ci) * h * w;
                    for &v in &src[base..base + h * w] {
                        s += v as f64;
                    }
                }
                let mean = s / m as f64;
                let mut sq = 0.0f64;
                for b in 0..n {
                    let base = (b * c + ci) * h * w;
                    for &v in &src[base..base + h * w] {
                        let d = v as f64 - mean;
                        sq += d * d;
                    }
                }
                mu[ci] = mean as f32;
                var[ci] = (sq / m as f64) as f32;
            }
            {
                let mut run = running.borrow_mut();
                for ci in 0..c {
                    run.mean[ci] = (1.0 - momentum) * run.mean[ci] + momentum * mu[ci];
                    run.var[ci] = (1.0 - momentum) * run.var[ci] + momentum * var[ci];
                }
            }
            (mu, var)
        }
        BnMode::Eval => {
            let run = running.borrow();
            (run.mean.clone(), run.var.clone())
        }
    };
    let invstd: Vec<f32> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let src = tape.value(x).data();
    let gm = tape.value(gamma).data();
    let bt = tape.value(beta).data();
    let mut out = vec![0.0f32; src.len()];
    for b in 0..n {
        for ci in 0..c {
            let base = (b * c + ci) * h * w;
            let (g, bb, mc, is) = (gm[ci], bt[ci], mu[ci], invstd[ci]);
            for i in base..base + h * w {
                out[i] = g * (src[i] - mc) * is + bb;
            }
        }
    }
    let value = Tensor::from_vec(&[n, c, h, w], out)?;
    let rg = tape.requires_grad(x) || tape.requires_grad(gamma) || tape.requires_grad(beta);
    let train = mode == BnMode::Train;
    Ok(tape.record(
        "batchnorm",
        value,
        rg,
        Box::new(move |t, g, grads| {
            let src = t.value(x).data();
            let gm = t.value(gamma).data();
            let plane = h * w;
            // Per-channel reductions of g and g*xhat, shared by all three
            // parameter gradients.
            let mut sum_g = vec![0.0f64; c];
            let mut sum_gx = vec![0.0f64; c];
            for b in 0..n {
                for ci in 0..c {
                    let base = (b * c + ci) * plane;
                    let (mc, is) = (mu[ci], invstd[ci]);
                    let mut sg = 0.0f64;
                    let mut sgx = 0.0f64;
                    for i in base..base + plane {
                        let gi = g.data()[i] as f64;
                        sg += gi;
                        sgx += gi * ((src[i] - mc) * is) as f64;
                    }
                    sum_g[ci] += sg;
                    sum_gx[ci] += sgx;
                }
            }
            t.accum_grad(grads, beta.0, |buf| {
                for (o, s) in buf.iter_mut().zip(&sum_g) {
                    *o += *s as f32;
                }
            });
            t.accum_grad(grads, gamma.0, |buf| {
                for (o, s) in buf.iter_mut().zip(&sum_gx) {
                    *o += *s as f32;
                }
            });
            t.accum_grad(grads, x.0, |buf| {
                if train {
                    // Batch statistics depend on x:
                    // dx = gamma*invstd * (g - mean(g) - xhat*mean(g*xhat))
                    for b in 0..n {
                        for ci in 0..c {
                            let base = (b * c + ci) * plane;
                            let (mc, is) = (mu[ci], invstd[ci]);
                            let k = gm[ci] * is;
                            let mg = (sum_g[ci] / m as f64) as f32;
                            let mgx = (sum_gx[ci] / m as f64) as f32;
                            for i in base..base + plane {
                                let xhat = (src[i] - mc) * is;
                                buf[i] += k * (g.data()[i] - mg - xhat * mgx);
                            }
                        }
                    }
                } else {
                    // Running statistics are constants: dx = g*gamma*invstd.
                    for b in 0..n {
                        for ci in 0..c {
                            let base = (b * c + ci) * plane;
                            let k = gm[ci] * invstd[ci];
                            for i in base..base + plane {
                                buf[i] += k * g.data()[i];
                            }
                        }
                    }
                }
            });
        }),
    ))
}

// ---------------------------------------------------------------------------
// Persistent layers + lease structs
// ---------------------------------------------------------------------------

#[derive(Debug)]
pub struct Conv2d {
    pub weight: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new(in_ch: usize, out_ch: usize, k: usize, stride: usize, pad: usize, rng: &mut Rng) -> Self {
        Conv2d {
            weight: Tensor::trunc_randn(&[out_ch, in_ch, k, k], 0.0, INIT_STD, rng),
            bias: Tensor::zeros(&[out_ch]),
            stride,
            pad,
        }
    }

    pub fn lease(&self, tape: &mut Tape, trainable: bool) -> Conv2dVars {
        Conv2dVars {
            weight: tape.leaf(self.weight.clone(), trainable),
            bias: tape.leaf(self.bias.clone(), trainable),
            stride: self.stride,
            pad: self.pad,
        }
    }

    pub fn collect(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((format!("{prefix}.weight"), self.weight.clone()));
        out.push((format!("{prefix}.bias"), self.bias.clone()));
    }

    pub fn load(&mut self, prefix: &str, map: &mut HashMap<String, Tensor>) -> Result<()> {
        self.weight = take_tensor(map, &format!("{prefix}.weight"), self.weight.shape())?;
        self.bias = take_tensor(map, &format!("{prefix}.bias"), self.bias.shape())?;
        Ok(())
    }

    pub fn learnable_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor>) {
        out.push(&mut self.weight);
        out.push(&mut self.bias);
    }

    pub fn param_count(&self) -> usize {
        self.weight.numel() + self.bias.numel()
    }
}

#[derive(Clone, Copy)]
pub struct Conv2dVars {
    pub weight: Var,
    pub bias: Var,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2dVars {
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        conv2d(tape, x, self.weight, self.bias, self.stride, self.pad)
    }

    pub fn params(&self, out: &mut Vec<Var>) {
        out.push(self.weight);
        out.push(self.bias);
    }
}

#[derive(Debug)]
pub struct ConvTranspose2d {
    /// Layout `(in_ch, out_ch, kh, kw)`.
    pub weight: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub pad: usize,
}

impl ConvTranspose2d {
    pub fn new(in_ch: usize, out_ch: usize, k: usize, stride: usize, pad: usize, rng: &mut Rng) -> Self {
        ConvTranspose2d {
            weight: Tensor::trunc_randn(&[in_ch, out_ch, k, k], 0.0, INIT_STD, rng),
            bias: Tensor::zeros(&[out_ch]),
            stride,
            pad,
        }
    }

    pub fn lease(&self, tape: &mut Tape, trainable: bool) -> ConvTranspose2dVars {
        ConvTranspose2dVars {
            weight: tape.leaf(self.weight.clone(), trainable),
            bias: tape.leaf(self.bias.clone(), trainable),
            stride: self.stride,
            pad: self.pad,
        }
    }

    pub fn collect(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((format!("{prefix}.weight"), self.weight.clone()));
        out.push((format!("{prefix}.bias"), self.bias.clone()));
    }

    pub fn load(&mut self, prefix: &str, map: &mut HashMap<String, Tensor>) -> Result<()> {
        self.weight = take_tensor(map, &format!("{prefix}.weight"), self.weight.shape())?;
        self.bias = take_tensor(map, &format!("{prefix}.bias"), self.bias.shape())?;
        Ok(())
    }

    pub fn learnable_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor>) {
        out.push(&mut self.weight);
        out.push(&mut self.bias);
    }

    pub fn param_count(&self) -> usize {
        self.weight.numel() + self.bias.numel()
    }
}

#[derive(Clone, Copy)]
pub struct ConvTranspose2dVars {
    pub weight: Var,
    pub bias: Var,
    pub stride: usize,
    pub pad: usize,
}

impl ConvTranspose2dVars {
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        conv2d_transpose(tape, x, self.weight, self.bias, self.stride, self.pad)
    }

    pub fn params(&self, out: &mut Vec<Var>) {
        out.push(self.weight);
        out.push(self.bias);
    }
}

#[derive(Debug)]
pub struct BatchNorm2d {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running: RefCell<BnRunning>,
    pub eps: f32,
    pub momentum: f32,
}

impl BatchNorm2d {
    pub fn new(ch: usize, rng: &mut Rng) -> Self {
        BatchNorm2d {
            gamma: Tensor::randn_mean(&[ch], 1.0, INIT_STD, rng),
            beta: Tensor::zeros(&[ch]),
            running: RefCell::new(BnRunning {
                mean: vec![0.0; ch],
                var: vec![1.0; ch],
            }),
            eps: BN_EPS,
            momentum: BN_MOMENTUM,
        }
    }

    pub fn lease<'a>(&'a self, tape: &mut Tape, trainable: bool) -> BatchNormVars<'a> {
        BatchNormVars {
            gamma: tape.leaf(self.gamma.clone(), trainable),
            beta: tape.leaf(self.beta.clone(), trainable),
            layer: self,
        }
    }

    pub fn collect(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((format!("{prefix}.gamma"), self.gamma.clone()));
        out.push((format!("{prefix}.beta"), self.beta.clone()));
        let run = self.running.borrow();
        let ch = run.mean.len();
        out.push((
            format!("{prefix}.running_mean"),
            Tensor::from_vec(&[ch], run.mean.clone()).expect("stat length"),
        ));
        out.push((
            format!("{prefix}.running_var"),
            Tensor::from_vec(&[ch], run.var.clone()).expect("stat length"),
        ));
    }

    pub fn load(&mut self, prefix: &str, map: &mut HashMap<String, Tensor>) -> Result<()> {
        self.gamma = take_tensor(map, &format!("{prefix}.gamma"), self.gamma.shape())?;
        self.beta = take_tensor(map, &format!("{prefix}.beta"), self.beta.shape())?;
        let ch = self.gamma.numel();
        let mean = take_tensor(map, &format!("{prefix}.running_mean"), &[ch])?;
        let var = take_tensor(map, &format!("{prefix}.running_var"), &[ch])?;
        if var.data().iter().any(|&v| v <= 0.0) {
            return Err(Error::Checkpoint(format!(
                "{prefix}.running_var must be strictly positive"
            )));
        }
        *self.running.borrow_mut() = BnRunning {
            mean: mean.into_data(),
            var: var.into_data(),
        };
        Ok(())
    }

    pub fn learnable_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor>) {
        out.push(&mut self.gamma);
        out.push(&mut self.beta);
    }

    pub fn param_count(&self) -> usize {
        self.gamma.numel() + self.beta.numel()
    }
}

pub struct BatchNormVars<'a> {
    pub gamma: Var,
    pub beta: Var,
    layer: &'a BatchNorm2d,
}

impl BatchNormVars<'_> {
    pub fn forward(&self, tape: &mut Tape, x: Var, mode: BnMode) -> Result<Var> {
        batchnorm(
            tape,
            x,
            self.gamma,
            self.beta,
            &self.layer.running,
            self.layer.eps,
            self.layer.momentum,
            mode,
        )
    }

    pub fn params(&self, out: &mut Vec<Var>) {
        out.push(self.gamma);
        out.push(self.beta);
    }
}

/// `y = f(x) + x` with `f = conv -> BN -> ReLU -> conv -> BN`; both convs
/// are k3 s1 p1 with equal in/out channels so the addition is well-formed.
#[derive(Debug)]
pub struct ResBlock {
    pub conv1: Conv2d,
    pub bn1: BatchNorm2d,
    pub conv2: Conv2d,
    pub bn2: BatchNorm2d,
}

impl ResBlock {
    pub fn new(ch: usize, rng: &mut Rng) -> Self {
        ResBlock {
            conv1: Conv2d::new(ch, ch, 3, 1, 1, rng),
            bn1: BatchNorm2d::new(ch, rng),
            conv2: Conv2d::new(ch, ch, 3, 1, 1, rng),
            bn2: BatchNorm2d::new(ch, rng),
        }
    }

    pub fn lease<'a>(&'a self, tape: &mut Tape, trainable: bool) -> ResBlockVars<'a> {
        ResBlockVars {
            conv1: self.conv1.lease(tape, trainable),
            bn1: self.bn1.lease(tape, trainable),
            conv2: self.conv2.lease(tape, trainable),
            bn2: self.bn2.lease(tape, trainable),
        }
    }

    pub fn collect(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.conv1.collect(&format!("{prefix}.conv1"), out);
        self.bn1.collect(&format!("{prefix}.bn1"), out);
        self.conv2.collect(&format!("{prefix}.conv2"), out);
        self.bn2.collect(&format!("{prefix}.bn2"), out);
    }

    pub fn load(&mut self, prefix: &str, map: &mut HashMap<String, Tensor>) -> Result<()> {
        self.conv1.load(&format!("{prefix}.conv1"), map)?;
        self.bn1.load(&format!("{prefix}.bn1"), map)?;
        self.conv2.load(&format!("{prefix}.conv2"), map)?;
        self.bn2.load(&format!("{prefix}.bn2"), map)
    }

    pub fn learnable_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor>) {
        self.conv1.learnable_mut(out);
        self.bn1.learnable_mut(out);
        self.conv2.learnable_mut(out);
        self.bn2.learnable_mut(out);
    }

    pub fn param_count(&self) -> usize {
        self.conv1.param_count()
            + self.bn1.param_count()
            + self.conv2.param_count()
            + self.bn2.param_count()
    }
}

pub struct ResBlockVars<'a> {
    pub conv1: Conv2dVars,
    pub bn1: BatchNormVars<'a>,
    pub conv2: Conv2dVars,
    pub bn2: BatchNormVars<'a>,
}

impl ResBlockVars<'_> {
    pub fn forward(&self, tape: &mut Tape, x: Var, mode: BnMode) -> Result<Var> {
        let f = self.residual_branch(tape, x, mode)?;
        ops::add(tape, f, x)
    }

    /// `f(x)` alone, exposed so the additivity property
    /// `forward(x) - x == residual_branch(x)` is testable directly.
    pub fn residual_branch(&self, tape: &mut Tape, x: Var, mode: BnMode) -> Result<Var> {
        let h = self.conv1.forward(tape, x)?;
        let h = self.bn1.forward(tape, h, mode)?;
        let h = relu(tape, h);
        let h = self.conv2.forward(tape, h)?;
        self.bn2.forward(tape, h, mode)
    }

    pub fn params(&self, out: &mut Vec<Var>) {
        self.conv1.params(out);
        self.bn1.params(out);
        self.conv2.params(out);
        self.bn2.params(out);
    }
}

fn take_tensor(map: &mut HashMap<String, Tensor>, name: &str, shape: &[usize]) -> Result<Tensor> {
    let t = map
        .remove(name)
        .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))?;
    if t.shape() != shape {
        return Err(Error::Checkpoint(format!(
            "tensor `{name}` has shape {:?}, expected {:?}",
            t.shape(),
            shape
        )));
    }
    Ok(t)
}
