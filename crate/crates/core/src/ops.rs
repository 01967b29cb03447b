//! Differentiable elementwise, reduction and shape primitives.
//!
//! All ops take the tape plus input handles, compute the forward value
//! eagerly, and record a backward closure when any input requires gradients.
//! Reductions accumulate in f64 and round once at the end so results do not
//! depend on how the compiler associates f32 additions.

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

fn check_same_shape(op: &'static str, tape: &Tape, a: Var, b: Var) -> Result<()> {
    if tape.value(a).shape() != tape.value(b).shape() {
        return Err(Error::ShapeMismatch {
            op,
            lhs: tape.value(a).shape().to_vec(),
            rhs: tape.value(b).shape().to_vec(),
        });
    }
    Ok(())
}

/// Elementwise `a + b`; shapes must match exactly.
pub fn add(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    check_same_shape("add", tape, a, b)?;
    let out: Vec<f32> = tape
        .value(a)
        .data()
        .iter()
        .zip(tape.value(b).data())
        .map(|(x, y)| x + y)
        .collect();
    let value = Tensor::from_vec(tape.value(a).shape(), out)?;
    let rg = tape.requires_grad(a) || tape.requires_grad(b);
    Ok(tape.record(
        "add",
        value,
        rg,
        Box::new(move |t, g, grads| {
            for id in [a.0, b.0] {
                t.accum_grad(grads, id, |buf| {
                    for (o, gi) in buf.iter_mut().zip(g.data()) {
                        *o += gi;
                    }
                });
            }
        }),
    ))
}

/// Elementwise `a - b`; shapes must match exactly.
pub fn sub(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    check_same_shape("sub", tape, a, b)?;
    let out: Vec<f32> = tape
        .value(a)
        .data()
        .iter()
        .zip(tape.value(b).data())
        .map(|(x, y)| x - y)
        .collect();
    let value = Tensor::from_vec(tape.value(a).shape(), out)?;
    let rg = tape.requires_grad(a) || tape.requires_grad(b);
    Ok(tape.record(
        "sub",
        value,
        rg,
        Box::new(move |t, g, grads| {
            t.accum_grad(grads, a.0, |buf| {
                for (o, gi) in buf.iter_mut().zip(g.data()) {
                    *o += gi;
                }
            });
            t.accum_grad(grads, b.0, |buf| {
                for (o, gi) in buf.iter_mut().zip(g.data()) {
                    *o -= gi;
                }
            });
        }),
    ))
}

/// Elementwise `a * b`; shapes must match exactly.
pub fn mul(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    check_same_shape("mul", tape, a, b)?;
    let out: Vec<f32> = tape
        .value(a)
        .data()
        .iter()
        .zip(tape.value(b).data())
        .map(|(x, y)| x * y)
        .collect();
    let value = Tensor::from_vec(tape.value(a).shape(), out)?;
    let rg = tape.requires_grad(a) || tape.requires_grad(b);
    Ok(tape.record(
        "mul",
        value,
        rg,
        Box::new(move |t, g, grads| {
            t.accum_grad(grads, a.0, |buf| {
                for ((o, gi), y) in buf.iter_mut().zip(g.data()).zip(t.value(b).data()) {
                    *o += gi * y;
                }
            });
            t.accum_grad(grads, b.0, |buf| {
                for ((o, gi), x) in buf.iter_mut().zip(g.data()).zip(t.value(a).data()) {
                    *o += gi * x;
                }
            });
        }),
    ))
}

pub fn add_scalar(tape: &mut Tape, a: Var, s: f32) -> Var {
    let out: Vec<f32> = tape.value(a).data().iter().map(|x| x + s).collect();
    let value = Tensor::from_vec(tape.value(a).shape(), out).expect("same shape");
    let rg = tape.requires_grad(a);
    tape.record(
        "add_scalar",
        value,
        rg,
        Box::new(move |t, g, grads| {
            t.accum_grad(grads, a.0, |buf| {
                for (o, gi) in buf.iter_mut().zip(g.data()) {
                    *o += gi;
                }
            });
        }),
    )
}

pub fn mul_scalar(tape: &mut Tape, a: Var, s: f32) -> Var {
    let out: Vec<f32> = tape.value(a).data().iter().map(|x| x * s).collect();
    let value = Tensor::from_vec(tape.value(a).shape(), out).expect("same shape");
    let rg = tape.requires_grad(a);
    tape.record(
        "mul_scalar",
        value,
        rg,
        Box::new(move |t, g, grads| {
            t.accum_grad(grads, a.0, |buf| {
                for (o, gi) in buf.iter_mut().zip(g.data()) {
                    *o += gi * s;
                }
            });
        }),
    )
}

/// `s - a`, elementwise.
pub fn rsub_scalar(tape: &mut Tape, s: f32, a: Var) -> Var {
    let out: Vec<f32> = tape.value(a).data().iter().map(|x| s - x).collect();
    let value = Tensor::from_vec(tape.value(a).shape(), out).expect("same shape");
    let rg = tape.requires_grad(a);
    tape.record(
        "rsub_scalar",
        value,
        rg,
        Box::new(move |t, g, grads| {
            t.accum_grad(grads, a.0, |buf| {
                for (o, gi) in buf.iter_mut().zip(g.data()) {
                    *o -= gi;
                }
            });
        }),
    )
}

/// Mean over all elements; returns a scalar (shape `[1]`).
pub fn mean(tape: &mut Tape, a: Var) -> Var {
    let n = tape.value(a).numel();
    let acc: f64 = tape.value(a).data().iter().map(|&x| x as f64).sum();
    let value = Tensor::scalar((acc / n as f64) as f32);
    let rg = tape.requires_grad(a);
    tape.record(
        "mean",
        value,
        rg,
        Box::new(move |t, g, grads| {
            let gi = g.data()[0] / n as f32;
            t.accum_grad(grads, a.0, |buf| {
                for o in buf.iter_mut() {
                    *o += gi;
                }
            });
        }),
    )
}

/// Sum over all elements; returns a scalar (shape `[1]`).
pub fn sum(tape: &mut Tape, a: Var) -> Var {
    let acc: f64 = tape.value(a).data().iter().map(|&x| x as f64).sum();
    let value = Tensor::scalar(acc as f32);
    let rg = tape.requires_grad(a);
    tape.record(
        "sum",
        value,
        rg,
        Box::new(move |t, g, grads| {
            let gi = g.data()[0];
            t.accum_grad(grads, a.0, |buf| {
                for o in buf.iter_mut() {
                    *o += gi;
                }
            });
        }),
    )
}

/// Elementwise absolute value. The subgradient at 0 is 0.
pub fn abs(tape: &mut Tape, a: Var) -> Var {
    let out: Vec<f32> = tape.value(a).data().iter().map(|x| x.abs()).collect();
    let value = Tensor::from_vec(tape.value(a).shape(), out).expect("same shape");
    let rg = tape.requires_grad(a);
    tape.record(
        "abs",
        value,
        rg,
        Box::new(move |t, g, grads| {
            t.accum_grad(grads, a.0, |buf| {
                for ((o, gi), &x) in buf.iter_mut().zip(g.data()).zip(t.value(a).data()) {
                    *o += gi * if x > 0.0 { 1.0 } else if x < 0.0 { -1.0 } else { 0.0 };
                }
            });
        }),
    )
}

/// Natural logarithm. Inputs must already be clamped strictly positive;
/// pair with [`clamp`] when differentiating probabilities.
pub fn ln(tape: &mut Tape, a: Var) -> Var {
    let out: Vec<f32> = tape.value(a).data().iter().map(|x| x.ln()).collect();
    let value = Tensor::from_vec(tape.value(a).shape(), out).expect("same shape");
    let rg = tape.requires_grad(a);
    tape.record(
        "ln",
        value,
        rg,
        Box::new(move |t, g, grads| {
            t.accum_grad(grads, a.0, |buf| {
                for ((o, gi), &x) in buf.iter_mut().zip(g.data()).zip(t.value(a).data()) {
                    *o += gi / x;
                }
            });
        }),
    )
}

/// Clamp to `[lo, hi]`. Gradient passes only where the input is strictly
/// inside the interval, so saturated probabilities stop contributing.
pub fn clamp(tape: &mut Tape, a: Var, lo: f32, hi: f32) -> Var {
    let out: Vec<f32> = tape.value(a).data().iter().map(|x| x.clamp(lo, hi)).collect();
    let value = Tensor::from_vec(tape.value(a).shape(), out).expect("same shape");
    let rg = tape.requires_grad(a);
    tape.record(
        "clamp",
        value,
        rg,
        Box::new(move |t, g, grads| {
            t.accum_grad(grads, a.0, |buf| {
                for ((o, gi), &x) in buf.iter_mut().zip(g.data()).zip(t.value(a).data()) {
                    if x > lo && x < hi {
                        *o += gi;
                    }
                }
            });
        }),
    )
}

/// Concatenate rank-4 tensors along the channel axis. All inputs must agree
/// on batch and spatial dimensions.
pub fn concat_channels(tape: &mut Tape, inputs: &[Var]) -> Result<Var> {
    let tensors: Vec<&Tensor> = inputs.iter().map(|v| tape.value(*v)).collect();
    let value = Tensor::concat_channels(&tensors)?;
    let rg = inputs.iter().any(|v| tape.requires_grad(*v));
    let parents: Vec<Var> = inputs.to_vec();
    let channel_counts: Vec<usize> = tensors.iter().map(|t| t.dims4().expect("rank 4").1).collect();
    let (n, _, h, w) = tensors[0].dims4()?;
    let c_total: usize = channel_counts.iter().sum();
    Ok(tape.record(
        "concat_channels",
        value,
        rg,
        Box::new(move |t, g, grads| {
            let plane = h * w;
            let mut c_off = 0usize;
            for (p, &cp) in parents.iter().zip(&channel_counts) {
                t.accum_grad(grads, p.0, |buf| {
                    for b in 0..n {
                        let src = (b * c_total + c_off) * plane;
                        let dst = b * cp * plane;
                        for (o, gi) in buf[dst..dst + cp * plane]
                            .iter_mut()
                            .zip(&g.data()[src..src + cp * plane])
                        {
                            *o += gi;
                        }
                    }
                });
                c_off += cp;
            }
        }),
    ))
}

/// Zero-pad the spatial dims of a rank-4 tensor: `(top, bottom, left, right)`.
/// Supports the asymmetric "same" padding needed by stride-1 even kernels.
pub fn zero_pad2d(tape: &mut Tape, a: Var, pad: (usize, usize, usize, usize)) -> Result<Var> {
    let (top, bottom, left, right) = pad;
    let (n, c, h, w) = tape.value(a).dims4()?;
    let (oh, ow) = (h + top + bottom, w + left + right);
    let mut out = vec![0.0f32; n * c * oh * ow];
    let src = tape.value(a).data();
    for nc in 0..n * c {
        for y in 0..h {
            let s = (nc * h + y) * w;
            let d = (nc * oh + y + top) * ow + left;
            out[d..d + w].copy_from_slice(&src[s..s + w]);
        }
    }
    let value = Tensor::from_vec(&[n, c, oh, ow], out)?;
    let rg = tape.requires_grad(a);
    Ok(tape.record(
        "zero_pad2d",
        value,
        rg,
        Box::new(move |t, g, grads| {
            t.accum_grad(grads, a.0, |buf| {
                for nc in 0..n * c {
                    for y in 0..h {
                        let d = (nc * h + y) * w;
                        let s = (nc * oh + y + top) * ow + left;
                        for (o, gi) in buf[d..d + w].iter_mut().zip(&g.data()[s..s + w]) {
                            *o += gi;
                        }
                    }
                }
            });
        }),
    ))
}
