//! The four training losses and their weighted totals.
//!
//! Scores are *pooled before the log*: a patch grid is averaged down to one
//! probability per batch and the binary cross-entropy terms act on that
//! scalar. Every log argument is clamped to `[SCORE_EPS, 1 - SCORE_EPS]`
//! first so a saturated sigmoid (exactly 0.0 or 1.0 in f32) can never
//! produce an infinite loss or a NaN gradient.
//!
//! Total objectives, composed in this exact order:
//!
//! ```text
//! L_G = (adv_g + gamma * l1) + sigma * cascade
//! L_D = adv_d + theta * perturbed
//! ```
//!
//! The perturbed term is discriminator-only: the mixed sample must be built
//! from a *detached* fake so its gradient never reaches the generator. The
//! cascade term detaches the target-branch features internally, so it pulls
//! on the generated image only.

use crate::error::{Error, Result};
use crate::ops;
use crate::rng::Rng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Log arguments live in `[SCORE_EPS, 1 - SCORE_EPS]`.
pub const SCORE_EPS: f32 = 1e-7;

#[derive(Debug, Clone, PartialEq)]
pub struct LossWeights {
    /// L1 reconstruction weight (gamma).
    pub gamma: f32,
    /// Perturbed-loss weight (theta).
    pub theta: f32,
    /// Cascade-loss weight (sigma).
    pub sigma: f32,
    /// Per-level cascade weights; `None` means uniform `1/N`.
    pub lambda: Option<Vec<f32>>,
    /// Use the saturating generator objective `ln(1 - D(fake))` instead of
    /// the default non-saturating `-ln D(fake)`.
    pub saturating_g: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            gamma: 100.0,
            theta: 1.0,
            sigma: 1.0,
            lambda: None,
            saturating_g: false,
        }
    }
}

impl LossWeights {
    pub fn validate(&self, cascade_levels: usize) -> Result<()> {
        for (name, v) in [("gamma", self.gamma), ("theta", self.theta), ("sigma", self.sigma)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::config(format!(
                    "loss weight {name} must be finite and >= 0, got {v}"
                )));
            }
        }
        if let Some(lam) = &self.lambda {
            if lam.len() != cascade_levels {
                return Err(Error::config(format!(
                    "lambda has {} entries but the cascade has {} levels",
                    lam.len(),
                    cascade_levels
                )));
            }
            if lam.iter().any(|v| !v.is_finite() || *v < 0.0) {
                return Err(Error::config("lambda entries must be finite and >= 0"));
            }
        }
        Ok(())
    }
}

/// Per-step loss values for logging; plain numbers, not tape nodes.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossBundle {
    pub adv_d: f32,
    pub adv_g: f32,
    pub l1: f32,
    pub perturbed: f32,
    pub cascade: f32,
    pub total_g: f32,
    pub total_d: f32,
}

/// Mean-pool to a scalar probability, clamp, ln.
fn pooled_safe_ln(tape: &mut Tape, score: Var) -> Var {
    let s = ops::mean(tape, score);
    let c = ops::clamp(tape, s, SCORE_EPS, 1.0 - SCORE_EPS);
    ops::ln(tape, c)
}

/// Like [`pooled_safe_ln`] but of `1 - score`.
fn pooled_safe_ln_one_minus(tape: &mut Tape, score: Var) -> Var {
    let s = ops::mean(tape, score);
    let om = ops::rsub_scalar(tape, 1.0, s);
    let c = ops::clamp(tape, om, SCORE_EPS, 1.0 - SCORE_EPS);
    ops::ln(tape, c)
}

/// `-[ln D(cond, real) + ln(1 - D(cond, fake))]`. Accepts patch grids or
/// already-pooled scalars; grids are averaged before the log.
pub fn adv_d_loss(tape: &mut Tape, d_real: Var, d_fake: Var) -> Result<Var> {
    let ln_r = pooled_safe_ln(tape, d_real);
    let ln_omf = pooled_safe_ln_one_minus(tape, d_fake);
    let sum = ops::add(tape, ln_r, ln_omf)?;
    Ok(ops::mul_scalar(tape, sum, -1.0))
}

/// Non-saturating `-ln D(cond, fake)` by default; `ln(1 - D(cond, fake))`
/// when `saturating` is set. Both push `D(fake)` toward 1 when minimized.
pub fn adv_g_loss(tape: &mut Tape, d_fake: Var, saturating: bool) -> Var {
    if saturating {
        pooled_safe_ln_one_minus(tape, d_fake)
    } else {
        let ln_f = pooled_safe_ln(tape, d_fake);
        ops::mul_scalar(tape, ln_f, -1.0)
    }
}

/// Mean absolute difference.
pub fn l1_loss(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let d = ops::sub(tape, a, b)?;
    let ad = ops::abs(tape, d);
    Ok(ops::mean(tape, ad))
}

/// `x_hat = alpha * fake + (1 - alpha) * real` with one mixing coefficient
/// per batch element. `alpha: Some(a)` uses `a` for every element (the
/// endpoints are bit-exact: 0 returns `real`, 1 returns `fake`); `None`
/// draws each coefficient uniformly from [0, 1).
///
/// Callers building the discriminator's perturbed term must pass a
/// *detached* fake so the term cannot backpropagate into the generator.
pub fn perturb_mix(
    tape: &mut Tape,
    fake: Var,
    real: Var,
    alpha: Option<f32>,
    rng: &mut Rng,
) -> Result<Var> {
    if let Some(a) = alpha {
        if !(0.0..=1.0).contains(&a) || !a.is_finite() {
            return Err(Error::contract(format!(
                "perturb_mix alpha must lie in [0, 1], got {a}"
            )));
        }
    }
    let (fb, fc, fh, fw) = tape.value(fake).dims4()?;
    if tape.value(fake).shape() != tape.value(real).shape() {
        return Err(Error::ShapeMismatch {
            op: "perturb_mix",
            lhs: tape.value(fake).shape().to_vec(),
            rhs: tape.value(real).shape().to_vec(),
        });
    }
    let alphas: Vec<f32> = match alpha {
        Some(a) => vec![a; fb],
        None => (0..fb).map(|_| rng.unit_f32()).collect(),
    };
    let plane = fc * fh * fw;
    let mut out = vec![0.0f32; fb * plane];
    {
        let f = tape.value(fake).data();
        let r = tape.value(real).data();
        for b in 0..fb {
            let a = alphas[b];
            for i in b * plane..(b + 1) * plane {
                out[i] = a * f[i] + (1.0 - a) * r[i];
            }
        }
    }
    let value = Tensor::from_vec(tape.value(fake).shape(), out)?;
    let rg = tape.requires_grad(fake) || tape.requires_grad(real);
    let back_alphas = alphas;
    Ok(tape.record(
        "perturb_mix",
        value,
        rg,
        Box::new(move |t, g, grads| {
            t.accum_grad(grads, fake.0, |buf| {
                for b in 0..fb {
                    let a = back_alphas[b];
                    for i in b * plane..(b + 1) * plane {
                        buf[i] += a * g.data()[i];
                    }
                }
            });
            t.accum_grad(grads, real.0, |buf| {
                for b in 0..fb {
                    let a = 1.0 - back_alphas[b];
                    for i in b * plane..(b + 1) * plane {
                        buf[i] += a * g.data()[i];
                    }
                }
            });
        }),
    ))
}

/// `-ln(1 - D(cond, x_hat))`: the discriminator's penalty for scoring the
/// mixed sample as real.
pub fn perturbed_loss(tape: &mut Tape, d_mixed: Var) -> Var {
    let ln_om = pooled_safe_ln_one_minus(tape, d_mixed);
    ops::mul_scalar(tape, ln_om, -1.0)
}

/// `sum_n lambda_n * L1(phi_n(target), phi_n(output))`. Target features are
/// detached internally, so the gradient pulls on the output branch only.
/// `lambda: None` weighs every level `1/N`.
pub fn cascade_loss(
    tape: &mut Tape,
    feats_target: &[Var],
    feats_output: &[Var],
    lambda: Option<&[f32]>,
) -> Result<Var> {
    if feats_target.is_empty() || feats_target.len() != feats_output.len() {
        return Err(Error::contract(format!(
            "cascade_loss needs matching non-empty feature lists, got {} target / {} output",
            feats_target.len(),
            feats_output.len()
        )));
    }
    let n = feats_target.len();
    let lam: Vec<f32> = match lambda {
        Some(l) => {
            if l.len() != n {
                return Err(Error::contract(format!(
                    "cascade_loss got {} lambda weights for {} levels",
                    l.len(),
                    n
                )));
            }
            if l.iter().any(|v| !v.is_finite() || *v < 0.0) {
                return Err(Error::contract("cascade lambda weights must be finite and >= 0"));
            }
            l.to_vec()
        }
        None => vec![1.0 / n as f32; n],
    };
    let mut total: Option<Var> = None;
    for i in 0..n {
        let target_const = tape.detach(feats_target[i]);
        let l1 = l1_loss(tape, feats_output[i], target_const)?;
        let term = ops::mul_scalar(tape, l1, lam[i]);
        total = Some(match total {
            Some(acc) => ops::add(tape, acc, term)?,
            None => term,
        });
    }
    Ok(total.expect("n >= 1"))
}

/// `(adv_g + gamma * l1) + sigma * cascade`, composed left to right in that
/// order. `cascade: None` (term disabled) omits the last addition entirely.
pub fn total_g_loss(
    tape: &mut Tape,
    adv_g: Var,
    l1: Var,
    cascade: Option<Var>,
    weights: &LossWeights,
) -> Result<Var> {
    let weighted_l1 = ops::mul_scalar(tape, l1, weights.gamma);
    let base = ops::add(tape, adv_g, weighted_l1)?;
    match cascade {
        Some(c) => {
            let weighted_c = ops::mul_scalar(tape, c, weights.sigma);
            ops::add(tape, base, weighted_c)
        }
        None => Ok(base),
    }
}

/// `adv_d + theta * perturbed`; `perturbed: None` (term disabled) is plain
/// `adv_d`.
pub fn total_d_loss(
    tape: &mut Tape,
    adv_d: Var,
    perturbed: Option<Var>,
    weights: &LossWeights,
) -> Result<Var> {
    match perturbed {
        Some(p) => {
            let weighted = ops::mul_scalar(tape, p, weights.theta);
            ops::add(tape, adv_d, weighted)
        }
        None => Ok(adv_d),
    }
}
