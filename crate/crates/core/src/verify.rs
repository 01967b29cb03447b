//! The shipped gradient-verification suite: central finite-difference checks
//! for every differentiable op, the four losses, and the full generator and
//! discriminator on small deterministic fixtures.
//!
//! Fixtures are constructed so finite differencing is well-posed: values near
//! activation kinks (ReLU at 0, |x| at 0) keep a margin wider than the probe
//! step, and max-pool inputs are built with distinct, well-separated values.

use std::cell::RefCell;

use crate::error::{Error, Result};
use crate::gradcheck::{grad_check, GradCheckReport, DEFAULT_EPS};
use crate::losses;
use crate::models::{
    CascadeNet, CascadeNetConfig, Discriminator, DiscriminatorConfig, Generator, GeneratorConfig,
    LEAKY_SLOPE,
};
use crate::nn::{self, BnMode, BnRunning, BN_EPS, BN_MOMENTUM};
use crate::ops;
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Names of every case in the standard suite, in execution order.
pub const SUITE_OPS: &[&str] = &[
    "conv2d",
    "conv2d_stride2",
    "conv2d_transpose",
    "batchnorm_train",
    "batchnorm_eval",
    "relu",
    "leaky_relu",
    "tanh",
    "sigmoid",
    "maxpool2x2",
    "residual_block",
    "adv_d",
    "adv_g",
    "l1",
    "perturbed",
    "cascade",
    "generator",
    "discriminator",
];

/// A tensor of distinct values with pairwise gaps >= `gap`, deterministically
/// shuffled; safe for max-pool and kinked activations under finite probing.
fn spaced(shape: &[usize], gap: f32, seed: u64) -> Tensor {
    let n: usize = shape.iter().product();
    let mut vals: Vec<f32> = (0..n)
        .map(|i| (i as f32 - (n as f32 - 1.0) / 2.0) * gap)
        .collect();
    Rng::new(seed).shuffle(&mut vals);
    Tensor::from_vec(shape, vals).expect("spaced fixture")
}

/// Random values with `|v| >= margin` (sign preserved), for ReLU-family kinks.
fn kink_safe(shape: &[usize], margin: f32, seed: u64) -> Tensor {
    let mut rng = Rng::new(seed);
    let n: usize = shape.iter().product();
    let vals: Vec<f32> = (0..n)
        .map(|_| {
            let v = rng.normal_f32() * 0.5;
            v.signum() * (v.abs() + margin)
        })
        .collect();
    Tensor::from_vec(shape, vals).expect("kink-safe fixture")
}

fn run_case(name: &str) -> Result<GradCheckReport> {
    let mut rng = Rng::new(0x5645_5249 ^ name.len() as u64);
    match name {
        "conv2d" => {
            let x = Tensor::randn(&[1, 2, 5, 4], 1.0, &mut rng);
            let w = Tensor::randn(&[3, 2, 3, 3], 0.5, &mut rng);
            let b = Tensor::randn(&[3], 0.5, &mut rng);
            grad_check(name, &[x, w, b], DEFAULT_EPS, &mut |t, v| {
                let y = nn::conv2d(t, v[0], v[1], v[2], 1, 1)?;
                let sq = ops::mul(t, y, y)?;
                Ok(ops::mean(t, sq))
            })
        }
        "conv2d_stride2" => {
            let x = Tensor::randn(&[1, 2, 6, 6], 1.0, &mut rng);
            let w = Tensor::randn(&[2, 2, 4, 4], 0.5, &mut rng);
            let b = Tensor::randn(&[2], 0.5, &mut rng);
            grad_check(name, &[x, w, b], DEFAULT_EPS, &mut |t, v| {
                let y = nn::conv2d(t, v[0], v[1], v[2], 2, 1)?;
                let sq = ops::mul(t, y, y)?;
                Ok(ops::mean(t, sq))
            })
        }
        "conv2d_transpose" => {
            let x = Tensor::randn(&[1, 3, 3, 3], 1.0, &mut rng);
            let w = Tensor::randn(&[3, 2, 4, 4], 0.5, &mut rng);
            let b = Tensor::randn(&[2], 0.5, &mut rng);
            grad_check(name, &[x, w, b], DEFAULT_EPS, &mut |t, v| {
                let y = nn::conv2d_transpose(t, v[0], v[1], v[2], 2, 1)?;
                let sq = ops::mul(t, y, y)?;
                Ok(ops::mean(t, sq))
            })
        }
        "batchnorm_train" | "batchnorm_eval" => {
            let mode = if name == "batchnorm_train" {
                BnMode::Train
            } else {
                BnMode::Eval
            };
            let x = Tensor::randn(&[2, 3, 4, 4], 1.0, &mut rng);
            let gamma = Tensor::randn_mean(&[3], 1.0, 0.1, &mut rng);
            let beta = Tensor::randn(&[3], 0.2, &mut rng);
            grad_check(name, &[x, gamma, beta], DEFAULT_EPS, &mut |t, v| {
                let running = RefCell::new(BnRunning { mean: vec![0.0; 3], var: vec![1.0; 3] });
                let y = nn::batchnorm(t, v[0], v[1], v[2], &running, BN_EPS, BN_MOMENTUM, mode)?;
                let sq = ops::mul(t, y, y)?;
                Ok(ops::mean(t, sq))
            })
        }
        "relu" => {
            let x = kink_safe(&[2, 3, 4, 4], 0.05, 11);
            grad_check(name, &[x], DEFAULT_EPS, &mut |t, v| {
                let y = nn::relu(t, v[0]);
                let sq = ops::mul(t, y, y)?;
                Ok(ops::mean(t, sq))
            })
        }
        "leaky_relu" => {
            let x = kink_safe(&[2, 3, 4, 4], 0.05, 12);
            grad_check(name, &[x], DEFAULT_EPS, &mut |t, v| {
                let y = nn::leaky_relu(t, v[0], LEAKY_SLOPE);
                let sq = ops::mul(t, y, y)?;
                Ok(ops::mean(t, sq))
            })
        }
        "tanh" => {
            let x = Tensor::randn(&[2, 3, 4, 4], 1.0, &mut rng);
            grad_check(name, &[x], DEFAULT_EPS, &mut |t, v| {
                let y = nn::tanh(t, v[0]);
                let sq = ops::mul(t, y, y)?;
                Ok(ops::mean(t, sq))
            })
        }
        "sigmoid" => {
            let x = Tensor::randn(&[2, 3, 4, 4], 1.0, &mut rng);
            grad_check(name, &[x], DEFAULT_EPS, &mut |t, v| {
                let y = nn::sigmoid(t, v[0]);
                let sq = ops::mul(t, y, y)?;
                Ok(ops::mean(t, sq))
            })
        }
        "maxpool2x2" => {
            let x = spaced(&[1, 2, 4, 4], 0.25, 13);
            grad_check(name, &[x], DEFAULT_EPS, &mut |t, v| {
                let y = nn::maxpool2x2(t, v[0])?;
                let sq = ops::mul(t, y, y)?;
                Ok(ops::mean(t, sq))
            })
        }
        "residual_block" => {
            // Functional form of the block: conv-BN-ReLU-conv-BN plus the
            // identity, probing the input and both convolutions' parameters.
            let x = Tensor::randn(&[1, 2, 4, 4], 1.0, &mut rng);
            let w1 = Tensor::randn(&[2, 2, 3, 3], 0.4, &mut rng);
            let b1 = Tensor::randn(&[2], 0.2, &mut rng);
            let g1 = Tensor::randn_mean(&[2], 1.0, 0.1, &mut rng);
            let be1 = Tensor::randn(&[2], 0.2, &mut rng);
            let w2 = Tensor::randn(&[2, 2, 3, 3], 0.4, &mut rng);
            let b2 = Tensor::randn(&[2], 0.2, &mut rng);
            let g2 = Tensor::randn_mean(&[2], 1.0, 0.1, &mut rng);
            let be2 = Tensor::randn(&[2], 0.2, &mut rng);
            grad_check(
                name,
                &[x, w1, b1, g1, be1, w2, b2, g2, be2],
                DEFAULT_EPS,
                &mut |t, v| {
                    let r1 = RefCell::new(BnRunning { mean: vec![0.0; 2], var: vec![1.0; 2] });
                    let r2 = RefCell::new(BnRunning { mean: vec![0.0; 2], var: vec![1.0; 2] });
                    let c1 = nn::conv2d(t, v[0], v[1], v[2], 1, 1)?;
                    let n1 =
                        nn::batchnorm(t, c1, v[3], v[4], &r1, BN_EPS, BN_MOMENTUM, BnMode::Train)?;
                    let a1 = nn::relu(t, n1);
                    let c2 = nn::conv2d(t, a1, v[5], v[6], 1, 1)?;
                    let n2 =
                        nn::batchnorm(t, c2, v[7], v[8], &r2, BN_EPS, BN_MOMENTUM, BnMode::Train)?;
                    let y = ops::add(t, n2, v[0])?;
                    let sq = ops::mul(t, y, y)?;
                    Ok(ops::mean(t, sq))
                },
            )
        }
        "adv_d" => {
            let real_logits = Tensor::randn(&[1, 1, 2, 2], 1.0, &mut rng);
            let fake_logits = Tensor::randn(&[1, 1, 2, 2], 1.0, &mut rng);
            grad_check(name, &[real_logits, fake_logits], DEFAULT_EPS, &mut |t, v| {
                let d_real = nn::sigmoid(t, v[0]);
                let d_fake = nn::sigmoid(t, v[1]);
                losses::adv_d_loss(t, d_real, d_fake)
            })
        }
        "adv_g" => {
            let fake_logits = Tensor::randn(&[1, 1, 2, 2], 1.0, &mut rng);
            grad_check(name, &[fake_logits], DEFAULT_EPS, &mut |t, v| {
                let d_fake = nn::sigmoid(t, v[0]);
                Ok(losses::adv_g_loss(t, d_fake, false))
            })
        }
        "l1" => {
            // Keep |a - b| off the kink by a margin wider than the probe.
            let a = Tensor::randn(&[1, 3, 4, 4], 1.0, &mut rng);
            let offset = kink_safe(&[1, 3, 4, 4], 0.05, 14);
            let mut b = a.clone();
            for (bv, ov) in b.data_mut().iter_mut().zip(offset.data()) {
                *bv += ov;
            }
            grad_check(name, &[a, b], DEFAULT_EPS, &mut |t, v| {
                losses::l1_loss(t, v[0], v[1])
            })
        }
        "perturbed" => {
            let fake = Tensor::randn(&[1, 2, 3, 3], 0.5, &mut rng);
            let real = Tensor::randn(&[1, 2, 3, 3], 0.5, &mut rng);
            grad_check(name, &[fake, real], DEFAULT_EPS, &mut |t, v| {
                let mut alpha_rng = Rng::new(0);
                let mixed = losses::perturb_mix(t, v[0], v[1], Some(0.3), &mut alpha_rng)?;
                let d_mixed = nn::sigmoid(t, mixed);
                Ok(losses::perturbed_loss(t, d_mixed))
            })
        }
        "cascade" => {
            let phi = CascadeNet::new(CascadeNetConfig {
                widths: vec![2, 2],
                seed: 5,
            })?;
            let output = Tensor::randn(&[1, 3, 8, 8], 0.5, &mut rng);
            let target = Tensor::randn(&[1, 3, 8, 8], 0.5, &mut rng);
            grad_check(name, &[output], DEFAULT_EPS, &mut |t, v| {
                let pv = phi.lease(t);
                let tgt = t.constant(target.clone());
                let feats_target = pv.forward(t, tgt)?;
                let feats_output = pv.forward(t, v[0])?;
                losses::cascade_loss(t, &feats_target, &feats_output, None)
            })
        }
        "generator" => {
            let cfg = GeneratorConfig {
                input_channels: 1,
                base_width: 1,
                num_res_blocks: 1,
                output_channels: 1,
                image_size: 8,
            };
            let gen = Generator::new(cfg, &mut rng)?;
            let x = Tensor::randn(&[1, 1, 8, 8], 1.0, &mut rng);
            let target = Tensor::randn(&[1, 1, 8, 8], 0.5, &mut rng);
            grad_check(name, &[x], DEFAULT_EPS, &mut |t, v| {
                let gv = gen.lease(t, true);
                let y = gv.forward(t, v[0], BnMode::Train)?;
                let tgt = t.constant(target.clone());
                let d = ops::sub(t, y, tgt)?;
                let sq = ops::mul(t, d, d)?;
                Ok(ops::mean(t, sq))
            })
        }
        "discriminator" => {
            let cfg = DiscriminatorConfig {
                condition_channels: 2,
                image_channels: 1,
                layers: 2,
                base_width: 2,
            };
            let disc = Discriminator::new(cfg, &mut rng)?;
            let cond = Tensor::randn(&[1, 2, 8, 8], 1.0, &mut rng);
            let img = Tensor::randn(&[1, 1, 8, 8], 1.0, &mut rng);
            grad_check(name, &[cond, img], DEFAULT_EPS, &mut |t, v| {
                let dv = disc.lease(t, true);
                let grid = dv.forward(t, v[0], v[1], BnMode::Train)?;
                let sq = ops::mul(t, grid, grid)?;
                Ok(ops::mean(t, sq))
            })
        }
        other => Err(Error::config(format!(
            "unknown gradcheck op '{other}'; available: {}",
            SUITE_OPS.join(", ")
        ))),
    }
}

/// Result of one suite case.
#[derive(Debug, Clone)]
pub struct SuiteOutcome {
    pub name: String,
    pub report: GradCheckReport,
}

/// Runs the standard suite, or a single named case when `filter` is given.
/// The returned outcomes carry per-case reports; callers decide tolerance.
pub fn run_standard_suite(filter: Option<&str>) -> Result<Vec<SuiteOutcome>> {
    let names: Vec<&str> = match filter {
        Some(f) => {
            if !SUITE_OPS.contains(&f) {
                return Err(Error::config(format!(
                    "unknown gradcheck op '{f}'; available: {}",
                    SUITE_OPS.join(", ")
                )));
            }
            vec![f]
        }
        None => SUITE_OPS.to_vec(),
    };
    let mut outcomes = Vec::with_capacity(names.len());
    for name in names {
        outcomes.push(SuiteOutcome {
            name: name.to_string(),
            report: run_case(name)?,
        });
    }
    Ok(outcomes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::DEFAULT_TOL;

    #[test]
    fn standard_suite_passes_within_tolerance() {
        let outcomes = run_standard_suite(None).expect("suite runs");
        assert_eq!(outcomes.len(), SUITE_OPS.len());
        for o in &outcomes {
            assert!(
                o.report.passed(DEFAULT_TOL),
                "{}: {}",
                o.name,
                o.report
            );
        }
    }

    #[test]
    fn single_op_filter_runs_one_case() {
        let outcomes = run_standard_suite(Some("tanh")).unwrap();
        assert_eq!(outcomes.len(), 1);
        assert_eq!(outcomes[0].name, "tanh");
    }

    #[test]
    fn unknown_op_is_rejected_with_available_list() {
        let err = run_standard_suite(Some("softmax")).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("softmax") && msg.contains("conv2d"), "{msg}");
    }

    #[test]
    fn fixtures_respect_margins() {
        let t = kink_safe(&[2, 3, 4, 4], 0.05, 11);
        assert!(t.data().iter().all(|v| v.abs() >= 0.05));
        let s = spaced(&[1, 2, 4, 4], 0.25, 13);
        let mut vals: Vec<f32> = s.data().to_vec();
        vals.sort_by(f32::total_cmp);
        assert!(vals.windows(2).all(|w| w[1] - w[0] >= 0.25 - 1e-6));
    }
}
