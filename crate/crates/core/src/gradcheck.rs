//! Central finite-difference verification of tape gradients.
//!
//! For a scalar-valued builder `f(params)` the harness compares the tape's
//! analytic gradient against `(f(p + eps·e_i) - f(p - eps·e_i)) / (2·eps)`
//! for every element of every parameter, rebuilding the tape per probe. The
//! error measure is `|a - n| / max(|a|, |n|, 1)`, which behaves like a
//! relative error for large gradients and an absolute one near zero.
//!
//! Builders must be deterministic: two calls with the same parameter values
//! must produce the same loss. Ops with measure-zero kinks (ReLU at 0, max
//! pooling at ties) are probed with continuous random inputs, where a probe
//! landing on a kink has probability zero.

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const DEFAULT_EPS: f32 = 1e-3;
pub const DEFAULT_TOL: f32 = 1e-3;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub name: String,
    /// Worst error measure observed across all probed elements.
    pub max_err: f32,
    /// (parameter index, element index, analytic, numeric) for the worst probe.
    pub worst: Option<(usize, usize, f32, f32)>,
    /// Number of elements probed.
    pub probes: usize,
}

impl GradCheckReport {
    pub fn passed(&self, tol: f32) -> bool {
        self.max_err < tol
    }
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{}: max err {:.3e} over {} probes",
            self.name, self.max_err, self.probes
        )?;
        if let Some((p, i, a, n)) = self.worst {
            write!(f, " (worst at param {p}[{i}]: analytic {a:.6e}, numeric {n:.6e})")?;
        }
        Ok(())
    }
}

/// Check d(loss)/d(param) for every element of every tensor in `params`.
/// `build` receives leaves in the same order and must return a scalar loss.
pub fn grad_check(
    name: &str,
    params: &[Tensor],
    eps: f32,
    build: &mut dyn FnMut(&mut Tape, &[Var]) -> Result<Var>,
) -> Result<GradCheckReport> {
    // Analytic pass.
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone(), true)).collect();
    let loss = build(&mut tape, &vars)?;
    let loss_value = tape.value(loss).item()?;
    if !loss_value.is_finite() {
        return Err(Error::contract(format!(
            "grad_check `{name}`: non-finite loss {loss_value}"
        )));
    }
    tape.backward(loss)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(params)
        .map(|(v, p)| {
            tape.take_grad(*v)
                .unwrap_or_else(|| Tensor::zeros(p.shape()))
        })
        .collect();
    drop(tape);

    // Numeric probes: rebuild the tape with one perturbed element at a time.
    let mut work: Vec<Tensor> = params.to_vec();
    let eval = |work: &[Tensor], build: &mut dyn FnMut(&mut Tape, &[Var]) -> Result<Var>| -> Result<f32> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = work.iter().map(|p| tape.leaf(p.clone(), false)).collect();
        let loss = build(&mut tape, &vars)?;
        tape.value(loss).item()
    };

    let mut max_err = 0.0f32;
    let mut worst = None;
    let mut probes = 0usize;
    for pi in 0..work.len() {
        for ei in 0..work[pi].numel() {
            let orig = work[pi].data()[ei];
            work[pi].data_mut()[ei] = orig + eps;
            let fp = eval(&work, build)?;
            work[pi].data_mut()[ei] = orig - eps;
            let fm = eval(&work, build)?;
            work[pi].data_mut()[ei] = orig;
            if !fp.is_finite() || !fm.is_finite() {
                return Err(Error::contract(format!(
                    "grad_check `{name}`: non-finite loss while probing param {pi}[{ei}]"
                )));
            }
            let numeric = ((fp as f64 - fm as f64) / (2.0 * eps as f64)) as f32;
            let a = analytic[pi].data()[ei];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1.0);
            probes += 1;
            if err > max_err {
                max_err = err;
                worst = Some((pi, ei, a, numeric));
            }
        }
    }
    Ok(GradCheckReport {
        name: name.to_string(),
        max_err,
        worst,
        probes,
    })
}

/// [`grad_check`] that fails hard, for use inside tests and the CLI
/// verification command.
pub fn assert_grad_check(
    name: &str,
    params: &[Tensor],
    tol: f32,
    build: &mut dyn FnMut(&mut Tape, &[Var]) -> Result<Var>,
) -> Result<GradCheckReport> {
    let report = grad_check(name, params, DEFAULT_EPS, build)?;
    if !report.passed(tol) {
        return Err(Error::contract(format!("gradient check failed: {report}")));
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops;
    use crate::rng::Rng;

    #[test]
    fn quadratic_gradient_verifies() {
        let mut rng = Rng::new(1);
        let x = Tensor::randn(&[6], 1.0, &mut rng);
        let report = grad_check("mean(x*x)", &[x], DEFAULT_EPS, &mut |t, vars| {
            let sq = ops::mul(t, vars[0], vars[0])?;
            Ok(ops::mean(t, sq))
        })
        .unwrap();
        assert!(report.passed(DEFAULT_TOL), "{report}");
        assert_eq!(report.probes, 6);
    }

    #[test]
    fn deliberately_wrong_gradient_is_caught() {
        // mean(2x) has gradient 2/n, but this builder lies to the tape by
        // detaching and re-adding, producing gradient 1/n instead.
        let x = Tensor::from_vec(&[4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let report = grad_check("broken", &[x], DEFAULT_EPS, &mut |t, vars| {
            let d = t.detach(vars[0]);
            let two_x = ops::add(t, vars[0], d)?;
            Ok(ops::mean(t, two_x))
        })
        .unwrap();
        assert!(!report.passed(DEFAULT_TOL), "detached half must be flagged");
    }

    #[test]
    fn multi_param_losses_probe_every_tensor() {
        let mut rng = Rng::new(2);
        let a = Tensor::randn(&[3], 1.0, &mut rng);
        let b = Tensor::randn(&[3], 1.0, &mut rng);
        let report = grad_check("mean(a*b)", &[a, b], DEFAULT_EPS, &mut |t, vars| {
            let p = ops::mul(t, vars[0], vars[1])?;
            Ok(ops::mean(t, p))
        })
        .unwrap();
        assert!(report.passed(DEFAULT_TOL), "{report}");
        assert_eq!(report.probes, 6);
    }

    // ln of a negative number produces NaN at the ln op. Debug builds trap
    // it at record time with a panic naming the op; release builds fall
    // through to grad_check's own non-finite diagnostic.
    #[test]
    #[cfg_attr(debug_assertions, should_panic(expected = "op `ln`"))]
    fn non_finite_loss_is_reported_with_op_name() {
        let x = Tensor::from_vec(&[1], vec![-1.0]).unwrap();
        let result = grad_check("ln(x)", &[x], DEFAULT_EPS, &mut |t, vars| {
            Ok(ops::ln(t, vars[0]))
        });
        // Only reached without debug assertions.
        let err = result.unwrap_err();
        assert!(err.to_string().contains("ln(x)"), "{err}");
    }
}
