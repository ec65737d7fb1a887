use serde::Serialize;

use crate::error::Result;
use crate::numerics::{Tape, Tensor, Var};

/// Denominator floor for relative errors, so that gradients near zero are
/// compared in absolute terms instead of amplifying round-off.
pub const REL_ERR_FLOOR: f64 = 1e-2;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR);
    (analytic - numeric).abs() / denom
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// `(input index, flat coordinate)` of the worst coordinate.
    pub worst: Option<(usize, usize)>,
    pub coordinates: usize,
    pub failures: usize,
    pub step: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// Compares the tape gradient of the scalar built by `f` against central
/// differences `(f(x+h) − f(x−h)) / 2h` for every coordinate of every input.
///
/// `f` receives a fresh tape and one variable per input and must return a
/// one-element node.
pub fn grad_check<F>(inputs: &[Tensor<f64>], f: F, h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    grad_check_on(inputs, f, h, tol, Tape::new)
}

#[doc(hidden)]
pub fn grad_check_on<F, M>(inputs: &[Tensor<f64>], f: F, h: f64, tol: f64, make_tape: M) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
    M: Fn() -> Tape<f64>,
{
    let mut tape = make_tape();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| grads.get(v).map_or_else(|| vec![0.0; t.numel()], |g| g.data().to_vec()))
        .collect();

    let eval = |perturbed: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };

    let mut work = inputs.to_vec();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: None,
        coordinates: 0,
        failures: 0,
        step: h,
        tolerance: tol,
        passed: true,
    };
    for i in 0..inputs.len() {
        for j in 0..inputs[i].numel() {
            let orig = inputs[i].data()[j];
            work[i].data_mut()[j] = orig + h;
            let plus = eval(&work)?;
            work[i].data_mut()[j] = orig - h;
            let minus = eval(&work)?;
            work[i].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let err = relative_error(analytic[i][j], numeric);
            report.coordinates += 1;
            if !(err <= tol) {
                report.failures += 1;
            }
            if !(err <= report.max_rel_err) {
                report.max_rel_err = err;
                report.worst = Some((i, j));
            }
        }
    }
    report.passed = report.failures == 0;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cube(tape: &mut Tape<f64>, v: &[Var]) -> Result<Var> {
        let sq = tape.mul(v[0], v[0])?;
        let c = tape.mul(sq, v[0])?;
        Ok(tape.sum(c))
    }

    #[test]
    fn quadratic_matches() {
        let x = Tensor::scalar(3.0);
        let report = grad_check(
            &[x],
            |tape, v| {
                let sq = tape.mul(v[0], v[0])?;
                Ok(tape.sum(sq))
            },
            1e-5,
            1e-8,
        )
        .unwrap();
        assert!(report.passed, "{report:?}");
        assert_eq!(report.coordinates, 1);
    }

    #[test]
    fn large_step_exposes_truncation_error() {
        let x = Tensor::scalar(2.0);
        let fine = grad_check(&[x.clone()], cube, 1e-5, 1e-6).unwrap();
        assert!(fine.passed);
        // central difference of x^3 is off by exactly h^2
        let coarse = grad_check(&[x], cube, 0.5, 1e-6).unwrap();
        assert!(!coarse.passed);
        assert!((coarse.max_rel_err - 0.25 / 12.25).abs() < 1e-9);
    }

    #[test]
    fn injected_fault_is_caught() {
        let x = Tensor::from_f64([4], &[-1.0, 0.5, -0.3, 2.0]).unwrap();
        let f = |tape: &mut Tape<f64>, v: &[Var]| -> Result<Var> {
            let r = tape.relu(v[0]);
            Ok(tape.sum(r))
        };
        assert!(grad_check(&[x.clone()], f, 1e-5, 1e-6).unwrap().passed);
        let bad = grad_check_on(&[x], f, 1e-5, 1e-6, Tape::with_injected_fault).unwrap();
        assert!(!bad.passed);
        assert_eq!(bad.failures, 2);
    }
}
