//! Central finite-difference verification of tape gradients.

use super::tape::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Coordinate errors whose absolute difference falls below this are treated
/// as exact; central differences at `h = 1e-5` carry noise around `1e-10`.
pub const ABS_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub max_abs_diff: f64,
    /// `(input index, flat coordinate)` of the worst coordinate.
    pub worst: Option<(usize, usize)>,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
    pub checked: usize,
    pub tol: f64,
    pub passed: bool,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    if diff < ABS_FLOOR {
        return 0.0;
    }
    diff / analytic.abs().max(numeric.abs())
}

/// Check a scalar function of one tensor at every coordinate.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    grad_check_many(|tape, vars| f(tape, vars[0]), std::slice::from_ref(x), None, h, tol)
}

/// Check a scalar function of several tensors. `coords` restricts the check
/// to the listed `(input, flat index)` pairs; `None` checks every coordinate.
pub fn grad_check_many<F>(
    f: F,
    inputs: &[Tensor],
    coords: Option<&[(usize, usize)]>,
    h: f64,
    tol: f64,
) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    if h <= 0.0 {
        return Err(Error::config("finite-difference step must be positive"));
    }
    let analytic: Vec<Tensor> = {
        let tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
        let loss = f(&tape, &vars)?;
        let grads = tape.backward(loss)?;
        vars.iter().map(|v| grads.get(*v).cloned().expect("leaf gradient")).collect()
    };
    let eval = |which: usize, idx: usize, delta: f64| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var> = inputs
            .iter()
            .enumerate()
            .map(|(i, t)| {
                let mut t = t.clone();
                if i == which {
                    t.data_mut()[idx] += delta;
                }
                tape.constant(t)
            })
            .collect();
        f(&tape, &vars)?.item()
    };
    let all: Vec<(usize, usize)>;
    let coords = match coords {
        Some(c) => c,
        None => {
            all = inputs.iter().enumerate().flat_map(|(i, t)| (0..t.numel()).map(move |j| (i, j))).collect();
            &all
        }
    };
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_abs_diff: 0.0,
        worst: None,
        analytic_at_worst: 0.0,
        numeric_at_worst: 0.0,
        checked: 0,
        tol,
        passed: true,
    };
    for &(which, idx) in coords {
        let numeric = (eval(which, idx, h)? - eval(which, idx, -h)?) / (2.0 * h);
        let a = analytic[which].data()[idx];
        let err = relative_error(a, numeric);
        report.checked += 1;
        report.max_abs_diff = report.max_abs_diff.max((a - numeric).abs());
        if err > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = err;
            report.worst = Some((which, idx));
            report.analytic_at_worst = a;
            report.numeric_at_worst = numeric;
        }
    }
    report.passed = report.max_rel_error < tol;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn random(dims: &[usize], seed: u64) -> Tensor {
        let mut r = rng::seeded(seed);
        Tensor::from_fn(dims, |_| rng::uniform(&mut r, -1.0, 1.0)).unwrap()
    }

    #[test]
    fn sum_is_exact() {
        let x = random(&[3, 4], 1);
        let rep = grad_check(|_, v| v.sum(), &x, 1e-5, 1e-12).unwrap();
        assert!(rep.passed);
        assert_eq!(rep.checked, 12);
    }

    #[test]
    fn wrong_rule_fails() {
        let x = random(&[5], 2);
        // forward x^2, backward claims 3x
        let rep = grad_check(
            |tape, v| {
                let xv = v.value();
                let out = xv.map(|a| a * a);
                let x2 = xv.clone();
                tape.record("bad_square", &[v], out, move |g| {
                    let data = g.data().iter().zip(x2.data()).map(|(g, x)| 3.0 * g * x).collect();
                    vec![Some(Tensor::new(x2.dims(), data).unwrap())]
                })?
                .sum()
            },
            &x,
            1e-5,
            1e-5,
        )
        .unwrap();
        assert!(!rep.passed);
        assert!(rep.max_rel_error > 0.1);
    }

    #[test]
    fn restricted_coordinates() {
        let a = random(&[2, 3], 3);
        let b = random(&[3, 2], 4);
        let rep =
            grad_check_many(|_, v| v[0].matmul(v[1])?.sum(), &[a, b], Some(&[(0, 1), (1, 5)]), 1e-5, 1e-6).unwrap();
        assert_eq!(rep.checked, 2);
        assert!(rep.passed, "{rep:?}");
    }

    #[test]
    fn rejects_nonpositive_step() {
        let x = random(&[2], 5);
        assert!(grad_check(|_, v| v.sum(), &x, 0.0, 1e-5).is_err());
    }
}
