//! Central finite-difference gradient checks against the tape.

use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Default denominator floor for relative errors.
pub const DEFAULT_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// `max |a − n| / max(|a|, |n|, floor)` over every element.
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub analytic: Vec<Vec<f64>>,
    pub numeric: Vec<Vec<f64>>,
}

/// Compares tape gradients of `f` at `params` with central differences of
/// step `eps`. `f` must be deterministic (reseed any RNG inside it).
pub fn finite_diff_check<F>(f: F, params: &[Tensor], eps: f64) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape, &[Var]) -> Result<Var>,
{
    finite_diff_check_with(f, params, eps, DEFAULT_FLOOR)
}

pub fn finite_diff_check_with<F>(mut f: F, params: &[Tensor], eps: f64, floor: f64) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let mut eval = |tape: &mut Tape, values: &[Tensor]| -> Result<(Var, Vec<Var>)> {
        tape.clear();
        let vars = values
            .iter()
            .map(|t| tape.param(t.clone()))
            .collect::<Result<Vec<_>>>()?;
        let loss = f(tape, &vars)?;
        Ok((loss, vars))
    };

    let (loss, vars) = eval(&mut tape, params)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(params)
        .map(|(&v, p)| grads.get_or_zeros(v, p.len()))
        .collect();

    let mut work = params.to_vec();
    let mut numeric = Vec::with_capacity(params.len());
    for pi in 0..params.len() {
        let mut col = Vec::with_capacity(params[pi].len());
        for ei in 0..params[pi].len() {
            let orig = work[pi].data()[ei];
            work[pi].data_mut()[ei] = orig + eps;
            let (lp, _) = eval(&mut tape, &work)?;
            let fp = tape.scalar_value(lp);
            work[pi].data_mut()[ei] = orig - eps;
            let (lm, _) = eval(&mut tape, &work)?;
            let fm = tape.scalar_value(lm);
            work[pi].data_mut()[ei] = orig;
            col.push((fp - fm) / (2.0 * eps));
        }
        numeric.push(col);
    }

    let mut max_rel_err: f64 = 0.0;
    let mut max_abs_err: f64 = 0.0;
    for (a, n) in analytic.iter().flatten().zip(numeric.iter().flatten()) {
        let abs = (a - n).abs();
        max_abs_err = max_abs_err.max(abs);
        max_rel_err = max_rel_err.max(abs / a.abs().max(n.abs()).max(floor));
    }
    Ok(GradCheckReport {
        max_rel_err,
        max_abs_err,
        analytic,
        numeric,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let x = Tensor::vector(vec![0.3, -1.2, 2.5]);
        let r = finite_diff_check(
            |t, v| {
                let sq = t.mul(v[0], v[0])?;
                t.sum(sq)
            },
            &[x],
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_err <= 1e-8, "{}", r.max_rel_err);
        assert!((r.analytic[0][1] + 2.4).abs() < 1e-12);
    }

    #[test]
    fn constant_function_has_zero_gradients() {
        let x = Tensor::vector(vec![1.0, 2.0]);
        let r = finite_diff_check(|t, _| t.constant(Tensor::scalar(4.0)), &[x], 1e-5).unwrap();
        assert!(r.analytic[0].iter().all(|&g| g == 0.0));
        assert!(r.numeric[0].iter().all(|&g| g == 0.0));
        assert_eq!(r.max_rel_err, 0.0);
    }
}
