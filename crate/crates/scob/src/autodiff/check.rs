//! Central finite-difference oracle for gradient verification.

use crate::error::{Result, ScobError};

use super::tape::{Tape, Tensor};

/// A differentiable scalar function of one tensor, expressed as a tape
/// recording. The closure must be deterministic.
pub type ScalarFn<'a> = &'a dyn Fn(&mut Tape, Tensor) -> Result<Tensor>;

fn eval(f: ScalarFn, x: &[f64], shape: &[usize]) -> Result<f64> {
    let mut tape = Tape::new();
    let t = tape.constant(x.to_vec(), shape)?;
    let out = f(&mut tape, t)?;
    if tape.values(out).len() != 1 {
        return Err(ScobError::Contract("finite_diff_check: f must be scalar".into()));
    }
    Ok(tape.value_scalar(out))
}

/// Maximum over coordinates of `|analytic - central difference| / max(1, |analytic|)`.
///
/// Evaluates `f` twice at `x` first; any bitwise mismatch means the function
/// is not deterministic and the oracle refuses to judge it.
pub fn finite_diff_check(f: ScalarFn, x: &[f64], shape: &[usize], eps: f64) -> Result<f64> {
    if !(eps > 0.0 && eps <= 1e-3) {
        return Err(ScobError::Oracle(format!("eps {eps} outside (0, 1e-3]")));
    }
    let v0 = eval(f, x, shape)?;
    let v1 = eval(f, x, shape)?;
    if v0.to_bits() != v1.to_bits() {
        return Err(ScobError::Oracle("repeat evaluation mismatch: f is not deterministic".into()));
    }

    // analytic gradient
    let mut tape = Tape::new();
    let t = tape.leaf(x.to_vec(), shape, true)?;
    let out = f(&mut tape, t)?;
    tape.backward(out)?;
    let analytic: Vec<f64> = match tape.grad(t) {
        Some(g) => g.to_vec(),
        // gradient never reached the input (e.g. f ignores x): treat as zero
        None => vec![0.0; x.len()],
    };

    let mut max_err = 0.0f64;
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + eps;
        let fp = eval(f, &probe, shape)?;
        probe[i] = orig - eps;
        let fm = eval(f, &probe, shape)?;
        probe[i] = orig;
        let central = (fp - fm) / (2.0 * eps);
        let err = (analytic[i] - central).abs() / analytic[i].abs().max(1.0);
        if err > max_err {
            max_err = err;
        }
    }
    Ok(max_err)
}
