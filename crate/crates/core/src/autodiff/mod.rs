//! Dense numerics and reverse-mode automatic differentiation.
//!
//! A *program* is any closure that builds a scalar on a [`Tape`] from a single
//! flat input column. [`evaluate_with_tape`] records it, [`reverse_gradient`]
//! sweeps it backwards and [`finite_difference_check`] validates the sweep
//! against central differences.

mod params;
mod tape;
mod tensor;

pub use params::{Layout, ParamVector, Segment};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

pub(crate) use tape::sigmoid;

use crate::error::{Error, Result};

/// Records `program` at `inputs`. The tape's single output is the returned node.
pub fn evaluate_with_tape<F>(program: F, inputs: &ParamVector) -> Result<(f64, Tape)>
where
    F: Fn(&mut Tape, Var) -> Var,
{
    let mut tape = Tape::new();
    let x = tape.input(Tensor::column(inputs.as_slice().to_vec()));
    let out = program(&mut tape, x);
    tape.set_output(out);
    tape.check_finite()?;
    if tape.shape(out) != (1, 1) {
        return Err(Error::NotScalarOutput(tape.value(out).len()));
    }
    let value = tape.scalar(out);
    Ok((value, tape))
}

/// Gradient of the tape's scalar output with respect to its inputs, laid out
/// like a flat parameter vector (inputs concatenated in creation order).
pub fn reverse_gradient(tape: &Tape) -> Result<ParamVector> {
    let grads = tape::input_gradients(tape)?;
    let data = grads.into_iter().flat_map(Tensor::into_data).collect();
    Ok(ParamVector::flat(data))
}

/// Same as [`reverse_gradient`] but keeps the layout of `like`.
pub fn reverse_gradient_like(tape: &Tape, like: &ParamVector) -> Result<ParamVector> {
    let flat = reverse_gradient(tape)?;
    ParamVector::new(like.layout().clone(), flat.into_vec())
}

/// Max over coordinates of `|ad - fd| / max(1, |ad|)` with central differences.
pub fn finite_difference_check<F>(program: F, point: &ParamVector, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Var,
{
    if step.is_nan() || step <= 0.0 {
        return Err(Error::invalid(format!("finite-difference step must be > 0, got {step}")));
    }
    let (_, tape) = evaluate_with_tape(&program, point)?;
    let ad = reverse_gradient(&tape)?;
    let fd = central_differences(&program, point, step)?;
    Ok(ad
        .as_slice()
        .iter()
        .zip(&fd)
        .map(|(a, f)| (a - f).abs() / a.abs().max(1.0))
        .fold(0.0, f64::max))
}

/// Central-difference gradient estimate.
pub fn central_differences<F>(program: F, point: &ParamVector, step: f64) -> Result<Vec<f64>>
where
    F: Fn(&mut Tape, Var) -> Var,
{
    let mut probe = point.clone();
    let mut out = Vec::with_capacity(point.len());
    for i in 0..point.len() {
        let x = point.as_slice()[i];
        probe.as_mut_slice()[i] = x + step;
        let (hi, _) = evaluate_with_tape(&program, &probe)?;
        probe.as_mut_slice()[i] = x - step;
        let (lo, _) = evaluate_with_tape(&program, &probe)?;
        probe.as_mut_slice()[i] = x;
        out.push((hi - lo) / (2.0 * step));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_input(v: f64) -> ParamVector {
        ParamVector::flat(vec![v])
    }

    #[test]
    fn identity_program() {
        let (v, _) = evaluate_with_tape(|t, x| t.sum(x), &scalar_input(3.0)).unwrap();
        assert_eq!(v, 3.0);
    }

    #[test]
    fn tanh_of_zero() {
        let prog = |t: &mut Tape, x: Var| {
            let z = t.scale(x, 0.0);
            let y = t.tanh(z);
            t.sum(y)
        };
        let (v, _) = evaluate_with_tape(prog, &scalar_input(0.7)).unwrap();
        assert_eq!(v, 0.0);
    }

    #[test]
    fn half_square_gradient() {
        let prog = |t: &mut Tape, x: Var| {
            let sq = t.mul(x, x);
            let s = t.sum(sq);
            t.scale(s, 0.5)
        };
        let (v, tape) = evaluate_with_tape(prog, &scalar_input(1.0)).unwrap();
        assert_eq!(v, 0.5);
        assert_eq!(reverse_gradient(&tape).unwrap().as_slice(), &[1.0]);
    }

    #[test]
    fn product_gradient() {
        let prog = |t: &mut Tape, x: Var| {
            let a = t.slice(x, 0, 1, 1);
            let b = t.slice(x, 1, 1, 1);
            let p = t.mul(a, b);
            t.sum(p)
        };
        let (v, tape) = evaluate_with_tape(prog, &ParamVector::flat(vec![2.0, 3.0])).unwrap();
        assert_eq!(v, 6.0);
        assert_eq!(reverse_gradient(&tape).unwrap().as_slice(), &[3.0, 2.0]);
    }

    #[test]
    fn constant_program_has_zero_gradient() {
        let prog = |t: &mut Tape, _x: Var| t.constant_scalar(4.0);
        let (v, tape) = evaluate_with_tape(prog, &ParamVector::flat(vec![1.0, -1.0])).unwrap();
        assert_eq!(v, 4.0);
        assert_eq!(reverse_gradient(&tape).unwrap().as_slice(), &[0.0, 0.0]);
    }

    #[test]
    fn sum_of_squares_gradient() {
        let prog = |t: &mut Tape, x: Var| t.dot(x, x);
        let (_, tape) = evaluate_with_tape(prog, &ParamVector::flat(vec![1.0, 2.0])).unwrap();
        assert_eq!(reverse_gradient(&tape).unwrap().as_slice(), &[2.0, 4.0]);
    }

    #[test]
    fn non_finite_is_reported_with_primitive() {
        let prog = |t: &mut Tape, x: Var| {
            let l = t.log(x);
            t.sum(l)
        };
        let err = evaluate_with_tape(prog, &scalar_input(-1.0)).unwrap_err();
        match err {
            Error::NonFinite { primitive, node } => {
                assert_eq!(primitive, "log");
                assert_eq!(node, 1);
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn multi_output_rejected() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::scalar(1.0));
        let y = tape.scale(x, 2.0);
        tape.set_output(x);
        tape.set_output(y);
        assert!(matches!(reverse_gradient(&tape), Err(Error::NotScalarOutput(2))));
    }

    #[test]
    fn fd_check_quadratic_and_linear() {
        let quad = |t: &mut Tape, x: Var| {
            let s = t.dot(x, x);
            t.scale(s, 0.5)
        };
        let p = ParamVector::flat(vec![0.3, -1.2, 2.0]);
        assert!(finite_difference_check(quad, &p, 1e-5).unwrap() <= 1e-6);
        let lin = |t: &mut Tape, x: Var| {
            let c = t.constant(Tensor::column(vec![1.0, -2.0, 0.5]));
            t.dot(c, x)
        };
        // Dyadic point and steps keep x +- h and the linear form exact, so any
        // residual would come from the reverse sweep itself.
        let dyadic = ParamVector::flat(vec![0.25, -1.25, 2.0]);
        for step in [2f64.powi(-20), 2f64.powi(-10), 1.0, 8.0] {
            assert!(finite_difference_check(lin, &dyadic, step).unwrap() <= 1e-12);
        }
    }

    #[test]
    fn fd_step_must_be_positive() {
        let lin = |t: &mut Tape, x: Var| t.sum(x);
        assert!(finite_difference_check(lin, &scalar_input(1.0), 0.0).is_err());
    }

    #[test]
    fn detach_cuts_gradient() {
        let prog = |t: &mut Tape, x: Var| {
            let d = t.detach(x);
            let p = t.mul(d, x);
            t.sum(p)
        };
        let (_, tape) = evaluate_with_tape(prog, &scalar_input(3.0)).unwrap();
        assert_eq!(reverse_gradient(&tape).unwrap().as_slice(), &[3.0]);
    }
}
