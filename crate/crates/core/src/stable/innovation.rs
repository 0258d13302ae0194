use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::linalg;

/// Below this `|omega|` the direction is undefined and the innovation is zero.
pub const DEGENERATE_DIRECTION: f64 = 1e-12;

/// `v = |z| omega / |omega|`.
pub fn innovation_full(z: &[f64], omega: &[f64]) -> Vec<f64> {
    scaled_direction(linalg::norm(z), omega)
}

/// `v = eta |z| omega / |omega|`.
pub fn innovation_batch(z: &[f64], omega: &[f64], eta: f64) -> Result<Vec<f64>> {
    if !(eta > 0.0) {
        return Err(Error::invalid(format!("epoch stepsize must be > 0, got {eta}")));
    }
    Ok(scaled_direction(eta * linalg::norm(z), omega))
}

fn scaled_direction(magnitude: f64, omega: &[f64]) -> Vec<f64> {
    let n = linalg::norm(omega);
    if n <= DEGENERATE_DIRECTION || magnitude == 0.0 {
        return vec![0.0; omega.len()];
    }
    let k = magnitude / n;
    omega.iter().map(|w| k * w).collect()
}

/// Tape version of the combinators: `scale |z| omega / |omega|`.
pub fn innovation_on_tape(tape: &mut Tape, z: Var, omega: Var, scale: f64) -> Var {
    let d = tape.shape(omega).0;
    let wn = tape.norm(omega);
    if tape.scalar(wn) <= DEGENERATE_DIRECTION {
        return tape.constant(Tensor::zeros(d, 1));
    }
    let zn = tape.norm(z);
    let inv = tape.recip(wn);
    let k = tape.mul(zn, inv);
    let ks = tape.scale(k, scale);
    tape.mul_scalar(ks, omega)
}

/// The sequence `(x0, 0, 0, ...)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImpulseSignal {
    pub x0: Vec<f64>,
}

impl ImpulseSignal {
    pub fn new(x0: Vec<f64>) -> Self {
        Self { x0 }
    }

    pub fn at(&self, t: usize) -> Vec<f64> {
        if t == 0 {
            self.x0.clone()
        } else {
            vec![0.0; self.x0.len()]
        }
    }

    pub fn energy(&self) -> f64 {
        linalg::norm_sq(&self.x0)
    }

    /// Input that drives Z at time `t`: `[|x0|, 1]` at `t = 0` (a summary of
    /// the initial condition plus a unit pulse), zero afterwards. Its energy is
    /// `|x0|^2 + 1`, finite like the impulse itself.
    pub fn operator_input(&self, t: usize) -> [f64; 2] {
        if t == 0 {
            [linalg::norm(&self.x0), 1.0]
        } else {
            [0.0, 0.0]
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_combinator_examples() {
        let v = innovation_full(&[2.0], &[3.0, 4.0]);
        assert!(linalg::max_abs_diff(&v, &[1.2, 1.6]) < 1e-15);
        assert_eq!(innovation_full(&[2.0], &[0.0, 0.0]), vec![0.0, 0.0]);
        assert_eq!(innovation_full(&[0.0, 0.0], &[3.0, 4.0]), vec![0.0, 0.0]);
        assert_eq!(innovation_full(&[2.0], &[1e-13, 0.0]), vec![0.0, 0.0]);
    }

    #[test]
    fn batch_combinator_examples() {
        let v = innovation_batch(&[2.0], &[3.0, 4.0], 0.1).unwrap();
        assert!((v[0] - 0.12).abs() < 1e-16 && (v[1] - 0.16).abs() < 1e-16);
        assert_eq!(innovation_batch(&[2.0], &[0.0, 0.0], 0.1).unwrap(), vec![0.0, 0.0]);
        let w = innovation_batch(&[2.0], &[3.0, 4.0], 0.2).unwrap();
        assert_eq!(w, v.iter().map(|x| 2.0 * x).collect::<Vec<_>>());
        assert!(innovation_batch(&[1.0], &[1.0], 0.0).is_err());
    }

    #[test]
    fn impulse_sequence() {
        let s = ImpulseSignal::new(vec![3.0, 4.0]);
        assert_eq!(s.at(0), vec![3.0, 4.0]);
        assert_eq!(s.at(5), vec![0.0, 0.0]);
        assert_eq!(s.energy(), 25.0);
        assert_eq!(s.operator_input(0), [5.0, 1.0]);
        assert_eq!(s.operator_input(1), [0.0, 0.0]);
    }

    #[test]
    fn tape_combinator_matches() {
        let mut t = Tape::new();
        let z = t.input(Tensor::column(vec![0.3, -1.2]));
        let w = t.input(Tensor::column(vec![1.0, 2.0, -0.5]));
        let v = innovation_on_tape(&mut t, z, w, 0.25);
        let plain = innovation_batch(&[0.3, -1.2], &[1.0, 2.0, -0.5], 0.25).unwrap();
        assert!(linalg::max_abs_diff(&plain, t.value(v).data()) < 1e-15);
    }
}
