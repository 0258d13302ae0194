use std::str::FromStr;

use super::quadratic::{make_quadratic, Quadratic};
use super::{estimate_beta, Beta, LowerBound, Objective, SampleBox};
use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NonconvexKind {
    Rosenbrock,
    TrigPerturbedQuadratic,
}

impl FromStr for NonconvexKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rosenbrock" => Ok(Self::Rosenbrock),
            "trig-perturbed-quadratic" | "trig" => Ok(Self::TrigPerturbedQuadratic),
            other => Err(Error::invalid(format!("unknown non-convex family `{other}`"))),
        }
    }
}

/// Chained Rosenbrock `sum_i 100 (x_{i+1} - x_i^2)^2 + (1 - x_i)^2`.
#[derive(Clone, Debug)]
pub struct Rosenbrock {
    dim: usize,
    beta: f64,
    box_half_width: f64,
}

impl Rosenbrock {
    /// Box on which the empirical smoothness constant is estimated.
    pub const BOX_HALF_WIDTH: f64 = 2.0;

    pub fn new(dim: usize, seed: u64) -> Result<Self> {
        if dim < 2 {
            return Err(Error::invalid("rosenbrock needs d >= 2"));
        }
        let mut f = Self {
            dim,
            beta: 0.0,
            box_half_width: Self::BOX_HALF_WIDTH,
        };
        let bx = SampleBox::cube(dim, -f.box_half_width, f.box_half_width);
        f.beta = estimate_beta(&f, &bx, 4000, seed)?;
        Ok(f)
    }

    pub fn declared_box(&self) -> SampleBox {
        SampleBox::cube(self.dim, -self.box_half_width, self.box_half_width)
    }
}

impl Objective for Rosenbrock {
    fn dim(&self) -> usize {
        self.dim
    }

    fn value(&self, x: &[f64]) -> f64 {
        x.windows(2)
            .map(|w| 100.0 * (w[1] - w[0] * w[0]).powi(2) + (1.0 - w[0]).powi(2))
            .sum()
    }

    fn grad(&self, x: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; self.dim];
        for i in 0..self.dim - 1 {
            let r = x[i + 1] - x[i] * x[i];
            g[i] += -400.0 * x[i] * r - 2.0 * (1.0 - x[i]);
            g[i + 1] += 200.0 * r;
        }
        g
    }

    fn value_on_tape(&self, tape: &mut Tape, x: Var) -> Var {
        let n = self.dim - 1;
        let head = tape.slice(x, 0, n, 1);
        let tail = tape.slice(x, 1, n, 1);
        let sq = tape.mul(head, head);
        let r = tape.sub(tail, sq);
        let rr = tape.dot(r, r);
        let a = tape.scale(rr, 100.0);
        let neg_head = tape.neg(head);
        let one_minus = tape.add_scalar(neg_head, 1.0);
        let b = tape.dot(one_minus, one_minus);
        tape.add(a, b)
    }

    fn grad_on_tape(&self, tape: &mut Tape, x: Var) -> Var {
        let n = self.dim - 1;
        let head = tape.slice(x, 0, n, 1);
        let tail = tape.slice(x, 1, n, 1);
        let sq = tape.mul(head, head);
        let r = tape.sub(tail, sq);
        let xr = tape.mul(head, r);
        let t1 = tape.scale(xr, -400.0);
        let neg_head = tape.neg(head);
        let one_minus = tape.add_scalar(neg_head, 1.0);
        let t2 = tape.scale(one_minus, -2.0);
        let g_head = tape.add(t1, t2);
        let g_tail = tape.scale(r, 200.0);
        let zero = tape.constant(Tensor::column(vec![0.0]));
        let left = tape.concat(&[g_head, zero]);
        let right = tape.concat(&[zero, g_tail]);
        tape.add(left, right)
    }

    fn beta(&self) -> Beta {
        Beta::Empirical(self.beta)
    }

    fn lower_bound(&self) -> LowerBound {
        LowerBound::Known(0.0)
    }
}

/// `f(x) = q(x) + a * sum_i sin(w x_i) + offset` for a convex quadratic `q`.
/// The curvature of the sine term is at most `a w^2`.
#[derive(Clone, Debug)]
pub struct TrigQuadratic {
    quad: Quadratic,
    amplitude: f64,
    frequency: f64,
    offset: f64,
}

impl TrigQuadratic {
    pub fn new(quad: Quadratic, amplitude: f64, frequency: f64) -> Self {
        Self {
            quad,
            amplitude,
            frequency,
            offset: 0.0,
        }
    }

    /// Adds a constant so that the declared lower bound becomes 0.
    pub fn zero_floored(mut self) -> Self {
        let lb = self.quad.min_value() - self.amplitude.abs() * self.quad.dim() as f64;
        self.offset = -lb;
        self
    }

    pub fn quadratic(&self) -> &Quadratic {
        &self.quad
    }
}

impl Objective for TrigQuadratic {
    fn dim(&self) -> usize {
        self.quad.dim()
    }

    fn value(&self, x: &[f64]) -> f64 {
        let s: f64 = x.iter().map(|v| (self.frequency * v).sin()).sum();
        self.quad.value(x) + self.amplitude * s + self.offset
    }

    fn grad(&self, x: &[f64]) -> Vec<f64> {
        let mut g = self.quad.grad(x);
        for (gi, xi) in g.iter_mut().zip(x) {
            *gi += self.amplitude * self.frequency * (self.frequency * xi).cos();
        }
        g
    }

    fn value_on_tape(&self, tape: &mut Tape, x: Var) -> Var {
        let q = self.quad.value_on_tape(tape, x);
        let wx = tape.scale(x, self.frequency);
        let s = tape.sin(wx);
        let ssum = tape.sum(s);
        let pert = tape.scale(ssum, self.amplitude);
        let total = tape.add(q, pert);
        tape.add_scalar(total, self.offset)
    }

    fn grad_on_tape(&self, tape: &mut Tape, x: Var) -> Var {
        let gq = self.quad.grad_on_tape(tape, x);
        let wx = tape.scale(x, self.frequency);
        let c = tape.cos(wx);
        let pert = tape.scale(c, self.amplitude * self.frequency);
        tape.add(gq, pert)
    }

    fn beta(&self) -> Beta {
        let bq = self.quad.beta().value().unwrap_or(0.0);
        Beta::Analytic(bq + self.amplitude.abs() * self.frequency * self.frequency)
    }

    fn lower_bound(&self) -> LowerBound {
        LowerBound::Known(
            self.quad.min_value() - self.amplitude.abs() * self.quad.dim() as f64 + self.offset,
        )
    }
}

/// Default perturbation of the seeded trig family.
pub const TRIG_AMPLITUDE: f64 = 0.1;
pub const TRIG_FREQUENCY: f64 = 2.0;
const TRIG_CONDITION: f64 = 10.0;

pub fn make_nonconvex_family(dim: usize, kind: NonconvexKind, seed: u64) -> Result<Box<dyn Objective>> {
    Ok(match kind {
        NonconvexKind::Rosenbrock => Box::new(Rosenbrock::new(dim, seed)?),
        NonconvexKind::TrigPerturbedQuadratic => Box::new(TrigQuadratic::new(
            make_quadratic(dim, TRIG_CONDITION, seed)?,
            TRIG_AMPLITUDE,
            TRIG_FREQUENCY,
        )),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rosenbrock_minimizer_and_origin() {
        let f = Rosenbrock::new(2, 0).unwrap();
        assert_eq!(f.value(&[1.0, 1.0]), 0.0);
        assert_eq!(f.grad(&[1.0, 1.0]), vec![0.0, 0.0]);
        assert_eq!(f.value(&[0.0, 0.0]), 1.0);
        assert!(matches!(f.beta(), Beta::Empirical(b) if b > 0.0));
    }

    #[test]
    fn rosenbrock_needs_two_dims() {
        assert!(Rosenbrock::new(1, 0).is_err());
        assert!(make_nonconvex_family(1, NonconvexKind::Rosenbrock, 0).is_err());
    }

    #[test]
    fn trig_beta_adds_curvature_bound() {
        let f = TrigQuadratic::new(Quadratic::new(vec![1.0], vec![0.0]).unwrap(), 0.1, 2.0);
        let b = f.beta().value().unwrap();
        assert!((b - 1.4).abs() < 1e-12);
        assert!((f.value(&[0.5]) - (0.125 + 0.1 * 1.0f64.sin())).abs() < 1e-15);
    }

    #[test]
    fn zero_floor_is_a_valid_lower_bound() {
        let f = TrigQuadratic::new(make_quadratic(3, 5.0, 2).unwrap(), 0.1, 2.0).zero_floored();
        assert_eq!(f.lower_bound(), LowerBound::Known(0.0));
        let mut r = crate::rng::rng(5);
        let bx = SampleBox::cube(3, -5.0, 5.0);
        for _ in 0..1000 {
            assert!(f.value(&bx.sample(&mut r)) >= 0.0);
        }
    }

    #[test]
    fn unknown_kind_rejected() {
        assert!("spiral".parse::<NonconvexKind>().is_err());
        assert_eq!(
            "rosenbrock".parse::<NonconvexKind>().unwrap(),
            NonconvexKind::Rosenbrock
        );
    }
}
