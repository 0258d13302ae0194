use std::sync::Arc;

use nalgebra::DMatrix;
use rand::Rng as _;
use rand_distr::StandardNormal;

use super::{Beta, LowerBound, Objective};
use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::linalg;
use crate::rng;

/// `f(x) = 1/2 |Ax - b|^2`.
#[derive(Clone, Debug)]
pub struct LeastSquares {
    rows: usize,
    cols: usize,
    a: Vec<f64>,
    at: Vec<f64>,
    b: Vec<f64>,
    beta: f64,
}

impl LeastSquares {
    /// `a` is row-major `rows x cols`.
    pub fn new(rows: usize, cols: usize, a: Vec<f64>, b: Vec<f64>) -> Result<Self> {
        if a.len() != rows * cols || b.len() != rows || cols == 0 {
            return Err(Error::Dimension {
                expected: rows * cols,
                found: a.len(),
                context: "least-squares design matrix".into(),
            });
        }
        let m = DMatrix::from_row_slice(rows, cols, &a);
        let gram = m.transpose() * &m;
        let beta = gram.symmetric_eigen().eigenvalues.max().max(0.0);
        let at = Tensor::new(rows, cols, a.clone()).transpose().into_data();
        Ok(Self {
            rows,
            cols,
            a,
            at,
            b,
            beta,
        })
    }

    fn residual(&self, x: &[f64]) -> Vec<f64> {
        linalg::sub(&linalg::matvec(&self.a, self.rows, self.cols, x), &self.b)
    }
}

impl Objective for LeastSquares {
    fn dim(&self) -> usize {
        self.cols
    }

    fn value(&self, x: &[f64]) -> f64 {
        0.5 * linalg::norm_sq(&self.residual(x))
    }

    fn grad(&self, x: &[f64]) -> Vec<f64> {
        linalg::matvec(&self.at, self.cols, self.rows, &self.residual(x))
    }

    fn value_on_tape(&self, tape: &mut Tape, x: Var) -> Var {
        let r = self.residual_on_tape(tape, x);
        let rr = tape.dot(r, r);
        tape.scale(rr, 0.5)
    }

    fn grad_on_tape(&self, tape: &mut Tape, x: Var) -> Var {
        let r = self.residual_on_tape(tape, x);
        let at = tape.constant(Tensor::new(self.cols, self.rows, self.at.clone()));
        tape.matmul(at, r)
    }

    fn beta(&self) -> Beta {
        Beta::Analytic(self.beta)
    }

    fn lower_bound(&self) -> LowerBound {
        LowerBound::Known(0.0)
    }
}

impl LeastSquares {
    fn residual_on_tape(&self, tape: &mut Tape, x: Var) -> Var {
        let a = tape.constant(Tensor::new(self.rows, self.cols, self.a.clone()));
        let b = tape.constant(Tensor::column(self.b.clone()));
        let ax = tape.matmul(a, x);
        tape.sub(ax, b)
    }
}

/// `factor * inner`.
#[derive(Clone)]
pub struct Scaled {
    inner: Arc<dyn Objective>,
    factor: f64,
}

impl Scaled {
    pub fn new(inner: Arc<dyn Objective>, factor: f64) -> Self {
        Self { inner, factor }
    }
}

impl Objective for Scaled {
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn value(&self, x: &[f64]) -> f64 {
        self.factor * self.inner.value(x)
    }

    fn grad(&self, x: &[f64]) -> Vec<f64> {
        linalg::scaled(&self.inner.grad(x), self.factor)
    }

    fn value_on_tape(&self, tape: &mut Tape, x: Var) -> Var {
        let v = self.inner.value_on_tape(tape, x);
        tape.scale(v, self.factor)
    }

    fn grad_on_tape(&self, tape: &mut Tape, x: Var) -> Var {
        let g = self.inner.grad_on_tape(tape, x);
        tape.scale(g, self.factor)
    }

    fn beta(&self) -> Beta {
        match self.inner.beta() {
            Beta::Analytic(b) => Beta::Analytic(b * self.factor.abs()),
            Beta::Empirical(b) => Beta::Empirical(b * self.factor.abs()),
            Beta::Unknown => Beta::Unknown,
        }
    }

    fn lower_bound(&self) -> LowerBound {
        match self.inner.lower_bound() {
            LowerBound::Known(v) if self.factor >= 0.0 => LowerBound::Known(v * self.factor),
            _ => LowerBound::UnknownButBounded,
        }
    }

    fn non_smooth(&self) -> bool {
        self.inner.non_smooth()
    }

    fn share(&self) -> f64 {
        self.factor
    }
}

/// `f = sum_i f_i` over explicitly held components.
#[derive(Clone)]
pub struct Separable {
    parts: Vec<Arc<dyn Objective>>,
}

impl Separable {
    pub fn new(parts: Vec<Arc<dyn Objective>>) -> Result<Self> {
        let Some(first) = parts.first() else {
            return Err(Error::invalid("separable objective needs at least one component"));
        };
        let d = first.dim();
        if let Some(bad) = parts.iter().find(|p| p.dim() != d) {
            return Err(Error::Dimension {
                expected: d,
                found: bad.dim(),
                context: "separable component".into(),
            });
        }
        Ok(Self { parts })
    }

    /// `M` identical components `f / M`.
    pub fn identical(f: Arc<dyn Objective>, m: usize) -> Result<Self> {
        if m == 0 {
            return Err(Error::invalid("component count must be positive"));
        }
        let share = 1.0 / m as f64;
        Self::new(
            (0..m)
                .map(|_| Arc::new(Scaled::new(f.clone(), share)) as Arc<dyn Objective>)
                .collect(),
        )
    }
}

impl Objective for Separable {
    fn dim(&self) -> usize {
        self.parts[0].dim()
    }

    fn value(&self, x: &[f64]) -> f64 {
        self.parts.iter().map(|p| p.value(x)).sum()
    }

    fn grad(&self, x: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; self.dim()];
        for p in &self.parts {
            linalg::axpy(1.0, &p.grad(x), &mut g);
        }
        g
    }

    fn value_on_tape(&self, tape: &mut Tape, x: Var) -> Var {
        let mut acc = self.parts[0].value_on_tape(tape, x);
        for p in &self.parts[1..] {
            let v = p.value_on_tape(tape, x);
            acc = tape.add(acc, v);
        }
        acc
    }

    fn grad_on_tape(&self, tape: &mut Tape, x: Var) -> Var {
        let mut acc = self.parts[0].grad_on_tape(tape, x);
        for p in &self.parts[1..] {
            let g = p.grad_on_tape(tape, x);
            acc = tape.add(acc, g);
        }
        acc
    }

    fn beta(&self) -> Beta {
        let mut total = 0.0;
        let mut empirical = false;
        for p in &self.parts {
            match p.beta() {
                Beta::Analytic(b) => total += b,
                Beta::Empirical(b) => {
                    total += b;
                    empirical = true;
                }
                Beta::Unknown => return Beta::Unknown,
            }
        }
        if empirical {
            Beta::Empirical(total)
        } else {
            Beta::Analytic(total)
        }
    }

    fn lower_bound(&self) -> LowerBound {
        let mut total = 0.0;
        for p in &self.parts {
            match p.lower_bound() {
                LowerBound::Known(v) => total += v,
                LowerBound::UnknownButBounded => return LowerBound::UnknownButBounded,
            }
        }
        LowerBound::Known(total)
    }

    fn non_smooth(&self) -> bool {
        self.parts.iter().any(|p| p.non_smooth())
    }

    fn num_components(&self) -> usize {
        self.parts.len()
    }

    fn component(&self, i: usize) -> Option<&dyn Objective> {
        self.parts.get(i).map(|p| p.as_ref())
    }
}

/// Separable least squares with `M` square, well-conditioned blocks
/// `A_i = s (I + 0.1 G_i / sqrt(d))`, `s^2 = 8`, and `b_i = A_i x* + noise * e_i`
/// for a shared `x* ~ N(0, I)`. With `noise = 0` every block is minimized at
/// `x*` (interpolating regime).
pub fn make_separable_least_squares(
    dim: usize,
    components: usize,
    noise: f64,
    seed: u64,
) -> Result<Separable> {
    if dim == 0 || components == 0 {
        return Err(Error::invalid("separable least squares needs d, M > 0"));
    }
    let mut rng = rng::rng(seed);
    let xstar: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
    let scale = 8f64.sqrt();
    let pert = 0.1 / (dim as f64).sqrt();
    let mut parts: Vec<Arc<dyn Objective>> = Vec::with_capacity(components);
    for _ in 0..components {
        let mut a = vec![0.0; dim * dim];
        for r in 0..dim {
            for c in 0..dim {
                let g: f64 = rng.sample(StandardNormal);
                let id = if r == c { 1.0 } else { 0.0 };
                a[r * dim + c] = scale * (id + pert * g);
            }
        }
        let mut b = linalg::matvec(&a, dim, dim, &xstar);
        for bi in b.iter_mut() {
            let e: f64 = rng.sample(StandardNormal);
            *bi += noise * e;
        }
        parts.push(Arc::new(LeastSquares::new(dim, dim, a, b)?));
    }
    Separable::new(parts)
}
