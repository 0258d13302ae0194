use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use rand_distr::StandardNormal;

use super::{Beta, LowerBound, Objective};
use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::linalg;
use crate::rng;

/// `f(x) = 1/2 x'Qx + c'x + offset` with symmetric positive-definite `Q`.
#[derive(Clone, Debug)]
pub struct Quadratic {
    dim: usize,
    q: Vec<f64>,
    c: Vec<f64>,
    offset: f64,
    beta: f64,
    mu: f64,
    minimizer: Vec<f64>,
}

impl Quadratic {
    /// `q` is row-major `d x d`.
    pub fn new(q: Vec<f64>, c: Vec<f64>) -> Result<Self> {
        let dim = c.len();
        if q.len() != dim * dim || dim == 0 {
            return Err(Error::Dimension {
                expected: dim * dim,
                found: q.len(),
                context: "quadratic Q".into(),
            });
        }
        let m = DMatrix::from_row_slice(dim, dim, &q);
        let asym = (&m - m.transpose()).abs().max();
        if asym > 1e-12 * m.abs().max().max(1.0) {
            return Err(Error::invalid("quadratic Q must be symmetric"));
        }
        let eig = m.clone().symmetric_eigen();
        let mu = eig.eigenvalues.min();
        let beta = eig.eigenvalues.max();
        if !(mu > 0.0) {
            return Err(Error::invalid("quadratic Q must be positive definite"));
        }
        let chol = m
            .cholesky()
            .ok_or_else(|| Error::invalid("quadratic Q must be positive definite"))?;
        let minimizer = (-chol.solve(&DVector::from_column_slice(&c)))
            .iter()
            .copied()
            .collect();
        Ok(Self {
            dim,
            q,
            c,
            offset: 0.0,
            beta,
            mu,
            minimizer,
        })
    }

    /// `1/2 (x - x*)'Q(x - x*)`, so the minimum value is exactly 0.
    pub fn with_minimizer(q: Vec<f64>, minimizer: &[f64]) -> Result<Self> {
        let d = minimizer.len();
        let qx = linalg::matvec(&q, d, d, minimizer);
        let c = linalg::scaled(&qx, -1.0);
        let mut out = Self::new(q, c)?;
        out.offset = 0.5 * linalg::dot(minimizer, &qx);
        out.minimizer = minimizer.to_vec();
        Ok(out)
    }

    pub fn q(&self) -> &[f64] {
        &self.q
    }

    pub fn c(&self) -> &[f64] {
        &self.c
    }

    pub fn minimizer(&self) -> &[f64] {
        &self.minimizer
    }

    /// Smallest eigenvalue of `Q` (strong convexity modulus).
    pub fn mu(&self) -> f64 {
        self.mu
    }

    pub fn min_value(&self) -> f64 {
        self.value(&self.minimizer)
    }

    pub(crate) fn q_tensor(&self) -> Tensor {
        Tensor::new(self.dim, self.dim, self.q.clone())
    }
}

impl Objective for Quadratic {
    fn dim(&self) -> usize {
        self.dim
    }

    fn value(&self, x: &[f64]) -> f64 {
        let qx = linalg::matvec(&self.q, self.dim, self.dim, x);
        0.5 * linalg::dot(x, &qx) + linalg::dot(&self.c, x) + self.offset
    }

    fn grad(&self, x: &[f64]) -> Vec<f64> {
        let mut g = linalg::matvec(&self.q, self.dim, self.dim, x);
        linalg::axpy(1.0, &self.c, &mut g);
        g
    }

    fn value_on_tape(&self, tape: &mut Tape, x: Var) -> Var {
        let q = tape.constant(self.q_tensor());
        let c = tape.constant(Tensor::column(self.c.clone()));
        let qx = tape.matmul(q, x);
        let xqx = tape.dot(x, qx);
        let half = tape.scale(xqx, 0.5);
        let cx = tape.dot(c, x);
        let s = tape.add(half, cx);
        tape.add_scalar(s, self.offset)
    }

    fn grad_on_tape(&self, tape: &mut Tape, x: Var) -> Var {
        let q = tape.constant(self.q_tensor());
        let c = tape.constant(Tensor::column(self.c.clone()));
        let qx = tape.matmul(q, x);
        tape.add(qx, c)
    }

    fn beta(&self) -> Beta {
        Beta::Analytic(self.beta)
    }

    fn lower_bound(&self) -> LowerBound {
        LowerBound::Known(self.min_value())
    }
}

/// Random orthogonal matrix (Q factor of a Gaussian matrix, sign-normalized).
pub(crate) fn random_orthogonal(dim: usize, rng: &mut rng::Rng) -> DMatrix<f64> {
    let g = DMatrix::from_fn(dim, dim, |_, _| rng.sample::<f64, _>(StandardNormal));
    let qr = g.qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..dim {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

/// Row-major SPD matrix with spectrum running from 1 to `condition_number`
/// (interior eigenvalues log-uniform), in a random orthonormal basis.
pub(crate) fn random_spd(dim: usize, condition_number: f64, rng: &mut rng::Rng) -> Vec<f64> {
    let mut eig = vec![1.0; dim];
    if dim > 1 {
        eig[dim - 1] = condition_number;
        let log_k = condition_number.ln();
        for e in eig.iter_mut().take(dim - 1).skip(1) {
            *e = (log_k * rng.random::<f64>()).exp();
        }
    }
    let u = random_orthogonal(dim, rng);
    let lam = DMatrix::from_diagonal(&DVector::from_vec(eig));
    let q = &u * lam * u.transpose();
    // Exact symmetry, independent of rounding in the product.
    let mut out = vec![0.0; dim * dim];
    for i in 0..dim {
        for j in 0..dim {
            out[i * dim + j] = 0.5 * (q[(i, j)] + q[(j, i)]);
        }
    }
    out
}

/// Seeded random quadratic with `beta / mu = condition_number` and `c ~ N(0, I)`.
pub fn make_quadratic(dim: usize, condition_number: f64, seed: u64) -> Result<Quadratic> {
    if dim == 0 {
        return Err(Error::invalid("quadratic dimension must be positive"));
    }
    if !(condition_number >= 1.0) || !condition_number.is_finite() {
        return Err(Error::invalid(format!(
            "condition number must be >= 1, got {condition_number}"
        )));
    }
    let mut rng = rng::rng(seed);
    let q = random_spd(dim, condition_number, &mut rng);
    let c = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
    Quadratic::new(q, c)
}

/// Seeded random quadratic `1/2 (x - x*)'Q(x - x*)` with `x* ~ N(0, I)`, so
/// its minimum value is exactly 0.
pub fn make_centered_quadratic(dim: usize, condition_number: f64, seed: u64) -> Result<Quadratic> {
    let base = make_quadratic(dim, condition_number, seed)?;
    let mut rng = rng::rng(rng::split(seed, 1));
    let minimizer: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
    Quadratic::with_minimizer(base.q().to_vec(), &minimizer)
}
