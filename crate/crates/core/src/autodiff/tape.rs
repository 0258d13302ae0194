//! Tensor-level reverse-mode tape.
//!
//! Every primitive appends one node holding its value; nodes only reference
//! earlier nodes, so the tape is topologically ordered by construction and a
//! single backward sweep visits each node once.

use crate::error::{Error, Result};

use super::Tensor;

/// Handle to a tape node.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Input,
    Const,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Neg(usize),
    Scale(usize, f64),
    AddScalar(usize),
    MulScalar { s: usize, t: usize },
    Recip(usize),
    Sqrt(usize),
    MatMul(usize, usize),
    Transpose(usize),
    Reshape(usize),
    Slice { src: usize, start: usize },
    Concat(Vec<usize>),
    Sum(usize),
    Norm(usize),
    Tanh(usize),
    Sigmoid(usize),
    Relu(usize),
    Exp(usize),
    Log(usize),
    Sin(usize),
    Cos(usize),
    Max(usize, usize),
    AddRow(usize, usize),
    SumRows(usize),
    SoftmaxRows(usize),
    SoftmaxXent { logits: usize, labels: Vec<usize> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Const => "const",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Neg(_) => "neg",
            Op::Scale(..) => "scale",
            Op::AddScalar(_) => "add_scalar",
            Op::MulScalar { .. } => "mul_scalar",
            Op::Recip(_) => "recip",
            Op::Sqrt(_) => "sqrt",
            Op::MatMul(..) => "matmul",
            Op::Transpose(_) => "transpose",
            Op::Reshape(_) => "reshape",
            Op::Slice { .. } => "slice",
            Op::Concat(_) => "concat",
            Op::Sum(_) => "sum",
            Op::Norm(_) => "norm",
            Op::Tanh(_) => "tanh",
            Op::Sigmoid(_) => "sigmoid",
            Op::Relu(_) => "relu",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::Sin(_) => "sin",
            Op::Cos(_) => "cos",
            Op::Max(..) => "max",
            Op::AddRow(..) => "add_row",
            Op::SumRows(_) => "sum_rows",
            Op::SoftmaxRows(_) => "softmax_rows",
            Op::SoftmaxXent { .. } => "softmax_cross_entropy",
        }
    }
}

struct Node {
    op: Op,
    value: Tensor,
    needs_grad: bool,
}

/// Append-only computation record.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    outputs: Vec<Var>,
    first_non_finite: Option<(usize, &'static str)>,
}

impl std::fmt::Debug for Tape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tape")
            .field("nodes", &self.nodes.len())
            .field("outputs", &self.outputs)
            .finish()
    }
}

/// Adjoints of every node after a backward sweep.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Adjoint of `v`; zeros if the output does not depend on it.
    pub fn wrt(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[v.0];
                Tensor::zeros(r, c)
            }
        }
    }
}

fn softmax_row(row: &[f64], out: &mut [f64]) {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for (o, &r) in out.iter_mut().zip(row) {
        *o = (r - m).exp();
        z += *o;
    }
    for o in out.iter_mut() {
        *o /= z;
    }
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|&r| (r - m).exp()).sum::<f64>().ln()
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Value of a scalar node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn set_output(&mut self, v: Var) {
        self.outputs.push(v);
    }

    pub fn outputs(&self) -> &[Var] {
        &self.outputs
    }

    /// First primitive that produced a NaN or infinity, if any.
    pub fn first_non_finite(&self) -> Option<(usize, &'static str)> {
        self.first_non_finite
    }

    pub fn check_finite(&self) -> Result<()> {
        match self.first_non_finite {
            Some((node, primitive)) => Err(Error::NonFinite { primitive, node }),
            None => Ok(()),
        }
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        let needs_grad = match &op {
            Op::Input => true,
            Op::Const => false,
            Op::Concat(parts) => parts.iter().any(|&p| self.nodes[p].needs_grad),
            Op::SoftmaxXent { logits, .. } => self.nodes[*logits].needs_grad,
            other => operands(other).iter().any(|&p| self.nodes[p].needs_grad),
        };
        let index = self.nodes.len();
        if self.first_non_finite.is_none() && !value.is_finite() {
            self.first_non_finite = Some((index, op.name()));
        }
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
        });
        Var(index)
    }

    fn val(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(Op::Input, t)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(Op::Const, t)
    }

    pub fn constant_scalar(&mut self, v: f64) -> Var {
        self.constant(Tensor::scalar(v))
    }

    /// Re-inserts the current value of `v` as a constant, cutting gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.val(v).clone();
        self.constant(t)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let t = self.val(a).zip_map(self.val(b), |x, y| x + y);
        self.push(Op::Add(a.0, b.0), t)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let t = self.val(a).zip_map(self.val(b), |x, y| x - y);
        self.push(Op::Sub(a.0, b.0), t)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let t = self.val(a).zip_map(self.val(b), |x, y| x * y);
        self.push(Op::Mul(a.0, b.0), t)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let t = self.val(a).map(|x| -x);
        self.push(Op::Neg(a.0), t)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let t = self.val(a).map(|x| c * x);
        self.push(Op::Scale(a.0, c), t)
    }

    /// Adds a constant to every entry.
    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let t = self.val(a).map(|x| x + c);
        self.push(Op::AddScalar(a.0), t)
    }

    /// Scalar node times tensor node.
    pub fn mul_scalar(&mut self, s: Var, t: Var) -> Var {
        let sv = self.val(s).item();
        let out = self.val(t).map(|x| sv * x);
        self.push(Op::MulScalar { s: s.0, t: t.0 }, out)
    }

    pub fn recip(&mut self, a: Var) -> Var {
        let t = self.val(a).map(|x| 1.0 / x);
        self.push(Op::Recip(a.0), t)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let t = self.val(a).map(f64::sqrt);
        self.push(Op::Sqrt(a.0), t)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let t = self.val(a).matmul(self.val(b));
        self.push(Op::MatMul(a.0, b.0), t)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let t = self.val(a).transpose();
        self.push(Op::Transpose(a.0), t)
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let t = self.val(a).clone().reshaped(rows, cols);
        self.push(Op::Reshape(a.0), t)
    }

    /// Flat slice `[start, start + rows*cols)` viewed as `rows x cols`.
    pub fn slice(&mut self, a: Var, start: usize, rows: usize, cols: usize) -> Var {
        let src = self.val(a).data();
        assert!(start + rows * cols <= src.len(), "slice out of range");
        let t = Tensor::new(rows, cols, src[start..start + rows * cols].to_vec());
        self.push(Op::Slice { src: a.0, start }, t)
    }

    /// Flattens and concatenates into one column.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let mut data = Vec::new();
        for p in parts {
            data.extend_from_slice(self.val(*p).data());
        }
        let idx = parts.iter().map(|p| p.0).collect();
        self.push(Op::Concat(idx), Tensor::column(data))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let t = Tensor::scalar(self.val(a).sum());
        self.push(Op::Sum(a.0), t)
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Var {
        let p = self.mul(a, b);
        self.sum(p)
    }

    /// Euclidean (Frobenius) norm.
    pub fn norm(&mut self, a: Var) -> Var {
        let t = Tensor::scalar(self.val(a).norm());
        self.push(Op::Norm(a.0), t)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let t = self.val(a).map(f64::tanh);
        self.push(Op::Tanh(a.0), t)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let t = self.val(a).map(sigmoid);
        self.push(Op::Sigmoid(a.0), t)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.val(a).map(|x| x.max(0.0));
        self.push(Op::Relu(a.0), t)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let t = self.val(a).map(f64::exp);
        self.push(Op::Exp(a.0), t)
    }

    pub fn log(&mut self, a: Var) -> Var {
        let t = self.val(a).map(f64::ln);
        self.push(Op::Log(a.0), t)
    }

    pub fn sin(&mut self, a: Var) -> Var {
        let t = self.val(a).map(f64::sin);
        self.push(Op::Sin(a.0), t)
    }

    pub fn cos(&mut self, a: Var) -> Var {
        let t = self.val(a).map(f64::cos);
        self.push(Op::Cos(a.0), t)
    }

    /// Elementwise maximum; ties route the gradient to `a`.
    pub fn max(&mut self, a: Var, b: Var) -> Var {
        let t = self.val(a).zip_map(self.val(b), f64::max);
        self.push(Op::Max(a.0, b.0), t)
    }

    /// Adds the vector `r` (length = cols) to every row of `m`.
    pub fn add_row(&mut self, m: Var, r: Var) -> Var {
        let mv = self.val(m);
        let rv = self.val(r);
        assert_eq!(mv.cols(), rv.len(), "add_row width mismatch");
        let mut out = mv.clone();
        let cols = mv.cols();
        for (i, o) in out.data_mut().iter_mut().enumerate() {
            *o += rv.data()[i % cols];
        }
        self.push(Op::AddRow(m.0, r.0), out)
    }

    /// Column sums as a column vector of length `cols`.
    pub fn sum_rows(&mut self, m: Var) -> Var {
        let mv = self.val(m);
        let mut out = vec![0.0; mv.cols()];
        for r in 0..mv.rows() {
            for (o, &v) in out.iter_mut().zip(mv.row(r)) {
                *o += v;
            }
        }
        self.push(Op::SumRows(m.0), Tensor::column(out))
    }

    pub fn softmax_rows(&mut self, m: Var) -> Var {
        let mv = self.val(m);
        let mut out = Tensor::zeros(mv.rows(), mv.cols());
        let cols = mv.cols();
        for r in 0..mv.rows() {
            softmax_row(mv.row(r), &mut out.data_mut()[r * cols..(r + 1) * cols]);
        }
        self.push(Op::SoftmaxRows(m.0), out)
    }

    /// Mean over rows of `-log softmax(row)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Var {
        let lv = self.val(logits);
        assert_eq!(lv.rows(), labels.len(), "one label per row required");
        let mut total = 0.0;
        for (r, &l) in labels.iter().enumerate() {
            let row = lv.row(r);
            total += log_sum_exp(row) - row[l];
        }
        let t = Tensor::scalar(total / labels.len() as f64);
        self.push(
            Op::SoftmaxXent {
                logits: logits.0,
                labels: labels.to_vec(),
            },
            t,
        )
    }

    /// Reverse sweep from the scalar node `out`.
    pub fn backward(&self, out: Var) -> Gradients {
        assert_eq!(self.shape(out), (1, 1), "backward requires a scalar output");
        let n = out.0 + 1;
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[out.0] = Some(Tensor::scalar(1.0));
        for i in (0..n).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape()).collect(),
        }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], idx: usize, delta: Tensor) {
        if !self.nodes[idx].needs_grad {
            return;
        }
        match &mut grads[idx] {
            Some(g) => g.add_assign(&delta),
            slot @ None => *slot = Some(delta),
        }
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let y = &node.value;
        match &node.op {
            Op::Input | Op::Const => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (&self.nodes[*a].value, &self.nodes[*b].value);
                if self.nodes[*a].needs_grad {
                    self.accumulate(grads, *a, g.zip_map(bv, |x, y| x * y));
                }
                if self.nodes[*b].needs_grad {
                    self.accumulate(grads, *b, g.zip_map(av, |x, y| x * y));
                }
            }
            Op::Neg(a) => self.accumulate(grads, *a, g.map(|v| -v)),
            Op::Scale(a, c) => self.accumulate(grads, *a, g.map(|v| c * v)),
            Op::AddScalar(a) => self.accumulate(grads, *a, g.clone()),
            Op::MulScalar { s, t } => {
                let sv = self.nodes[*s].value.item();
                let tv = &self.nodes[*t].value;
                if self.nodes[*s].needs_grad {
                    let ds = g.data().iter().zip(tv.data()).map(|(a, b)| a * b).sum();
                    self.accumulate(grads, *s, Tensor::scalar(ds));
                }
                if self.nodes[*t].needs_grad {
                    self.accumulate(grads, *t, g.map(|v| sv * v));
                }
            }
            Op::Recip(a) => self.accumulate(grads, *a, g.zip_map(y, |gv, yv| -gv * yv * yv)),
            Op::Sqrt(a) => self.accumulate(grads, *a, g.zip_map(y, |gv, yv| gv / (2.0 * yv))),
            Op::MatMul(a, b) => {
                let (av, bv) = (&self.nodes[*a].value, &self.nodes[*b].value);
                if self.nodes[*a].needs_grad {
                    self.accumulate(grads, *a, g.matmul(&bv.transpose()));
                }
                if self.nodes[*b].needs_grad {
                    self.accumulate(grads, *b, av.transpose().matmul(g));
                }
            }
            Op::Transpose(a) => self.accumulate(grads, *a, g.transpose()),
            Op::Reshape(a) => {
                let (r, c) = self.nodes[*a].value.shape();
                self.accumulate(grads, *a, g.clone().reshaped(r, c));
            }
            Op::Slice { src, start } => {
                let (r, c) = self.nodes[*src].value.shape();
                let mut d = Tensor::zeros(r, c);
                d.data_mut()[*start..*start + g.len()].copy_from_slice(g.data());
                self.accumulate(grads, *src, d);
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let (r, c) = self.nodes[p].value.shape();
                    let len = r * c;
                    let d = Tensor::new(r, c, g.data()[offset..offset + len].to_vec());
                    self.accumulate(grads, p, d);
                    offset += len;
                }
            }
            Op::Sum(a) => {
                let (r, c) = self.nodes[*a].value.shape();
                self.accumulate(grads, *a, Tensor::filled(r, c, g.item()));
            }
            Op::Norm(a) => {
                let av = &self.nodes[*a].value;
                let n = y.item();
                // Subgradient 0 at the origin.
                let d = if n > 0.0 {
                    av.map(|v| g.item() * v / n)
                } else {
                    Tensor::zeros(av.rows(), av.cols())
                };
                self.accumulate(grads, *a, d);
            }
            Op::Tanh(a) => self.accumulate(grads, *a, g.zip_map(y, |gv, yv| gv * (1.0 - yv * yv))),
            Op::Sigmoid(a) => {
                self.accumulate(grads, *a, g.zip_map(y, |gv, yv| gv * yv * (1.0 - yv)))
            }
            Op::Relu(a) => {
                let av = &self.nodes[*a].value;
                self.accumulate(grads, *a, g.zip_map(av, |gv, x| if x > 0.0 { gv } else { 0.0 }));
            }
            Op::Exp(a) => self.accumulate(grads, *a, g.zip_map(y, |gv, yv| gv * yv)),
            Op::Log(a) => {
                let av = &self.nodes[*a].value;
                self.accumulate(grads, *a, g.zip_map(av, |gv, x| gv / x));
            }
            Op::Sin(a) => {
                let av = &self.nodes[*a].value;
                self.accumulate(grads, *a, g.zip_map(av, |gv, x| gv * x.cos()));
            }
            Op::Cos(a) => {
                let av = &self.nodes[*a].value;
                self.accumulate(grads, *a, g.zip_map(av, |gv, x| -gv * x.sin()));
            }
            Op::Max(a, b) => {
                let (av, bv) = (&self.nodes[*a].value, &self.nodes[*b].value);
                let mut da = g.clone();
                let mut db = g.clone();
                for ((x, y), (ga, gb)) in av
                    .data()
                    .iter()
                    .zip(bv.data())
                    .zip(da.data_mut().iter_mut().zip(db.data_mut().iter_mut()))
                {
                    if x >= y {
                        *gb = 0.0;
                    } else {
                        *ga = 0.0;
                    }
                }
                self.accumulate(grads, *a, da);
                self.accumulate(grads, *b, db);
            }
            Op::AddRow(m, r) => {
                self.accumulate(grads, *m, g.clone());
                if self.nodes[*r].needs_grad {
                    let (rr, rc) = self.nodes[*r].value.shape();
                    let mut d = vec![0.0; g.cols()];
                    for row in 0..g.rows() {
                        for (o, &v) in d.iter_mut().zip(g.row(row)) {
                            *o += v;
                        }
                    }
                    self.accumulate(grads, *r, Tensor::new(rr, rc, d));
                }
            }
            Op::SumRows(m) => {
                let (r, c) = self.nodes[*m].value.shape();
                let mut d = Tensor::zeros(r, c);
                for row in 0..r {
                    d.data_mut()[row * c..(row + 1) * c].copy_from_slice(g.data());
                }
                self.accumulate(grads, *m, d);
            }
            Op::SoftmaxRows(m) => {
                let cols = y.cols();
                let mut d = Tensor::zeros(y.rows(), cols);
                for row in 0..y.rows() {
                    let yr = y.row(row);
                    let gr = g.row(row);
                    let inner: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for (j, o) in d.data_mut()[row * cols..(row + 1) * cols].iter_mut().enumerate() {
                        *o = yr[j] * (gr[j] - inner);
                    }
                }
                self.accumulate(grads, *m, d);
            }
            Op::SoftmaxXent { logits, labels } => {
                let lv = &self.nodes[*logits].value;
                let cols = lv.cols();
                let scale = g.item() / labels.len() as f64;
                let mut d = Tensor::zeros(lv.rows(), cols);
                for (row, &l) in labels.iter().enumerate() {
                    let out = &mut d.data_mut()[row * cols..(row + 1) * cols];
                    softmax_row(lv.row(row), out);
                    out[l] -= 1.0;
                    for o in out.iter_mut() {
                        *o *= scale;
                    }
                }
                self.accumulate(grads, *logits, d);
            }
        }
    }
}

fn operands(op: &Op) -> Vec<usize> {
    match op {
        Op::Input | Op::Const => vec![],
        Op::Add(a, b)
        | Op::Sub(a, b)
        | Op::Mul(a, b)
        | Op::MatMul(a, b)
        | Op::Max(a, b)
        | Op::AddRow(a, b) => vec![*a, *b],
        Op::MulScalar { s, t } => vec![*s, *t],
        Op::Neg(a)
        | Op::Scale(a, _)
        | Op::AddScalar(a)
        | Op::Recip(a)
        | Op::Sqrt(a)
        | Op::Transpose(a)
        | Op::Reshape(a)
        | Op::Sum(a)
        | Op::Norm(a)
        | Op::Tanh(a)
        | Op::Sigmoid(a)
        | Op::Relu(a)
        | Op::Exp(a)
        | Op::Log(a)
        | Op::Sin(a)
        | Op::Cos(a)
        | Op::SumRows(a)
        | Op::SoftmaxRows(a) => vec![*a],
        Op::Slice { src, .. } => vec![*src],
        Op::Concat(parts) => parts.clone(),
        Op::SoftmaxXent { logits, .. } => vec![*logits],
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Single-output scalar gradient with respect to every `Input` node, in
/// creation order.
pub(crate) fn input_gradients(tape: &Tape) -> Result<Vec<Tensor>> {
    if tape.outputs.len() != 1 {
        return Err(Error::NotScalarOutput(tape.outputs.len()));
    }
    let out = tape.outputs[0];
    if tape.shape(out) != (1, 1) {
        return Err(Error::NotScalarOutput(tape.value(out).len()));
    }
    let grads = tape.backward(out);
    Ok(tape
        .nodes
        .iter()
        .enumerate()
        .filter(|(_, n)| matches!(n.op, Op::Input))
        .map(|(i, _)| grads.wrt(Var(i)))
        .collect())
}
