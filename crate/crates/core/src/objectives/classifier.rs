use std::str::FromStr;

use rand::seq::SliceRandom;

use super::{Beta, LowerBound, Objective};
use crate::autodiff::{sigmoid, Tape, Tensor, Var};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::linalg;
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Sigmoid,
    Relu,
}

impl Activation {
    fn apply(self, a: f64) -> f64 {
        match self {
            Activation::Tanh => a.tanh(),
            Activation::Sigmoid => sigmoid(a),
            Activation::Relu => a.max(0.0),
        }
    }

    /// Derivative expressed through the pre-activation `a` and output `o`.
    fn derivative(self, a: f64, o: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - o * o,
            Activation::Sigmoid => o * (1.0 - o),
            // Derivative at 0 is taken as 0.
            Activation::Relu => {
                if a > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Tanh => "tanh",
            Activation::Sigmoid => "sigmoid",
            Activation::Relu => "relu",
        }
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tanh" => Ok(Self::Tanh),
            "sigmoid" => Ok(Self::Sigmoid),
            "relu" => Ok(Self::Relu),
            other => Err(Error::invalid(format!("unknown activation `{other}`"))),
        }
    }
}

/// Single-layer classifier `o(s) = act(s W' + b)` scored by softmax
/// cross-entropy, averaged over its rows and multiplied by `share`.
///
/// Parameters are packed as `W` (labels x pixels, row-major) followed by `b`.
#[derive(Clone, Debug)]
pub struct ShallowClassifier {
    inputs: Tensor,
    labels: Vec<usize>,
    onehot: Tensor,
    num_labels: usize,
    activation: Activation,
    share: f64,
}

impl ShallowClassifier {
    pub fn new(data: &Dataset, rows: &[usize], activation: Activation, share: f64) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::invalid("classifier needs at least one image"));
        }
        let p = data.pixels();
        let l = data.num_labels();
        let mut inputs = Vec::with_capacity(rows.len() * p);
        let mut labels = Vec::with_capacity(rows.len());
        let mut onehot = vec![0.0; rows.len() * l];
        for (k, &r) in rows.iter().enumerate() {
            inputs.extend_from_slice(data.image(r));
            let lab = data.label(r);
            labels.push(lab);
            onehot[k * l + lab] = 1.0;
        }
        Ok(Self {
            inputs: Tensor::new(rows.len(), p, inputs),
            labels,
            onehot: Tensor::new(rows.len(), l, onehot),
            num_labels: l,
            activation,
            share,
        })
    }

    pub fn pixels(&self) -> usize {
        self.inputs.cols()
    }

    pub fn num_labels(&self) -> usize {
        self.num_labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    fn weights<'a>(&self, x: &'a [f64]) -> (Tensor, &'a [f64]) {
        let (l, p) = (self.num_labels, self.pixels());
        assert_eq!(x.len(), l * p + l, "classifier parameter length");
        (Tensor::new(l, p, x[..l * p].to_vec()), &x[l * p..])
    }

    /// Pre-activations and outputs, both `n x labels`.
    fn forward(&self, x: &[f64]) -> (Tensor, Tensor) {
        let (w, b) = self.weights(x);
        let mut pre = self.inputs.matmul(&w.transpose());
        let l = self.num_labels;
        for (i, v) in pre.data_mut().iter_mut().enumerate() {
            *v += b[i % l];
        }
        let act = self.activation;
        let out = pre.map(|a| act.apply(a));
        (pre, out)
    }

    /// Predicted label per row: argmax of the outputs, lowest index on ties.
    pub fn predict(&self, x: &[f64]) -> Vec<usize> {
        let (_, out) = self.forward(x);
        (0..out.rows()).map(|r| argmax(out.row(r))).collect()
    }

    pub fn accuracy(&self, x: &[f64]) -> f64 {
        let pred = self.predict(x);
        let hits = pred.iter().zip(&self.labels).filter(|(p, l)| p == l).count();
        hits as f64 / self.labels.len() as f64
    }

    /// Mean cross-entropy over rows, without the share factor.
    pub fn mean_loss(&self, x: &[f64]) -> f64 {
        let (_, out) = self.forward(x);
        let mut total = 0.0;
        for (r, &lab) in self.labels.iter().enumerate() {
            let row = out.row(r);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            total += lse - row[lab];
        }
        total / self.labels.len() as f64
    }

    fn logits_on_tape(&self, tape: &mut Tape, x: Var) -> (Var, Var) {
        let (l, p) = (self.num_labels, self.pixels());
        let wflat = tape.slice(x, 0, l * p, 1);
        let w = tape.reshape(wflat, l, p);
        let wt = tape.transpose(w);
        let b = tape.slice(x, l * p, l, 1);
        let s = tape.constant(self.inputs.clone());
        let sw = tape.matmul(s, wt);
        let pre = tape.add_row(sw, b);
        let out = match self.activation {
            Activation::Tanh => tape.tanh(pre),
            Activation::Sigmoid => tape.sigmoid(pre),
            Activation::Relu => tape.relu(pre),
        };
        (pre, out)
    }
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

impl Objective for ShallowClassifier {
    fn dim(&self) -> usize {
        self.num_labels * self.pixels() + self.num_labels
    }

    fn value(&self, x: &[f64]) -> f64 {
        self.share * self.mean_loss(x)
    }

    fn grad(&self, x: &[f64]) -> Vec<f64> {
        let (pre, out) = self.forward(x);
        let n = self.labels.len();
        let l = self.num_labels;
        let scale = self.share / n as f64;
        let mut delta = Tensor::zeros(n, l);
        for r in 0..n {
            let row = out.row(r);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
            for j in 0..l {
                let p = (row[j] - m).exp() / z;
                let y = self.onehot.get(r, j);
                let d = self.activation.derivative(pre.get(r, j), row[j]);
                delta.data_mut()[r * l + j] = scale * (p - y) * d;
            }
        }
        let gw = delta.transpose().matmul(&self.inputs);
        let mut g = gw.into_data();
        for j in 0..l {
            g.push((0..n).map(|r| delta.get(r, j)).sum());
        }
        g
    }

    fn value_on_tape(&self, tape: &mut Tape, x: Var) -> Var {
        let (_, out) = self.logits_on_tape(tape, x);
        let ce = tape.softmax_cross_entropy(out, &self.labels);
        tape.scale(ce, self.share)
    }

    fn grad_on_tape(&self, tape: &mut Tape, x: Var) -> Var {
        let (pre, out) = self.logits_on_tape(tape, x);
        let probs = tape.softmax_rows(out);
        let y = tape.constant(self.onehot.clone());
        let resid = tape.sub(probs, y);
        let dact = match self.activation {
            Activation::Tanh => {
                let sq = tape.mul(out, out);
                let neg = tape.neg(sq);
                tape.add_scalar(neg, 1.0)
            }
            Activation::Sigmoid => {
                let neg = tape.neg(out);
                let one_minus = tape.add_scalar(neg, 1.0);
                tape.mul(out, one_minus)
            }
            Activation::Relu => {
                let mask = tape.value(pre).map(|a| if a > 0.0 { 1.0 } else { 0.0 });
                tape.constant(mask)
            }
        };
        let prod = tape.mul(resid, dact);
        let delta = tape.scale(prod, self.share / self.labels.len() as f64);
        let dt = tape.transpose(delta);
        let s = tape.constant(self.inputs.clone());
        let gw = tape.matmul(dt, s);
        let gb = tape.sum_rows(delta);
        tape.concat(&[gw, gb])
    }

    fn beta(&self) -> Beta {
        Beta::Unknown
    }

    fn lower_bound(&self) -> LowerBound {
        LowerBound::Known(0.0)
    }

    fn non_smooth(&self) -> bool {
        self.activation == Activation::Relu
    }

    fn share(&self) -> f64 {
        self.share
    }
}

/// Training loss `f = sum_i f_i` where `f_i` is the mean cross-entropy of
/// minibatch `i` of a seeded shuffle. The `M = ceil(N / batch)` minibatches
/// have sizes differing by at most one, so each component gradient is an
/// ordinary minibatch gradient and `f / M` tracks the full-data mean loss.
#[derive(Clone, Debug)]
pub struct ClassifierObjective {
    full: ShallowClassifier,
    parts: Vec<ShallowClassifier>,
    minibatch_size: usize,
    beta: Beta,
}

/// Minibatch size of the image-classification protocol.
pub const DEFAULT_MINIBATCH: usize = 128;

impl ClassifierObjective {
    pub fn new(data: &Dataset, activation: Activation, minibatch_size: usize, seed: u64) -> Result<Self> {
        let n = data.len();
        if n == 0 {
            return Err(Error::invalid("classifier objective needs a non-empty dataset"));
        }
        if minibatch_size == 0 || minibatch_size > n {
            return Err(Error::invalid(format!(
                "minibatch size {minibatch_size} must be in 1..={n}"
            )));
        }
        let all: Vec<usize> = (0..n).collect();
        let full = ShallowClassifier::new(data, &all, activation, 1.0)?;
        let mut order = all;
        order.shuffle(&mut rng::rng(seed));
        let m = n.div_ceil(minibatch_size);
        let mut parts = Vec::with_capacity(m);
        let mut start = 0;
        for i in 0..m {
            let len = n / m + usize::from(i < n % m);
            parts.push(ShallowClassifier::new(data, &order[start..start + len], activation, 1.0)?);
            start += len;
        }
        Ok(Self {
            full,
            parts,
            minibatch_size,
            beta: Beta::Unknown,
        })
    }

    pub fn minibatch_size(&self) -> usize {
        self.minibatch_size
    }

    pub fn activation(&self) -> Activation {
        self.full.activation()
    }

    /// Records an empirical smoothness estimate (see `estimate_beta`).
    pub fn with_beta(mut self, beta: f64) -> Self {
        self.beta = Beta::Empirical(beta);
        self
    }

    pub fn accuracy(&self, x: &[f64]) -> f64 {
        self.full.accuracy(x)
    }

    /// Full-data mean cross-entropy.
    pub fn mean_loss(&self, x: &[f64]) -> f64 {
        self.full.mean_loss(x)
    }

    pub fn full(&self) -> &ShallowClassifier {
        &self.full
    }
}

impl Objective for ClassifierObjective {
    fn dim(&self) -> usize {
        self.full.dim()
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
        if self.full.non_smooth() {
            Beta::Unknown
        } else {
            self.beta
        }
    }

    fn lower_bound(&self) -> LowerBound {
        LowerBound::Known(0.0)
    }

    fn non_smooth(&self) -> bool {
        self.full.non_smooth()
    }

    fn num_components(&self) -> usize {
        self.parts.len()
    }

    fn component(&self, i: usize) -> Option<&dyn Objective> {
        self.parts.get(i).map(|p| p as &dyn Objective)
    }
}
