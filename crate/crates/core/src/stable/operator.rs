use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::autodiff::{Layout, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::linalg;
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OperatorActivation {
    Tanh,
    /// Linear layers; only useful for analysis and closed-form checks.
    Identity,
}

impl OperatorActivation {
    fn apply(self, v: f64) -> f64 {
        match self {
            Self::Tanh => v.tanh(),
            Self::Identity => v,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Tanh => "tanh",
            Self::Identity => "identity",
        }
    }

    pub fn from_name(s: &str) -> Result<Self> {
        match s {
            "tanh" => Ok(Self::Tanh),
            "identity" => Ok(Self::Identity),
            other => Err(Error::Format(format!("unknown operator activation `{other}`"))),
        }
    }
}

/// Shape of a stacked contracting recurrent operator.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OperatorConfig {
    pub input_dim: usize,
    pub output_dim: usize,
    pub state_dim: usize,
    pub depth: usize,
    pub gamma: f64,
    pub activation: OperatorActivation,
}

impl Default for OperatorConfig {
    fn default() -> Self {
        Self {
            input_dim: 2,
            output_dim: 1,
            state_dim: 3,
            depth: 3,
            gamma: 0.95,
            activation: OperatorActivation::Tanh,
        }
    }
}

impl OperatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 || self.state_dim == 0 || self.depth == 0 {
            return Err(Error::invalid("operator dimensions and depth must be positive"));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::invalid(format!(
                "contraction factor must lie in (0, 1), got {}",
                self.gamma
            )));
        }
        Ok(())
    }

    fn layer_input(&self, k: usize) -> usize {
        if k == 0 {
            self.input_dim
        } else {
            self.state_dim
        }
    }

    /// Segments `z.<k>.A`, `z.<k>.B`, `z.<k>.b` per layer, then `z.C`.
    pub fn layout(&self) -> Layout {
        let mut l = Layout::new();
        self.extend_layout(&mut l);
        l
    }

    pub(crate) fn extend_layout(&self, l: &mut Layout) {
        let n = self.state_dim;
        for k in 0..self.depth {
            l.push(format!("z.{k}.A"), n, n);
            l.push(format!("z.{k}.B"), n, self.layer_input(k));
            l.push(format!("z.{k}.b"), n, 1);
        }
        l.push("z.C", self.output_dim, n);
    }

    pub fn num_params(&self) -> usize {
        self.layout().len()
    }
}

#[derive(Clone, Debug)]
struct Layer {
    a_eff: Vec<f64>,
    b_in: Vec<f64>,
    bias: Vec<f64>,
    act_bias: Vec<f64>,
}

/// Stack of `r` recurrent layers.
///
/// `s_k' = act(A_eff s_k + B_k in_k + b_k) - act(b_k)`, with
/// `A_eff = gamma A / (1 + |A|_F)`, `in_0` the external input, `in_k = s_{k-1}'`,
/// and readout `z = C s_r'`.
///
/// `|A_eff|_2 <= gamma |A|_F / (1 + |A|_F) < gamma` for every raw `A`, and the
/// shifted activation is 1-Lipschitz and vanishes at zero, so each layer maps
/// zero to zero and the stack is l2-stable whatever the parameters are.
#[derive(Clone, Debug)]
pub struct ContractingOperator {
    cfg: OperatorConfig,
    layers: Vec<Layer>,
    c: Vec<f64>,
}

/// Recurrent state of every layer.
#[derive(Clone, Debug, PartialEq)]
pub struct OperatorState {
    layers: Vec<Vec<f64>>,
}

impl OperatorState {
    pub fn layers(&self) -> &[Vec<f64>] {
        &self.layers
    }

    pub fn energy(&self) -> f64 {
        self.layers.iter().map(|s| linalg::norm_sq(s)).sum()
    }
}

/// `gamma A / (1 + |A|_F)`.
pub fn effective_recurrence(a_raw: &[f64], gamma: f64) -> Vec<f64> {
    let k = gamma / (1.0 + linalg::norm(a_raw));
    a_raw.iter().map(|v| k * v).collect()
}

impl ContractingOperator {
    /// `params` holds the operator segments in [`OperatorConfig::layout`] order.
    pub fn new(cfg: OperatorConfig, params: &[f64]) -> Result<Self> {
        cfg.validate()?;
        let layout = cfg.layout();
        if params.len() != layout.len() {
            return Err(Error::Dimension {
                expected: layout.len(),
                found: params.len(),
                context: "operator parameters".into(),
            });
        }
        let seg = |name: String| {
            let s = layout.segment(&name).expect("layout segment");
            params[s.range()].to_vec()
        };
        let layers = (0..cfg.depth)
            .map(|k| {
                let bias = seg(format!("z.{k}.b"));
                Layer {
                    a_eff: effective_recurrence(&seg(format!("z.{k}.A")), cfg.gamma),
                    b_in: seg(format!("z.{k}.B")),
                    act_bias: bias.iter().map(|&v| cfg.activation.apply(v)).collect(),
                    bias,
                }
            })
            .collect();
        Ok(Self {
            c: seg("z.C".into()),
            layers,
            cfg,
        })
    }

    pub fn config(&self) -> &OperatorConfig {
        &self.cfg
    }

    pub fn a_eff(&self, layer: usize) -> &[f64] {
        &self.layers[layer].a_eff
    }

    pub fn zero_state(&self) -> OperatorState {
        OperatorState {
            layers: vec![vec![0.0; self.cfg.state_dim]; self.cfg.depth],
        }
    }

    /// One recurrent update through all layers; returns `z_t`.
    pub fn z_step(&self, state: &mut OperatorState, input: &[f64]) -> Result<Vec<f64>> {
        if input.len() != self.cfg.input_dim {
            return Err(Error::Dimension {
                expected: self.cfg.input_dim,
                found: input.len(),
                context: "operator input".into(),
            });
        }
        let n = self.cfg.state_dim;
        let act = self.cfg.activation;
        let mut carry = input.to_vec();
        for (k, layer) in self.layers.iter().enumerate() {
            let s = &state.layers[k];
            let rec = linalg::matvec(&layer.a_eff, n, n, s);
            let inp = linalg::matvec(&layer.b_in, n, carry.len(), &carry);
            let next: Vec<f64> = (0..n)
                .map(|i| act.apply(rec[i] + inp[i] + layer.bias[i]) - layer.act_bias[i])
                .collect();
            state.layers[k] = next.clone();
            carry = next;
        }
        Ok(linalg::matvec(&self.c, self.cfg.output_dim, n, &carry))
    }

    /// Outputs for `input_at_zero` followed by `steps - 1` zero inputs.
    pub fn impulse_response(&self, input_at_zero: &[f64], steps: usize) -> Result<Vec<Vec<f64>>> {
        let mut state = self.zero_state();
        let zeros = vec![0.0; self.cfg.input_dim];
        (0..steps)
            .map(|t| self.z_step(&mut state, if t == 0 { input_at_zero } else { &zeros }))
            .collect()
    }
}

/// Operator parameters bound to tape nodes.
pub struct OperatorOnTape {
    cfg: OperatorConfig,
    a_eff: Vec<Var>,
    b_in: Vec<Var>,
    bias: Vec<Var>,
    act_bias: Vec<Var>,
    c: Var,
}

impl OperatorOnTape {
    /// Slices the operator segments out of the parameter column `theta`;
    /// `offset` is where the operator's segments start.
    pub fn bind(cfg: OperatorConfig, tape: &mut Tape, theta: Var, offset: usize) -> Self {
        let layout = cfg.layout();
        let slice = |tape: &mut Tape, name: &str| {
            let s = layout.segment(name).expect("layout segment");
            tape.slice(theta, offset + s.start, s.rows, s.cols)
        };
        let mut a_eff = Vec::new();
        let mut b_in = Vec::new();
        let mut bias = Vec::new();
        let mut act_bias = Vec::new();
        for k in 0..cfg.depth {
            let a = slice(tape, &format!("z.{k}.A"));
            let fro = tape.norm(a);
            let denom = tape.add_scalar(fro, 1.0);
            let inv = tape.recip(denom);
            let scaled = tape.mul_scalar(inv, a);
            a_eff.push(tape.scale(scaled, cfg.gamma));
            b_in.push(slice(tape, &format!("z.{k}.B")));
            let b = slice(tape, &format!("z.{k}.b"));
            act_bias.push(match cfg.activation {
                OperatorActivation::Tanh => tape.tanh(b),
                OperatorActivation::Identity => b,
            });
            bias.push(b);
        }
        let c = slice(tape, "z.C");
        Self {
            cfg,
            a_eff,
            b_in,
            bias,
            act_bias,
            c,
        }
    }

    pub fn zero_state(&self, tape: &mut Tape) -> Vec<Var> {
        (0..self.cfg.depth)
            .map(|_| tape.constant(Tensor::zeros(self.cfg.state_dim, 1)))
            .collect()
    }

    /// Tape counterpart of [`ContractingOperator::z_step`].
    pub fn z_step(&self, tape: &mut Tape, state: &mut [Var], input: Var) -> Var {
        let mut carry = input;
        for k in 0..self.cfg.depth {
            let rec = tape.matmul(self.a_eff[k], state[k]);
            let inp = tape.matmul(self.b_in[k], carry);
            let s = tape.add(rec, inp);
            let pre = tape.add(s, self.bias[k]);
            let post = match self.cfg.activation {
                OperatorActivation::Tanh => tape.tanh(pre),
                OperatorActivation::Identity => pre,
            };
            let next = tape.sub(post, self.act_bias[k]);
            state[k] = next;
            carry = next;
        }
        tape.matmul(self.c, carry)
    }
}

/// Largest singular value of a row-major `rows x cols` matrix by power
/// iteration on `M'M` from a seeded random start. Never exceeds the true
/// norm beyond rounding.
pub fn spectral_norm(m: &[f64], rows: usize, cols: usize, iterations: usize, seed: u64) -> f64 {
    let mut r = rng::rng(seed);
    let mut v: Vec<f64> = (0..cols).map(|_| r.sample(StandardNormal)).collect();
    let mt: Vec<f64> = Tensor::new(rows, cols, m.to_vec()).transpose().into_data();
    let mut sigma = 0.0;
    for _ in 0..iterations {
        let nv = linalg::norm(&v);
        if nv == 0.0 {
            return 0.0;
        }
        v.iter_mut().for_each(|x| *x /= nv);
        let mv = linalg::matvec(m, rows, cols, &v);
        sigma = linalg::norm(&mv);
        v = linalg::matvec(&mt, cols, rows, &mv);
    }
    sigma
}
