use crate::autodiff::{Layout, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::linalg;

/// Floor inside the smoothed norms `sqrt(|g|^2 + eps^2)` used for direction
/// features.
pub const DIRECTION_EPS: f64 = 1e-12;

/// Names of the per-coordinate inputs of the feature network.
pub const COORDINATE_FEATURES: [&str; 4] = ["x", "grad_dir", "prev_update_dir", "tanh_loss"];

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum FeatureMode {
    Full,
    /// Partial gradient and loss of a component carrying `share` of `f`;
    /// both are rescaled by `1 / share` into full-objective estimates.
    Batch { share: f64 },
}

/// The window-1 history Ω reacts to.
#[derive(Clone, Copy, Debug)]
pub struct FeatureWindow<'a> {
    pub x: &'a [f64],
    pub grad: &'a [f64],
    pub loss: f64,
    /// `None` at `t = 0`.
    pub prev_update: Option<&'a [f64]>,
}

/// `[x, grad, prev_update, loss]`, length `3d + 1`; the previous update is
/// zero-padded at `t = 0`.
pub fn assemble_features(window: &FeatureWindow<'_>, mode: FeatureMode) -> Result<Vec<f64>> {
    let d = window.x.len();
    if d == 0 || window.grad.len() != d {
        return Err(Error::Dimension {
            expected: d,
            found: window.grad.len(),
            context: "feature gradient".into(),
        });
    }
    let scale = match mode {
        FeatureMode::Full => 1.0,
        FeatureMode::Batch { share } if share > 0.0 => 1.0 / share,
        FeatureMode::Batch { share } => {
            return Err(Error::invalid(format!("component share must be > 0, got {share}")))
        }
    };
    let mut out = Vec::with_capacity(3 * d + 1);
    out.extend_from_slice(window.x);
    out.extend(window.grad.iter().map(|g| g * scale));
    match window.prev_update {
        Some(u) if u.len() == d => out.extend_from_slice(u),
        Some(u) => {
            return Err(Error::Dimension {
                expected: d,
                found: u.len(),
                context: "feature previous update".into(),
            })
        }
        None => out.extend(std::iter::repeat(0.0).take(d)),
    }
    out.push(window.loss * scale);
    Ok(out)
}

fn smooth_norm(v: &[f64]) -> f64 {
    (linalg::norm_sq(v) + DIRECTION_EPS * DIRECTION_EPS).sqrt()
}

/// Ω: an MLP with two tanh hidden layers applied coordinate-wise with shared
/// weights, so the same parameters serve every dimension `d`. Coordinate `i`
/// sees `[x_i, g_i / |g|, u_i / |u|, tanh f]` (norms smoothed by
/// [`DIRECTION_EPS`]) and emits `omega_i`.
#[derive(Clone, Debug)]
pub struct FeatureNetwork {
    hidden: usize,
    w1: Tensor,
    b1: Vec<f64>,
    w2: Tensor,
    b2: Vec<f64>,
    w3: Tensor,
    b3: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FeatureConfig {
    pub hidden: usize,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self { hidden: 16 }
    }
}

impl FeatureConfig {
    pub fn layout(&self) -> Layout {
        let mut l = Layout::new();
        self.extend_layout(&mut l);
        l
    }

    pub(crate) fn extend_layout(&self, l: &mut Layout) {
        let (f, h) = (COORDINATE_FEATURES.len(), self.hidden);
        l.push("omega.W1", f, h);
        l.push("omega.b1", 1, h);
        l.push("omega.W2", h, h);
        l.push("omega.b2", 1, h);
        l.push("omega.W3", h, 1);
        l.push("omega.b3", 1, 1);
    }
}

/// Per-coordinate input matrix (`d x 4`) from a `3d + 1` feature vector.
fn coordinate_inputs(features: &[f64]) -> Result<Tensor> {
    if features.len() < 4 || (features.len() - 1) % 3 != 0 {
        return Err(Error::invalid(format!(
            "feature vector length {} is not 3d + 1",
            features.len()
        )));
    }
    let d = (features.len() - 1) / 3;
    let (x, rest) = features.split_at(d);
    let (g, rest) = rest.split_at(d);
    let (u, f) = rest.split_at(d);
    let (gn, un, tf) = (smooth_norm(g), smooth_norm(u), f[0].tanh());
    let mut data = Vec::with_capacity(4 * d);
    for i in 0..d {
        data.extend_from_slice(&[x[i], g[i] / gn, u[i] / un, tf]);
    }
    Ok(Tensor::new(d, 4, data))
}

impl FeatureNetwork {
    pub fn new(cfg: FeatureConfig, params: &[f64]) -> Result<Self> {
        if cfg.hidden == 0 {
            return Err(Error::invalid("feature network needs a positive hidden width"));
        }
        let layout = cfg.layout();
        if params.len() != layout.len() {
            return Err(Error::Dimension {
                expected: layout.len(),
                found: params.len(),
                context: "feature network parameters".into(),
            });
        }
        let t = |name: &str| {
            let s = layout.segment(name).expect("layout segment");
            Tensor::new(s.rows, s.cols, params[s.range()].to_vec())
        };
        Ok(Self {
            hidden: cfg.hidden,
            w1: t("omega.W1"),
            b1: t("omega.b1").into_data(),
            w2: t("omega.W2"),
            b2: t("omega.b2").into_data(),
            w3: t("omega.W3"),
            b3: t("omega.b3").item(),
        })
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    /// `omega` (length `d`) from a `3d + 1` feature vector.
    pub fn forward(&self, features: &[f64]) -> Result<Vec<f64>> {
        let inp = coordinate_inputs(features)?;
        let add_bias = |mut m: Tensor, b: &[f64]| {
            let w = b.len();
            for (k, v) in m.data_mut().iter_mut().enumerate() {
                *v = (*v + b[k % w]).tanh();
            }
            m
        };
        let h1 = add_bias(inp.matmul(&self.w1), &self.b1);
        let h2 = add_bias(h1.matmul(&self.w2), &self.b2);
        Ok(h2.matmul(&self.w3).data().iter().map(|v| v + self.b3).collect())
    }
}

/// Feature network parameters bound to tape nodes.
pub struct FeatureNetworkOnTape {
    w1: Var,
    b1: Var,
    w2: Var,
    b2: Var,
    w3: Var,
    b3: Var,
}

fn smooth_direction(tape: &mut Tape, v: Var) -> Var {
    let sq = tape.dot(v, v);
    let padded = tape.add_scalar(sq, DIRECTION_EPS * DIRECTION_EPS);
    let n = tape.sqrt(padded);
    let inv = tape.recip(n);
    tape.mul_scalar(inv, v)
}

impl FeatureNetworkOnTape {
    pub fn bind(cfg: FeatureConfig, tape: &mut Tape, theta: Var, offset: usize) -> Self {
        let layout = cfg.layout();
        let mut slice = |name: &str| {
            let s = layout.segment(name).expect("layout segment");
            tape.slice(theta, offset + s.start, s.rows, s.cols)
        };
        Self {
            w1: slice("omega.W1"),
            b1: slice("omega.b1"),
            w2: slice("omega.W2"),
            b2: slice("omega.b2"),
            w3: slice("omega.W3"),
            b3: slice("omega.b3"),
        }
    }

    /// Tape counterpart of [`FeatureNetwork::forward`] with the features given
    /// as separate columns (`x`, `grad`, `prev_update`: `d x 1`; `loss`: scalar),
    /// already rescaled for the feature mode.
    pub fn forward(&self, tape: &mut Tape, x: Var, grad: Var, prev_update: Var, loss: Var) -> Var {
        let d = tape.shape(x).0;
        let gd = smooth_direction(tape, grad);
        let ud = smooth_direction(tape, prev_update);
        let tf = tape.tanh(loss);
        let ones = tape.constant(Tensor::filled(d, 1, 1.0));
        let fcol = tape.mul_scalar(tf, ones);
        let stacked = tape.concat(&[x, gd, ud, fcol]);
        let by_feature = tape.reshape(stacked, 4, d);
        let inp = tape.transpose(by_feature);
        let a1 = tape.matmul(inp, self.w1);
        let p1 = tape.add_row(a1, self.b1);
        let h1 = tape.tanh(p1);
        let a2 = tape.matmul(h1, self.w2);
        let p2 = tape.add_row(a2, self.b2);
        let h2 = tape.tanh(p2);
        let o = tape.matmul(h2, self.w3);
        tape.add_row(o, self.b3)
    }
}
