use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;

use crate::data::Report;
use crate::error::{Error, Result};
use crate::linalg;

pub const TRAJECTORY_MAGIC: &[u8; 4] = b"CL2O";
pub const TRAJECTORY_VERSION: u16 = 1;

/// Iterates beyond this norm count as divergence.
pub const DIVERGENCE_THRESHOLD: f64 = 1e12;

/// Which rule produced a trajectory.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RuleKind {
    Full,
    /// Cyclic over `M` components.
    Cyclic(usize),
}

/// Full objective value and gradient at an epoch boundary of a cyclic run.
/// Probes are diagnostics; the rule never sees them.
#[derive(Clone, Debug, PartialEq)]
pub struct Probe {
    pub t: usize,
    pub x: Vec<f64>,
    pub grad: Vec<f64>,
    pub value: f64,
}

/// Closed-loop record of one rollout.
///
/// Per-time scalars have `T + 1` entries (`t = 0..=T`) and per-step scalars
/// `T` entries. For cyclic runs `value` and `grad_sq` are the component
/// estimates `f_tau / share` and `|grad f_tau / share|^2` in force at `t`.
/// The vector series are empty unless vectors were recorded.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub kind: RuleKind,
    pub x0: Vec<f64>,
    pub x_final: Vec<f64>,
    pub value: Vec<f64>,
    pub grad_sq: Vec<f64>,
    pub u_sq: Vec<f64>,
    pub v_sq: Vec<f64>,
    pub z_norm: Vec<f64>,
    pub eta: Vec<f64>,
    pub x: Vec<Vec<f64>>,
    pub u: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    /// Gradient used by the rule at each step (full or component).
    pub g: Vec<Vec<f64>>,
    pub probes: Vec<Probe>,
    /// First step whose iterate was non-finite or beyond the threshold; the
    /// record stops there.
    pub diverged_at: Option<usize>,
}

impl Trajectory {
    pub fn new(kind: RuleKind, x0: Vec<f64>) -> Self {
        Self {
            kind,
            x_final: x0.clone(),
            x0,
            value: Vec::new(),
            grad_sq: Vec::new(),
            u_sq: Vec::new(),
            v_sq: Vec::new(),
            z_norm: Vec::new(),
            eta: Vec::new(),
            x: Vec::new(),
            u: Vec::new(),
            v: Vec::new(),
            g: Vec::new(),
            probes: Vec::new(),
            diverged_at: None,
        }
    }

    /// Number of updates performed.
    pub fn steps(&self) -> usize {
        self.u_sq.len()
    }

    pub fn dim(&self) -> usize {
        self.x0.len()
    }

    pub fn diverged(&self) -> bool {
        self.diverged_at.is_some()
    }

    pub fn has_vectors(&self) -> bool {
        !self.x.is_empty()
    }

    /// Squared full-gradient norms with their times: every `t` for full-gradient
    /// runs, the probes for cyclic runs.
    pub fn full_grad_sq(&self) -> Vec<(usize, f64)> {
        match self.kind {
            RuleKind::Full => self.grad_sq.iter().copied().enumerate().collect(),
            RuleKind::Cyclic(_) => self
                .probes
                .iter()
                .map(|p| (p.t, linalg::norm_sq(&p.grad)))
                .collect(),
        }
    }

    fn partial_sums(values: impl Iterator<Item = f64>) -> Vec<f64> {
        let mut acc = 0.0;
        values
            .map(|v| {
                acc += v;
                acc
            })
            .collect()
    }

    /// Running `sum |grad f(x_t)|^2` over the full-gradient records.
    pub fn grad_energy(&self) -> Vec<f64> {
        Self::partial_sums(self.full_grad_sq().into_iter().map(|(_, g)| g))
    }

    /// Running `sum |u_t|^2`.
    pub fn update_energy(&self) -> Vec<f64> {
        Self::partial_sums(self.u_sq.iter().copied())
    }

    /// Running `sum |v_t|^2`.
    pub fn innovation_energy(&self) -> Vec<f64> {
        Self::partial_sums(self.v_sq.iter().copied())
    }

    /// Smallest full-gradient norm seen so far, per record.
    pub fn running_min_grad_norm(&self) -> Vec<f64> {
        let mut best = f64::INFINITY;
        self.full_grad_sq()
            .into_iter()
            .map(|(_, g)| {
                best = best.min(g.sqrt());
                best
            })
            .collect()
    }

    /// Columns `t, grad_norm, f, u_norm, v_norm, flags`. Flags: bit 0 marks
    /// a full-gradient probe (cyclic runs), bit 1 the divergence step, bit 2
    /// the final point (no update; `u_norm`, `v_norm` are NaN).
    pub fn to_report(&self) -> Report {
        let mut r = Report::new(&["t", "grad_norm", "f", "u_norm", "v_norm", "flags"]);
        let mut probe = self.probes.iter().peekable();
        for t in 0..self.value.len() {
            let mut flags = 0u32;
            let mut gn = self.grad_sq[t].sqrt();
            let mut f = self.value[t];
            if let Some(p) = probe.peek() {
                if p.t == t {
                    flags |= 1;
                    gn = linalg::norm(&p.grad);
                    f = p.value;
                    probe.next();
                }
            }
            if self.diverged_at == Some(t) {
                flags |= 2;
            }
            let (un, vn) = if t < self.steps() {
                (self.u_sq[t].sqrt(), self.v_sq[t].sqrt())
            } else {
                flags |= 4;
                (f64::NAN, f64::NAN)
            };
            r.push_row(vec![t as f64, gn, f, un, vn, f64::from(flags)])
                .expect("row width");
        }
        r.meta("kind", match self.kind {
            RuleKind::Full => "full".to_string(),
            RuleKind::Cyclic(m) => format!("cyclic:{m}"),
        });
        r
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_report().to_csv())?;
        Ok(())
    }

    pub fn write_binary(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read_binary(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// Little-endian: magic, version (u16), kind (u8), M (u32), d (u32),
    /// steps (u32), records (u32), diverged step (u64, `u64::MAX` if none),
    /// has-vectors (u8), probe count (u32), then `x0`, `x_final`, the scalar
    /// series, the vector series and the probes, all as f64.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(TRAJECTORY_MAGIC);
        out.extend_from_slice(&TRAJECTORY_VERSION.to_le_bytes());
        let (kind, m) = match self.kind {
            RuleKind::Full => (0u8, 0usize),
            RuleKind::Cyclic(m) => (1u8, m),
        };
        out.push(kind);
        let u32le = |out: &mut Vec<u8>, v: usize| out.extend_from_slice(&(v as u32).to_le_bytes());
        u32le(&mut out, m);
        u32le(&mut out, self.dim());
        u32le(&mut out, self.steps());
        u32le(&mut out, self.value.len());
        out.extend_from_slice(&self.diverged_at.map_or(u64::MAX, |t| t as u64).to_le_bytes());
        out.push(u8::from(self.has_vectors()));
        u32le(&mut out, self.probes.len());
        let mut put = |vals: &[f64]| {
            for v in vals {
                out.extend_from_slice(&v.to_le_bytes());
            }
        };
        put(&self.x0);
        put(&self.x_final);
        for s in [&self.value, &self.grad_sq, &self.u_sq, &self.v_sq, &self.z_norm, &self.eta] {
            put(s);
        }
        if self.has_vectors() {
            for series in [&self.x, &self.u, &self.v, &self.g] {
                for row in series.iter() {
                    put(row);
                }
            }
        }
        for p in &self.probes {
            put(&[p.t as f64, p.value]);
            put(&p.x);
            put(&p.grad);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Cursor::new(bytes);
        let mut take = |n: usize| -> Result<Vec<u8>> {
            let mut b = vec![0u8; n];
            r.read_exact(&mut b)
                .map_err(|_| Error::Format("trajectory truncated".into()))?;
            Ok(b)
        };
        if take(4)? != TRAJECTORY_MAGIC {
            return Err(Error::Format("not a trajectory (bad magic)".into()));
        }
        let version = u16::from_le_bytes(take(2)?.try_into().expect("2 bytes"));
        if version != TRAJECTORY_VERSION {
            return Err(Error::Format(format!("unsupported trajectory version {version}")));
        }
        let kind_byte = take(1)?[0];
        let mut u32v = || -> Result<usize> {
            Ok(u32::from_le_bytes(take(4)?.try_into().expect("4 bytes")) as usize)
        };
        let m = u32v()?;
        let d = u32v()?;
        let steps = u32v()?;
        let records = u32v()?;
        let kind = match kind_byte {
            0 => RuleKind::Full,
            1 if m > 0 => RuleKind::Cyclic(m),
            other => return Err(Error::Format(format!("unknown rule kind {other}"))),
        };
        let div = u64::from_le_bytes(take(8)?.try_into().expect("8 bytes"));
        let vectors = take(1)?[0] != 0;
        let nprobes = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes")) as usize;
        let header = 4 + 2 + 1 + 4 * 4 + 8 + 1 + 4;
        let vec_rows = if vectors { 2 * records + 2 * steps } else { 0 };
        let expected_floats = 2 * d + 2 * records + 4 * steps + vec_rows * d + nprobes * (2 + 2 * d);
        if bytes.len() != header + 8 * expected_floats {
            return Err(Error::Format(format!(
                "trajectory payload is {} bytes, header implies {}",
                bytes.len() - header.min(bytes.len()),
                8 * expected_floats
            )));
        }
        let mut pos = header;
        let mut floats = |n: usize| -> Vec<f64> {
            let out = bytes[pos..pos + 8 * n]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            pos += 8 * n;
            out
        };
        let mut t = Trajectory::new(kind, floats(d));
        t.x_final = floats(d);
        t.value = floats(records);
        t.grad_sq = floats(records);
        t.u_sq = floats(steps);
        t.v_sq = floats(steps);
        t.z_norm = floats(steps);
        t.eta = floats(steps);
        if vectors {
            t.x = (0..records).map(|_| floats(d)).collect();
            t.u = (0..steps).map(|_| floats(d)).collect();
            t.v = (0..steps).map(|_| floats(d)).collect();
            t.g = (0..records).map(|_| floats(d)).collect();
        }
        for _ in 0..nprobes {
            let head = floats(2);
            t.probes.push(Probe {
                t: head[0] as usize,
                value: head[1],
                x: floats(d),
                grad: floats(d),
            });
        }
        t.diverged_at = (div != u64::MAX).then_some(div as usize);
        Ok(t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Trajectory {
        let mut t = Trajectory::new(RuleKind::Cyclic(2), vec![1.0, -1.0]);
        t.value = vec![2.0, 1.0, 0.5];
        t.grad_sq = vec![4.0, 1.0, 0.25];
        t.u_sq = vec![0.5, 0.125];
        t.v_sq = vec![0.0, 0.01];
        t.z_norm = vec![0.0, 0.1];
        t.eta = vec![0.1, 0.1];
        t.x = vec![vec![1.0, -1.0], vec![0.5, -0.5], vec![0.25, -0.25]];
        t.u = vec![vec![-0.5, 0.5], vec![-0.25, 0.25]];
        t.v = vec![vec![0.0, 0.0], vec![0.1, 0.0]];
        t.g = vec![vec![2.0, 0.0], vec![1.0, 0.0], vec![0.5, 0.0]];
        t.x_final = vec![0.25, -0.25];
        t.probes.push(Probe {
            t: 0,
            x: vec![1.0, -1.0],
            grad: vec![3.0, 4.0],
            value: 7.0,
        });
        t
    }

    #[test]
    fn binary_round_trip() {
        let t = sample();
        let b = t.to_bytes();
        assert_eq!(&b[..4], b"CL2O");
        assert_eq!(Trajectory::from_bytes(&b).unwrap(), t);
        assert!(Trajectory::from_bytes(&b[..b.len() - 3]).is_err());
        let mut bad = b.clone();
        bad[1] = 0;
        assert!(Trajectory::from_bytes(&bad).is_err());
    }

    #[test]
    fn csv_has_one_row_per_time_and_flags() {
        let r = sample().to_report();
        assert_eq!(r.columns, ["t", "grad_norm", "f", "u_norm", "v_norm", "flags"]);
        assert_eq!(r.rows.len(), 3);
        assert_eq!(r.rows[0][1], 5.0);
        assert_eq!(r.rows[0][5], 1.0);
        assert_eq!(r.rows[2][5], 4.0);
        assert!(r.rows[2][3].is_nan());
    }

    #[test]
    fn energies_are_monotone_partial_sums() {
        let t = sample();
        assert_eq!(t.update_energy(), vec![0.5, 0.625]);
        assert_eq!(t.grad_energy(), vec![25.0]);
    }
}
