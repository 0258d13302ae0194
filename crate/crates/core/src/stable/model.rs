use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;

use rand::Rng as _;
use rand_distr::StandardNormal;

use super::features::{FeatureConfig, FeatureNetwork, FeatureNetworkOnTape, COORDINATE_FEATURES};
use super::operator::{ContractingOperator, OperatorActivation, OperatorConfig, OperatorOnTape};
use crate::autodiff::{Layout, ParamVector, Segment, Tape, Var};
use crate::error::{Error, Result};
use crate::rng;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CL2K";
pub const CHECKPOINT_VERSION: u16 = 1;

/// Shapes of Z and Ω together.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ModelConfig {
    pub operator: OperatorConfig,
    pub features: FeatureConfig,
}

impl ModelConfig {
    /// Operator segments first, then feature network segments.
    pub fn layout(&self) -> Layout {
        let mut l = Layout::new();
        self.operator.extend_layout(&mut l);
        self.features.extend_layout(&mut l);
        l
    }

    pub fn operator_offset(&self) -> usize {
        0
    }

    pub fn features_offset(&self) -> usize {
        self.operator.num_params()
    }
}

/// Scales of the initial parameter draw.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ThetaInit {
    /// Gain of the rank-one part of every raw recurrence matrix; larger gains
    /// push `|A_eff|` towards `gamma` and lengthen the impulse response.
    pub recurrence_gain: f64,
    /// Std of the isotropic part of the raw recurrence matrices.
    pub recurrence_noise: f64,
    /// Multiplier on the `1/sqrt(fan_in)` readout scale of `C`.
    pub readout_scale: f64,
    /// Multiplier on the `1/sqrt(fan_in)` scale of Ω's weights.
    pub feature_scale: f64,
}

impl Default for ThetaInit {
    fn default() -> Self {
        Self {
            recurrence_gain: 4.0,
            recurrence_noise: 0.1,
            readout_scale: 0.1,
            feature_scale: 1.0,
        }
    }
}

/// Z and Ω with concrete parameters `theta`.
#[derive(Clone, Debug)]
pub struct InnovationModel {
    cfg: ModelConfig,
    theta: ParamVector,
    z: ContractingOperator,
    omega: FeatureNetwork,
}

impl InnovationModel {
    pub fn new(cfg: ModelConfig, theta: &[f64]) -> Result<Self> {
        let layout = cfg.layout();
        let theta = ParamVector::new(layout, theta.to_vec())?;
        let split = cfg.features_offset();
        let z = ContractingOperator::new(cfg.operator, &theta.as_slice()[..split])?;
        let omega = FeatureNetwork::new(cfg.features, &theta.as_slice()[split..])?;
        Ok(Self { cfg, theta, z, omega })
    }

    /// Seeded draw of `theta` with the given scales.
    pub fn init(cfg: ModelConfig, init: ThetaInit, seed: u64) -> Result<Self> {
        cfg.operator.validate()?;
        let mut r = rng::rng(seed);
        let layout = cfg.layout();
        let mut theta = ParamVector::zeros(layout.clone());
        for seg in layout.segments() {
            let fan_in = seg.rows.max(1) as f64;
            let mut gauss = |scale: f64| -> Vec<f64> {
                (0..seg.len())
                    .map(|_| scale * r.sample::<f64, _>(StandardNormal))
                    .collect()
            };
            let name = seg.name.as_str();
            let values = if name.ends_with(".A") {
                let n = seg.rows;
                let dir: Vec<f64> = gauss(1.0).into_iter().take(n).collect();
                let norm = crate::linalg::norm(&dir).max(f64::MIN_POSITIVE);
                let mut a = gauss(init.recurrence_noise);
                for i in 0..n {
                    for j in 0..n {
                        a[i * n + j] += init.recurrence_gain * dir[i] * dir[j] / (norm * norm);
                    }
                }
                a
            } else if name.ends_with(".B") {
                gauss(1.0 / (seg.cols as f64).sqrt())
            } else if name == "z.C" {
                gauss(init.readout_scale / (seg.cols as f64).sqrt())
            } else if name.starts_with("omega.W") {
                gauss(init.feature_scale / fan_in.sqrt())
            } else {
                vec![0.0; seg.len()]
            };
            theta.as_mut_slice()[seg.range()].copy_from_slice(&values);
        }
        Self::new(cfg, theta.as_slice())
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn theta(&self) -> &ParamVector {
        &self.theta
    }

    pub fn operator(&self) -> &ContractingOperator {
        &self.z
    }

    pub fn features(&self) -> &FeatureNetwork {
        &self.omega
    }

    pub fn with_theta(&self, theta: &[f64]) -> Result<Self> {
        Self::new(self.cfg, theta)
    }

    pub fn write_checkpoint(&self, path: &Path) -> Result<()> {
        fs::write(path, encode_checkpoint(self))?;
        Ok(())
    }

    pub fn read_checkpoint(path: &Path) -> Result<Self> {
        decode_checkpoint(&fs::read(path)?)
    }
}

/// Model parameters bound to tape nodes of a `theta` input column.
pub struct ModelOnTape {
    pub z: OperatorOnTape,
    pub omega: FeatureNetworkOnTape,
}

impl ModelOnTape {
    pub fn bind(cfg: &ModelConfig, tape: &mut Tape, theta: Var) -> Self {
        Self {
            z: OperatorOnTape::bind(cfg.operator, tape, theta, cfg.operator_offset()),
            omega: FeatureNetworkOnTape::bind(cfg.features, tape, theta, cfg.features_offset()),
        }
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len());
    out.extend_from_slice(s.as_bytes());
}

/// Little-endian layout: magic, version (u16), n, r, input dim, output dim
/// (u32), gamma (f64), activation name, hidden width (u32), feature names,
/// segment table (name, rows, cols), value count (u64), values (f64).
pub fn encode_checkpoint(model: &InnovationModel) -> Vec<u8> {
    let c = &model.cfg;
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    put_u32(&mut out, c.operator.state_dim);
    put_u32(&mut out, c.operator.depth);
    put_u32(&mut out, c.operator.input_dim);
    put_u32(&mut out, c.operator.output_dim);
    out.extend_from_slice(&c.operator.gamma.to_le_bytes());
    put_str(&mut out, c.operator.activation.name());
    put_u32(&mut out, c.features.hidden);
    put_u32(&mut out, COORDINATE_FEATURES.len());
    for f in COORDINATE_FEATURES {
        put_str(&mut out, f);
    }
    let segs = model.theta.layout().segments();
    put_u32(&mut out, segs.len());
    for s in segs {
        put_str(&mut out, &s.name);
        put_u32(&mut out, s.rows);
        put_u32(&mut out, s.cols);
    }
    out.extend_from_slice(&(model.theta.len() as u64).to_le_bytes());
    for v in model.theta.as_slice() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

struct Reader<'a>(Cursor<&'a [u8]>);

impl Reader<'_> {
    fn bytes<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut b = [0u8; N];
        self.0
            .read_exact(&mut b)
            .map_err(|_| Error::Format("checkpoint truncated".into()))?;
        Ok(b)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.bytes()?) as usize)
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.bytes()?))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()?;
        if n > 4096 {
            return Err(Error::Format("checkpoint string too long".into()));
        }
        let mut b = vec![0u8; n];
        self.0
            .read_exact(&mut b)
            .map_err(|_| Error::Format("checkpoint truncated".into()))?;
        String::from_utf8(b).map_err(|_| Error::Format("checkpoint string is not UTF-8".into()))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<InnovationModel> {
    let mut r = Reader(Cursor::new(bytes));
    if &r.bytes::<4>()? != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let version = u16::from_le_bytes(r.bytes()?);
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let state_dim = r.u32()?;
    let depth = r.u32()?;
    let input_dim = r.u32()?;
    let output_dim = r.u32()?;
    let gamma = r.f64()?;
    let activation = OperatorActivation::from_name(&r.string()?)?;
    let hidden = r.u32()?;
    let nf = r.u32()?;
    let names = (0..nf).map(|_| r.string()).collect::<Result<Vec<_>>>()?;
    if names != COORDINATE_FEATURES {
        return Err(Error::Format(format!("unexpected feature layout {names:?}")));
    }
    let cfg = ModelConfig {
        operator: OperatorConfig {
            input_dim,
            output_dim,
            state_dim,
            depth,
            gamma,
            activation,
        },
        features: FeatureConfig { hidden },
    };
    cfg.operator.validate().map_err(|e| Error::Format(e.to_string()))?;
    let nseg = r.u32()?;
    let mut segments = Vec::with_capacity(nseg.min(1024));
    let mut start = 0;
    for _ in 0..nseg {
        let name = r.string()?;
        let rows = r.u32()?;
        let cols = r.u32()?;
        segments.push(Segment {
            name,
            start,
            rows,
            cols,
        });
        start += rows * cols;
    }
    let stored = Layout::from_segments(segments)?;
    if stored != cfg.layout() {
        return Err(Error::Format("segment table does not match the header".into()));
    }
    let count = u64::from_le_bytes(r.bytes()?) as usize;
    if count != stored.len() {
        return Err(Error::Format(format!(
            "checkpoint holds {count} values, layout needs {}",
            stored.len()
        )));
    }
    let theta = (0..count).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
    if (r.0.position() as usize) != bytes.len() {
        return Err(Error::Format("trailing bytes after checkpoint".into()));
    }
    InnovationModel::new(cfg, &theta)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let m = InnovationModel::init(ModelConfig::default(), ThetaInit::default(), 3).unwrap();
        let bytes = encode_checkpoint(&m);
        let back = decode_checkpoint(&bytes).unwrap();
        assert_eq!(back.theta(), m.theta());
        assert_eq!(back.config(), m.config());
        assert_eq!(encode_checkpoint(&back), bytes);
    }

    #[test]
    fn corrupt_checkpoints_rejected() {
        let m = InnovationModel::init(ModelConfig::default(), ThetaInit::default(), 3).unwrap();
        let bytes = encode_checkpoint(&m);
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_checkpoint(&bad).is_err());
        assert!(decode_checkpoint(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(decode_checkpoint(&extra).is_err());
    }

    #[test]
    fn init_is_seeded() {
        let a = InnovationModel::init(ModelConfig::default(), ThetaInit::default(), 9).unwrap();
        let b = InnovationModel::init(ModelConfig::default(), ThetaInit::default(), 9).unwrap();
        assert_eq!(a.theta(), b.theta());
        let rho = super::super::operator::spectral_norm(a.operator().a_eff(0), 3, 3, 200, 0);
        assert!(rho > 0.5 && rho < 0.95, "{rho}");
    }
}
