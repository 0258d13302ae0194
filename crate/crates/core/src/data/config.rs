//! Run configuration: one `key = value` per line, `#` comments, unknown keys
//! rejected, every default materialized.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use super::results::{format_float, parse_float, parse_keyvalue};
use crate::baselines::{parse_baseline_list, BaselineKind};
use crate::error::{Error, Result};
use crate::meta::{FullStepsize, InitDistribution};
use crate::objectives::Activation;
use crate::stable::OperatorActivation;

/// A value that can live in a config file.
pub trait ConfigValue: Sized {
    fn parse_value(s: &str) -> Result<Self>;
    fn render(&self) -> String;
}

macro_rules! via_fromstr {
    ($($t:ty),*) => {$(
        impl ConfigValue for $t {
            fn parse_value(s: &str) -> Result<Self> {
                s.parse::<$t>().map_err(|e| Error::Config(format!("{s:?}: {e}")))
            }
            fn render(&self) -> String {
                self.to_string()
            }
        }
    )*};
}

via_fromstr!(usize, u64, bool);

impl ConfigValue for f64 {
    fn parse_value(s: &str) -> Result<Self> {
        parse_float(s).map_err(|_| Error::Config(format!("{s:?} is not a number")))
    }
    fn render(&self) -> String {
        format_float(*self)
    }
}

impl ConfigValue for String {
    fn parse_value(s: &str) -> Result<Self> {
        Ok(s.to_string())
    }
    fn render(&self) -> String {
        self.clone()
    }
}

impl ConfigValue for Activation {
    fn parse_value(s: &str) -> Result<Self> {
        s.parse().map_err(|e: Error| Error::Config(e.to_string()))
    }
    fn render(&self) -> String {
        self.name().to_string()
    }
}

impl ConfigValue for OperatorActivation {
    fn parse_value(s: &str) -> Result<Self> {
        OperatorActivation::from_name(s).map_err(|e| Error::Config(e.to_string()))
    }
    fn render(&self) -> String {
        self.name().to_string()
    }
}

impl ConfigValue for Vec<BaselineKind> {
    fn parse_value(s: &str) -> Result<Self> {
        parse_baseline_list(s).map_err(|e| Error::Config(e.to_string()))
    }
    fn render(&self) -> String {
        self.iter().map(|k| k.name()).collect::<Vec<_>>().join(",")
    }
}

impl ConfigValue for Vec<usize> {
    fn parse_value(s: &str) -> Result<Self> {
        s.split(',')
            .filter(|p| !p.trim().is_empty())
            .map(|p| usize::parse_value(p.trim()))
            .collect()
    }
    fn render(&self) -> String {
        self.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
    }
}

/// Number or `auto`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Auto {
    Auto,
    Value(f64),
}

impl Auto {
    pub fn value(self) -> Option<f64> {
        match self {
            Auto::Auto => None,
            Auto::Value(v) => Some(v),
        }
    }
}

impl ConfigValue for Auto {
    fn parse_value(s: &str) -> Result<Self> {
        if s == "auto" {
            Ok(Auto::Auto)
        } else {
            f64::parse_value(s).map(Auto::Value)
        }
    }
    fn render(&self) -> String {
        match self {
            Auto::Auto => "auto".into(),
            Auto::Value(v) => format_float(*v),
        }
    }
}

/// `auto` (`0.9/beta`), `<c>/beta`, or a fixed number.
impl ConfigValue for FullStepsize {
    fn parse_value(s: &str) -> Result<Self> {
        if s == "auto" {
            return Ok(FullStepsize::DEFAULT);
        }
        match s.strip_suffix("/beta") {
            Some(c) => f64::parse_value(c.trim()).map(FullStepsize::PerBeta),
            None => f64::parse_value(s).map(FullStepsize::Fixed),
        }
    }
    fn render(&self) -> String {
        match self {
            FullStepsize::PerBeta(c) => format!("{}/beta", format_float(*c)),
            FullStepsize::Fixed(v) => format_float(*v),
        }
    }
}

macro_rules! named_enum {
    ($name:ident { $($variant:ident => $text:literal),* $(,)? }) => {
        #[derive(Clone, Copy, Debug, PartialEq, Eq)]
        pub enum $name { $($variant),* }

        impl $name {
            pub fn name(self) -> &'static str {
                match self { $($name::$variant => $text),* }
            }
        }

        impl FromStr for $name {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s.trim() {
                    $($text => Ok($name::$variant),)*
                    other => Err(Error::Config(format!(
                        "unknown {} {other:?}", stringify!($name).to_lowercase()
                    ))),
                }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.name())
            }
        }

        impl ConfigValue for $name {
            fn parse_value(s: &str) -> Result<Self> { s.parse() }
            fn render(&self) -> String { self.name().to_string() }
        }
    };
}

named_enum!(ProblemKind {
    Quadratic => "quadratic",
    Mixed => "mixed",
    LeastSquares => "least-squares",
    Classifier => "classifier",
});

named_enum!(InitKind {
    Uniform => "uniform",
    Gaussian => "gaussian",
});

macro_rules! run_config {
    ($($(#[$doc:meta])* $field:ident : $ty:ty = $default:expr;)*) => {
        /// Every hyperparameter of a run.
        #[derive(Clone, Debug, PartialEq)]
        pub struct RunConfig {
            $($(#[$doc])* pub $field: $ty,)*
        }

        impl Default for RunConfig {
            fn default() -> Self {
                Self { $($field: $default,)* }
            }
        }

        impl RunConfig {
            pub const KEYS: &'static [&'static str] = &[$(stringify!($field)),*];

            /// Sets one key from its textual value.
            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                match key {
                    $(stringify!($field) => {
                        self.$field = <$ty as ConfigValue>::parse_value(value)
                            .map_err(|e| Error::Config(format!("{key}: {e}")))?;
                    })*
                    other => return Err(Error::Config(format!("unknown key {other:?}"))),
                }
                Ok(())
            }

            /// All keys with their rendered values, in declaration order.
            pub fn entries(&self) -> Vec<(&'static str, String)> {
                vec![$((stringify!($field), ConfigValue::render(&self.$field))),*]
            }
        }
    };
}

run_config! {
    seed: u64 = 0;
    out_dir: String = "runs".into();
    /// Empty: `CL2O_DATA_DIR`, then `./data`.
    data_dir: String = String::new();
    /// Worker threads; 0 uses every logical core.
    jobs: usize = 0;

    problem: ProblemKind = ProblemKind::Mixed;
    dim: usize = 10;
    condition: f64 = 20.0;
    components: usize = 5;
    noise: f64 = 0.0;

    rule_eta: FullStepsize = FullStepsize::DEFAULT;
    eta0: Auto = Auto::Auto;
    schedule_power: f64 = 1.0;
    unsafe_stepsize: bool = false;

    horizon: usize = 50;
    gamma_decay: f64 = 0.95;
    alpha: f64 = 0.0;
    episodes: usize = 10;
    epochs: usize = 40;
    meta_lr: f64 = 0.01;
    /// 0 keeps the full unrolled graph.
    truncation: usize = 0;
    init: InitKind = InitKind::Uniform;
    init_lo: f64 = 0.0;
    init_hi: f64 = 0.01;
    init_std: f64 = 0.1;

    state_dim: usize = 3;
    depth: usize = 3;
    contraction: f64 = 0.95;
    operator_activation: OperatorActivation = OperatorActivation::Tanh;
    hidden: usize = 16;
    recurrence_gain: f64 = 4.0;
    recurrence_noise: f64 = 0.1;
    readout_scale: f64 = 0.1;
    feature_scale: f64 = 1.0;

    activation: Activation = Activation::Tanh;
    minibatch: usize = 128;
    train_images: usize = 2000;
    eval_images: usize = 500;
    meta_fraction: f64 = 0.8;
    synthetic_pixels: usize = 64;
    synthetic_labels: usize = 10;
    synthetic_separation: f64 = 8.0;

    baselines: Vec<BaselineKind> = vec![BaselineKind::Sgd];
    bench_seeds: usize = 10;
    bench_steps: usize = 100;
    report_steps: Vec<usize> = vec![20, 100];
    tune_steps: usize = 20;
    tune_starts: usize = 3;
    verify_steps: usize = 2000;
    grid_lo: f64 = 1e-4;
    grid_hi: f64 = 1.0;
    grid_points: usize = 13;
    momentum: f64 = 0.9;
    adam_beta1: f64 = 0.9;
    adam_beta2: f64 = 0.999;
    adam_eps: f64 = 1e-8;
    rmsprop_decay: f64 = 0.9;
}

impl RunConfig {
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = std::collections::HashSet::new();
        for (k, v) in parse_keyvalue(text).map_err(|e| Error::Config(e.to_string()))? {
            if !seen.insert(k.clone()) {
                return Err(Error::Config(format!("duplicate key {k:?}")));
            }
            cfg.set(&k, &v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_text(&text)
    }

    /// Canonical text with every key.
    pub fn to_text(&self) -> String {
        self.entries()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    /// SHA-256 of [`RunConfig::to_text`].
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_text().as_bytes()))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.horizon == 0 {
            return bad("horizon must be >= 1".into());
        }
        if self.episodes == 0 {
            return bad("episodes must be >= 1".into());
        }
        if self.dim == 0 || self.components == 0 {
            return bad("dim and components must be >= 1".into());
        }
        if !(self.condition >= 1.0) {
            return bad(format!("condition must be >= 1, got {}", self.condition));
        }
        if !(self.gamma_decay >= 0.0) || !(self.alpha >= 0.0) {
            return bad("metaloss weights must be nonnegative".into());
        }
        if !(self.meta_lr > 0.0) {
            return bad("meta_lr must be positive".into());
        }
        if !(self.contraction > 0.0 && self.contraction < 1.0) {
            return bad(format!("contraction must lie in (0, 1), got {}", self.contraction));
        }
        if !(self.meta_fraction > 0.0 && self.meta_fraction <= 1.0) {
            return bad("meta_fraction must lie in (0, 1]".into());
        }
        if self.minibatch == 0 || self.train_images == 0 || self.eval_images == 0 {
            return bad("minibatch and image counts must be >= 1".into());
        }
        if self.grid_points == 0 || !(self.grid_lo > 0.0 && self.grid_hi >= self.grid_lo) {
            return bad("learning-rate grid must satisfy 0 < grid_lo <= grid_hi".into());
        }
        if !(self.init_hi >= self.init_lo) || !(self.init_std >= 0.0) {
            return bad("init range is empty".into());
        }
        if self.bench_seeds == 0 || self.bench_steps == 0 || self.verify_steps == 0 {
            return bad("bench_seeds, bench_steps and verify_steps must be >= 1".into());
        }
        if self.report_steps.iter().any(|&t| t > self.bench_steps) {
            return bad("report_steps must not exceed bench_steps".into());
        }
        Ok(())
    }

    pub fn init_distribution(&self) -> InitDistribution {
        match self.init {
            InitKind::Uniform => InitDistribution::Uniform {
                lo: self.init_lo,
                hi: self.init_hi,
            },
            InitKind::Gaussian => InitDistribution::Gaussian {
                mean: 0.0,
                std: self.init_std,
            },
        }
    }

    pub fn truncation(&self) -> Option<usize> {
        (self.truncation > 0).then_some(self.truncation)
    }

    pub fn worker_threads(&self) -> Option<usize> {
        (self.jobs > 0).then_some(self.jobs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_protocol() {
        let c = RunConfig::default();
        assert_eq!((c.horizon, c.episodes, c.epochs), (50, 10, 40));
        assert_eq!(c.gamma_decay, 0.95);
        assert_eq!(c.meta_lr, 0.01);
        assert_eq!(c.minibatch, 128);
        assert_eq!(c.init_distribution(), InitDistribution::DEFAULT_UNIFORM);
    }

    #[test]
    fn text_round_trip_materializes_everything() {
        let mut c = RunConfig::default();
        c.set("epochs", "3").unwrap();
        c.set("baselines", "gd,adam").unwrap();
        c.set("rule_eta", "0.25").unwrap();
        assert_eq!(c.rule_eta, FullStepsize::Fixed(0.25));
        c.set("rule_eta", "2/beta").unwrap();
        assert_eq!(c.rule_eta, FullStepsize::PerBeta(2.0));
        let text = c.to_text();
        assert_eq!(text.lines().count(), RunConfig::KEYS.len());
        let back = RunConfig::from_text(&text).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
        assert_ne!(RunConfig::default().hash(), c.hash());
    }

    #[test]
    fn rejects_unknown_and_malformed() {
        assert!(matches!(RunConfig::from_text("epochz = 3"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::from_text("epochs = many"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::from_text("epochs = 1\nepochs = 2"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::from_text("horizon = 0"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::from_text("activation = softplus"), Err(Error::Config(_))));
        let c = RunConfig::from_text("# comment\n\nseed = 7 # trailing\n").unwrap();
        assert_eq!(c.seed, 7);
    }
}
