//! Benchmark fixtures shared by the criterion targets.

use std::sync::Arc;

use cl2o_core::meta::{ObjectiveFamily, RuleSpec, TaskDistribution};
use cl2o_core::objectives::{make_quadratic, Objective, Quadratic};
use cl2o_core::stable::{InnovationModel, ModelConfig, ThetaInit};

pub fn quadratic(dim: usize) -> Quadratic {
    make_quadratic(dim, 20.0, 7).expect("quadratic")
}

pub fn model(seed: u64) -> InnovationModel {
    InnovationModel::init(ModelConfig::default(), ThetaInit::default(), seed).expect("model")
}

pub fn mixed_distribution(dim: usize, episodes: usize) -> TaskDistribution {
    let mut d = TaskDistribution::new(ObjectiveFamily::Mixed { dim, condition: 20.0 }, RuleSpec::full_default());
    d.episodes = episodes;
    d
}

pub fn fixed_distribution(obj: Arc<dyn Objective>) -> TaskDistribution {
    TaskDistribution::new(ObjectiveFamily::Fixed(obj), RuleSpec::full_default())
}
