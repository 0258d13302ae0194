//! Learnable innovation machinery: the l2-stable recurrent operator Z, the
//! feature network Ω and the magnitude-capped combinators.

mod features;
mod innovation;
mod model;
mod operator;

pub use features::{
    assemble_features, FeatureConfig, FeatureMode, FeatureNetwork, FeatureNetworkOnTape,
    FeatureWindow, COORDINATE_FEATURES, DIRECTION_EPS,
};
pub use innovation::{
    innovation_batch, innovation_full, innovation_on_tape, ImpulseSignal, DEGENERATE_DIRECTION,
};
pub use model::{
    decode_checkpoint, encode_checkpoint, InnovationModel, ModelConfig, ModelOnTape, ThetaInit,
    CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use operator::{
    effective_recurrence, spectral_norm, ContractingOperator, OperatorActivation, OperatorConfig,
    OperatorOnTape, OperatorState,
};
