//! Convergent update rules and the rollout driver shared with the baselines.

mod rules;
mod schedule;
mod trajectory;

pub use rules::{
    default_eta, drive, rollout, step_cyclic, step_full, CyclicRule, FullGradientRule,
    InnovationSource, InnovationState, RecordFlags, RolloutState, StepInput, StepOutput,
    StepRecord, UpdateRule,
};
pub use schedule::{schedule_energy, StepsizeSchedule};
pub use trajectory::{
    Probe, RuleKind, Trajectory, DIVERGENCE_THRESHOLD, TRAJECTORY_MAGIC, TRAJECTORY_VERSION,
};
