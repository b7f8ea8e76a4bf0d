//! Operator requirements and the online reliability monitor.

mod monitor;
mod requirement;

pub use monitor::{
    explain, monitor_step, p_miss, Action, ActionKind, ActionReason, GuardModels, Monitor,
    MonitorConfig, Observation, PredicateMode, TagProbe, BAND_TO_SIGMA, PROBE_PARAMS,
    SIGMA_FLOOR_M,
};
pub use requirement::{
    format_requirement, parse_requirement, parse_requirements, ConditionTags, Requirement, TagEq,
};
