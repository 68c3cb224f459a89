//! Lookback attention from the mask token to the prompt: per-input
//! concentration, dataset strength and fluctuation, per-token features, and
//! the per-layer pilot profiler.

mod metrics;
mod pilot;

pub use metrics::{
    concentration, features, fluctuation, strength, strength_stats, token_concentration, ConcentrationFeature,
    ConcentrationValue, LayerSet, StrengthStats,
};
pub use pilot::{pilot_profile, BoxplotStats, PilotReport, PromptProfile};
