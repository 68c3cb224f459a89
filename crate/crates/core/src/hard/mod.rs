//! Discrete prompt selection: Global Concentration Score filtering of
//! candidate pools, a multi-agent PPO matcher that picks one prompt per
//! source-domain agent and input, and ensemble inference over the picks.

mod ensemble;
mod env;
mod filter;
mod mappo;
mod metrics;
mod nets;

pub use ensemble::{ensemble_distributions, ensemble_predict, matched_predict};
pub use env::{PlantedBandit, PlmMatchEnv};
pub use filter::{filter_prompt_set, rank_candidates, PromptSet, ScoredCandidate};
pub use mappo::{
    mappo_update, selection_trace_csv, train_matcher, MappoConfig, MatchEnv, Matcher, SelectionRecord, TrainedMatcher,
    Transition, UpdateStats,
};
pub use metrics::{
    gcs, margin, metric_acc, metric_cf, metric_cf_from_features, reward, score_input, score_prompt, softmax_kl,
    GcsWeights, InputScore, PromptScore,
};
pub use nets::{hidden_width, policy_select, select_from_logits, AgentPolicy, Mlp, SelectMode, SharedValue};
