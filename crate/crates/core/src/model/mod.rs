//! Masked-token transformer encoder with full attention capture.
//!
//! Sequences are laid out as `[prompt] ⊕ [input] ⊕ [mask]`; the mask token's
//! attention row is the query for concentration measurements. The encoder is
//! pre-LN with learned absolute positions, GELU feed-forward blocks, and an
//! output projection tied to the token embeddings.

mod config;
mod forward;
mod params;
mod pretrain;
mod types;

pub use config::ModelConfig;
pub use forward::{
    encode_state, forward_graph, forward_prompted, forward_with_attention, label_distribution, label_log_probs,
    predict_label, predict_prompted, ForwardOutput, ForwardVars, ParamVars,
};
pub use params::{init_params, LayerParams, ModelParams};
pub use pretrain::{pretrain_backbone, PretrainConfig, Pretrained};
pub use types::{AttentionTrace, LabelDistribution, Prompt, TokenSequence, Verbalizer};
