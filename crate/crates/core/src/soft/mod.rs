//! Soft prompts trained against a frozen backbone with the
//! concentration-reweighting objective
//! `λ_ce·L_ce + λ_cs·L_cs + λ_cf·L_cf`.
//!
//! `L_cs = 1 − Strength` pulls the mask token's attention onto the prompt;
//! `L_cf` is a supervised contrastive loss over per-token concentration
//! features that clusters same-label inputs.

mod loss;
mod prompt;
mod train;

pub use loss::{
    batch_forward, cross_entropy_graph, loss_cf, loss_cf_graph, loss_cr, loss_cs, loss_cs_graph, objective_graph,
    ExampleVars, LossWeights, ObjectiveVars,
};
pub use prompt::{init_soft_prompt, InitContext, InitStrategy, SoftPrompt};
pub use train::{optimize_soft_prompt, EpochLosses, SoftTrainResult, TrainConfig};
