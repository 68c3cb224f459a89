use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::forward::{forward_graph, ParamVars};
use super::params::{init_params, ModelParams};
use super::types::{TokenSequence, Verbalizer};
use crate::corpus::DomainDataset;
use crate::error::{Error, Result};
use crate::numerics::{clip_global_norm, AdamW, AdamWConfig, Graph, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    /// Each example gets a random prompt of `0..=max_prompt_len` tokens
    /// drawn from `prompt_tokens`.
    pub max_prompt_len: usize,
    pub prompt_tokens: Vec<usize>,
    /// Steps of linear learning-rate warmup.
    pub warmup_steps: usize,
    /// Global gradient-norm cap; `None` disables clipping.
    pub grad_clip: Option<f64>,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 12,
            batch_size: 16,
            optimizer: AdamWConfig::with_lr(2e-3),
            max_prompt_len: 4,
            prompt_tokens: Vec::new(),
            warmup_steps: 100,
            grad_clip: Some(1.0),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Pretrained {
    pub params: ModelParams,
    /// Mean masked-label cross-entropy per epoch.
    pub loss_curve: Vec<f64>,
}

/// Trains θ by predicting the verbalizer token at the mask for source-domain
/// examples.
pub fn pretrain_backbone(
    config: &ModelConfig,
    corpus: &[DomainDataset],
    verbalizer: &Verbalizer,
    pretrain: &PretrainConfig,
    seed: u64,
) -> Result<Pretrained> {
    let examples: Vec<_> = corpus.iter().flat_map(|d| d.examples.iter()).collect();
    if examples.is_empty() {
        return Err(Error::Empty("pretraining corpus"));
    }
    if pretrain.batch_size == 0 {
        return Err(Error::Config("pretraining batch size must be ≥ 1".into()));
    }
    let mut params = init_params(config, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ 0x5052_4554);
    let mut opt = AdamW::new(pretrain.optimizer);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut loss_curve = Vec::with_capacity(pretrain.epochs);

    for epoch in 0..pretrain.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for (batch_idx, batch) in order.chunks(pretrain.batch_size).enumerate() {
            let seqs: Vec<(TokenSequence, usize)> = batch
                .iter()
                .map(|&i| {
                    let ex = examples[i];
                    let len = if pretrain.prompt_tokens.is_empty() {
                        0
                    } else {
                        rng.gen_range(0..=pretrain.max_prompt_len)
                    };
                    let prompt: Vec<usize> = (0..len)
                        .map(|_| *pretrain.prompt_tokens.choose(&mut rng).expect("non-empty"))
                        .collect();
                    (
                        TokenSequence::compose(&prompt, &ex.tokens, config.mask_token_id),
                        ex.label,
                    )
                })
                .collect();

            let mut g = Graph::new();
            let pv = ParamVars::trainable(&mut g, &params)?;
            let mut terms = Vec::with_capacity(seqs.len());
            for (seq, label) in &seqs {
                let fv = forward_graph(&mut g, &pv, &params, seq, None)?;
                let lsm = g.log_softmax(fv.logits, None)?;
                terms.push(g.select_cols(lsm, &[verbalizer.token(*label)])?);
            }
            let stacked = g.concat_rows(&terms)?;
            let total = g.sum(stacked)?;
            let loss = g.scale(total, -1.0 / seqs.len() as f64)?;
            let value = g.scalar(loss);
            if !value.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    batch: batch_idx,
                    detail: format!("pretraining loss is {value}"),
                });
            }
            epoch_loss += value * seqs.len() as f64;
            let mut grads = g.gradient(loss, pv.leaves())?;
            drop(g);
            if let Some(max) = pretrain.grad_clip {
                clip_global_norm(&mut grads, max);
            }
            let step = opt.steps_taken() as usize + 1;
            if step <= pretrain.warmup_steps {
                opt.set_lr(pretrain.optimizer.lr * step as f64 / pretrain.warmup_steps as f64);
            } else {
                opt.set_lr(pretrain.optimizer.lr);
            }
            apply_step(&mut opt, &mut params, &grads)?;
        }
        loss_curve.push(epoch_loss / examples.len() as f64);
    }
    Ok(Pretrained { params, loss_curve })
}

fn apply_step(opt: &mut AdamW, params: &mut ModelParams, grads: &[Tensor]) -> Result<()> {
    let mut slots: Vec<&mut Tensor> = params.tensors_mut().into_iter().map(std::sync::Arc::make_mut).collect();
    let grad_refs: Vec<&Tensor> = grads.iter().collect();
    opt.step(&mut slots, &grad_refs)
}
