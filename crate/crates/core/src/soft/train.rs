use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::{objective_graph, LossWeights};
use super::prompt::SoftPrompt;
use crate::concentration::LayerSet;
use crate::corpus::LabeledExample;
use crate::error::{Error, Result};
use crate::model::{ModelParams, Prompt, Verbalizer};
use crate::numerics::{AdamW, AdamWConfig, Graph};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Layers feeding concentration; `None` uses [`LayerSet::deep`].
    pub layers: Option<LayerSet>,
    pub weight_decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            epochs: 30,
            batch_size: 32,
            seed: 0,
            layers: None,
            weight_decay: 0.01,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be ≥ 1".into()));
        }
        Ok(())
    }

    pub fn layer_set(&self, n_layers: usize) -> LayerSet {
        self.layers.clone().unwrap_or_else(|| LayerSet::deep(n_layers))
    }
}

/// Batch-averaged loss terms for one epoch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLosses {
    pub epoch: usize,
    pub ce: f64,
    pub cs: f64,
    pub cf: f64,
    pub cr: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SoftTrainResult {
    pub prompt: SoftPrompt,
    pub curve: Vec<EpochLosses>,
}

impl SoftTrainResult {
    /// `epoch,L_ce,L_cs,L_cf,L_cr` rows.
    pub fn curve_csv(&self) -> String {
        let mut out = String::from("epoch,L_ce,L_cs,L_cf,L_cr\n");
        for e in &self.curve {
            writeln!(
                out,
                "{},{:.16e},{:.16e},{:.16e},{:.16e}",
                e.epoch, e.ce, e.cs, e.cf, e.cr
            )
            .expect("string write");
        }
        out
    }
}

/// Trains the prompt rows with AdamW on the combined objective; the backbone
/// stays frozen.
pub fn optimize_soft_prompt(
    params: &ModelParams,
    init: &SoftPrompt,
    train: &[LabeledExample],
    verbalizer: &Verbalizer,
    weights: &LossWeights,
    config: &TrainConfig,
) -> Result<SoftTrainResult> {
    if train.is_empty() {
        return Err(Error::Empty("training set"));
    }
    weights.validate()?;
    config.validate()?;
    if init.width() != params.config.d_model {
        return Err(Error::InvalidArgument(format!(
            "soft prompt width {} differs from d_model {}",
            init.width(),
            params.config.d_model
        )));
    }
    let layers = config.layer_set(params.config.n_layers);
    let placeholder = Prompt::Embeddings(init.embeddings.clone());
    let mut embeddings = init.embeddings.clone();
    let mut opt = AdamW::new(AdamWConfig {
        lr: config.learning_rate,
        weight_decay: config.weight_decay,
        ..AdamWConfig::default()
    });
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x414C_4731);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut curve = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut sums = [0.0; 4];
        let mut n_batches = 0.0;
        for (batch_idx, idx) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<LabeledExample> = idx.iter().map(|&i| train[i].clone()).collect();
            let mut g = Graph::new();
            let soft = g.leaf(embeddings.clone(), true);
            let o = objective_graph(
                &mut g,
                params,
                &placeholder,
                Some(soft),
                &batch,
                weights,
                verbalizer,
                &layers,
            )?;
            let values = [g.scalar(o.ce), g.scalar(o.cs), g.scalar(o.cf), g.scalar(o.total)];
            if !values[3].is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    batch: batch_idx,
                    detail: format!(
                        "L_cr = {} (L_ce {}, L_cs {}, L_cf {})",
                        values[3], values[0], values[1], values[2]
                    ),
                });
            }
            let grad = g.gradient(o.total, &[soft])?.remove(0);
            if !grad.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    batch: batch_idx,
                    detail: "non-finite prompt gradient".into(),
                });
            }
            drop(g);
            opt.step(&mut [&mut embeddings], &[&grad])?;
            if !embeddings.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    batch: batch_idx,
                    detail: "non-finite prompt after update".into(),
                });
            }
            for (s, v) in sums.iter_mut().zip(values) {
                *s += v;
            }
            n_batches += 1.0;
        }
        curve.push(EpochLosses {
            epoch: epoch + 1,
            ce: sums[0] / n_batches,
            cs: sums[1] / n_batches,
            cf: sums[2] / n_batches,
            cr: sums[3] / n_batches,
        });
    }
    Ok(SoftTrainResult {
        prompt: SoftPrompt::new(embeddings, init.init)?,
        curve,
    })
}
