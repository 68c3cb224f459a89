use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::ModelConfig;
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

const INIT_STD: f64 = 0.02;
const CHECKPOINT_KIND: &str = "backbone";

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub ln1_g: Arc<Tensor>,
    pub ln1_b: Arc<Tensor>,
    pub wq: Arc<Tensor>,
    pub bq: Arc<Tensor>,
    pub wk: Arc<Tensor>,
    pub bk: Arc<Tensor>,
    pub wv: Arc<Tensor>,
    pub bv: Arc<Tensor>,
    pub wo: Arc<Tensor>,
    pub bo: Arc<Tensor>,
    pub ln2_g: Arc<Tensor>,
    pub ln2_b: Arc<Tensor>,
    pub w1: Arc<Tensor>,
    pub b1: Arc<Tensor>,
    pub w2: Arc<Tensor>,
    pub b2: Arc<Tensor>,
}

impl LayerParams {
    const NAMES: [&'static str; 16] = [
        "ln1_g", "ln1_b", "wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo", "ln2_g", "ln2_b", "w1", "b1", "w2", "b2",
    ];

    fn fields(&self) -> [&Arc<Tensor>; 16] {
        [
            &self.ln1_g,
            &self.ln1_b,
            &self.wq,
            &self.bq,
            &self.wk,
            &self.bk,
            &self.wv,
            &self.bv,
            &self.wo,
            &self.bo,
            &self.ln2_g,
            &self.ln2_b,
            &self.w1,
            &self.b1,
            &self.w2,
            &self.b2,
        ]
    }

    fn fields_mut(&mut self) -> [&mut Arc<Tensor>; 16] {
        [
            &mut self.ln1_g,
            &mut self.ln1_b,
            &mut self.wq,
            &mut self.bq,
            &mut self.wk,
            &mut self.bk,
            &mut self.wv,
            &mut self.bv,
            &mut self.wo,
            &mut self.bo,
            &mut self.ln2_g,
            &mut self.ln2_b,
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
        ]
    }
}

/// Frozen backbone weights θ. Output projection is tied to `tok_emb`.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub seed: u64,
    pub tok_emb: Arc<Tensor>,
    pub pos_emb: Arc<Tensor>,
    pub layers: Vec<LayerParams>,
    pub lnf_g: Arc<Tensor>,
    pub lnf_b: Arc<Tensor>,
    pub out_bias: Arc<Tensor>,
}

fn normal(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Arc<Tensor> {
    Arc::new(Tensor::randn(rows, cols, INIT_STD, rng))
}

fn zeros(cols: usize) -> Arc<Tensor> {
    Arc::new(Tensor::zeros(1, cols))
}

fn ones(cols: usize) -> Arc<Tensor> {
    Arc::new(Tensor::full(1, cols, 1.0))
}

/// Deterministic initialization: weights `N(0, 0.02²)`, layer-norm gains 1,
/// biases 0.
pub fn init_params(config: &ModelConfig, seed: u64) -> Result<ModelParams> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = config.d_model;
    let ff = config.d_ff();
    let tok_emb = normal(config.vocab_size, d, &mut rng);
    let pos_emb = normal(config.max_seq, d, &mut rng);
    let layers = (0..config.n_layers)
        .map(|_| LayerParams {
            ln1_g: ones(d),
            ln1_b: zeros(d),
            wq: normal(d, d, &mut rng),
            bq: zeros(d),
            wk: normal(d, d, &mut rng),
            bk: zeros(d),
            wv: normal(d, d, &mut rng),
            bv: zeros(d),
            wo: normal(d, d, &mut rng),
            bo: zeros(d),
            ln2_g: ones(d),
            ln2_b: zeros(d),
            w1: normal(d, ff, &mut rng),
            b1: zeros(ff),
            w2: normal(ff, d, &mut rng),
            b2: zeros(d),
        })
        .collect();
    Ok(ModelParams {
        config: config.clone(),
        seed,
        tok_emb,
        pos_emb,
        layers,
        lnf_g: ones(d),
        lnf_b: zeros(d),
        out_bias: zeros(config.vocab_size),
    })
}

impl ModelParams {
    /// Every tensor with a stable name, in checkpoint order.
    pub fn named_tensors(&self) -> Vec<(String, &Arc<Tensor>)> {
        let mut out = vec![
            ("tok_emb".to_string(), &self.tok_emb),
            ("pos_emb".to_string(), &self.pos_emb),
        ];
        for (l, layer) in self.layers.iter().enumerate() {
            for (name, t) in LayerParams::NAMES.iter().zip(layer.fields()) {
                out.push((format!("layers.{l}.{name}"), t));
            }
        }
        out.push(("lnf_g".to_string(), &self.lnf_g));
        out.push(("lnf_b".to_string(), &self.lnf_b));
        out.push(("out_bias".to_string(), &self.out_bias));
        out
    }

    /// Mutable handles in the same order as [`Self::named_tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Arc<Tensor>> {
        let mut out = vec![&mut self.tok_emb, &mut self.pos_emb];
        for layer in &mut self.layers {
            out.extend(layer.fields_mut());
        }
        out.push(&mut self.lnf_g);
        out.push(&mut self.lnf_b);
        out.push(&mut self.out_bias);
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.named_tensors().iter().all(|(_, t)| t.is_finite())
    }

    /// Population standard deviation of the token embedding entries.
    pub fn embedding_std(&self) -> f64 {
        let data = self.tok_emb.data();
        let n = data.len() as f64;
        let mean = data.iter().sum::<f64>() / n;
        (data.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt()
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let meta = serde_json::json!({ "config": self.config, "seed": self.seed });
        let mut ck = Checkpoint::new(CHECKPOINT_KIND, meta);
        for (name, t) in self.named_tensors() {
            ck.push(name, (**t).clone());
        }
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.kind != CHECKPOINT_KIND {
            return Err(Error::Checkpoint(format!(
                "expected a backbone checkpoint, found `{}`",
                ck.kind
            )));
        }
        let config: ModelConfig = serde_json::from_value(ck.meta["config"].clone())?;
        let seed = ck.meta["seed"]
            .as_u64()
            .ok_or_else(|| Error::Checkpoint("missing seed".into()))?;
        let mut params = init_params(&config, seed)?;
        let names: Vec<String> = params.named_tensors().into_iter().map(|(n, _)| n).collect();
        for (name, slot) in names.iter().zip(params.tensors_mut()) {
            let t = ck.tensor(name)?;
            if t.shape() != slot.shape() {
                return Err(Error::Checkpoint(format!(
                    "`{name}` has shape {:?}, expected {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = Arc::new(t.clone());
        }
        Ok(params)
    }
}
