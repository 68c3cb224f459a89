use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::concentration::LayerSet;
use crate::corpus::LabeledExample;
use crate::error::{Error, Result};
use crate::model::{forward_graph, label_log_probs, ModelParams, ParamVars, Prompt, Verbalizer};
use crate::numerics::{Graph, Tensor, Var};

/// Weights of the combined objective and the contrastive temperature.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub ce: f64,
    pub cs: f64,
    pub cf: f64,
    pub tau: f64,
}

impl Default for LossWeights {
    /// The prompt-tuning preset `(1, 0.3, 0.3)` with `τ = 0.5`.
    fn default() -> Self {
        Self {
            ce: 1.0,
            cs: 0.3,
            cf: 0.3,
            tau: 0.5,
        }
    }
}

impl LossWeights {
    pub fn cross_entropy_only() -> Self {
        Self {
            cs: 0.0,
            cf: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |w: f64| w.is_finite() && w >= 0.0;
        if !(ok(self.ce) && ok(self.cs) && ok(self.cf)) {
            return Err(Error::Config("loss weights must be finite and non-negative".into()));
        }
        if self.ce == 0.0 && self.cs == 0.0 && self.cf == 0.0 {
            return Err(Error::Config("at least one loss weight must be positive".into()));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config("temperature τ must be positive".into()));
        }
        Ok(())
    }
}

/// Per-example graph handles of a prompted forward pass.
pub struct ExampleVars {
    /// `[1, n_labels]` label log-probabilities.
    pub label_log_probs: Var,
    /// `[1, L]` per-prompt-token concentration.
    pub feature: Var,
    /// Scalar concentration (sum of `feature`).
    pub concentration: Var,
}

/// Records `prompt ⊕ x ⊕ [mask]` for every example. `soft` carries the prompt
/// rows when the prompt is trainable; otherwise `prompt` is used as is.
pub fn batch_forward(
    g: &mut Graph,
    params: &ModelParams,
    prompt: &Prompt,
    soft: Option<Var>,
    batch: &[LabeledExample],
    verbalizer: &Verbalizer,
    layers: &LayerSet,
) -> Result<Vec<ExampleVars>> {
    if batch.is_empty() {
        return Err(Error::Empty("batch"));
    }
    if prompt.is_empty() {
        return Err(Error::Empty("prompt"));
    }
    layers.check(params.config.n_layers)?;
    let pv = ParamVars::frozen(g, params)?;
    let n_heads = params.config.n_heads;
    let denom = (layers.len() * n_heads) as f64;
    let mut out = Vec::with_capacity(batch.len());
    for ex in batch {
        let seq = prompt.compose(&ex.tokens, &params.config);
        let fv = forward_graph(g, &pv, params, &seq, soft)?;
        let lp = label_log_probs(g, fv.logits, verbalizer)?;
        let span = seq.prompt_span();
        let mut rows = Vec::with_capacity(layers.len() * n_heads);
        for &l in layers.layers() {
            for &p in &fv.attention[l] {
                let row = g.slice_rows(p, seq.mask_pos(), 1)?;
                rows.push(g.slice_cols(row, span.start, span.len())?);
            }
        }
        let stacked = g.concat_rows(&rows)?;
        let summed = g.sum_rows(stacked)?;
        let feature = g.scale(summed, 1.0 / denom)?;
        let concentration = g.sum(feature)?;
        out.push(ExampleVars {
            label_log_probs: lp,
            feature,
            concentration,
        });
    }
    Ok(out)
}

/// Mean negative log-likelihood of the gold labels.
pub fn cross_entropy_graph(g: &mut Graph, examples: &[ExampleVars], labels: &[usize]) -> Result<Var> {
    let picked = examples
        .iter()
        .zip(labels)
        .map(|(e, &y)| g.select_cols(e.label_log_probs, &[y]))
        .collect::<Result<Vec<_>>>()?;
    let stacked = g.concat_rows(&picked)?;
    let mean = g.mean(stacked)?;
    g.scale(mean, -1.0)
}

/// `1 − mean concentration` over the batch.
pub fn loss_cs_graph(g: &mut Graph, examples: &[ExampleVars]) -> Result<Var> {
    if examples.is_empty() {
        return Err(Error::Empty("batch"));
    }
    let parts: Vec<Var> = examples.iter().map(|e| e.concentration).collect();
    let stacked = g.concat_rows(&parts)?;
    let mean = g.mean(stacked)?;
    let neg = g.scale(mean, -1.0)?;
    g.add_scalar(neg, 1.0)
}

/// Supervised contrastive loss over `[1, L]` features with cosine similarity
/// at temperature `tau`.
///
/// Each anchor `i` averages `−log softmax_{j≠i}(sim_ij / τ)` over its
/// same-label positives `P(i)` (anchor excluded); anchors without positives
/// contribute 0. The anchor terms are summed.
pub fn loss_cf_graph(g: &mut Graph, features: &[Var], labels: &[usize], tau: f64) -> Result<Var> {
    if features.len() != labels.len() {
        return Err(Error::InvalidArgument("one label per feature required".into()));
    }
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument("temperature must be positive".into()));
    }
    for (i, &f) in features.iter().enumerate() {
        if g.value(f).data().iter().all(|&v| v == 0.0) {
            return Err(Error::ZeroNormFeature(i));
        }
    }
    let b = features.len();
    let mut weights = vec![0.0; b * b];
    let mut any = false;
    for i in 0..b {
        let positives: Vec<usize> = (0..b).filter(|&p| p != i && labels[p] == labels[i]).collect();
        for &p in &positives {
            weights[i * b + p] = 1.0 / positives.len() as f64;
            any = true;
        }
    }
    if !any {
        return Ok(g.constant(Tensor::scalar(0.0)));
    }

    let stacked = g.concat_rows(features)?;
    let sq = g.mul(stacked, stacked)?;
    let norm_sq = g.sum_cols(sq)?;
    let norm = g.sqrt(norm_sq)?;
    let l = g.value(stacked).cols();
    let ones = g.constant(Tensor::full(1, l, 1.0));
    let norm_wide = g.matmul(norm, ones)?;
    let inv = g.log(norm_wide)?;
    let inv = g.scale(inv, -1.0)?;
    let inv = g.exp(inv)?;
    let unit = g.mul(stacked, inv)?;
    let unit_t = g.transpose(unit)?;
    let sim = g.matmul(unit, unit_t)?;
    let logits = g.scale(sim, 1.0 / tau)?;
    let off_diag: Vec<bool> = (0..b * b).map(|k| k / b != k % b).collect();
    let lsm = g.log_softmax(logits, Some(Arc::new(off_diag)))?;
    let w = g.constant(Tensor::matrix(b, b, weights));
    let weighted = g.mul(lsm, w)?;
    let total = g.sum(weighted)?;
    g.scale(total, -1.0)
}

/// Value of the contrastive loss for plain feature vectors.
pub fn loss_cf(features: &[(Vec<f64>, usize)], tau: f64) -> Result<f64> {
    if features.len() < 2 {
        return Err(Error::InvalidArgument(
            "the contrastive loss needs a batch of at least 2".into(),
        ));
    }
    let mut g = Graph::new();
    let vars: Vec<Var> = features
        .iter()
        .map(|(f, _)| g.constant(Tensor::row_vector(f.clone())))
        .collect();
    let labels: Vec<usize> = features.iter().map(|(_, y)| *y).collect();
    let loss = loss_cf_graph(&mut g, &vars, &labels, tau)?;
    Ok(g.scalar(loss))
}

/// Handles of each objective term; terms with zero weight are not part of
/// `total`.
pub struct ObjectiveVars {
    pub total: Var,
    pub ce: Var,
    pub cs: Var,
    pub cf: Var,
}

/// Records `λ_ce·L_ce + λ_cs·L_cs + λ_cf·L_cf` for one batch.
#[allow(clippy::too_many_arguments)]
pub fn objective_graph(
    g: &mut Graph,
    params: &ModelParams,
    prompt: &Prompt,
    soft: Option<Var>,
    batch: &[LabeledExample],
    weights: &LossWeights,
    verbalizer: &Verbalizer,
    layers: &LayerSet,
) -> Result<ObjectiveVars> {
    weights.validate()?;
    let ex = batch_forward(g, params, prompt, soft, batch, verbalizer, layers)?;
    let labels: Vec<usize> = batch.iter().map(|e| e.label).collect();
    let ce = cross_entropy_graph(g, &ex, &labels)?;
    let cs = loss_cs_graph(g, &ex)?;
    let feats: Vec<Var> = ex.iter().map(|e| e.feature).collect();
    let cf = loss_cf_graph(g, &feats, &labels, weights.tau)?;

    let mut total: Option<Var> = None;
    for (w, term) in [(weights.ce, ce), (weights.cs, cs), (weights.cf, cf)] {
        if w == 0.0 {
            continue;
        }
        let scaled = if w == 1.0 { term } else { g.scale(term, w)? };
        total = Some(match total {
            None => scaled,
            Some(t) => g.add(t, scaled)?,
        });
    }
    Ok(ObjectiveVars {
        total: total.expect("validated weights have a positive term"),
        ce,
        cs,
        cf,
    })
}

/// `1 − batch strength` of a soft prompt.
pub fn loss_cs(
    params: &ModelParams,
    prompt: &Prompt,
    batch: &[LabeledExample],
    verbalizer: &Verbalizer,
    layers: &LayerSet,
) -> Result<f64> {
    let mut g = Graph::new();
    let ex = batch_forward(&mut g, params, prompt, None, batch, verbalizer, layers)?;
    let l = loss_cs_graph(&mut g, &ex)?;
    Ok(g.scalar(l))
}

/// Value of the combined objective for a batch.
pub fn loss_cr(
    params: &ModelParams,
    prompt: &Prompt,
    batch: &[LabeledExample],
    weights: &LossWeights,
    verbalizer: &Verbalizer,
    layers: &LayerSet,
) -> Result<f64> {
    let mut g = Graph::new();
    let o = objective_graph(&mut g, params, prompt, None, batch, weights, verbalizer, layers)?;
    Ok(g.scalar(o.total))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cos(a: &[f64], b: &[f64]) -> f64 {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        dot / (na * nb)
    }

    fn scalar_oracle(feats: &[(Vec<f64>, usize)], tau: f64) -> f64 {
        let b = feats.len();
        let mut total = 0.0;
        for i in 0..b {
            let pos: Vec<usize> = (0..b).filter(|&p| p != i && feats[p].1 == feats[i].1).collect();
            if pos.is_empty() {
                continue;
            }
            let denom: f64 = (0..b)
                .filter(|&j| j != i)
                .map(|j| (cos(&feats[i].0, &feats[j].0) / tau).exp())
                .sum();
            let s: f64 = pos
                .iter()
                .map(|&p| ((cos(&feats[i].0, &feats[p].0) / tau).exp() / denom).ln())
                .sum();
            total += -s / pos.len() as f64;
        }
        total
    }

    #[test]
    fn identical_pair_is_zero() {
        let f = vec![(vec![0.2, 0.5], 1), (vec![0.2, 0.5], 1)];
        assert!(loss_cf(&f, 0.5).unwrap().abs() < 1e-12);
    }

    #[test]
    fn no_shared_labels_is_zero() {
        let f = vec![(vec![0.2, 0.5], 0), (vec![0.3, 0.1], 1), (vec![0.9, 0.1], 2)];
        assert_eq!(loss_cf(&f, 0.5).unwrap(), 0.0);
    }

    #[test]
    fn three_example_case_matches_scalar_oracle() {
        let f = vec![(vec![1.0, 0.0], 0), (vec![0.6, 0.8], 0), (vec![0.0, 1.0], 1)];
        for tau in [0.1, 0.5, 2.0] {
            let got = loss_cf(&f, tau).unwrap();
            assert!((got - scalar_oracle(&f, tau)).abs() < 1e-10);
        }
    }

    #[test]
    fn zero_norm_feature_errors() {
        let f = vec![(vec![0.0, 0.0], 0), (vec![0.3, 0.1], 0)];
        assert!(matches!(loss_cf(&f, 0.5), Err(Error::ZeroNormFeature(0))));
    }

    #[test]
    fn rotating_positives_together_decreases_loss() {
        let odd = (vec![0.0, 0.0, 1.0], 1);
        let mut last = f64::INFINITY;
        for step in 0..5 {
            let angle = std::f64::consts::FRAC_PI_2 * (1.0 - step as f64 / 4.0);
            let f = vec![
                (vec![1.0, 0.0, 0.3], 0),
                (vec![angle.cos(), angle.sin(), 0.3], 0),
                odd.clone(),
            ];
            let l = loss_cf(&f, 0.5).unwrap();
            assert!(l < last, "step {step}: {l} !< {last}");
            last = l;
        }
    }

    #[test]
    fn weights_validation() {
        assert!(LossWeights::default().validate().is_ok());
        let zero = LossWeights {
            ce: 0.0,
            cs: 0.0,
            cf: 0.0,
            tau: 0.5,
        };
        assert!(zero.validate().is_err());
        let bad_tau = LossWeights {
            tau: 0.0,
            ..LossWeights::default()
        };
        assert!(bad_tau.validate().is_err());
    }
}
