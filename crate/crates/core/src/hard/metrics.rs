use serde::{Deserialize, Serialize};

use crate::concentration::{token_concentration, LayerSet};
use crate::corpus::LabeledExample;
use crate::error::{Error, Result};
use crate::model::{forward_prompted, label_distribution, LabelDistribution, ModelParams, Prompt, Verbalizer};
use crate::numerics::{log_sum_exp, softmax_slice};

/// Weights of the Global Concentration Score.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GcsWeights {
    pub acc: f64,
    pub cs: f64,
    pub cf: f64,
}

impl Default for GcsWeights {
    /// The manual-prompt preset `(10, 7, 7.5)`.
    fn default() -> Self {
        Self {
            acc: 10.0,
            cs: 7.0,
            cf: 7.5,
        }
    }
}

impl GcsWeights {
    pub fn validate(&self) -> Result<()> {
        let ok = |w: f64| w.is_finite() && w >= 0.0;
        if !(ok(self.acc) && ok(self.cs) && ok(self.cf)) {
            return Err(Error::Config("GCS weights must be finite and non-negative".into()));
        }
        if self.acc == 0.0 && self.cs == 0.0 && self.cf == 0.0 {
            return Err(Error::Config("at least one GCS weight must be positive".into()));
        }
        Ok(())
    }

    /// `α_acc·M_acc + α_cs·Strength − α_cf·M_cf`; the fluctuation term is a
    /// penalty so that higher is better.
    pub fn combine(&self, m_acc: f64, strength: f64, m_cf: f64) -> f64 {
        self.acc * m_acc + self.cs * strength - self.cf * m_cf
    }

    /// Per-input reward: `α_acc·margin + α_cs·concentration`.
    pub fn reward(&self, margin: f64, concentration: f64) -> f64 {
        self.acc * margin + self.cs * concentration
    }
}

/// `p(y_true) − max_{y ≠ y_true} p(y)`.
pub fn margin(dist: &LabelDistribution, label: usize) -> f64 {
    let p = dist.probs();
    let best_wrong = p
        .iter()
        .enumerate()
        .filter(|&(y, _)| y != label)
        .map(|(_, &v)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    p[label] - best_wrong
}

/// `Σ_y Σ_{i ∈ D(y)} KL(softmax(C_i) ‖ softmax(C̄_y))` with `C̄_y` the
/// per-label mean feature. Labels without examples contribute 0.
pub fn metric_cf_from_features(features: &[(Vec<f64>, usize)]) -> Result<f64> {
    let Some((first, _)) = features.first() else {
        return Ok(0.0);
    };
    let len = first.len();
    if features
        .iter()
        .any(|(f, _)| f.len() != len || f.iter().any(|v| !v.is_finite()))
    {
        return Err(Error::InvalidArgument(
            "features must be finite and of equal length".into(),
        ));
    }
    let n_labels = features.iter().map(|(_, y)| y + 1).max().unwrap_or(0);
    let mut total = 0.0;
    for y in 0..n_labels {
        let members: Vec<&Vec<f64>> = features.iter().filter(|(_, l)| *l == y).map(|(f, _)| f).collect();
        if members.is_empty() {
            continue;
        }
        let mut avg = vec![0.0; len];
        for f in &members {
            for (a, v) in avg.iter_mut().zip(f.iter()) {
                *a += v;
            }
        }
        avg.iter_mut().for_each(|a| *a /= members.len() as f64);
        for f in members {
            total += softmax_kl(f, &avg);
        }
    }
    Ok(total.max(0.0))
}

/// `KL(softmax(p_logits) ‖ softmax(q_logits))`, evaluated in log space.
pub fn softmax_kl(p_logits: &[f64], q_logits: &[f64]) -> f64 {
    let p = softmax_slice(p_logits);
    let lp = log_sum_exp(p_logits);
    let lq = log_sum_exp(q_logits);
    p.iter()
        .zip(p_logits.iter().zip(q_logits))
        .map(|(&pi, (&a, &b))| pi * ((a - lp) - (b - lq)))
        .sum()
}

/// Per-input quantities behind every hard-prompt score.
#[derive(Clone, Debug, PartialEq)]
pub struct InputScore {
    pub distribution: LabelDistribution,
    pub margin: f64,
    pub concentration: f64,
    pub feature: Vec<f64>,
}

pub fn score_input(
    params: &ModelParams,
    prompt: &Prompt,
    example: &LabeledExample,
    verbalizer: &Verbalizer,
    layers: &LayerSet,
) -> Result<InputScore> {
    let (seq, out) = forward_prompted(params, prompt, &example.tokens)?;
    let distribution = label_distribution(&out.mask_logits, verbalizer)?;
    let feature = token_concentration(&out.trace, seq.prompt_span(), seq.mask_pos(), layers)?;
    Ok(InputScore {
        margin: margin(&distribution, example.label),
        concentration: feature.iter().sum(),
        distribution,
        feature,
    })
}

/// The three GCS sub-metrics of one prompt on one dataset.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptScore {
    pub m_acc: f64,
    pub strength: f64,
    pub m_cf: f64,
}

impl PromptScore {
    pub fn gcs(&self, weights: &GcsWeights) -> f64 {
        weights.combine(self.m_acc, self.strength, self.m_cf)
    }
}

/// One forward pass per input yields margin, concentration and features.
pub fn score_prompt(
    params: &ModelParams,
    prompt: &Prompt,
    dataset: &[LabeledExample],
    verbalizer: &Verbalizer,
    layers: &LayerSet,
) -> Result<PromptScore> {
    if dataset.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    let mut m_acc = 0.0;
    let mut conc = 0.0;
    let mut feats = Vec::with_capacity(dataset.len());
    for ex in dataset {
        let s = score_input(params, prompt, ex, verbalizer, layers)?;
        m_acc += s.margin;
        conc += s.concentration;
        feats.push((s.feature, ex.label));
    }
    Ok(PromptScore {
        m_acc,
        strength: conc / dataset.len() as f64,
        m_cf: metric_cf_from_features(&feats)?,
    })
}

/// `Σ_i [p(y_true | z ⊕ x_i) − p(y_false | z ⊕ x_i)]`, with `y_false` the most
/// probable wrong label.
pub fn metric_acc(
    params: &ModelParams,
    prompt: &Prompt,
    dataset: &[LabeledExample],
    verbalizer: &Verbalizer,
) -> Result<f64> {
    let mut total = 0.0;
    for ex in dataset {
        let (_, out) = forward_prompted(params, prompt, &ex.tokens)?;
        total += margin(&label_distribution(&out.mask_logits, verbalizer)?, ex.label);
    }
    Ok(total)
}

/// KL spread of per-token concentration features around their label means.
pub fn metric_cf(params: &ModelParams, prompt: &Prompt, dataset: &[LabeledExample], layers: &LayerSet) -> Result<f64> {
    let feats = dataset
        .iter()
        .map(|ex| {
            let (seq, out) = forward_prompted(params, prompt, &ex.tokens)?;
            Ok((
                token_concentration(&out.trace, seq.prompt_span(), seq.mask_pos(), layers)?,
                ex.label,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    metric_cf_from_features(&feats)
}

/// Global Concentration Score of a prompt; higher is better.
pub fn gcs(
    params: &ModelParams,
    prompt: &Prompt,
    dataset: &[LabeledExample],
    weights: &GcsWeights,
    verbalizer: &Verbalizer,
    layers: &LayerSet,
) -> Result<f64> {
    weights.validate()?;
    Ok(score_prompt(params, prompt, dataset, verbalizer, layers)?.gcs(weights))
}

/// Per-input reward `α_acc·M_acc(z, {x}) + α_cs·Strength(z, {x})`.
pub fn reward(
    params: &ModelParams,
    prompt: &Prompt,
    example: &LabeledExample,
    weights: &GcsWeights,
    verbalizer: &Verbalizer,
    layers: &LayerSet,
) -> Result<f64> {
    let s = score_input(params, prompt, example, verbalizer, layers)?;
    Ok(weights.reward(s.margin, s.concentration))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn margin_cases() {
        let d = LabelDistribution::new(vec![0.8, 0.2]).unwrap();
        assert!((margin(&d, 0) - 0.6).abs() < 1e-12);
        let u = LabelDistribution::new(vec![0.5, 0.5]).unwrap();
        assert_eq!(margin(&u, 1), 0.0);
        let three = LabelDistribution::new(vec![0.2, 0.5, 0.3]).unwrap();
        assert!((margin(&three, 2) - (0.3 - 0.5)).abs() < 1e-12);
    }

    #[test]
    fn kl_hand_value() {
        let p = std::f64::consts::E / (std::f64::consts::E + 1.0);
        let oracle = p * (p / (1.0 - p)).ln() + (1.0 - p) * ((1.0 - p) / p).ln();
        let kl = softmax_kl(&[1.0, 0.0], &[0.0, 1.0]);
        assert!((kl - 0.4621).abs() < 1e-3);
        assert!((kl - oracle).abs() < 1e-12);
        assert!((kl - (2.0 * p - 1.0)).abs() < 1e-12);
    }

    #[test]
    fn equal_features_give_zero() {
        let f = vec![(vec![0.2, 0.3], 0), (vec![0.2, 0.3], 0), (vec![0.5, 0.1], 1)];
        assert_eq!(metric_cf_from_features(&f).unwrap(), 0.0);
        let g = vec![(vec![0.2, 0.3], 0), (vec![0.4, 0.1], 0)];
        assert!(metric_cf_from_features(&g).unwrap() > 0.0);
    }

    #[test]
    fn gcs_preset_arithmetic() {
        let w = GcsWeights::default();
        assert!((w.combine(0.6, 0.6, 0.4621) - 6.7343).abs() < 1e-3);
        assert!((w.reward(0.6, 0.7) - 10.9).abs() < 1e-12);
    }
}
