use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::corpus::LabeledExample;
use crate::error::{Error, Result};
use crate::model::{forward_prompted, AttentionTrace, ModelParams, Prompt};

/// Sorted, non-empty set of layer indices that concentration averages over.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct LayerSet(Vec<usize>);

impl LayerSet {
    pub fn new(mut layers: Vec<usize>, n_layers: usize) -> Result<Self> {
        layers.sort_unstable();
        layers.dedup();
        if layers.is_empty() {
            return Err(Error::Empty("layer set"));
        }
        if let Some(&bad) = layers.iter().find(|&&l| l >= n_layers) {
            return Err(Error::InvalidArgument(format!(
                "layer {bad} out of range for {n_layers} layers"
            )));
        }
        Ok(Self(layers))
    }

    /// The last `⌈n_layers / 5⌉` layers (at least one).
    pub fn deep(n_layers: usize) -> Self {
        let k = n_layers.div_ceil(5).max(1).min(n_layers.max(1));
        Self((n_layers.saturating_sub(k)..n_layers.max(1)).collect())
    }

    pub fn all(n_layers: usize) -> Self {
        Self((0..n_layers.max(1)).collect())
    }

    pub fn single(layer: usize) -> Self {
        Self(vec![layer])
    }

    pub fn layers(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn check(&self, n_layers: usize) -> Result<()> {
        match self.0.last() {
            Some(&l) if l < n_layers => Ok(()),
            _ => Err(Error::InvalidArgument(format!(
                "layer set {:?} does not fit {n_layers} layers",
                self.0
            ))),
        }
    }
}

impl TryFrom<Vec<usize>> for LayerSet {
    type Error = String;

    fn try_from(layers: Vec<usize>) -> std::result::Result<Self, String> {
        LayerSet::new(layers, usize::MAX).map_err(|e| e.to_string())
    }
}

impl From<LayerSet> for Vec<usize> {
    fn from(s: LayerSet) -> Self {
        s.0
    }
}

/// Attention mass in `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct ConcentrationValue(f64);

impl ConcentrationValue {
    const SLACK: f64 = 1e-9;

    /// Accepts values within rounding slack of `[0, 1]` and clamps them.
    pub fn new(value: f64) -> Result<Self> {
        if !(value >= -Self::SLACK && value <= 1.0 + Self::SLACK) {
            return Err(Error::InvalidArgument(format!("concentration {value} outside [0, 1]")));
        }
        Ok(Self(value.clamp(0.0, 1.0)))
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

/// Per-prompt-token concentration `(c_1, ..., c_L)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConcentrationFeature(Vec<f64>);

impl ConcentrationFeature {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Empty("concentration feature"));
        }
        for &v in &values {
            ConcentrationValue::new(v)?;
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn total(&self) -> f64 {
        self.0.iter().sum()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StrengthStats {
    pub strength: f64,
    pub fluctuation: f64,
    pub per_input: Vec<ConcentrationValue>,
}

impl StrengthStats {
    pub fn from_values(per_input: Vec<ConcentrationValue>) -> Result<Self> {
        if per_input.is_empty() {
            return Err(Error::Empty("dataset"));
        }
        let n = per_input.len() as f64;
        let strength = per_input.iter().map(|c| c.value()).sum::<f64>() / n;
        let var = per_input.iter().map(|c| (c.value() - strength).powi(2)).sum::<f64>() / n;
        Ok(Self {
            strength,
            fluctuation: var.sqrt(),
            per_input,
        })
    }
}

fn check_query(trace: &AttentionTrace, span: &Range<usize>, query: usize, layers: &LayerSet) -> Result<()> {
    if span.is_empty() {
        return Err(Error::Empty("prompt span"));
    }
    if span.contains(&query) {
        return Err(Error::InvalidArgument(format!(
            "query {query} lies inside the prompt span {span:?}"
        )));
    }
    let n = trace.seq_len();
    if span.end > n || query >= n {
        return Err(Error::InvalidArgument(format!(
            "span {span:?} / query {query} out of range for sequence length {n}"
        )));
    }
    layers.check(trace.n_layers())
}

/// Head-and-layer-averaged attention from `query` to each position of
/// `span`.
pub fn token_concentration(
    trace: &AttentionTrace,
    span: Range<usize>,
    query: usize,
    layers: &LayerSet,
) -> Result<Vec<f64>> {
    check_query(trace, &span, query, layers)?;
    let n_heads = trace.n_heads();
    let denom = (layers.len() * n_heads) as f64;
    let mut out = vec![0.0; span.len()];
    for &l in layers.layers() {
        for h in 0..n_heads {
            let row = trace.head(l, h).row(query);
            for (o, &w) in out.iter_mut().zip(&row[span.clone()]) {
                *o += w;
            }
        }
    }
    out.iter_mut().for_each(|v| *v /= denom);
    Ok(out)
}

/// Lookback attention from `query` to `span`: per layer, the head mean of the
/// row mass on the span, then the mean over `layers`.
pub fn concentration(
    trace: &AttentionTrace,
    span: Range<usize>,
    query: usize,
    layers: &LayerSet,
) -> Result<ConcentrationValue> {
    check_query(trace, &span, query, layers)?;
    let n_heads = trace.n_heads();
    let mut total = 0.0;
    for &l in layers.layers() {
        let mut layer_sum = 0.0;
        for h in 0..n_heads {
            layer_sum += trace.head(l, h).row(query)[span.clone()].iter().sum::<f64>();
        }
        total += layer_sum / n_heads as f64;
    }
    ConcentrationValue::new(total / layers.len() as f64)
}

fn input_concentration(
    params: &ModelParams,
    prompt: &Prompt,
    input: &[usize],
    layers: &LayerSet,
) -> Result<ConcentrationValue> {
    let (seq, out) = forward_prompted(params, prompt, input)?;
    concentration(&out.trace, seq.prompt_span(), seq.mask_pos(), layers)
}

/// Concentration of `prompt ⊕ x` for every input, with mean and population
/// standard deviation.
pub fn strength_stats(
    params: &ModelParams,
    prompt: &Prompt,
    dataset: &[LabeledExample],
    layers: &LayerSet,
) -> Result<StrengthStats> {
    if dataset.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    let per_input = dataset
        .iter()
        .map(|ex| input_concentration(params, prompt, &ex.tokens, layers))
        .collect::<Result<Vec<_>>>()?;
    StrengthStats::from_values(per_input)
}

/// Mean concentration over the dataset.
pub fn strength(params: &ModelParams, prompt: &Prompt, dataset: &[LabeledExample], layers: &LayerSet) -> Result<f64> {
    Ok(strength_stats(params, prompt, dataset, layers)?.strength)
}

/// Population standard deviation of concentration over the dataset.
pub fn fluctuation(
    params: &ModelParams,
    prompt: &Prompt,
    dataset: &[LabeledExample],
    layers: &LayerSet,
) -> Result<f64> {
    Ok(strength_stats(params, prompt, dataset, layers)?.fluctuation)
}

/// Per-prompt-token concentration of `prompt ⊕ input`.
pub fn features(
    params: &ModelParams,
    prompt: &Prompt,
    input: &[usize],
    layers: &LayerSet,
) -> Result<ConcentrationFeature> {
    if prompt.is_empty() {
        return Err(Error::Empty("prompt"));
    }
    let (seq, out) = forward_prompted(params, prompt, input)?;
    ConcentrationFeature::new(token_concentration(
        &out.trace,
        seq.prompt_span(),
        seq.mask_pos(),
        layers,
    )?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params, ModelConfig};
    use crate::numerics::Tensor;
    use proptest::prelude::*;

    fn one_row_trace(rows: &[Vec<f64>]) -> AttentionTrace {
        let n = rows[0].len();
        let heads = rows
            .iter()
            .map(|r| {
                let mut data = vec![0.0; n * n];
                for i in 0..n {
                    data[i * n..(i + 1) * n].copy_from_slice(r);
                }
                Tensor::matrix(n, n, data)
            })
            .collect();
        AttentionTrace::new(vec![heads]).unwrap()
    }

    #[test]
    fn direct_row_sum() {
        let t = one_row_trace(&[vec![0.3, 0.4, 0.2, 0.1]]);
        let c = concentration(&t, 0..2, 3, &LayerSet::single(0)).unwrap();
        assert!((c.value() - 0.7).abs() < 1e-12);
    }

    #[test]
    fn full_span_without_self_attention_is_one() {
        let t = one_row_trace(&[vec![0.25, 0.5, 0.25, 0.0]]);
        let c = concentration(&t, 0..3, 3, &LayerSet::single(0)).unwrap();
        assert!((c.value() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn heads_are_averaged() {
        let t = one_row_trace(&[vec![0.3, 0.3, 0.4], vec![0.5, 0.3, 0.2]]);
        let c = concentration(&t, 0..2, 2, &LayerSet::single(0)).unwrap();
        assert!((c.value() - 0.7).abs() < 1e-12);
    }

    #[test]
    fn uniform_row_features() {
        let t = one_row_trace(&[vec![0.25; 4]]);
        let f = token_concentration(&t, 0..2, 3, &LayerSet::single(0)).unwrap();
        assert_eq!(f, vec![0.25, 0.25]);
    }

    #[test]
    fn invalid_spans_error() {
        let t = one_row_trace(&[vec![0.25; 4]]);
        let l = LayerSet::single(0);
        assert!(concentration(&t, 1..1, 3, &l).is_err());
        assert!(concentration(&t, 0..3, 2, &l).is_err());
        assert!(concentration(&t, 0..2, 3, &LayerSet::single(1)).is_err());
    }

    #[test]
    fn stats_arithmetic() {
        let vals = |xs: &[f64]| xs.iter().map(|&x| ConcentrationValue::new(x).unwrap()).collect();
        let s = StrengthStats::from_values(vals(&[0.7, 0.5])).unwrap();
        assert!((s.strength - 0.6).abs() < 1e-12);
        assert!((s.fluctuation - 0.1).abs() < 1e-12);
        let single = StrengthStats::from_values(vals(&[0.7])).unwrap();
        assert_eq!(single.fluctuation, 0.0);
        assert!(StrengthStats::from_values(Vec::new()).is_err());
    }

    #[test]
    fn deep_layer_set() {
        assert_eq!(LayerSet::deep(4).layers(), &[3]);
        assert_eq!(LayerSet::deep(24).layers(), &[19, 20, 21, 22, 23]);
        assert_eq!(LayerSet::deep(6).layers(), &[4, 5]);
        assert_eq!(LayerSet::deep(1).layers(), &[0]);
        assert!(LayerSet::new(vec![], 3).is_err());
        assert!(LayerSet::new(vec![3], 3).is_err());
    }

    fn tiny_model(seed: u64) -> ModelParams {
        let cfg = ModelConfig {
            d_model: 16,
            n_layers: 2,
            n_heads: 2,
            max_seq: 24,
            ..ModelConfig::new(20, 1, 0)
        };
        init_params(&cfg, seed).unwrap()
    }

    fn examples(inputs: &[Vec<usize>]) -> Vec<LabeledExample> {
        inputs
            .iter()
            .map(|t| LabeledExample {
                tokens: t.clone(),
                label: 0,
                domain: "d".into(),
            })
            .collect()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn bounded_additive_and_summing(
            seed in 0u64..1000,
            prompt in prop::collection::vec(2usize..20, 2..6),
            input in prop::collection::vec(2usize..20, 1..8),
            cut in 1usize..5,
        ) {
            let params = tiny_model(seed);
            let p = Prompt::Tokens(prompt.clone());
            let (seq, out) = forward_prompted(&params, &p, &input).unwrap();
            let layers = LayerSet::all(2);
            let span = seq.prompt_span();
            let whole = concentration(&out.trace, span.clone(), seq.mask_pos(), &layers).unwrap().value();
            prop_assert!((0.0..=1.0).contains(&whole));
            let cut = cut.min(prompt.len() - 1);
            let a = concentration(&out.trace, 0..cut, seq.mask_pos(), &layers).unwrap().value();
            let b = concentration(&out.trace, cut..span.end, seq.mask_pos(), &layers).unwrap().value();
            prop_assert!((a + b - whole).abs() < 1e-12);
            let f = features(&params, &p, &input, &layers).unwrap();
            prop_assert_eq!(f.len(), prompt.len());
            prop_assert!((f.total() - whole).abs() < 1e-12);
        }

        #[test]
        fn stats_ignore_order(seed in 0u64..1000, rot in 0usize..4) {
            let params = tiny_model(seed);
            let p = Prompt::Tokens(vec![3, 4, 5]);
            let mut inputs = examples(&[vec![6, 7], vec![8, 9, 10], vec![11], vec![12, 13, 14, 15]]);
            let layers = LayerSet::deep(2);
            let a = strength_stats(&params, &p, &inputs, &layers).unwrap();
            inputs.rotate_left(rot);
            let b = strength_stats(&params, &p, &inputs, &layers).unwrap();
            prop_assert!((a.strength - b.strength).abs() < 1e-12);
            prop_assert!((a.fluctuation - b.fluctuation).abs() < 1e-12);
            prop_assert!(a.fluctuation >= 0.0 && a.fluctuation <= 0.5);
        }
    }

    #[test]
    fn duplicated_inputs_match_singleton() {
        let params = tiny_model(3);
        let p = Prompt::Tokens(vec![3, 4]);
        let layers = LayerSet::deep(2);
        let one = strength_stats(&params, &p, &examples(&[vec![5, 6, 7]]), &layers).unwrap();
        let many = strength_stats(&params, &p, &examples(&vec![vec![5, 6, 7]; 5]), &layers).unwrap();
        assert!((one.strength - many.strength).abs() < 1e-12);
        assert_eq!(one.fluctuation, 0.0);
        assert!(many.fluctuation < 1e-12);
    }

    #[test]
    fn single_token_feature_is_concentration() {
        let params = tiny_model(8);
        let p = Prompt::Tokens(vec![9]);
        let layers = LayerSet::deep(2);
        let f = features(&params, &p, &[4, 5, 6], &layers).unwrap();
        let s = strength(&params, &p, &examples(&[vec![4, 5, 6]]), &layers).unwrap();
        assert!((f.values()[0] - s).abs() < 1e-12);
    }
}
