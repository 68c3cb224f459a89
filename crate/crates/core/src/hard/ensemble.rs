use super::filter::PromptSet;
use super::mappo::Matcher;
use crate::error::{Error, Result};
use crate::model::{encode_state, predict_prompted, LabelDistribution, ModelParams, Prompt, Verbalizer};
use crate::numerics::softmax_slice;

/// `softmax(Σ_n p_n)` over labels.
pub fn ensemble_distributions(dists: &[LabelDistribution]) -> Result<LabelDistribution> {
    let first = dists.first().ok_or(Error::Empty("prompt list"))?;
    let n_labels = first.probs().len();
    let mut sum = vec![0.0; n_labels];
    for d in dists {
        if d.probs().len() != n_labels {
            return Err(Error::InvalidArgument("label distributions differ in size".into()));
        }
        for (s, p) in sum.iter_mut().zip(d.probs()) {
            *s += p;
        }
    }
    LabelDistribution::new(softmax_slice(&sum))
}

/// Combines the predictions of `input` under each selected prompt.
pub fn ensemble_predict(
    params: &ModelParams,
    input: &[usize],
    prompts: &[Prompt],
    verbalizer: &Verbalizer,
) -> Result<LabelDistribution> {
    let dists = prompts
        .iter()
        .map(|p| predict_prompted(params, p, input, verbalizer))
        .collect::<Result<Vec<_>>>()?;
    ensemble_distributions(&dists)
}

/// Each agent picks its prompt greedily from the input's state; the picks
/// are ensembled.
pub fn matched_predict(
    params: &ModelParams,
    matcher: &Matcher,
    sets: &[PromptSet],
    input: &[usize],
    verbalizer: &Verbalizer,
) -> Result<(Vec<usize>, LabelDistribution)> {
    if sets.len() != matcher.n_agents() {
        return Err(Error::InvalidArgument(format!(
            "{} prompt sets for {} agents",
            sets.len(),
            matcher.n_agents()
        )));
    }
    let state = encode_state(params, input)?;
    let actions = (0..sets.len())
        .map(|n| matcher.greedy(n, &state))
        .collect::<Result<Vec<_>>>()?;
    let prompts: Vec<Prompt> = actions.iter().zip(sets).map(|(&a, s)| s.prompt(a)).collect();
    Ok((actions, ensemble_predict(params, input, &prompts, verbalizer)?))
}
