use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::{ExperimentConfig, Method};
use crate::concentration::{concentration, pilot_profile, LayerSet, PilotReport};
use crate::corpus::{
    build_prompt_candidates, mfdg_split, plant_random_prompts, LabeledExample, MfdgSplit, PromptCandidate, Vocabulary,
};
use crate::error::{Error, Result};
use crate::hard::{
    ensemble_distributions, filter_prompt_set, train_matcher, Matcher, PlmMatchEnv, PromptSet, TrainedMatcher,
};
use crate::model::{
    encode_state, forward_prompted, label_distribution, pretrain_backbone, ModelParams, Pretrained, Prompt, Verbalizer,
};
use crate::soft::{init_soft_prompt, optimize_soft_prompt, InitContext, SoftTrainResult};

const SALT_SPLIT: u64 = 0x5350_4C49_5400_0001;
const SALT_PRETRAIN: u64 = 0x5052_4554_5200_0002;
const SALT_SOFT: u64 = 0x534F_4654_0000_0003;
const SALT_POOL: u64 = 0x504F_4F4C_0000_0004;
const SALT_MATCH: u64 = 0x4D41_5443_4800_0005;
const SALT_EVAL: u64 = 0x4556_414C_0000_0006;

/// Seed of one pipeline stage for an experiment seed.
pub fn stage_seed(seed: u64, salt: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ salt
}

/// Corpus, vocabulary and split of one seed.
#[derive(Clone, Debug)]
pub struct SeedData {
    pub vocab: Vocabulary,
    pub verbalizer: Verbalizer,
    pub split: MfdgSplit,
}

impl SeedData {
    pub fn train_union(&self) -> Vec<LabeledExample> {
        self.split
            .train
            .iter()
            .flat_map(|d| d.examples.iter().cloned())
            .collect()
    }

    pub fn in_domain_union(&self) -> Vec<LabeledExample> {
        self.split
            .in_domain_test
            .iter()
            .flat_map(|d| d.examples.iter().cloned())
            .collect()
    }
}

pub fn prepare_data(cfg: &ExperimentConfig, seed: u64) -> Result<SeedData> {
    let vocab = cfg.generator.vocabulary();
    let verbalizer = vocab.verbalizer()?;
    let domains = cfg.generator.generate(seed)?;
    let split = mfdg_split(
        &domains,
        &cfg.split,
        verbalizer.n_labels(),
        stage_seed(seed, SALT_SPLIT),
    )?;
    Ok(SeedData {
        vocab,
        verbalizer,
        split,
    })
}

/// Pretrains the backbone on the source examples left over by the split.
pub fn pretrain(cfg: &ExperimentConfig, data: &SeedData, seed: u64) -> Result<Pretrained> {
    let model = cfg.backbone.model_config(&data.vocab);
    let longest = data
        .split
        .unlabeled_pool
        .iter()
        .chain(&data.split.train)
        .chain(std::iter::once(&data.split.test))
        .map(|d| d.max_len())
        .max()
        .unwrap_or(0);
    let needed = longest + 1 + cfg.soft.prompt_len.max(cfg.backbone.pretrain.max_prompt_len);
    if needed > model.max_seq {
        return Err(Error::Config(format!(
            "max_seq {} is too short for inputs of {longest} tokens plus prompt and mask",
            model.max_seq
        )));
    }
    pretrain_backbone(
        &model,
        &data.split.unlabeled_pool,
        &data.verbalizer,
        &cfg.backbone.pretrain_config(&data.vocab),
        stage_seed(seed, SALT_PRETRAIN),
    )
}

/// Everything a method needs for one seed.
#[derive(Clone, Debug)]
pub struct SeedContext {
    pub seed: u64,
    pub data: SeedData,
    pub params: ModelParams,
    pub layers: LayerSet,
}

pub fn prepare_seed(cfg: &ExperimentConfig, seed: u64) -> Result<SeedContext> {
    let data = prepare_data(cfg, seed)?;
    let params = pretrain(cfg, &data, seed)?.params;
    Ok(SeedContext {
        seed,
        data,
        params,
        layers: cfg.layer_set()?,
    })
}

/// Accuracy and mean per-layer concentration over an evaluation set.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    pub layer_profile: Vec<f64>,
}

fn layer_concentrations(
    params: &ModelParams,
    prompt: &Prompt,
    input: &[usize],
    verbalizer: &Verbalizer,
) -> Result<(crate::model::LabelDistribution, Vec<f64>)> {
    let (seq, out) = forward_prompted(params, prompt, input)?;
    let dist = label_distribution(&out.mask_logits, verbalizer)?;
    let per_layer = (0..params.config.n_layers)
        .map(|l| Ok(concentration(&out.trace, seq.prompt_span(), seq.mask_pos(), &LayerSet::single(l))?.value()))
        .collect::<Result<Vec<_>>>()?;
    Ok((dist, per_layer))
}

/// Evaluates `examples` where `select` names the prompts used for each input;
/// several prompts are ensembled.
pub fn evaluate<F>(
    params: &ModelParams,
    examples: &[LabeledExample],
    verbalizer: &Verbalizer,
    mut select: F,
) -> Result<Evaluation>
where
    F: FnMut(usize, &LabeledExample) -> Result<Vec<Prompt>>,
{
    if examples.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    let n_layers = params.config.n_layers;
    let mut correct = 0usize;
    let mut profile = vec![0.0; n_layers];
    for (i, ex) in examples.iter().enumerate() {
        let prompts = select(i, ex)?;
        let mut dists = Vec::with_capacity(prompts.len());
        for p in &prompts {
            let (d, per_layer) = layer_concentrations(params, p, &ex.tokens, verbalizer)?;
            for (acc, v) in profile.iter_mut().zip(per_layer) {
                *acc += v / prompts.len() as f64;
            }
            dists.push(d);
        }
        if ensemble_distributions(&dists)?.argmax() == ex.label {
            correct += 1;
        }
    }
    let n = examples.len() as f64;
    profile.iter_mut().for_each(|v| *v /= n);
    Ok(Evaluation {
        accuracy: correct as f64 / n,
        layer_profile: profile,
    })
}

pub fn train_soft(ctx: &SeedContext, cfg: &ExperimentConfig, method: Method) -> Result<SoftTrainResult> {
    let weights = method
        .soft_weights(&cfg.soft.weights)
        .ok_or_else(|| Error::InvalidArgument(format!("`{method}` is not a soft-prompt method")))?;
    let train = ctx.data.train_union();
    let task_tokens = ctx.data.vocab.template_ids();
    let vocab_tokens: Vec<usize> = ctx.data.vocab.content_ids().collect();
    let init_ctx = InitContext {
        verbalizer: &ctx.data.verbalizer,
        task_tokens: &task_tokens,
        vocab_tokens: &vocab_tokens,
        train: &train,
    };
    let soft_seed = stage_seed(ctx.seed, SALT_SOFT);
    let init = init_soft_prompt(cfg.soft.init, cfg.soft.prompt_len, &ctx.params, &init_ctx, soft_seed)?;
    let train_cfg = crate::soft::TrainConfig {
        seed: soft_seed,
        layers: Some(ctx.layers.clone()),
        ..cfg.soft.train.clone()
    };
    optimize_soft_prompt(&ctx.params, &init, &train, &ctx.data.verbalizer, &weights, &train_cfg)
}

/// Per-source candidate pools, including the planted random-token prompts.
pub fn candidate_pools(ctx: &SeedContext, cfg: &ExperimentConfig) -> Result<Vec<Vec<PromptCandidate>>> {
    let pool_seed = stage_seed(ctx.seed, SALT_POOL);
    let mut pools = build_prompt_candidates(&ctx.data.split.train, &ctx.data.vocab, &cfg.hard.pool, pool_seed)?;
    plant_random_prompts(&mut pools, &ctx.data.vocab, &cfg.hard.pool, pool_seed);
    Ok(pools)
}

/// One prompt set per source: the GCS top-K on that source's training data,
/// or the whole pool.
pub fn prompt_sets(
    ctx: &SeedContext,
    cfg: &ExperimentConfig,
    pools: &[Vec<PromptCandidate>],
    filter: bool,
) -> Result<Vec<PromptSet>> {
    pools
        .iter()
        .zip(&ctx.data.split.train)
        .map(|(pool, train)| {
            if filter {
                filter_prompt_set(
                    &ctx.params,
                    pool,
                    &train.examples,
                    &cfg.hard.gcs,
                    &ctx.data.verbalizer,
                    &ctx.layers,
                    cfg.hard.k,
                )
            } else {
                PromptSet::new(train.domain.clone(), pool.clone())
            }
        })
        .collect()
}

pub fn train_matching(ctx: &SeedContext, cfg: &ExperimentConfig, sets: &[PromptSet]) -> Result<TrainedMatcher> {
    if sets.len() != ctx.data.split.train.len() {
        return Err(Error::InvalidArgument(format!(
            "{} prompt sets for {} source domains",
            sets.len(),
            ctx.data.split.train.len()
        )));
    }
    let env = PlmMatchEnv::new(
        &ctx.params,
        sets,
        &ctx.data.train_union(),
        &cfg.hard.gcs,
        &ctx.data.verbalizer,
        &ctx.layers,
    )?;
    train_matcher(&env, &cfg.hard.mappo, stage_seed(ctx.seed, SALT_MATCH))
}

/// How each agent picks its prompt at inference.
pub enum Matching<'a> {
    Random,
    Learned(&'a Matcher),
}

/// Evaluates a set of agents on `examples`; also returns how often each
/// prompt of each agent was chosen.
pub fn evaluate_matched(
    ctx: &SeedContext,
    sets: &[PromptSet],
    matching: &Matching,
    examples: &[LabeledExample],
    salt: u64,
) -> Result<(Evaluation, Vec<Vec<usize>>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(stage_seed(ctx.seed, SALT_EVAL ^ salt));
    let mut counts: Vec<Vec<usize>> = sets.iter().map(|s| vec![0; s.len()]).collect();
    let eval = evaluate(&ctx.params, examples, &ctx.data.verbalizer, |_, ex| {
        let actions: Vec<usize> = match matching {
            Matching::Random => sets.iter().map(|s| rng.gen_range(0..s.len())).collect(),
            Matching::Learned(m) => {
                let state = encode_state(&ctx.params, &ex.tokens)?;
                (0..sets.len()).map(|n| m.greedy(n, &state)).collect::<Result<_>>()?
            }
        };
        for (n, &a) in actions.iter().enumerate() {
            counts[n][a] += 1;
        }
        Ok(actions.iter().zip(sets).map(|(&a, s)| s.prompt(a)).collect())
    })?;
    Ok((eval, counts))
}

/// Result of one method on one seed.
#[derive(Clone, Debug, PartialEq)]
pub struct MethodOutcome {
    pub in_domain: Evaluation,
    pub target: Evaluation,
    /// Representative prompt for concentration profiling: the trained soft
    /// prompt, or the first agent's most frequent target-domain pick.
    pub profile_prompt: Prompt,
}

pub fn run_method(
    ctx: &SeedContext,
    cfg: &ExperimentConfig,
    method: Method,
    pools: &[Vec<PromptCandidate>],
) -> Result<MethodOutcome> {
    let in_domain_set = ctx.data.in_domain_union();
    let target_set = &ctx.data.split.test.examples;
    if method.is_soft() {
        let trained = train_soft(ctx, cfg, method)?;
        let prompt = trained.prompt.as_prompt();
        let eval = |examples: &[LabeledExample]| {
            evaluate(&ctx.params, examples, &ctx.data.verbalizer, |_, _| {
                Ok(vec![prompt.clone()])
            })
        };
        return Ok(MethodOutcome {
            in_domain: eval(&in_domain_set)?,
            target: eval(target_set)?,
            profile_prompt: prompt.clone(),
        });
    }
    let sets = prompt_sets(ctx, cfg, pools, method.filters())?;
    let trained = if method.learns_matching() {
        Some(train_matching(ctx, cfg, &sets)?)
    } else {
        None
    };
    let matching = match &trained {
        Some(t) => Matching::Learned(&t.matcher),
        None => Matching::Random,
    };
    let (in_domain, _) = evaluate_matched(ctx, &sets, &matching, &in_domain_set, 1)?;
    let (target, counts) = evaluate_matched(ctx, &sets, &matching, target_set, 2)?;
    let favourite = counts[0]
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
        .map(|(i, _)| i)
        .unwrap_or(0);
    Ok(MethodOutcome {
        in_domain,
        target,
        profile_prompt: sets[0].prompt(favourite),
    })
}

/// All configured methods on one seed, plus the pilot profile of their
/// representative prompts when requested.
pub fn run_seed(
    cfg: &ExperimentConfig,
    seed: u64,
    with_pilot: bool,
) -> Result<(BTreeMap<Method, MethodOutcome>, Option<PilotReport>)> {
    log::info!("seed {seed}: corpus and backbone");
    let ctx = prepare_seed(cfg, seed)?;
    let pools = if cfg.methods.iter().any(|m| !m.is_soft()) {
        candidate_pools(&ctx, cfg)?
    } else {
        Vec::new()
    };
    let mut outcomes = BTreeMap::new();
    for &method in &cfg.methods {
        log::info!("seed {seed}: {method}");
        outcomes.insert(method, run_method(&ctx, cfg, method, &pools)?);
    }
    let pilot = if with_pilot && cfg.pilot.enabled {
        let inputs: Vec<LabeledExample> = ctx
            .data
            .split
            .test
            .examples
            .iter()
            .take(cfg.pilot.inputs)
            .cloned()
            .collect();
        let prompts: Vec<(String, Prompt)> = outcomes
            .iter()
            .map(|(m, o)| (m.name().to_string(), o.profile_prompt.clone()))
            .collect();
        Some(pilot_profile(&ctx.params, &prompts, &inputs, cfg.pilot.top_k)?)
    } else {
        None
    };
    Ok((outcomes, pilot))
}
