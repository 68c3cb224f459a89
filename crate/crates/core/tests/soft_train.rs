mod common;

use concentra::checkpoint::Checkpoint;
use concentra::corpus::LabeledExample;
use concentra::model::{predict_prompted, ModelParams, Prompt, Verbalizer};
use concentra::soft::{
    init_soft_prompt, optimize_soft_prompt, InitContext, InitStrategy, LossWeights, SoftPrompt, TrainConfig,
};
use concentra::Error;

fn accuracy(params: &ModelParams, prompt: &Prompt, data: &[LabeledExample], verb: &Verbalizer) -> f64 {
    let hits = data
        .iter()
        .filter(|e| predict_prompted(params, prompt, &e.tokens, verb).unwrap().argmax() == e.label)
        .count();
    hits as f64 / data.len() as f64
}

fn setup() -> (common::Fixture, Vec<LabeledExample>) {
    let f = common::fixture(4, 2);
    let train: Vec<LabeledExample> = f.split.train.iter().flat_map(|d| d.examples.clone()).collect();
    (f, train)
}

fn init(f: &common::Fixture, train: &[LabeledExample], strategy: InitStrategy) -> SoftPrompt {
    let task = f.vocab.template_ids();
    let content: Vec<usize> = f.vocab.content_ids().collect();
    let ctx = InitContext {
        verbalizer: &f.verbalizer,
        task_tokens: &task,
        vocab_tokens: &content,
        train,
    };
    init_soft_prompt(strategy, 4, &f.params, &ctx, 11).unwrap()
}

#[test]
fn training_lowers_the_objective_and_keeps_the_backbone() {
    let (f, train) = setup();
    let before = f.params.clone();
    let start = init(&f, &train, InitStrategy::Random);
    let cfg = TrainConfig {
        epochs: 8,
        batch_size: 16,
        ..TrainConfig::default()
    };
    let r = optimize_soft_prompt(&f.params, &start, &train, &f.verbalizer, &LossWeights::default(), &cfg).unwrap();
    assert_eq!(r.curve.len(), 8);
    assert!(r.curve.last().unwrap().cr < r.curve[0].cr, "{:?}", r.curve);
    assert_eq!(f.params, before);
    assert_ne!(r.prompt.embeddings, start.embeddings);

    let again = optimize_soft_prompt(&f.params, &start, &train, &f.verbalizer, &LossWeights::default(), &cfg).unwrap();
    assert_eq!(again.prompt, r.prompt);

    let csv = r.curve_csv();
    assert!(csv.starts_with("epoch,L_ce,L_cs,L_cf,L_cr\n"));
    assert_eq!(csv.lines().count(), 9);
}

#[test]
fn cross_entropy_tuning_fits_the_training_set() {
    let (f, train) = setup();
    let start = init(&f, &train, InitStrategy::Label);
    let cfg = TrainConfig {
        epochs: 15,
        batch_size: 16,
        learning_rate: 0.05,
        ..TrainConfig::default()
    };
    let before = accuracy(&f.params, &start.as_prompt(), &train, &f.verbalizer);
    let r = optimize_soft_prompt(
        &f.params,
        &start,
        &train,
        &f.verbalizer,
        &LossWeights::cross_entropy_only(),
        &cfg,
    )
    .unwrap();
    let after = accuracy(&f.params, &r.prompt.as_prompt(), &train, &f.verbalizer);
    assert!(after >= before, "{before} -> {after}");
    assert!(r.curve.iter().all(|e| e.cs == 0.0 || e.cs.is_finite()));
}

#[test]
fn every_initializer_has_the_right_shape() {
    let (f, train) = setup();
    for s in [
        InitStrategy::Random,
        InitStrategy::Label,
        InitStrategy::Vocab,
        InitStrategy::Top1k,
        InitStrategy::Task,
    ] {
        let p = init(&f, &train, s);
        assert_eq!((p.len(), p.width()), (4, 16), "{s:?}");
        assert!(p.embeddings.is_finite());
    }
}

#[test]
fn divergence_is_reported() {
    let (f, train) = setup();
    let start = init(&f, &train, InitStrategy::Random);
    let cfg = TrainConfig {
        epochs: 2,
        learning_rate: f64::INFINITY,
        ..TrainConfig::default()
    };
    let r = optimize_soft_prompt(&f.params, &start, &train, &f.verbalizer, &LossWeights::default(), &cfg);
    assert!(matches!(r, Err(Error::Diverged { .. })), "{r:?}");
}

#[test]
fn soft_prompt_checkpoint_round_trips() {
    let (f, train) = setup();
    let p = init(&f, &train, InitStrategy::Task);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("p.ckpt");
    p.to_checkpoint(&LossWeights::default()).write(&path).unwrap();
    let back = SoftPrompt::from_checkpoint(&Checkpoint::read(&path).unwrap()).unwrap();
    assert_eq!(back, p);
}
