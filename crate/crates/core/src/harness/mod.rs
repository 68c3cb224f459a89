//! End-to-end experiments: corpus generation, backbone pretraining, every
//! prompting method, evaluation on source and target domains, and report
//! emission.

mod config;
mod pipeline;
mod report;

pub use config::{BackboneConfig, ExperimentConfig, HardSettings, Method, PilotSettings, SoftSettings};
pub use pipeline::{
    candidate_pools, evaluate, evaluate_matched, prepare_data, prepare_seed, pretrain, prompt_sets, run_method,
    run_seed, stage_seed, train_matching, train_soft, Evaluation, Matching, MethodOutcome, SeedContext, SeedData,
};
pub use report::{
    emit_report, run_experiment, summarize, worker_count, Aggregate, MethodMetrics, MetricsReport, ReportFormat,
    SeedReport, METRICS,
};
