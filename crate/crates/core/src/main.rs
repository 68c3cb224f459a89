use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use concentra::canonical::{canonical_json, to_canonical_string};
use concentra::checkpoint::Checkpoint;
use concentra::concentration::pilot_profile;
use concentra::corpus::{load_prompt_pool, write_jsonl, write_prompt_pool, PromptCandidate};
use concentra::hard::{rank_candidates, selection_trace_csv, Matcher, PromptSet};
use concentra::harness::{
    candidate_pools, emit_report, evaluate, evaluate_matched, prepare_data, pretrain, prompt_sets, run_experiment,
    train_matching, train_soft, Evaluation, ExperimentConfig, Matching, Method, MetricsReport, ReportFormat,
    SeedContext, SeedData,
};
use concentra::model::{ModelParams, Prompt};
use concentra::soft::SoftPrompt;
use concentra::{Error, Result};

#[derive(Parser)]
#[command(
    name = "concentra",
    version,
    about = "Concentration-driven prompt optimization experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment config (JSON); defaults apply to missing fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed for single-seed stages; for `run`, replaces the config's seed list.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args, Clone)]
struct BackboneArg {
    /// Pretrained backbone checkpoint; pretrained from scratch when absent.
    #[arg(long)]
    backbone: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus and its few-shot split as JSONL.
    Gen(Common),
    /// Pretrain the backbone on the unlabeled source pool.
    Pretrain(Common),
    /// Train a soft prompt.
    TrainSoft {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        backbone: BackboneArg,
        #[arg(long, default_value = "soft-both")]
        method: Method,
    },
    /// Score candidate pools and keep the top-K per source domain.
    Filter {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        backbone: BackboneArg,
    },
    /// Train the prompt matcher over per-domain prompt sets.
    TrainMatch {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        backbone: BackboneArg,
        /// Prompt sets as written by `filter`; GCS filtering is run when absent.
        #[arg(long)]
        prompt_sets: Option<PathBuf>,
    },
    /// Evaluate one prompt, or a trained matcher, on in-domain and target data.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        backbone: BackboneArg,
        #[arg(long, conflicts_with_all = ["hard_prompt", "matcher"])]
        soft_prompt: Option<PathBuf>,
        #[arg(long, conflicts_with = "matcher")]
        hard_prompt: Option<String>,
        #[arg(long, requires = "prompt_sets")]
        matcher: Option<PathBuf>,
        #[arg(long)]
        prompt_sets: Option<PathBuf>,
    },
    /// Per-layer concentration profile of prompts on target inputs.
    Pilot {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        backbone: BackboneArg,
        #[arg(long)]
        soft_prompt: Vec<PathBuf>,
        #[arg(long)]
        hard_prompt: Vec<String>,
    },
    /// Run the full experiment grid and write the report.
    Run(Common),
    /// Re-emit a report and print its summary.
    Report {
        #[command(flatten)]
        common: Common,
        /// A `report.json` written by `run`.
        #[arg(long)]
        input: PathBuf,
    },
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    match &common.config {
        Some(p) => ExperimentConfig::load(p),
        None => Ok(ExperimentConfig::default()),
    }
}

fn seed_of(common: &Common, cfg: &ExperimentConfig) -> u64 {
    common.seed.unwrap_or(cfg.seeds[0])
}

fn out_dir(common: &Common) -> Result<&Path> {
    std::fs::create_dir_all(&common.out)?;
    Ok(&common.out)
}

fn context(cfg: &ExperimentConfig, seed: u64, backbone: &BackboneArg) -> Result<SeedContext> {
    let data = prepare_data(cfg, seed)?;
    let params = match &backbone.backbone {
        Some(path) => {
            let params = ModelParams::from_checkpoint(&Checkpoint::read(path)?)?;
            if params.config != cfg.backbone.model_config(&data.vocab) {
                return Err(Error::Config(format!(
                    "backbone {} does not match the configured model",
                    path.display()
                )));
            }
            params
        }
        None => pretrain(cfg, &data, seed)?.params,
    };
    Ok(SeedContext {
        seed,
        data,
        params,
        layers: cfg.layer_set()?,
    })
}

fn write_split(data: &SeedData, dir: &Path) -> Result<()> {
    let split = &data.split;
    for (name, sets) in [
        ("train", &split.train),
        ("validation", &split.validation),
        ("in_domain_test", &split.in_domain_test),
    ] {
        for d in sets {
            write_jsonl(&dir.join(format!("{name}_{}.jsonl", d.domain)), d, &data.vocab)?;
        }
    }
    write_jsonl(&dir.join("test.jsonl"), &split.test, &data.vocab)?;
    for d in &split.unlabeled_pool {
        write_jsonl(&dir.join(format!("unlabeled_{}.jsonl", d.domain)), d, &data.vocab)?;
    }
    Ok(())
}

/// Groups a prompt file into one set per source domain, in source order.
fn sets_from_file(path: &Path, data: &SeedData) -> Result<Vec<PromptSet>> {
    let pool = load_prompt_pool(path, &data.vocab)?;
    data.split
        .sources
        .iter()
        .map(|d| {
            let members: Vec<PromptCandidate> = pool.iter().filter(|c| &c.domain == d).cloned().collect();
            PromptSet::new(d.clone(), members)
        })
        .collect()
}

fn eval_json(in_domain: &Evaluation, target: &Evaluation) -> Result<String> {
    Ok(to_canonical_string(&serde_json::json!({
        "in_domain_acc": in_domain.accuracy,
        "target_acc": target.accuracy,
        "gap": in_domain.accuracy - target.accuracy,
        "in_domain_layer_profile": in_domain.layer_profile,
        "target_layer_profile": target.layer_profile,
    })))
}

fn execute(command: Command) -> Result<()> {
    match command {
        Command::Gen(common) => {
            let cfg = load_config(&common)?;
            let data = prepare_data(&cfg, seed_of(&common, &cfg))?;
            let dir = out_dir(&common)?;
            write_split(&data, dir)?;
            std::fs::write(dir.join("vocab.json"), canonical_json(&data.vocab)?)?;
            println!(
                "wrote corpus for {} sources and target {} to {}",
                data.split.sources.len(),
                data.split.target,
                dir.display()
            );
        }
        Command::Pretrain(common) => {
            let cfg = load_config(&common)?;
            let seed = seed_of(&common, &cfg);
            let data = prepare_data(&cfg, seed)?;
            let out = pretrain(&cfg, &data, seed)?;
            let dir = out_dir(&common)?;
            out.params.to_checkpoint().write(&dir.join("backbone.ckpt"))?;
            let mut csv = String::from("epoch,loss\n");
            for (e, l) in out.loss_curve.iter().enumerate() {
                csv.push_str(&format!("{e},{l:.16e}\n"));
            }
            std::fs::write(dir.join("pretrain_loss.csv"), csv)?;
            println!(
                "final pretraining loss {:.4}",
                out.loss_curve.last().copied().unwrap_or(f64::NAN)
            );
        }
        Command::TrainSoft {
            common,
            backbone,
            method,
        } => {
            let cfg = load_config(&common)?;
            let ctx = context(&cfg, seed_of(&common, &cfg), &backbone)?;
            let result = train_soft(&ctx, &cfg, method)?;
            let weights = method.soft_weights(&cfg.soft.weights).expect("soft method");
            let dir = out_dir(&common)?;
            result
                .prompt
                .to_checkpoint(&weights)
                .write(&dir.join("soft_prompt.ckpt"))?;
            std::fs::write(dir.join("soft_curve.csv"), result.curve_csv())?;
            if let Some(last) = result.curve.last() {
                println!(
                    "{method}: final L_cr {:.4} (L_ce {:.4}, L_cs {:.4}, L_cf {:.4})",
                    last.cr, last.ce, last.cs, last.cf
                );
            }
        }
        Command::Filter { common, backbone } => {
            let cfg = load_config(&common)?;
            let ctx = context(&cfg, seed_of(&common, &cfg), &backbone)?;
            let pools = candidate_pools(&ctx, &cfg)?;
            let mut kept = Vec::new();
            let mut csv = String::from("domain,id,kind,m_acc,strength,m_cf,gcs,kept\n");
            for (pool, train) in pools.iter().zip(&ctx.data.split.train) {
                let ranked = rank_candidates(
                    &ctx.params,
                    pool,
                    &train.examples,
                    &cfg.hard.gcs,
                    &ctx.data.verbalizer,
                    &ctx.layers,
                )?;
                for (rank, s) in ranked.iter().enumerate() {
                    csv.push_str(&format!(
                        "{},{},{:?},{:.16e},{:.16e},{:.16e},{:.16e},{}\n",
                        s.candidate.domain,
                        s.candidate.id,
                        s.candidate.kind,
                        s.score.m_acc,
                        s.score.strength,
                        s.score.m_cf,
                        s.gcs,
                        rank < cfg.hard.k
                    ));
                }
                kept.extend(ranked.into_iter().take(cfg.hard.k).map(|s| s.candidate));
            }
            let dir = out_dir(&common)?;
            write_prompt_pool(&dir.join("prompt_sets.jsonl"), &kept, &ctx.data.vocab)?;
            std::fs::write(dir.join("gcs_scores.csv"), csv)?;
            println!(
                "kept {} of {} candidates",
                kept.len(),
                pools.iter().map(Vec::len).sum::<usize>()
            );
        }
        Command::TrainMatch {
            common,
            backbone,
            prompt_sets: sets_path,
        } => {
            let cfg = load_config(&common)?;
            let ctx = context(&cfg, seed_of(&common, &cfg), &backbone)?;
            let sets = match &sets_path {
                Some(p) => sets_from_file(p, &ctx.data)?,
                None => prompt_sets(&ctx, &cfg, &candidate_pools(&ctx, &cfg)?, true)?,
            };
            let trained = train_matching(&ctx, &cfg, &sets)?;
            let dir = out_dir(&common)?;
            trained.matcher.to_checkpoint().write(&dir.join("matcher.ckpt"))?;
            std::fs::write(
                dir.join("selection_trace.csv"),
                selection_trace_csv(&trained.final_trace),
            )?;
            if sets_path.is_none() {
                let all: Vec<PromptCandidate> = sets.iter().flat_map(|s| s.candidates.clone()).collect();
                write_prompt_pool(&dir.join("prompt_sets.jsonl"), &all, &ctx.data.vocab)?;
            }
            println!(
                "mean reward: first epoch {:.4}, last epoch {:.4}",
                trained.mean_reward.first().copied().unwrap_or(f64::NAN),
                trained.mean_reward.last().copied().unwrap_or(f64::NAN)
            );
        }
        Command::Eval {
            common,
            backbone,
            soft_prompt,
            hard_prompt,
            matcher,
            prompt_sets: sets_path,
        } => {
            let cfg = load_config(&common)?;
            let ctx = context(&cfg, seed_of(&common, &cfg), &backbone)?;
            let in_domain = ctx.data.in_domain_union();
            let target = &ctx.data.split.test.examples;
            let (a, b) = if let Some(m) = matcher {
                let matcher = Matcher::from_checkpoint(&Checkpoint::read(&m)?)?;
                let sets = sets_from_file(sets_path.as_deref().expect("required by clap"), &ctx.data)?;
                let learned = Matching::Learned(&matcher);
                (
                    evaluate_matched(&ctx, &sets, &learned, &in_domain, 1)?.0,
                    evaluate_matched(&ctx, &sets, &learned, target, 2)?.0,
                )
            } else {
                let prompt = if let Some(p) = soft_prompt {
                    SoftPrompt::from_checkpoint(&Checkpoint::read(&p)?)?.as_prompt()
                } else if let Some(text) = hard_prompt {
                    Prompt::Tokens(ctx.data.vocab.encode(&text))
                } else {
                    return Err(Error::InvalidArgument(
                        "eval needs --soft-prompt, --hard-prompt or --matcher".into(),
                    ));
                };
                let run = |ex: &[_]| evaluate(&ctx.params, ex, &ctx.data.verbalizer, |_, _| Ok(vec![prompt.clone()]));
                (run(&in_domain)?, run(target)?)
            };
            let text = eval_json(&a, &b)?;
            std::fs::write(out_dir(&common)?.join("eval.json"), &text)?;
            print!("{text}");
        }
        Command::Pilot {
            common,
            backbone,
            soft_prompt,
            hard_prompt,
        } => {
            let cfg = load_config(&common)?;
            let ctx = context(&cfg, seed_of(&common, &cfg), &backbone)?;
            let mut prompts: Vec<(String, Prompt)> = Vec::new();
            for p in &soft_prompt {
                let name = p
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_default();
                prompts.push((name, SoftPrompt::from_checkpoint(&Checkpoint::read(p)?)?.as_prompt()));
            }
            for text in &hard_prompt {
                prompts.push((text.clone(), Prompt::Tokens(ctx.data.vocab.encode(text))));
            }
            if prompts.is_empty() {
                for c in candidate_pools(&ctx, &cfg)?.into_iter().next().unwrap_or_default() {
                    prompts.push((format!("candidate_{}", c.id), Prompt::Tokens(c.tokens)));
                }
            }
            let inputs: Vec<_> = ctx
                .data
                .split
                .test
                .examples
                .iter()
                .take(cfg.pilot.inputs)
                .cloned()
                .collect();
            let report = pilot_profile(&ctx.params, &prompts, &inputs, cfg.pilot.top_k)?;
            let dir = out_dir(&common)?;
            report.write(&dir.join("pilot.json"), &dir.join("pilot.csv"))?;
            println!("profiled {} prompts on {} inputs", prompts.len(), inputs.len());
        }
        Command::Run(common) => {
            let mut cfg = load_config(&common)?;
            if let Some(s) = common.seed {
                cfg.seeds = vec![s];
            }
            let report = run_experiment(&cfg)?;
            emit_report(&report, out_dir(&common)?, &[ReportFormat::Json, ReportFormat::Csv])?;
            print!("{}", report.summary_table());
        }
        Command::Report { common, input } => {
            let report = MetricsReport::from_json(&std::fs::read_to_string(&input)?)?;
            emit_report(&report, out_dir(&common)?, &[ReportFormat::Json, ReportFormat::Csv])?;
            print!("{}", report.summary_table());
        }
    }
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Err(e) = execute(cli.command) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
