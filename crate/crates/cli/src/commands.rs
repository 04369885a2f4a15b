//! The five subcommands.

use std::io::Write;
use std::time::Instant;

use serde::Serialize;

use prefix_dpo::analytics::{
    dataset_stats, harness_samples_per_sec, throughput_report, DatasetStats, RunMeasurement,
    StepTiming, ThroughputReport,
};
use prefix_dpo::dpo::{
    build_batches, reference_logprobs, train_step, RefCache, RefSource, StepMetrics,
};
use prefix_dpo::error::{Error, Result};
use prefix_dpo::layout::dataset::{load_jsonl, min_vocab_size};
use prefix_dpo::layout::{enforce_limits, Batch, PreferenceSample};
use prefix_dpo::masks::BlockMask;
use prefix_dpo::model::{init, load_checkpoint, save_checkpoint, ModelParams, Optimizer};
use prefix_dpo::packing::{ffd_pack, pack_dataset, packing_efficiency, unit_length, Format};
use prefix_dpo::rng::SeedSplitter;
use prefix_dpo::scalar::Scalar;
use prefix_dpo::verify::{verify_format_equivalence, VerifySettings};

use crate::opts::{OptimizerChoice, RefMode, ReportFormat, RunConfig};

fn load_samples(cfg: &RunConfig) -> Result<Vec<PreferenceSample>> {
    let path = cfg.require_dataset()?;
    let raw = load_jsonl(path, cfg.tokenizer_kind()?)?;
    raw.iter()
        .enumerate()
        .map(|(i, s)| {
            enforce_limits(
                s,
                i,
                cfg.max_prompt_len,
                cfg.max_seq_len,
                cfg.format == Format::Shared,
            )
        })
        .collect()
}

fn emit(cfg: &RunConfig, text: &str) -> Result<()> {
    match &cfg.out {
        Some(path) => {
            std::fs::write(path, text)?;
            eprintln!("wrote {}", path.display());
        }
        None => println!("{text}"),
    }
    Ok(())
}

pub fn cmd_stats(cfg: &RunConfig) -> Result<()> {
    let samples = load_samples(cfg)?;
    let stats = dataset_stats(&samples, cfg.overall_len_def())?;
    let json = serde_json::to_string_pretty(&stats)?;
    match cfg.report {
        ReportFormat::Json => emit(cfg, &json)?,
        ReportFormat::Csv => emit(cfg, &stats_csv(&stats))?,
        ReportFormat::Md => {
            // Human-facing default: the JSON plus a table.
            emit(cfg, &format!("{json}\n\n{}", stats_markdown(cfg, &stats)))?;
        }
    }
    Ok(())
}

fn stats_markdown(cfg: &RunConfig, s: &DatasetStats) -> String {
    let dataset = cfg
        .dataset
        .as_ref()
        .map(|p| p.display().to_string())
        .unwrap_or_default();
    let mut out = String::new();
    out.push_str(
        "| Dataset | Samples | Median Overall Len | Prefix / Completion | Paired Tokens | Shared Tokens | Predicted Reduction |\n",
    );
    out.push_str("|---|---|---|---|---|---|---|\n");
    out.push_str(&format!(
        "| {dataset} | {} | {} | {:.2} | {} | {} | {:.4}x |\n",
        s.n_samples,
        s.median_overall_len,
        s.median_prefix_completion_ratio,
        s.total_paired_tokens,
        s.total_shared_tokens,
        s.predicted_token_reduction,
    ));
    out
}

fn stats_csv(s: &DatasetStats) -> String {
    format!(
        "n_samples,median_overall_len,median_prefix_completion_ratio,total_paired_tokens,total_shared_tokens,predicted_token_reduction\n{},{},{},{},{},{}\n",
        s.n_samples,
        s.median_overall_len,
        s.median_prefix_completion_ratio,
        s.total_paired_tokens,
        s.total_shared_tokens,
        s.predicted_token_reduction,
    )
}

#[derive(Serialize)]
struct PackPlanReport {
    capacity: usize,
    bins: Vec<Vec<usize>>,
    fill: Vec<usize>,
    efficiency: f64,
}

pub fn cmd_pack_plan(cfg: &RunConfig) -> Result<()> {
    let samples = load_samples(cfg)?;
    let plan = match cfg.capacity {
        Some(capacity) => {
            let lengths: Vec<usize> = samples.iter().map(|s| unit_length(s, cfg.format)).collect();
            ffd_pack(&lengths, capacity)?
        }
        None => pack_dataset(&samples, cfg.format, cfg.bsz)?,
    };
    let report = PackPlanReport {
        capacity: plan.capacity,
        efficiency: packing_efficiency(&plan)?,
        bins: plan.bins,
        fill: plan.fill,
    };
    emit(cfg, &serde_json::to_string_pretty(&report)?)
}

pub fn cmd_verify<S: Scalar>(cfg: &RunConfig) -> Result<()> {
    let all = load_samples(cfg)?;
    let samples: Vec<PreferenceSample> = all.iter().take(cfg.samples).cloned().collect();
    let model_config = cfg.model_config(min_vocab_size(&samples));
    model_config.validate()?;

    if cfg.dump_mask {
        let batches = build_batches(&samples, Format::Shared, cfg.packing, cfg.bsz, 0)?;
        let mask = BlockMask::build(batches[0].mask_spec.clone(), cfg.block_size)?;
        let dump = serde_json::to_string_pretty(&mask.to_debug_grid())?;
        match &cfg.out {
            Some(path) => {
                std::fs::write(path, dump)?;
                eprintln!("wrote block-mask dump to {}", path.display());
            }
            None => println!("{dump}"),
        }
    }

    let settings = VerifySettings {
        config: model_config,
        n_models: cfg.models,
        bsz: cfg.bsz,
        block_size: cfg.block_size,
        corrupt_mask: cfg.corrupt_mask,
    };
    let report = verify_format_equivalence::<S>(&settings, &samples)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    eprintln!(
        "max |deviation| {:.3e} over {} instances (tolerance {:.0e} at {})",
        report.max_abs_deviation, report.instances, report.tolerance, report.precision
    );
    if report.pass {
        Ok(())
    } else {
        Err(Error::Verification(format!(
            "max |deviation| {:.3e} exceeds tolerance {:.0e}",
            report.max_abs_deviation, report.tolerance
        )))
    }
}

struct PreparedRun<S> {
    label: String,
    batches: Vec<Batch>,
    policy: ModelParams<S>,
    reference: Option<ModelParams<S>>,
    cache: Option<RefCache>,
}

pub fn cmd_bench<S: Scalar>(cfg: &RunConfig) -> Result<()> {
    if cfg.steps <= cfg.warmup as u64 {
        return Err(Error::Config(format!(
            "--steps {} must exceed --warmup {}",
            cfg.steps, cfg.warmup
        )));
    }
    let samples = load_samples(cfg)?;
    let model_config = cfg.model_config(min_vocab_size(&samples));
    model_config.validate()?;

    let combos = [
        (Format::Paired, false),
        (Format::Shared, false),
        (Format::Paired, true),
        (Format::Shared, true),
    ];
    let mut runs = Vec::new();
    for (format, packing) in combos {
        let mut prepared = prepare_run::<S>(cfg, &samples, &model_config, format, packing)?;
        let timed = measure_run(cfg, &mut prepared)?;
        runs.push(timed);
    }
    let report = throughput_report(&runs)?;
    let rendered = match cfg.report {
        ReportFormat::Json => serde_json::to_string_pretty(&report)?,
        ReportFormat::Csv => report.to_csv(),
        ReportFormat::Md => report.to_markdown(),
    };
    emit(cfg, &rendered)?;
    print_speedup_summary(&report);
    Ok(())
}

fn prepare_run<S: Scalar>(
    cfg: &RunConfig,
    samples: &[PreferenceSample],
    model_config: &prefix_dpo::model::ModelConfig,
    format: Format,
    packing: bool,
) -> Result<PreparedRun<S>> {
    let batches = build_batches(samples, format, packing, cfg.bsz, 0)?;
    let policy: ModelParams<S> = init(model_config)?;
    let reference = policy.clone();
    let cache = match cfg.ref_mode {
        RefMode::Cached => Some(reference_logprobs(&reference, &batches, cfg.block_size)?),
        RefMode::PerStep => None,
    };
    Ok(PreparedRun {
        label: format!(
            "{}-{}",
            match format {
                Format::Paired => "paired",
                Format::Shared => "shared",
            },
            if packing { "packed" } else { "unpacked" }
        ),
        batches,
        policy,
        reference: matches!(cfg.ref_mode, RefMode::PerStep).then_some(reference),
        cache,
    })
}

fn measure_run<S: Scalar>(cfg: &RunConfig, run: &mut PreparedRun<S>) -> Result<RunMeasurement> {
    let mut optimizer = match cfg.optimizer {
        OptimizerChoice::AdamW => Optimizer::adamw(&run.policy),
        OptimizerChoice::Sgd => Optimizer::Sgd,
    };
    let reference = match (&run.cache, &run.reference) {
        (Some(cache), _) => RefSource::Cache(cache),
        (None, Some(model)) => RefSource::Model(model),
        (None, None) => unreachable!("prepare_run sets one reference source"),
    };
    let mut timings = Vec::with_capacity(cfg.steps as usize);
    for i in 0..cfg.steps {
        let batch = &run.batches[(i as usize) % run.batches.len()];
        let started = Instant::now();
        let result = train_step(
            &mut run.policy,
            &mut optimizer,
            &reference,
            batch,
            cfg.beta,
            cfg.lr,
            cfg.block_size,
        )?;
        timings.push(StepTiming {
            samples: result.sample_indices.len(),
            seconds: started.elapsed().as_secs_f64(),
        });
    }
    let rate = harness_samples_per_sec(&timings, cfg.warmup)?;
    eprintln!("bench {}: {:.3} samples/sec", run.label, rate);
    Ok(RunMeasurement {
        label: run.label.clone(),
        samples_per_sec: rate,
        steps: cfg.steps as usize - cfg.warmup,
        n_samples: run.batches.iter().map(|b| b.sample_indices.len()).sum(),
    })
}

fn print_speedup_summary(report: &ThroughputReport) {
    for row in &report.rows[1..] {
        eprintln!(
            "{} vs {}: {:.3}x",
            row.label, report.baseline, row.speedup_vs_baseline
        );
    }
}

pub fn cmd_train<S: Scalar>(cfg: &RunConfig) -> Result<()> {
    let samples = load_samples(cfg)?;
    let batches = build_batches(&samples, cfg.format, cfg.packing, cfg.bsz, 0)?;

    let (mut policy, start_step, saved_opt): (ModelParams<S>, u64, _) = match &cfg.checkpoint {
        Some(path) => {
            let (params, step, opt) = load_checkpoint::<S>(path)?;
            eprintln!("resumed from {} at step {step}", path.display());
            (params, step, opt)
        }
        None => {
            let model_config = cfg.model_config(min_vocab_size(&samples));
            model_config.validate()?;
            (init(&model_config)?, 0, None)
        }
    };
    // The frozen reference is the freshly initialized model for this config;
    // init is deterministic, so resumed runs rebuild the same reference.
    let reference: ModelParams<S> = init(&policy.config)?;
    let ref_cache = match cfg.ref_mode {
        RefMode::Cached => Some(reference_logprobs(&reference, &batches, cfg.block_size)?),
        RefMode::PerStep => None,
    };
    let ref_source = match &ref_cache {
        Some(cache) => RefSource::Cache(cache),
        None => RefSource::Model(&reference),
    };

    let mut optimizer = match (cfg.optimizer, saved_opt) {
        (OptimizerChoice::AdamW, Some(state)) => Optimizer::AdamW {
            hyper: Default::default(),
            state: Box::new(state),
        },
        (OptimizerChoice::AdamW, None) => Optimizer::adamw(&policy),
        (OptimizerChoice::Sgd, _) => Optimizer::Sgd,
    };

    let splitter = SeedSplitter::new(cfg.seed);
    let mut order: Vec<usize> = (0..batches.len()).collect();
    let stdout = std::io::stdout();
    let mut stdout = stdout.lock();
    let mut step = start_step;
    let mut epoch = 0usize;
    let mut pos = order.len(); // trigger an epoch start on the first step
    for _ in 0..cfg.steps {
        if pos == order.len() {
            pos = 0;
            if cfg.shuffle {
                use rand::seq::SliceRandom;
                let mut rng = splitter.stream(&format!("shuffle-epoch-{epoch}"));
                order.shuffle(&mut rng);
            }
            epoch += 1;
        }
        let batch = &batches[order[pos]];
        pos += 1;
        step += 1;
        let started = Instant::now();
        let result = train_step(
            &mut policy,
            &mut optimizer,
            &ref_source,
            batch,
            cfg.beta,
            cfg.lr,
            cfg.block_size,
        )?;
        let seconds = started.elapsed().as_secs_f64().max(1e-12);
        let metrics = StepMetrics {
            step,
            loss: result.loss,
            accuracy: result.accuracy,
            mean_margin: result.mean_margin(),
            tokens_processed: batch.real_tokens,
            samples_per_sec: result.sample_indices.len() as f64 / seconds,
        };
        serde_json::to_writer(&mut stdout, &metrics)?;
        stdout.write_all(b"\n")?;
    }
    stdout.flush()?;

    if let Some(path) = &cfg.out {
        save_checkpoint(&policy, step, optimizer.adam_state(), path)?;
        eprintln!("saved checkpoint to {} at step {step}", path.display());
    }
    Ok(())
}
