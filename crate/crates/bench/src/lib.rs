//! Shared workload builders for the criterion benches.

use prefix_dpo::dpo::{build_batches, reference_logprobs, RefCache};
use prefix_dpo::layout::dataset::synthetic_dataset;
use prefix_dpo::layout::{Batch, PreferenceSample};
use prefix_dpo::model::{init, ModelConfig, ModelParams};
use prefix_dpo::packing::Format;
use prefix_dpo::rng::SeedSplitter;
use prefix_dpo::scalar::Scalar;

/// A ready-to-step workload: batches plus policy and cached reference.
pub struct Workload<S> {
    pub batches: Vec<Batch>,
    pub policy: ModelParams<S>,
    pub ref_cache: RefCache,
}

pub fn bench_model_config(d_model: usize, n_layers: usize) -> ModelConfig {
    ModelConfig {
        vocab_size: 64,
        d_model,
        n_layers,
        n_heads: 4,
        d_ff: 2 * d_model,
        rope_theta: 10_000.0,
        rms_eps: 1e-6,
        init_std: 0.02,
        seed: 17,
    }
}

/// Long-prefix synthetic preference data (the regime prefix sharing targets).
pub fn long_prefix_samples(
    n: usize,
    prompt_len: usize,
    completion_len: usize,
) -> Vec<PreferenceSample> {
    let mut rng = SeedSplitter::new(17).stream("bench-data");
    synthetic_dataset(
        &mut rng,
        n,
        64,
        (prompt_len, prompt_len),
        (completion_len, completion_len),
    )
}

pub fn workload<S: Scalar>(
    config: &ModelConfig,
    samples: &[PreferenceSample],
    format: Format,
    packing: bool,
    bsz: usize,
    block_size: usize,
) -> Workload<S> {
    let batches = build_batches(samples, format, packing, bsz, 0).expect("valid workload");
    let policy: ModelParams<S> = init(config).expect("valid config");
    let ref_cache = reference_logprobs(&policy, &batches, block_size).expect("reference pass");
    Workload {
        batches,
        policy,
        ref_cache,
    }
}
