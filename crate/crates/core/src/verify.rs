//! Equivalence verification between the paired and prefix-shared formats.
//!
//! The check that matters: for the same weights, every sample's summed
//! chosen/rejected log-probs must be identical (to floating-point tolerance)
//! whichever of the four layouts computed them. The paired unpacked layout is
//! the baseline; the other three are compared against it.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::dpo::{build_batches, completion_logprobs, PairLogp};
use crate::error::Result;
use crate::layout::PreferenceSample;
use crate::masks::BlockMask;
use crate::model::{forward, init, ModelConfig, ModelParams};
use crate::packing::Format;
use crate::rng::SeedSplitter;
use crate::scalar::Scalar;

/// Per-sample completion log-probs computed under one (format, packing)
/// combination. `corrupt_mask` is a test hook that forces every mask block to
/// Full, which must make verification fail.
pub fn logprobs_under_layout<S: Scalar>(
    params: &ModelParams<S>,
    samples: &[PreferenceSample],
    format: Format,
    packing: bool,
    bsz: usize,
    block_size: usize,
    corrupt_mask: bool,
) -> Result<BTreeMap<usize, PairLogp>> {
    let batches = build_batches(samples, format, packing, bsz, 0)?;
    let mut out = BTreeMap::new();
    for batch in &batches {
        let mut mask = BlockMask::build(batch.mask_spec.clone(), block_size)?;
        if corrupt_mask {
            mask.corrupt_all_full();
        }
        let (logits, _) = forward(params, &batch.tokens, &batch.position_ids, &mask)?;
        out.extend(completion_logprobs(&logits, batch)?);
    }
    Ok(out)
}

/// One layout combination's deviation from the paired unpacked baseline.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayoutDeviation {
    pub format: Format,
    pub packing: bool,
    pub max_abs_deviation: f64,
}

/// Outcome of an equivalence run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VerifyReport {
    pub models: usize,
    pub samples: usize,
    /// (model, sample) pairs checked.
    pub instances: usize,
    pub precision: crate::scalar::Precision,
    pub tolerance: f64,
    pub per_layout: Vec<LayoutDeviation>,
    pub max_abs_deviation: f64,
    pub pass: bool,
}

/// Settings for [`verify_format_equivalence`].
#[derive(Debug, Clone)]
pub struct VerifySettings {
    /// Model dimensions; the seed field is re-derived per model.
    pub config: ModelConfig,
    pub n_models: usize,
    pub bsz: usize,
    pub block_size: usize,
    pub corrupt_mask: bool,
}

/// Compare per-completion log-probs across all four layout combinations for
/// `n_models` freshly seeded models over the given samples.
pub fn verify_format_equivalence<S: Scalar>(
    settings: &VerifySettings,
    samples: &[PreferenceSample],
) -> Result<VerifyReport> {
    let tolerance = S::PRECISION.logp_tolerance();
    let seeds = SeedSplitter::new(settings.config.seed);
    let combos = [
        (Format::Shared, false),
        (Format::Paired, true),
        (Format::Shared, true),
    ];
    let mut per_layout: Vec<LayoutDeviation> = combos
        .iter()
        .map(|&(format, packing)| LayoutDeviation {
            format,
            packing,
            max_abs_deviation: 0.0,
        })
        .collect();
    for m in 0..settings.n_models {
        let mut config = settings.config.clone();
        config.seed = rand::Rng::random(&mut seeds.stream(&format!("verify-model-{m}")));
        let params: ModelParams<S> = init(&config)?;
        let baseline = logprobs_under_layout(
            &params,
            samples,
            Format::Paired,
            false,
            settings.bsz,
            settings.block_size,
            settings.corrupt_mask,
        )?;
        for (slot, &(format, packing)) in per_layout.iter_mut().zip(&combos) {
            let got = logprobs_under_layout(
                &params,
                samples,
                format,
                packing,
                settings.bsz,
                settings.block_size,
                settings.corrupt_mask,
            )?;
            for (sample, base) in &baseline {
                let pair = got[sample];
                let dev = (pair.chosen - base.chosen)
                    .abs()
                    .max((pair.rejected - base.rejected).abs());
                if dev > slot.max_abs_deviation {
                    slot.max_abs_deviation = dev;
                }
            }
        }
    }
    let max_abs_deviation = per_layout
        .iter()
        .map(|l| l.max_abs_deviation)
        .fold(0.0, f64::max);
    Ok(VerifyReport {
        models: settings.n_models,
        samples: samples.len(),
        instances: settings.n_models * samples.len(),
        precision: S::PRECISION,
        tolerance,
        per_layout,
        max_abs_deviation,
        pass: max_abs_deviation <= tolerance,
    })
}
