//! Walk one sample through both layouts and show that the shared format
//! produces the same per-completion log-probs with fewer tokens.
//!
//! ```sh
//! cargo run --example layout_equivalence
//! ```

use prefix_dpo::dpo::{build_batches, completion_logprobs};
use prefix_dpo::layout::PreferenceSample;
use prefix_dpo::masks::{block_mask_stats, BlockMask};
use prefix_dpo::model::{forward, init, ModelConfig};
use prefix_dpo::packing::Format;

fn main() -> prefix_dpo::Result<()> {
    let sample = PreferenceSample::new(
        vec![3, 1, 4, 1, 5, 9, 2, 6], // prompt (shared prefix)
        vec![5, 3, 5],                // chosen completion
        vec![8, 9, 7, 9],             // rejected completion
    )?;
    println!(
        "tokens: paired {} vs shared {} (saving = prompt length {})",
        sample.paired_tokens(),
        sample.shared_tokens(),
        sample.prompt.len()
    );

    let config = ModelConfig::toy(16, 42);
    let params = init::<f64>(&config)?;

    for format in [Format::Paired, Format::Shared] {
        let batches = build_batches(std::slice::from_ref(&sample), format, false, 1, 0)?;
        let batch = &batches[0];
        let mask = BlockMask::build(batch.mask_spec.clone(), 4)?;
        let stats = block_mask_stats(&mask);
        let (logits, _) = forward(&params, &batch.tokens, &batch.position_ids, &mask)?;
        let logps = completion_logprobs(&logits, batch)?;
        let pair = logps[&0];
        println!(
            "{format:?}: logp chosen {:+.12}, rejected {:+.12} \
             (mask blocks: {:.0}% empty, {:.0}% partial, {:.0}% full)",
            pair.chosen,
            pair.rejected,
            100.0 * stats.empty_fraction,
            100.0 * stats.partial_fraction,
            100.0 * stats.full_fraction,
        );
    }
    Ok(())
}
