//! Attention mask predicates and the block-sparse mask builder.
//!
//! Three predicates cover the four layouts:
//!
//! * [`prefix_sharing_mask`] — one prompt with both completions in a single
//!   row; the rejected span must not attend to the chosen span.
//! * [`packed_baseline_mask`] — packed paired rows; response-ID equality keeps
//!   each (prompt + response) unit isolated.
//! * [`packed_prefix_mask`] — packed prefix-shared rows; document-ID equality
//!   plus the same rejected-to-chosen exclusion, with start indices read per
//!   query token.
//!
//! [`BlockMask`] classifies fixed-size blocks of the `L x L` grid as Empty,
//! Partial, or Full so attention can skip Empty blocks entirely and bypass
//! per-element predicate checks on Full blocks.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Doc/response ID assigned to padding tokens. Matches no real ID, so padding
/// is isolated from every document.
pub const PAD_ID: i64 = -1;

/// Per-batch index arrays consumed by the mask predicates.
///
/// `row_chosen_start`/`row_rejected_start` hold one index per row for the
/// non-packed prefix-sharing predicate. `chosen_start`/`rejected_start` are
/// dense per-token arrays for the packed variant, which reads them at the
/// query token.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskInputs {
    pub batch_size: usize,
    pub seq_len: usize,
    pub row_chosen_start: Vec<usize>,
    pub row_rejected_start: Vec<usize>,
    pub chosen_start: Vec<Vec<usize>>,
    pub rejected_start: Vec<Vec<usize>>,
    pub doc_ids: Vec<Vec<i64>>,
    pub response_ids: Vec<Vec<i64>>,
}

impl MaskInputs {
    /// Inputs for a batch where every token belongs to one document per row
    /// and no span bookkeeping is needed (plain causal attention).
    pub fn causal_only(batch_size: usize, seq_len: usize) -> Self {
        Self {
            batch_size,
            seq_len,
            row_chosen_start: vec![0; batch_size],
            row_rejected_start: vec![0; batch_size],
            chosen_start: vec![vec![0; seq_len]; batch_size],
            rejected_start: vec![vec![0; seq_len]; batch_size],
            doc_ids: vec![vec![0; seq_len]; batch_size],
            response_ids: vec![vec![0; seq_len]; batch_size],
        }
    }
}

/// Standard causal mask: a query sees keys at or before its own index.
#[inline(always)]
pub fn causal(q: usize, kv: usize) -> bool {
    kv <= q
}

/// Prefix-sharing mask for single-sample rows.
///
/// Causal, minus the region where a rejected-span query would attend a
/// chosen-span key. Start indices are per row.
#[inline(always)]
pub fn prefix_sharing_mask(b: usize, q: usize, kv: usize, inputs: &MaskInputs) -> bool {
    let chosen_ind = inputs.row_chosen_start[b];
    let rejected_ind = inputs.row_rejected_start[b];
    let dpo_mask = !(rejected_ind <= q && chosen_ind <= kv && kv < rejected_ind);
    causal(q, kv) && dpo_mask
}

/// Packed-baseline mask: causal plus response-ID equality.
#[inline(always)]
pub fn packed_baseline_mask(b: usize, q: usize, kv: usize, inputs: &MaskInputs) -> bool {
    let resp = &inputs.response_ids[b];
    causal(q, kv) && resp[q] == resp[kv]
}

/// Packed prefix-sharing mask: causal plus document-ID equality plus the
/// rejected-to-chosen exclusion, with start indices read at the query token.
#[inline(always)]
pub fn packed_prefix_mask(b: usize, q: usize, kv: usize, inputs: &MaskInputs) -> bool {
    let docs = &inputs.doc_ids[b];
    let chosen_ind = inputs.chosen_start[b][q];
    let rejected_ind = inputs.rejected_start[b][q];
    let dpo_mask = !(rejected_ind <= q && chosen_ind <= kv && kv < rejected_ind);
    causal(q, kv) && docs[q] == docs[kv] && dpo_mask
}

/// Which predicate a batch uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MaskKind {
    /// Plain causal attention (unpacked paired rows).
    Causal,
    /// Prefix-shared single-sample rows.
    PrefixSharing,
    /// Packed paired rows keyed by response IDs.
    PackedBaseline,
    /// Packed prefix-shared rows keyed by document IDs.
    PackedPrefix,
}

/// A mask predicate bound to its per-batch inputs.
#[derive(Debug, Clone)]
pub struct MaskSpec {
    pub kind: MaskKind,
    pub inputs: MaskInputs,
}

impl MaskSpec {
    pub fn new(kind: MaskKind, inputs: MaskInputs) -> Self {
        Self { kind, inputs }
    }

    /// Evaluate the predicate at (batch row, query index, key index).
    #[inline(always)]
    pub fn allowed(&self, b: usize, q: usize, kv: usize) -> bool {
        match self.kind {
            MaskKind::Causal => causal(q, kv),
            MaskKind::PrefixSharing => prefix_sharing_mask(b, q, kv, &self.inputs),
            MaskKind::PackedBaseline => packed_baseline_mask(b, q, kv, &self.inputs),
            MaskKind::PackedPrefix => packed_prefix_mask(b, q, kv, &self.inputs),
        }
    }

    pub fn batch_size(&self) -> usize {
        self.inputs.batch_size
    }

    pub fn seq_len(&self) -> usize {
        self.inputs.seq_len
    }
}

/// Block classification over the attention grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BlockClass {
    /// Predicate false everywhere in the block: skipped outright.
    Empty,
    /// Mixed: the predicate is evaluated per element at attention time.
    Partial,
    /// Predicate true everywhere: attention runs without predicate checks.
    Full,
}

/// Block-granular classification of a mask predicate, one grid per batch row.
///
/// Rebuilt fresh for every mini-batch; nothing is cached across steps.
#[derive(Debug, Clone)]
pub struct BlockMask {
    pub block_size: usize,
    pub batch_size: usize,
    pub seq_len: usize,
    pub num_q_blocks: usize,
    pub num_kv_blocks: usize,
    grid: Vec<BlockClass>,
    spec: MaskSpec,
}

impl BlockMask {
    /// Classify every block of `spec` by enumerating the predicate over the
    /// in-range (q, kv) pairs. Ragged edge blocks are classified over their
    /// valid region only; out-of-range positions are treated as masked.
    pub fn build(spec: MaskSpec, block_size: usize) -> Result<Self> {
        if block_size == 0 {
            return Err(Error::Config("block_size must be >= 1".into()));
        }
        let batch_size = spec.batch_size();
        let seq_len = spec.seq_len();
        let num_q_blocks = seq_len.div_ceil(block_size);
        let num_kv_blocks = seq_len.div_ceil(block_size);
        let mut grid = Vec::with_capacity(batch_size * num_q_blocks * num_kv_blocks);
        for b in 0..batch_size {
            for qb in 0..num_q_blocks {
                let q_lo = qb * block_size;
                let q_hi = (q_lo + block_size).min(seq_len);
                for kvb in 0..num_kv_blocks {
                    let kv_lo = kvb * block_size;
                    let kv_hi = (kv_lo + block_size).min(seq_len);
                    grid.push(classify_block(&spec, b, q_lo..q_hi, kv_lo..kv_hi));
                }
            }
        }
        Ok(Self {
            block_size,
            batch_size,
            seq_len,
            num_q_blocks,
            num_kv_blocks,
            grid,
            spec,
        })
    }

    pub fn spec(&self) -> &MaskSpec {
        &self.spec
    }

    #[inline(always)]
    pub fn class(&self, b: usize, q_block: usize, kv_block: usize) -> BlockClass {
        self.grid[(b * self.num_q_blocks + q_block) * self.num_kv_blocks + kv_block]
    }

    /// The mask value the block-sparse path realizes at (b, q, kv): false in
    /// Empty blocks, true in Full blocks, the raw predicate in Partial blocks.
    pub fn effective_allowed(&self, b: usize, q: usize, kv: usize) -> bool {
        match self.class(b, q / self.block_size, kv / self.block_size) {
            BlockClass::Empty => false,
            BlockClass::Full => true,
            BlockClass::Partial => self.spec.allowed(b, q, kv),
        }
    }

    /// Test hook: forces every block to Full so attention ignores the mask.
    /// Used as a negative control by `verify`.
    pub fn corrupt_all_full(&mut self) {
        for class in self.grid.iter_mut() {
            *class = BlockClass::Full;
        }
    }

    /// Debug form: per batch row, a grid of "E"/"P"/"F" strings.
    pub fn to_debug_grid(&self) -> BlockMaskDebug {
        let mut batches = Vec::with_capacity(self.batch_size);
        for b in 0..self.batch_size {
            let mut rows = Vec::with_capacity(self.num_q_blocks);
            for qb in 0..self.num_q_blocks {
                let mut row = Vec::with_capacity(self.num_kv_blocks);
                for kvb in 0..self.num_kv_blocks {
                    row.push(
                        match self.class(b, qb, kvb) {
                            BlockClass::Empty => "E",
                            BlockClass::Partial => "P",
                            BlockClass::Full => "F",
                        }
                        .to_string(),
                    );
                }
                rows.push(row);
            }
            batches.push(rows);
        }
        BlockMaskDebug {
            block_size: self.block_size,
            seq_len: self.seq_len,
            grid: batches,
        }
    }
}

fn classify_block(
    spec: &MaskSpec,
    b: usize,
    q_range: std::ops::Range<usize>,
    kv_range: std::ops::Range<usize>,
) -> BlockClass {
    let mut any_true = false;
    let mut any_false = false;
    for q in q_range.clone() {
        for kv in kv_range.clone() {
            if spec.allowed(b, q, kv) {
                any_true = true;
            } else {
                any_false = true;
            }
            if any_true && any_false {
                return BlockClass::Partial;
            }
        }
    }
    if any_true {
        BlockClass::Full
    } else {
        BlockClass::Empty
    }
}

/// JSON-serializable view of a block mask, for `verify --dump-mask`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BlockMaskDebug {
    pub block_size: usize,
    pub seq_len: usize,
    /// `grid[b][q_block][kv_block]` in {"E", "P", "F"}.
    pub grid: Vec<Vec<Vec<String>>>,
}

/// Block-count fractions plus the fraction of attention work skipped.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlockMaskStats {
    pub empty_fraction: f64,
    pub partial_fraction: f64,
    pub full_fraction: f64,
    /// Area-weighted share of (q, kv) pairs inside Empty blocks: the fraction
    /// of dense attention FLOPs the sparse path never touches.
    pub skipped_flop_fraction: f64,
}

/// Fractions of Empty/Partial/Full blocks across all batch rows.
pub fn block_mask_stats(mask: &BlockMask) -> BlockMaskStats {
    let mut counts = [0usize; 3];
    let mut skipped_area = 0usize;
    let mut total_area = 0usize;
    for b in 0..mask.batch_size {
        for qb in 0..mask.num_q_blocks {
            let q_lo = qb * mask.block_size;
            let q_span = (q_lo + mask.block_size).min(mask.seq_len) - q_lo;
            for kvb in 0..mask.num_kv_blocks {
                let kv_lo = kvb * mask.block_size;
                let kv_span = (kv_lo + mask.block_size).min(mask.seq_len) - kv_lo;
                let area = q_span * kv_span;
                total_area += area;
                match mask.class(b, qb, kvb) {
                    BlockClass::Empty => {
                        counts[0] += 1;
                        skipped_area += area;
                    }
                    BlockClass::Partial => counts[1] += 1,
                    BlockClass::Full => counts[2] += 1,
                }
            }
        }
    }
    let total = (counts[0] + counts[1] + counts[2]) as f64;
    BlockMaskStats {
        empty_fraction: counts[0] as f64 / total,
        partial_fraction: counts[1] as f64 / total,
        full_fraction: counts[2] as f64 / total,
        skipped_flop_fraction: skipped_area as f64 / total_area as f64,
    }
}
