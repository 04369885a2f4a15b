//! Sequence layouts for paired preference data.
//!
//! A [`PreferenceSample`] can be materialized two ways:
//!
//! * paired — two rows, `prompt||chosen` and `prompt||rejected`, each with
//!   positions `0..len-1`;
//! * prefix-shared — one row `prompt||chosen||rejected` where the rejected
//!   span's position IDs restart at the prompt length, so every token carries
//!   the same position it has in its paired row.
//!
//! Both save the same per-completion log-probs once masking is applied; the
//! shared form just stops paying for the prompt twice.

pub mod dataset;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masks::{MaskInputs, MaskKind, MaskSpec, PAD_ID};

/// One preference pair: a shared prompt with a chosen and a rejected
/// completion, all pre-tokenized.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreferenceSample {
    pub prompt: Vec<u32>,
    pub chosen: Vec<u32>,
    pub rejected: Vec<u32>,
}

impl PreferenceSample {
    /// Both completions must be non-empty; the prompt may be empty.
    pub fn new(prompt: Vec<u32>, chosen: Vec<u32>, rejected: Vec<u32>) -> Result<Self> {
        if chosen.is_empty() || rejected.is_empty() {
            return Err(Error::Data("completions must be non-empty".into()));
        }
        Ok(Self {
            prompt,
            chosen,
            rejected,
        })
    }

    pub fn prompt_len(&self) -> usize {
        self.prompt.len()
    }

    /// Token count under the paired format: `2p + c1 + c2`.
    pub fn paired_tokens(&self) -> usize {
        2 * self.prompt.len() + self.chosen.len() + self.rejected.len()
    }

    /// Token count under the prefix-shared format: `p + c1 + c2`.
    pub fn shared_tokens(&self) -> usize {
        self.prompt.len() + self.chosen.len() + self.rejected.len()
    }

    fn validate(&self) -> Result<()> {
        if self.chosen.is_empty() || self.rejected.is_empty() {
            return Err(Error::Data("completions must be non-empty".into()));
        }
        Ok(())
    }
}

/// Which of the four batch formats a row belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayoutKind {
    PairedRow,
    SharedRow,
    PackedPairedRow,
    PackedSharedRow,
}

impl LayoutKind {
    pub fn mask_kind(self) -> MaskKind {
        match self {
            LayoutKind::PairedRow => MaskKind::Causal,
            LayoutKind::SharedRow => MaskKind::PrefixSharing,
            LayoutKind::PackedPairedRow => MaskKind::PackedBaseline,
            LayoutKind::PackedSharedRow => MaskKind::PackedPrefix,
        }
    }

    pub fn is_packed(self) -> bool {
        matches!(
            self,
            LayoutKind::PackedPairedRow | LayoutKind::PackedSharedRow
        )
    }
}

/// Which completion a token or target belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Side {
    Chosen,
    Rejected,
}

/// Span structure of one packing unit inside a row.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnitSpans {
    /// `prompt||chosen||rejected`; both starts are absolute row indices.
    Shared {
        chosen_start: usize,
        rejected_start: usize,
    },
    /// `prompt||completion` carrying one side of a sample.
    Single { side: Side, completion_start: usize },
}

/// One packing unit: a contiguous token span with its sample provenance.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RowUnit {
    pub sample_index: usize,
    pub doc_id: i64,
    pub start: usize,
    pub end: usize,
    pub spans: UnitSpans,
}

/// A materialized batch row.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceLayout {
    pub kind: LayoutKind,
    pub tokens: Vec<u32>,
    pub position_ids: Vec<usize>,
    pub doc_ids: Vec<i64>,
    pub loss_mask_chosen: Vec<bool>,
    pub loss_mask_rejected: Vec<bool>,
    pub units: Vec<RowUnit>,
}

impl SequenceLayout {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    fn single_shared_unit(&self) -> &RowUnit {
        debug_assert_eq!(self.units.len(), 1);
        &self.units[0]
    }

    /// Chosen-span start of a single-sample shared row.
    pub fn chosen_start(&self) -> usize {
        match self.single_shared_unit().spans {
            UnitSpans::Shared { chosen_start, .. } => chosen_start,
            UnitSpans::Single {
                completion_start, ..
            } => completion_start,
        }
    }

    /// Rejected-span start of a single-sample shared row.
    pub fn rejected_start(&self) -> usize {
        match self.single_shared_unit().spans {
            UnitSpans::Shared { rejected_start, .. } => rejected_start,
            UnitSpans::Single { .. } => self.len(),
        }
    }

    /// Recover the original sample from a single-sample shared row.
    pub fn to_sample(&self) -> Result<PreferenceSample> {
        if self.kind != LayoutKind::SharedRow || self.units.len() != 1 {
            return Err(Error::Data(
                "to_sample requires a single-sample shared row".into(),
            ));
        }
        let cs = self.chosen_start();
        let rs = self.rejected_start();
        PreferenceSample::new(
            self.tokens[..cs].to_vec(),
            self.tokens[cs..rs].to_vec(),
            self.tokens[rs..].to_vec(),
        )
    }
}

/// Baseline format: two full rows per sample, prompt repeated in each.
pub fn to_paired(sample: &PreferenceSample, sample_index: usize) -> Result<[SequenceLayout; 2]> {
    sample.validate()?;
    Ok([
        paired_row(sample, sample_index, Side::Chosen),
        paired_row(sample, sample_index, Side::Rejected),
    ])
}

fn paired_row(sample: &PreferenceSample, sample_index: usize, side: Side) -> SequenceLayout {
    let completion = match side {
        Side::Chosen => &sample.chosen,
        Side::Rejected => &sample.rejected,
    };
    let p = sample.prompt.len();
    let len = p + completion.len();
    let mut tokens = Vec::with_capacity(len);
    tokens.extend_from_slice(&sample.prompt);
    tokens.extend_from_slice(completion);
    let mut loss_mask_chosen = vec![false; len];
    let mut loss_mask_rejected = vec![false; len];
    let loss = match side {
        Side::Chosen => &mut loss_mask_chosen,
        Side::Rejected => &mut loss_mask_rejected,
    };
    for flag in loss.iter_mut().skip(p) {
        *flag = true;
    }
    SequenceLayout {
        kind: LayoutKind::PairedRow,
        tokens,
        position_ids: (0..len).collect(),
        doc_ids: vec![0; len],
        loss_mask_chosen,
        loss_mask_rejected,
        units: vec![RowUnit {
            sample_index,
            doc_id: 0,
            start: 0,
            end: len,
            spans: UnitSpans::Single {
                side,
                completion_start: p,
            },
        }],
    }
}

/// Prefix-shared format: one row `prompt||chosen||rejected`. The rejected
/// span's position IDs restart at the prompt length so every token keeps the
/// position it has in its paired-format row.
pub fn to_shared(sample: &PreferenceSample, sample_index: usize) -> Result<SequenceLayout> {
    sample.validate()?;
    let p = sample.prompt.len();
    let c1 = sample.chosen.len();
    let c2 = sample.rejected.len();
    let len = p + c1 + c2;
    let mut tokens = Vec::with_capacity(len);
    tokens.extend_from_slice(&sample.prompt);
    tokens.extend_from_slice(&sample.chosen);
    tokens.extend_from_slice(&sample.rejected);
    let mut position_ids = Vec::with_capacity(len);
    position_ids.extend(0..p + c1);
    position_ids.extend(p..p + c2);
    let mut loss_mask_chosen = vec![false; len];
    let mut loss_mask_rejected = vec![false; len];
    for flag in loss_mask_chosen[p..p + c1].iter_mut() {
        *flag = true;
    }
    for flag in loss_mask_rejected[p + c1..].iter_mut() {
        *flag = true;
    }
    Ok(SequenceLayout {
        kind: LayoutKind::SharedRow,
        tokens,
        position_ids,
        doc_ids: vec![0; len],
        loss_mask_chosen,
        loss_mask_rejected,
        units: vec![RowUnit {
            sample_index,
            doc_id: 0,
            start: 0,
            end: len,
            spans: UnitSpans::Shared {
                chosen_start: p,
                rejected_start: p + c1,
            },
        }],
    })
}

/// One next-token scoring target: the logit at `source_index` scores
/// `target` for (`sample_index`, `side`).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TargetRecord {
    pub source_index: usize,
    pub position_id: usize,
    pub target: u32,
    pub sample_index: usize,
    pub side: Side,
}

/// All scoring targets of one row.
///
/// `per_position[i]` is the shifted next-token view: the completion token the
/// logit at `i` scores, or `None` when `i + 1` crosses a response or document
/// boundary. `records` is the full gather list the loss uses; it additionally
/// scores each completion's first token from the final prompt position, so a
/// shared row gathers that position twice (once per completion).
#[derive(Debug, Clone, PartialEq)]
pub struct TargetSet {
    pub records: Vec<TargetRecord>,
    pub per_position: Vec<Option<(u32, Side)>>,
}

impl TargetSet {
    pub fn valid_count(&self) -> usize {
        self.records.len()
    }
}

/// Compute next-token targets for every completion token of every unit.
pub fn next_token_targets(layout: &SequenceLayout) -> TargetSet {
    let mut records = Vec::new();
    let mut per_position = vec![None; layout.len()];
    for unit in &layout.units {
        match unit.spans {
            UnitSpans::Shared {
                chosen_start,
                rejected_start,
            } => {
                push_span_targets(
                    layout,
                    unit,
                    Side::Chosen,
                    unit.start,
                    chosen_start,
                    rejected_start,
                    &mut records,
                    &mut per_position,
                );
                push_span_targets(
                    layout,
                    unit,
                    Side::Rejected,
                    unit.start,
                    rejected_start,
                    unit.end,
                    &mut records,
                    &mut per_position,
                );
            }
            UnitSpans::Single {
                side,
                completion_start,
            } => {
                push_span_targets(
                    layout,
                    unit,
                    side,
                    unit.start,
                    completion_start,
                    unit.end,
                    &mut records,
                    &mut per_position,
                );
            }
        }
    }
    TargetSet {
        records,
        per_position,
    }
}

/// Targets for one completion span `[span_start, span_end)` whose prompt ends
/// at `span_start`. The first completion token is scored from the final
/// prompt position (`prompt_start..span_start` non-empty); with an empty
/// prompt there is no conditioning position, so scoring starts inside the
/// span.
#[allow(clippy::too_many_arguments)]
fn push_span_targets(
    layout: &SequenceLayout,
    unit: &RowUnit,
    side: Side,
    prompt_start: usize,
    span_start: usize,
    span_end: usize,
    records: &mut Vec<TargetRecord>,
    per_position: &mut [Option<(u32, Side)>],
) {
    debug_assert!(span_start <= span_end);
    let prompt_source = if span_start > prompt_start {
        // For the rejected span of a shared unit the conditioning position is
        // the final *prompt* token, not the token just before the span.
        let source = match unit.spans {
            UnitSpans::Shared { chosen_start, .. } => chosen_start.checked_sub(1),
            UnitSpans::Single { .. } => Some(span_start - 1),
        };
        source.filter(|&s| s >= unit.start)
    } else {
        None
    };
    if span_start == span_end {
        return;
    }
    if let Some(source) = prompt_source {
        records.push(TargetRecord {
            source_index: source,
            position_id: layout.position_ids[source],
            target: layout.tokens[span_start],
            sample_index: unit.sample_index,
            side,
        });
        if per_position[source].is_none() {
            per_position[source] = Some((layout.tokens[span_start], side));
        }
    }
    #[allow(clippy::needless_range_loop)]
    for i in span_start..span_end.saturating_sub(1) {
        let record = TargetRecord {
            source_index: i,
            position_id: layout.position_ids[i],
            target: layout.tokens[i + 1],
            sample_index: unit.sample_index,
            side,
        };
        records.push(record);
        per_position[i] = Some((layout.tokens[i + 1], side));
    }
}

/// A collated batch: padded arrays plus the mask inputs its format needs.
#[derive(Debug, Clone)]
pub struct Batch {
    pub kind: LayoutKind,
    pub fixed_len: usize,
    pub tokens: Vec<Vec<u32>>,
    pub position_ids: Vec<Vec<usize>>,
    pub loss_mask_chosen: Vec<Vec<bool>>,
    pub loss_mask_rejected: Vec<Vec<bool>>,
    pub targets: Vec<TargetSet>,
    pub mask_spec: MaskSpec,
    pub rows: Vec<SequenceLayout>,
    /// Non-padding token count.
    pub real_tokens: usize,
    /// Distinct sample indices present, ascending.
    pub sample_indices: Vec<usize>,
}

impl Batch {
    pub fn batch_size(&self) -> usize {
        self.tokens.len()
    }
}

/// Right-pad rows to `fixed_len` and assemble the mask inputs for the batch's
/// format. Padding is excluded from loss and, via `doc_id = -1`, from
/// attention.
pub fn collate(rows: Vec<SequenceLayout>, pad_token: u32, fixed_len: usize) -> Result<Batch> {
    if rows.is_empty() {
        return Err(Error::Data("cannot collate an empty batch".into()));
    }
    let kind = rows[0].kind;
    if rows.iter().any(|r| r.kind != kind) {
        return Err(Error::Data("mixed layout kinds in one batch".into()));
    }
    let batch_size = rows.len();
    let mut tokens = Vec::with_capacity(batch_size);
    let mut position_ids = Vec::with_capacity(batch_size);
    let mut loss_mask_chosen = Vec::with_capacity(batch_size);
    let mut loss_mask_rejected = Vec::with_capacity(batch_size);
    let mut targets = Vec::with_capacity(batch_size);
    let mut real_tokens = 0;
    let mut sample_indices = Vec::new();

    let mut inputs = MaskInputs {
        batch_size,
        seq_len: fixed_len,
        row_chosen_start: vec![0; batch_size],
        row_rejected_start: vec![0; batch_size],
        chosen_start: vec![vec![0; fixed_len]; batch_size],
        rejected_start: vec![vec![0; fixed_len]; batch_size],
        doc_ids: vec![vec![PAD_ID; fixed_len]; batch_size],
        response_ids: vec![vec![PAD_ID; fixed_len]; batch_size],
    };

    for (b, row) in rows.iter().enumerate() {
        let len = row.len();
        if len > fixed_len {
            return Err(Error::RowOverflow {
                row_len: len,
                fixed_len,
            });
        }
        real_tokens += len;

        let mut toks = row.tokens.clone();
        toks.resize(fixed_len, pad_token);
        tokens.push(toks);

        let mut pos = row.position_ids.clone();
        pos.resize(fixed_len, 0);
        position_ids.push(pos);

        let mut lc = row.loss_mask_chosen.clone();
        lc.resize(fixed_len, false);
        loss_mask_chosen.push(lc);
        let mut lr = row.loss_mask_rejected.clone();
        lr.resize(fixed_len, false);
        loss_mask_rejected.push(lr);

        targets.push(next_token_targets(row));

        inputs.doc_ids[b][..len].copy_from_slice(&row.doc_ids);
        for (rid, unit) in row.units.iter().enumerate() {
            sample_indices.push(unit.sample_index);
            match unit.spans {
                UnitSpans::Shared {
                    chosen_start,
                    rejected_start,
                } => {
                    for t in unit.start..unit.end {
                        inputs.chosen_start[b][t] = chosen_start;
                        inputs.rejected_start[b][t] = rejected_start;
                        inputs.response_ids[b][t] = unit.doc_id;
                    }
                }
                UnitSpans::Single { .. } => {
                    for t in unit.start..unit.end {
                        inputs.response_ids[b][t] = rid as i64;
                    }
                }
            }
        }
        if kind == LayoutKind::SharedRow {
            inputs.row_chosen_start[b] = row.chosen_start();
            inputs.row_rejected_start[b] = row.rejected_start();
        }
    }

    sample_indices.sort_unstable();
    sample_indices.dedup();

    Ok(Batch {
        kind,
        fixed_len,
        tokens,
        position_ids,
        loss_mask_chosen,
        loss_mask_rejected,
        targets,
        mask_spec: MaskSpec::new(kind.mask_kind(), inputs),
        rows,
        real_tokens,
        sample_indices,
    })
}

/// Apply the configured length limits: prompts are truncated from the left
/// (most recent context survives); a completion that cannot fit the sequence
/// budget is an error, since the loss needs completions intact.
pub fn enforce_limits(
    sample: &PreferenceSample,
    sample_index: usize,
    max_prompt_len: Option<usize>,
    max_seq_len: Option<usize>,
    shared_format: bool,
) -> Result<PreferenceSample> {
    sample.validate()?;
    let mut prompt = sample.prompt.clone();
    if let Some(limit) = max_prompt_len {
        if prompt.len() > limit {
            prompt = prompt[prompt.len() - limit..].to_vec();
        }
    }
    if let Some(limit) = max_seq_len {
        let needed = if shared_format {
            prompt.len() + sample.chosen.len() + sample.rejected.len()
        } else {
            prompt.len() + sample.chosen.len().max(sample.rejected.len())
        };
        if needed > limit {
            return Err(Error::Data(format!(
                "sample {sample_index}: completions too long for max_seq_len {limit} \
                 (row needs {needed} tokens after prompt truncation)"
            )));
        }
    }
    PreferenceSample::new(prompt, sample.chosen.clone(), sample.rejected.clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_3_2_3() -> PreferenceSample {
        PreferenceSample::new(vec![10, 11, 12], vec![20, 21], vec![30, 31, 32]).unwrap()
    }

    #[test]
    fn paired_rows_concatenate() {
        let [row1, row2] = to_paired(&sample_3_2_3(), 0).unwrap();
        assert_eq!(row1.len(), 5);
        assert_eq!(row2.len(), 6);
        assert_eq!(row2.position_ids, vec![0, 1, 2, 3, 4, 5]);
        assert_eq!(row1.len() + row2.len(), 11); // 2p + c1 + c2
    }

    #[test]
    fn paired_loss_masks_cover_completions() {
        let [row1, row2] = to_paired(&sample_3_2_3(), 0).unwrap();
        assert_eq!(row1.loss_mask_chosen, vec![false, false, false, true, true]);
        assert!(row1.loss_mask_rejected.iter().all(|&m| !m));
        assert_eq!(
            row2.loss_mask_rejected,
            vec![false, false, false, true, true, true]
        );
    }

    #[test]
    fn shared_row_positions_restart() {
        let row = to_shared(&sample_3_2_3(), 0).unwrap();
        assert_eq!(row.position_ids, vec![0, 1, 2, 3, 4, 3, 4, 5]);
        assert_eq!(row.chosen_start(), 3);
        assert_eq!(row.rejected_start(), 5);
        assert_eq!(row.len(), 8); // p + c1 + c2: saves p tokens vs paired
    }

    #[test]
    fn empty_completion_rejected() {
        let bad = PreferenceSample {
            prompt: vec![1],
            chosen: vec![],
            rejected: vec![2],
        };
        assert!(to_shared(&bad, 0).is_err());
        assert!(to_paired(&bad, 0).is_err());
    }

    #[test]
    fn shared_round_trip() {
        let sample = sample_3_2_3();
        let row = to_shared(&sample, 0).unwrap();
        assert_eq!(row.to_sample().unwrap(), sample);
    }

    #[test]
    fn shared_targets_count_and_boundary() {
        let row = to_shared(&sample_3_2_3(), 0).unwrap();
        let targets = next_token_targets(&row);
        let chosen = targets
            .records
            .iter()
            .filter(|r| r.side == Side::Chosen)
            .count();
        let rejected = targets
            .records
            .iter()
            .filter(|r| r.side == Side::Rejected)
            .count();
        assert_eq!(chosen, 2);
        assert_eq!(rejected, 3);
        // Last chosen token's next row index belongs to rejected: invalid.
        assert_eq!(targets.per_position[4], None);
        // Final prompt position scores the first chosen token.
        assert_eq!(targets.per_position[2], Some((20, Side::Chosen)));
    }

    #[test]
    fn paired_targets_match_shared_counts() {
        let sample = sample_3_2_3();
        let [row1, row2] = to_paired(&sample, 0).unwrap();
        let count =
            next_token_targets(&row1).valid_count() + next_token_targets(&row2).valid_count();
        let shared = next_token_targets(&to_shared(&sample, 0).unwrap()).valid_count();
        assert_eq!(count, 5);
        assert_eq!(shared, 5);
    }

    #[test]
    fn target_parity_between_formats() {
        let sample = sample_3_2_3();
        let mut paired: Vec<(u32, usize, Side)> = Vec::new();
        for row in to_paired(&sample, 0).unwrap() {
            paired.extend(
                next_token_targets(&row)
                    .records
                    .iter()
                    .map(|r| (r.target, r.position_id, r.side)),
            );
        }
        let mut shared: Vec<(u32, usize, Side)> =
            next_token_targets(&to_shared(&sample, 0).unwrap())
                .records
                .iter()
                .map(|r| (r.target, r.position_id, r.side))
                .collect();
        paired.sort_unstable();
        shared.sort_unstable();
        assert_eq!(paired, shared);
    }

    #[test]
    fn empty_prompt_skips_first_token_scoring() {
        let sample = PreferenceSample::new(vec![], vec![1, 2], vec![3, 4, 5]).unwrap();
        let shared = next_token_targets(&to_shared(&sample, 0).unwrap());
        // c1 - 1 chosen targets, c2 - 1 rejected targets.
        assert_eq!(shared.valid_count(), 1 + 2);
    }

    #[test]
    fn collate_exact_fit_has_no_padding() {
        let row = to_shared(&sample_3_2_3(), 0).unwrap();
        let batch = collate(vec![row], 0, 8).unwrap();
        assert_eq!(batch.real_tokens, 8);
        assert_eq!(batch.mask_spec.inputs.doc_ids[0], vec![0; 8]);
    }

    #[test]
    fn collate_pads_and_isolates() {
        let long = to_shared(&sample_3_2_3(), 0).unwrap();
        let short = to_shared(
            &PreferenceSample::new(vec![1], vec![2, 3], vec![4, 5]).unwrap(),
            1,
        )
        .unwrap();
        let batch = collate(vec![long, short], 99, 8).unwrap();
        assert_eq!(batch.tokens[1][5..], [99, 99, 99]);
        assert_eq!(batch.mask_spec.inputs.doc_ids[1][5..], [PAD_ID; 3]);
        assert!(!batch.loss_mask_chosen[1][5]);
        assert_eq!(batch.sample_indices, vec![0, 1]);
    }

    #[test]
    fn collate_overflow_errors() {
        let row = to_shared(&sample_3_2_3(), 0).unwrap();
        let err = collate(vec![row], 0, 7);
        assert!(matches!(
            err,
            Err(Error::RowOverflow {
                row_len: 8,
                fixed_len: 7
            })
        ));
    }

    #[test]
    fn enforce_limits_truncates_prompt_from_left() {
        let sample = sample_3_2_3();
        let trimmed = enforce_limits(&sample, 0, Some(2), None, true).unwrap();
        assert_eq!(trimmed.prompt, vec![11, 12]);
        assert_eq!(trimmed.chosen, sample.chosen);
    }

    #[test]
    fn enforce_limits_rejects_oversized_completion() {
        let sample = sample_3_2_3();
        assert!(enforce_limits(&sample, 0, None, Some(7), true).is_err());
        assert!(enforce_limits(&sample, 0, None, Some(8), true).is_ok());
        // Paired rows only need p + max(c1, c2).
        assert!(enforce_limits(&sample, 0, None, Some(6), false).is_ok());
    }
}
