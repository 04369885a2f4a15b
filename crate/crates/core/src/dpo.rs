//! DPO objective and training steps.
//!
//! The loss for one sample is `-log sigmoid(beta * ((pc - rc) - (pr - rr)))`
//! where `pc`/`pr` are the policy's summed completion log-probs and `rc`/`rr`
//! the frozen reference model's. Reference values are precomputed once and
//! cached per sample; the reference is frozen, so the cache is exact.

use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layout::{collate, to_paired, to_shared, Batch, PreferenceSample, Side, TargetRecord};
use crate::masks::BlockMask;
use crate::model::{backward, forward, ModelParams, Optimizer};
use crate::numerics::{sigmoid, softplus, Matrix};
use crate::packing::{materialize_packed, pack_dataset, unit_length, Format};
use crate::scalar::Scalar;

/// Summed completion log-probs of one sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairLogp {
    pub chosen: f64,
    pub rejected: f64,
}

/// Per-completion log-prob sums for every sample in a batch, keyed by sample
/// index.
pub fn completion_logprobs<S: Scalar>(
    logits: &[Matrix<S>],
    batch: &Batch,
) -> Result<BTreeMap<usize, PairLogp>> {
    if logits.len() != batch.batch_size() {
        return Err(Error::Shape(format!(
            "{} logit rows for a batch of {}",
            logits.len(),
            batch.batch_size()
        )));
    }
    let mut sums: BTreeMap<usize, (f64, f64, usize, usize)> = BTreeMap::new();
    for (row_logits, targets) in logits.iter().zip(&batch.targets) {
        for record in &targets.records {
            let logp = log_softmax_entry(row_logits.row(record.source_index), record.target)?;
            let entry = sums.entry(record.sample_index).or_insert((0.0, 0.0, 0, 0));
            match record.side {
                Side::Chosen => {
                    entry.0 += logp;
                    entry.2 += 1;
                }
                Side::Rejected => {
                    entry.1 += logp;
                    entry.3 += 1;
                }
            }
        }
    }
    let mut out = BTreeMap::new();
    for (sample, (chosen, rejected, n_chosen, n_rejected)) in sums {
        if n_chosen == 0 || n_rejected == 0 {
            return Err(Error::Data(format!(
                "sample {sample} has an empty valid-target set \
                 (chosen targets: {n_chosen}, rejected targets: {n_rejected})"
            )));
        }
        out.insert(sample, PairLogp { chosen, rejected });
    }
    if out.is_empty() {
        return Err(Error::Data("batch produced no scored samples".into()));
    }
    Ok(out)
}

fn log_softmax_entry<S: Scalar>(row: &[S], target: u32) -> Result<f64> {
    let target = target as usize;
    if target >= row.len() {
        return Err(Error::Shape(format!(
            "target id {target} outside vocab of {}",
            row.len()
        )));
    }
    let mut max = S::neg_infinity();
    for &x in row {
        if x > max {
            max = x;
        }
    }
    let mut sum = S::zero();
    for &x in row {
        sum = sum + (x - max).exp();
    }
    Ok(((row[target] - max) - sum.ln()).to_f64())
}

/// Loss, margins, and accuracy for one batch.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DpoBatchResult {
    pub sample_indices: Vec<usize>,
    pub policy_chosen: Vec<f64>,
    pub policy_rejected: Vec<f64>,
    pub ref_chosen: Vec<f64>,
    pub ref_rejected: Vec<f64>,
    /// `beta * ((pc - rc) - (pr - rr))` per sample.
    pub margins: Vec<f64>,
    /// Mean over samples of `-log sigmoid(margin)`.
    pub loss: f64,
    /// Fraction of samples with positive margin.
    pub accuracy: f64,
}

impl DpoBatchResult {
    pub fn mean_margin(&self) -> f64 {
        self.margins.iter().sum::<f64>() / self.margins.len() as f64
    }

    /// d loss / d (policy chosen logp) per sample; the rejected gradient is
    /// its negation.
    pub fn policy_grads(&self, beta: f64) -> Vec<f64> {
        let n = self.margins.len() as f64;
        self.margins
            .iter()
            .map(|&m| -beta * sigmoid(-m) / n)
            .collect()
    }
}

/// The DPO objective over per-sample policy and reference log-prob sums.
/// Gradients flow only to the policy terms; the reference is detached.
pub fn dpo_loss(
    policy_chosen: &[f64],
    policy_rejected: &[f64],
    ref_chosen: &[f64],
    ref_rejected: &[f64],
    sample_indices: &[usize],
    beta: f64,
) -> Result<DpoBatchResult> {
    let n = policy_chosen.len();
    if n == 0 {
        return Err(Error::Data("dpo_loss over zero samples".into()));
    }
    if [
        policy_rejected.len(),
        ref_chosen.len(),
        ref_rejected.len(),
        sample_indices.len(),
    ]
    .iter()
    .any(|&l| l != n)
    {
        return Err(Error::Shape("dpo_loss input lengths differ".into()));
    }
    if beta < 0.0 || !beta.is_finite() {
        return Err(Error::Config(format!(
            "beta must be finite and >= 0, got {beta}"
        )));
    }
    let mut margins = Vec::with_capacity(n);
    let mut loss = 0.0;
    let mut correct = 0usize;
    for i in 0..n {
        let values = [
            policy_chosen[i],
            policy_rejected[i],
            ref_chosen[i],
            ref_rejected[i],
        ];
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "log-probs of sample {}",
                sample_indices[i]
            )));
        }
        let margin =
            beta * ((policy_chosen[i] - ref_chosen[i]) - (policy_rejected[i] - ref_rejected[i]));
        loss += softplus(-margin);
        if margin > 0.0 {
            correct += 1;
        }
        margins.push(margin);
    }
    Ok(DpoBatchResult {
        sample_indices: sample_indices.to_vec(),
        policy_chosen: policy_chosen.to_vec(),
        policy_rejected: policy_rejected.to_vec(),
        ref_chosen: ref_chosen.to_vec(),
        ref_rejected: ref_rejected.to_vec(),
        margins,
        loss: loss / n as f64,
        accuracy: correct as f64 / n as f64,
    })
}

/// Cached reference log-probs, keyed by sample index.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct RefCache {
    values: BTreeMap<usize, PairLogp>,
}

impl RefCache {
    pub fn get(&self, sample_index: usize) -> Result<PairLogp> {
        self.values
            .get(&sample_index)
            .copied()
            .ok_or(Error::CacheMiss { sample_index })
    }

    pub fn insert(&mut self, sample_index: usize, logp: PairLogp) {
        self.values.insert(sample_index, logp);
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Run the frozen reference model over prepared batches and cache the
/// per-sample log-prob sums.
pub fn reference_logprobs<S: Scalar>(
    ref_params: &ModelParams<S>,
    batches: &[Batch],
    block_size: usize,
) -> Result<RefCache> {
    let mut cache = RefCache::default();
    for batch in batches {
        let mask = BlockMask::build(batch.mask_spec.clone(), block_size)?;
        let (logits, _) = forward(ref_params, &batch.tokens, &batch.position_ids, &mask)?;
        for (sample, logp) in completion_logprobs(&logits, batch)? {
            cache.insert(sample, logp);
        }
    }
    Ok(cache)
}

/// Where a training step's reference log-probs come from.
pub enum RefSource<'a, S> {
    /// Precomputed per-sample cache (the frozen reference makes this exact).
    Cache(&'a RefCache),
    /// Run the reference model's forward pass every step.
    Model(&'a ModelParams<S>),
}

/// Loss and parameter gradients for one batch, without updating anything.
pub fn loss_and_grads<S: Scalar>(
    policy: &ModelParams<S>,
    reference: &RefSource<'_, S>,
    batch: &Batch,
    beta: f64,
    block_size: usize,
) -> Result<(DpoBatchResult, ModelParams<S>)> {
    let mask = BlockMask::build(batch.mask_spec.clone(), block_size)?;
    let (logits, cache) = forward(policy, &batch.tokens, &batch.position_ids, &mask)?;
    let policy_logps = completion_logprobs(&logits, batch)?;

    let mut sample_indices = Vec::with_capacity(policy_logps.len());
    let mut pc = Vec::with_capacity(policy_logps.len());
    let mut pr = Vec::with_capacity(policy_logps.len());
    let mut rc = Vec::with_capacity(policy_logps.len());
    let mut rr = Vec::with_capacity(policy_logps.len());
    let ref_logps = match reference {
        RefSource::Cache(_) => None,
        RefSource::Model(ref_params) => {
            let (ref_logits, _) = forward(*ref_params, &batch.tokens, &batch.position_ids, &mask)?;
            Some(completion_logprobs(&ref_logits, batch)?)
        }
    };
    for (&sample, logp) in &policy_logps {
        let ref_pair = match reference {
            RefSource::Cache(cache) => cache.get(sample)?,
            RefSource::Model(_) => *ref_logps
                .as_ref()
                .expect("computed above")
                .get(&sample)
                .expect("same batch, same samples"),
        };
        sample_indices.push(sample);
        pc.push(logp.chosen);
        pr.push(logp.rejected);
        rc.push(ref_pair.chosen);
        rr.push(ref_pair.rejected);
    }
    let result = dpo_loss(&pc, &pr, &rc, &rr, &sample_indices, beta)?;

    let d_logits = loss_logit_grads(&logits, batch, &result, beta)?;
    let grads = backward(policy, &cache, &d_logits)?;
    Ok((result, grads))
}

/// One optimization step: forward, loss, backward, update.
pub fn train_step<S: Scalar>(
    policy: &mut ModelParams<S>,
    optimizer: &mut Optimizer<S>,
    reference: &RefSource<'_, S>,
    batch: &Batch,
    beta: f64,
    lr: f64,
    block_size: usize,
) -> Result<DpoBatchResult> {
    let (result, grads) = loss_and_grads(policy, reference, batch, beta, block_size)?;
    optimizer.apply(policy, &grads, lr)?;
    Ok(result)
}

/// Upstream gradient on the logits for the batch loss: each scored position
/// receives `coeff * (onehot(target) - softmax(logits_row))`, with the final
/// prompt position accumulating both completions' contributions.
fn loss_logit_grads<S: Scalar>(
    logits: &[Matrix<S>],
    batch: &Batch,
    result: &DpoBatchResult,
    beta: f64,
) -> Result<Vec<Matrix<S>>> {
    let chosen_coeff: BTreeMap<usize, f64> = result
        .sample_indices
        .iter()
        .copied()
        .zip(result.policy_grads(beta))
        .collect();
    let mut d_logits: Vec<Matrix<S>> = logits
        .iter()
        .map(|m| Matrix::zeros(m.rows(), m.cols()))
        .collect();
    for (b, targets) in batch.targets.iter().enumerate() {
        for record in &targets.records {
            let coeff = match record.side {
                Side::Chosen => chosen_coeff[&record.sample_index],
                Side::Rejected => -chosen_coeff[&record.sample_index],
            };
            accumulate_logp_grad(
                d_logits[b].row_mut(record.source_index),
                logits[b].row(record.source_index),
                record,
                coeff,
            );
        }
    }
    Ok(d_logits)
}

fn accumulate_logp_grad<S: Scalar>(
    d_row: &mut [S],
    logits_row: &[S],
    record: &TargetRecord,
    coeff: f64,
) {
    let coeff = S::from_f64(coeff);
    let mut max = S::neg_infinity();
    for &x in logits_row {
        if x > max {
            max = x;
        }
    }
    let mut sum = S::zero();
    for &x in logits_row {
        sum = sum + (x - max).exp();
    }
    for (i, (d, &x)) in d_row.iter_mut().zip(logits_row).enumerate() {
        let p = (x - max).exp() / sum;
        let indicator = if i == record.target as usize {
            S::one()
        } else {
            S::zero()
        };
        *d = *d + coeff * (indicator - p);
    }
}

/// Materialize batches for a run configuration.
///
/// Unpacked runs pad every row to the dataset-wide maximum row length for the
/// format; packed runs put one FFD bin per batch, padded to the plan
/// capacity (`bsz` times the longest unit).
pub fn build_batches(
    samples: &[PreferenceSample],
    format: Format,
    packing: bool,
    bsz: usize,
    pad_token: u32,
) -> Result<Vec<Batch>> {
    if samples.is_empty() {
        return Err(Error::Data(
            "cannot build batches from an empty dataset".into(),
        ));
    }
    if bsz == 0 {
        return Err(Error::Config("batch size must be >= 1".into()));
    }
    if packing {
        let plan = pack_dataset(samples, format, bsz)?;
        let rows = materialize_packed(&plan, samples, format)?;
        return rows
            .into_iter()
            .map(|row| collate(vec![row], pad_token, plan.capacity))
            .collect();
    }
    let fixed_len = samples
        .iter()
        .map(|s| match format {
            Format::Shared => s.shared_tokens(),
            Format::Paired => s.prompt.len() + s.chosen.len().max(s.rejected.len()),
        })
        .max()
        .expect("non-empty dataset");
    let mut batches = Vec::new();
    for (chunk_start, chunk) in samples.chunks(bsz).enumerate().map(|(i, c)| (i * bsz, c)) {
        let mut rows = Vec::new();
        for (offset, sample) in chunk.iter().enumerate() {
            let sample_index = chunk_start + offset;
            match format {
                Format::Shared => rows.push(to_shared(sample, sample_index)?),
                Format::Paired => rows.extend(to_paired(sample, sample_index)?),
            }
        }
        batches.push(collate(rows, pad_token, fixed_len)?);
    }
    Ok(batches)
}

/// Per-step metrics, one JSON line each.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub loss: f64,
    pub accuracy: f64,
    pub mean_margin: f64,
    pub tokens_processed: usize,
    pub samples_per_sec: f64,
}

/// Settings for [`run_training`].
pub struct TrainingRun<'a, S> {
    pub batches: &'a [Batch],
    pub reference: RefSource<'a, S>,
    pub beta: f64,
    pub lr: f64,
    pub steps: u64,
    pub block_size: usize,
    pub start_step: u64,
}

/// Drive `steps` optimization steps, cycling through the batches in order.
/// Returns one metrics record per step.
pub fn run_training<S: Scalar>(
    policy: &mut ModelParams<S>,
    optimizer: &mut Optimizer<S>,
    run: &TrainingRun<'_, S>,
    mut on_step: impl FnMut(&StepMetrics),
) -> Result<Vec<StepMetrics>> {
    if run.batches.is_empty() {
        return Err(Error::Data("no batches to train on".into()));
    }
    let mut metrics = Vec::with_capacity(run.steps as usize);
    for i in 0..run.steps {
        let batch = &run.batches[(i as usize) % run.batches.len()];
        let started = Instant::now();
        let result = train_step(
            policy,
            optimizer,
            &run.reference,
            batch,
            run.beta,
            run.lr,
            run.block_size,
        )?;
        let seconds = started.elapsed().as_secs_f64();
        let record = StepMetrics {
            step: run.start_step + i + 1,
            loss: result.loss,
            accuracy: result.accuracy,
            mean_margin: result.mean_margin(),
            tokens_processed: batch.real_tokens,
            samples_per_sec: result.sample_indices.len() as f64 / seconds.max(1e-12),
        };
        on_step(&record);
        metrics.push(record);
    }
    Ok(metrics)
}

/// Longest unit in the dataset under `format`; the padding target for
/// unpacked rows is the paired row maximum, not the unit length.
pub fn max_unit_length(samples: &[PreferenceSample], format: Format) -> usize {
    samples
        .iter()
        .map(|s| unit_length(s, format))
        .max()
        .unwrap_or(0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layout::LayoutKind;
    use crate::model::{init, ModelConfig};

    #[test]
    fn uniform_logits_give_uniform_logprobs() {
        // One sample, prompt 2 / chosen 3 / rejected 3, vocab 16, all logits
        // equal: each scored token contributes -ln 16.
        let sample = PreferenceSample::new(vec![0, 1], vec![2, 3, 4], vec![5, 6, 7]).unwrap();
        let batches = build_batches(&[sample], Format::Shared, false, 1, 0).unwrap();
        let batch = &batches[0];
        let vocab = 16;
        let logits = vec![Matrix::<f64>::zeros(batch.fixed_len, vocab)];
        let logps = completion_logprobs(&logits, batch).unwrap();
        let expect = -3.0 * (vocab as f64).ln();
        let pair = logps[&0];
        assert!((pair.chosen - expect).abs() < 1e-12);
        assert!((pair.rejected - expect).abs() < 1e-12);
    }

    #[test]
    fn beta_zero_loss_is_ln2() {
        let result = dpo_loss(
            &[1.0, -2.0],
            &[0.5, 3.0],
            &[0.0, 0.0],
            &[0.0, 0.0],
            &[0, 1],
            0.0,
        )
        .unwrap();
        assert!((result.loss - 2.0f64.ln()).abs() < 1e-15);
        assert_eq!(result.margins, vec![0.0, 0.0]);
    }

    #[test]
    fn dpo_loss_scalar_example() {
        // (policy - ref) diffs: chosen +1, rejected -1, beta 0.1 -> margin 0.2.
        let result = dpo_loss(&[1.0], &[-1.0], &[0.0], &[0.0], &[0], 0.1).unwrap();
        assert!((result.margins[0] - 0.2).abs() < 1e-15);
        assert!((result.loss - 0.59813887).abs() < 1e-7);
        assert_eq!(result.accuracy, 1.0);
    }

    #[test]
    fn swapping_sides_negates_margin() {
        let a = dpo_loss(&[2.0], &[1.0], &[0.3], &[0.1], &[0], 0.5).unwrap();
        let b = dpo_loss(&[1.0], &[2.0], &[0.1], &[0.3], &[0], 0.5).unwrap();
        assert!((a.margins[0] + b.margins[0]).abs() < 1e-15);
        let m = a.margins[0];
        assert!((a.loss - softplus(-m)).abs() < 1e-15);
        assert!((b.loss - softplus(m)).abs() < 1e-15);
    }

    #[test]
    fn loss_gradient_antisymmetry() {
        let result = dpo_loss(
            &[1.0, 0.2],
            &[0.5, 0.9],
            &[0.0, 0.0],
            &[0.0, 0.0],
            &[0, 1],
            0.3,
        )
        .unwrap();
        let grads = result.policy_grads(0.3);
        // d/d pc = -d/d pr is how the gradient is applied; check the margin
        // derivative is negative (loss decreases as margin grows).
        assert!(grads.iter().all(|&g| g < 0.0));
    }

    #[test]
    fn non_finite_inputs_rejected() {
        let err = dpo_loss(&[f64::NAN], &[0.0], &[0.0], &[0.0], &[0], 0.1);
        assert!(matches!(err, Err(Error::NonFinite(_))));
    }

    #[test]
    fn loss_is_positive_and_monotone_in_margin() {
        let mut prev = f64::INFINITY;
        for diff in [-8.0, -1.0, -0.1, 0.0, 0.1, 1.0, 8.0] {
            let result = dpo_loss(&[diff], &[0.0], &[0.0], &[0.0], &[0], 1.0).unwrap();
            assert!(result.loss > 0.0 && result.loss.is_finite());
            assert!(result.loss < prev, "loss must fall as the margin grows");
            prev = result.loss;
        }
    }

    #[test]
    fn empty_valid_target_set_is_an_error() {
        // An empty prompt leaves a length-1 completion with nothing to score
        // it from.
        let sample = PreferenceSample::new(vec![], vec![1, 2], vec![3]).unwrap();
        let batches = build_batches(&[sample], Format::Shared, false, 1, 0).unwrap();
        let logits = vec![Matrix::<f64>::zeros(batches[0].fixed_len, 8)];
        let err = completion_logprobs(&logits, &batches[0]);
        assert!(matches!(err, Err(Error::Data(_))), "{err:?}");
    }

    #[test]
    fn cache_miss_is_explicit() {
        let cache = RefCache::default();
        assert!(matches!(
            cache.get(7),
            Err(Error::CacheMiss { sample_index: 7 })
        ));
    }

    #[test]
    fn reference_cache_recomputation_is_identical() {
        let samples = vec![
            PreferenceSample::new(vec![1, 2, 3], vec![4, 5], vec![6, 7, 8]).unwrap(),
            PreferenceSample::new(vec![2], vec![3, 4, 5], vec![6]).unwrap(),
        ];
        let batches = build_batches(&samples, Format::Shared, false, 2, 0).unwrap();
        let params = init::<f64>(&ModelConfig::toy(16, 5)).unwrap();
        let a = reference_logprobs(&params, &batches, 4).unwrap();
        let b = reference_logprobs(&params, &batches, 4).unwrap();
        for i in 0..samples.len() {
            assert_eq!(a.get(i).unwrap(), b.get(i).unwrap());
        }
    }

    #[test]
    fn build_batches_groups_paired_rows() {
        let samples = vec![
            PreferenceSample::new(vec![1], vec![2], vec![3, 4]).unwrap(),
            PreferenceSample::new(vec![5, 6], vec![7], vec![8]).unwrap(),
        ];
        let batches = build_batches(&samples, Format::Paired, false, 2, 0).unwrap();
        assert_eq!(batches.len(), 1);
        assert_eq!(batches[0].batch_size(), 4);
        assert_eq!(batches[0].kind, LayoutKind::PairedRow);
        // fixed_len = max(p + max(c1, c2)) = max(1 + 2, 2 + 1) = 3.
        assert_eq!(batches[0].fixed_len, 3);
    }

    #[test]
    fn build_batches_packed_uses_plan_capacity() {
        let samples = vec![
            PreferenceSample::new(vec![1, 1], vec![2], vec![3]).unwrap(),
            PreferenceSample::new(vec![1], vec![2, 2], vec![3]).unwrap(),
        ];
        let batches = build_batches(&samples, Format::Shared, true, 2, 0).unwrap();
        assert_eq!(batches.len(), 1);
        assert_eq!(batches[0].kind, LayoutKind::PackedSharedRow);
        assert_eq!(batches[0].fixed_len, 8); // 2 * max shared unit (4)
        assert_eq!(batches[0].sample_indices, vec![0, 1]);
    }

    #[test]
    fn beta_zero_training_leaves_params_unchanged() {
        let samples = vec![PreferenceSample::new(vec![1, 2], vec![3, 4], vec![5]).unwrap()];
        let batches = build_batches(&samples, Format::Shared, false, 1, 0).unwrap();
        let config = ModelConfig::toy(16, 11);
        let mut policy = init::<f64>(&config).unwrap();
        let reference = init::<f64>(&config).unwrap();
        let cache = reference_logprobs(&reference, &batches, 8).unwrap();
        let before = policy.clone();
        let mut optimizer = Optimizer::adamw(&policy);
        let result = train_step(
            &mut policy,
            &mut optimizer,
            &RefSource::Cache(&cache),
            &batches[0],
            0.0,
            0.1,
            8,
        )
        .unwrap();
        assert!((result.loss - 2.0f64.ln()).abs() < 1e-12);
        assert_eq!(policy, before);
    }

    #[test]
    fn repeated_steps_on_one_sample_decrease_loss() {
        let samples = vec![PreferenceSample::new(vec![1, 2, 3], vec![4, 5], vec![6, 7]).unwrap()];
        let batches = build_batches(&samples, Format::Shared, false, 1, 0).unwrap();
        let config = ModelConfig::toy(16, 2);
        let mut policy = init::<f64>(&config).unwrap();
        let cache = reference_logprobs(&policy, &batches, 8).unwrap();
        let mut optimizer = Optimizer::adamw(&policy);
        let mut losses = Vec::new();
        for _ in 0..30 {
            let result = train_step(
                &mut policy,
                &mut optimizer,
                &RefSource::Cache(&cache),
                &batches[0],
                0.5,
                1e-2,
                8,
            )
            .unwrap();
            losses.push(result.loss);
        }
        assert!(losses.last().unwrap() < losses.first().unwrap());
        let final_result = train_step(
            &mut policy,
            &mut optimizer,
            &RefSource::Cache(&cache),
            &batches[0],
            0.5,
            0.0,
            8,
        )
        .unwrap();
        assert!(final_result.margins[0] > 0.0);
    }
}
