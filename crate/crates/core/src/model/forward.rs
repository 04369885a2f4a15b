//! Forward pass with block-sparse attention.
//!
//! Batch rows are processed independently and in a fixed order, so outputs
//! are deterministic and permuting rows permutes logits. Attention follows
//! the block mask: Empty blocks are skipped, Full blocks run without
//! predicate checks, Partial blocks evaluate the predicate per element.

use crate::error::{Error, Result};
use crate::masks::{BlockClass, BlockMask, MaskSpec};
use crate::numerics::{masked_softmax_row, rms_norm_inv, rope_rotate_row, silu, Matrix};
use crate::scalar::Scalar;

use super::{LayerParams, ModelParams};

/// Sparse attention probabilities: `probs[h * L + q]` holds the (kv, weight)
/// pairs of allowed keys in ascending kv order.
pub type SparseProbs<S> = Vec<Vec<(usize, S)>>;

pub struct RowLayerCache<S> {
    pub attn_in: Matrix<S>,
    pub attn_normed: Matrix<S>,
    pub attn_rms_inv: Vec<S>,
    pub q_rot: Matrix<S>,
    pub k_rot: Matrix<S>,
    pub v: Matrix<S>,
    pub probs: SparseProbs<S>,
    pub attn_concat: Matrix<S>,
    pub mlp_in: Matrix<S>,
    pub mlp_normed: Matrix<S>,
    pub mlp_rms_inv: Vec<S>,
    pub gate_pre: Matrix<S>,
    pub up: Matrix<S>,
    pub hidden: Matrix<S>,
}

pub struct RowCache<S> {
    pub tokens: Vec<u32>,
    pub positions: Vec<usize>,
    pub layers: Vec<RowLayerCache<S>>,
    pub final_in: Matrix<S>,
    pub final_normed: Matrix<S>,
    pub final_rms_inv: Vec<S>,
}

/// Activations recorded during [`forward`], consumed by `backward`.
pub struct ForwardCache<S> {
    pub rows: Vec<RowCache<S>>,
}

/// Run the model over a batch. Returns per-row logits (`L x vocab`) and the
/// activation cache.
pub fn forward<S: Scalar>(
    params: &ModelParams<S>,
    tokens: &[Vec<u32>],
    positions: &[Vec<usize>],
    mask: &BlockMask,
) -> Result<(Vec<Matrix<S>>, ForwardCache<S>)> {
    let batch = tokens.len();
    if positions.len() != batch {
        return Err(Error::Shape(format!(
            "{batch} token rows but {} position rows",
            positions.len()
        )));
    }
    if mask.batch_size != batch {
        return Err(Error::Shape(format!(
            "block mask built for batch {} but forward got {batch}",
            mask.batch_size
        )));
    }
    let mut logits = Vec::with_capacity(batch);
    let mut rows = Vec::with_capacity(batch);
    for b in 0..batch {
        let (row_logits, row_cache) = forward_row(params, &tokens[b], &positions[b], mask, b)?;
        logits.push(row_logits);
        rows.push(row_cache);
    }
    Ok((logits, ForwardCache { rows }))
}

fn forward_row<S: Scalar>(
    params: &ModelParams<S>,
    tokens: &[u32],
    positions: &[usize],
    mask: &BlockMask,
    b: usize,
) -> Result<(Matrix<S>, RowCache<S>)> {
    let config = &params.config;
    let seq_len = tokens.len();
    if positions.len() != seq_len {
        return Err(Error::Shape(format!(
            "row has {seq_len} tokens but {} positions",
            positions.len()
        )));
    }
    if mask.seq_len != seq_len {
        return Err(Error::Shape(format!(
            "block mask covers seq_len {} but row has {seq_len}",
            mask.seq_len
        )));
    }
    let d = config.d_model;
    let mut x = Matrix::zeros(seq_len, d);
    for (t, &token) in tokens.iter().enumerate() {
        let id = token as usize;
        if id >= config.vocab_size {
            return Err(Error::Data(format!(
                "token id {id} out of vocab range {}",
                config.vocab_size
            )));
        }
        x.row_mut(t).copy_from_slice(params.embed.row(id));
    }

    let eps = S::from_f64(config.rms_eps);
    let mut layer_caches = Vec::with_capacity(config.n_layers);
    for layer in &params.layers {
        let (next, cache) = forward_layer(config, layer, x, positions, mask, b, eps)?;
        layer_caches.push(cache);
        x = next;
    }

    let (final_normed, final_rms_inv) = norm_matrix(&x, &params.final_norm, eps);
    let logits = final_normed.matmul(&params.output)?;
    Ok((
        logits,
        RowCache {
            tokens: tokens.to_vec(),
            positions: positions.to_vec(),
            layers: layer_caches,
            final_in: x,
            final_normed,
            final_rms_inv,
        },
    ))
}

fn forward_layer<S: Scalar>(
    config: &super::ModelConfig,
    layer: &LayerParams<S>,
    attn_in: Matrix<S>,
    positions: &[usize],
    mask: &BlockMask,
    b: usize,
    eps: S,
) -> Result<(Matrix<S>, RowLayerCache<S>)> {
    let (attn_normed, attn_rms_inv) = norm_matrix(&attn_in, &layer.attn_norm, eps);

    let mut q_rot = attn_normed.matmul(&layer.wq)?;
    let mut k_rot = attn_normed.matmul(&layer.wk)?;
    let v = attn_normed.matmul(&layer.wv)?;
    apply_rope_heads(&mut q_rot, positions, config, false);
    apply_rope_heads(&mut k_rot, positions, config, false);

    let (attn_concat, probs) = attention_block_sparse(&q_rot, &k_rot, &v, config.n_heads, mask, b)?;
    let attn_out = attn_concat.matmul(&layer.wo)?;

    let mut mlp_in = attn_in.clone();
    add_assign(&mut mlp_in, &attn_out);

    let (mlp_normed, mlp_rms_inv) = norm_matrix(&mlp_in, &layer.mlp_norm, eps);
    let gate_pre = mlp_normed.matmul(&layer.w_gate)?;
    let up = mlp_normed.matmul(&layer.w_up)?;
    let mut hidden = Matrix::zeros(gate_pre.rows(), gate_pre.cols());
    for ((h, &g), &u) in hidden
        .data_mut()
        .iter_mut()
        .zip(gate_pre.data())
        .zip(up.data())
    {
        *h = silu(g) * u;
    }
    let mlp_out = hidden.matmul(&layer.w_down)?;

    let mut next = mlp_in.clone();
    add_assign(&mut next, &mlp_out);

    Ok((
        next,
        RowLayerCache {
            attn_in,
            attn_normed,
            attn_rms_inv,
            q_rot,
            k_rot,
            v,
            probs,
            attn_concat,
            mlp_in,
            mlp_normed,
            mlp_rms_inv,
            gate_pre,
            up,
            hidden,
        },
    ))
}

/// Block-sparse multi-head attention for one batch row.
///
/// Scores are gathered per query in ascending kv order across blocks: Empty
/// blocks contribute nothing, Full blocks skip the predicate, Partial blocks
/// consult it per element. Returns the concatenated head outputs and the
/// sparse probability lists backward needs.
pub fn attention_block_sparse<S: Scalar>(
    q: &Matrix<S>,
    k: &Matrix<S>,
    v: &Matrix<S>,
    n_heads: usize,
    mask: &BlockMask,
    b: usize,
) -> Result<(Matrix<S>, SparseProbs<S>)> {
    let seq_len = q.rows();
    let d = q.cols();
    let d_head = head_dim(d, n_heads)?;
    let scale = S::from_f64(1.0 / (d_head as f64).sqrt());
    let mut out = Matrix::zeros(seq_len, d);
    let mut probs: SparseProbs<S> = vec![Vec::new(); n_heads * seq_len];

    let mut allowed_kv: Vec<usize> = Vec::with_capacity(seq_len);
    for qi in 0..seq_len {
        let q_block = qi / mask.block_size;
        allowed_kv.clear();
        for kv_block in 0..mask.num_kv_blocks {
            let class = mask.class(b, q_block, kv_block);
            if class == BlockClass::Empty {
                continue;
            }
            let lo = kv_block * mask.block_size;
            let hi = (lo + mask.block_size).min(seq_len);
            match class {
                BlockClass::Full => allowed_kv.extend(lo..hi),
                BlockClass::Partial => {
                    for kv in lo..hi {
                        if mask.spec().allowed(b, qi, kv) {
                            allowed_kv.push(kv);
                        }
                    }
                }
                BlockClass::Empty => unreachable!(),
            }
        }
        if allowed_kv.is_empty() {
            return Err(Error::AllMasked(format!(
                "query {qi} in batch row {b} sees no keys"
            )));
        }
        for h in 0..n_heads {
            let hs = h * d_head;
            let he = hs + d_head;
            let q_vec = &q.row(qi)[hs..he];
            // Scores only over allowed keys, max-subtracted in gather order.
            let mut max = S::neg_infinity();
            let mut scores: Vec<S> = Vec::with_capacity(allowed_kv.len());
            for &kv in &allowed_kv {
                let k_vec = &k.row(kv)[hs..he];
                let mut dot = S::zero();
                for (&a, &bb) in q_vec.iter().zip(k_vec) {
                    dot = dot + a * bb;
                }
                let score = dot * scale;
                if score > max {
                    max = score;
                }
                scores.push(score);
            }
            let mut denom = S::zero();
            for score in scores.iter_mut() {
                *score = (*score - max).exp();
                denom = denom + *score;
            }
            let row_probs = &mut probs[h * seq_len + qi];
            row_probs.clear();
            row_probs.reserve(allowed_kv.len());
            let out_vec = &mut out.row_mut(qi)[hs..he];
            for (&kv, &e) in allowed_kv.iter().zip(scores.iter()) {
                let p = e / denom;
                row_probs.push((kv, p));
                let v_vec = &v.row(kv)[hs..he];
                for (o, &vv) in out_vec.iter_mut().zip(v_vec) {
                    *o = *o + p * vv;
                }
            }
        }
    }
    Ok((out, probs))
}

/// Dense reference attention: evaluates the raw mask predicate at every
/// (q, kv) pair, with no block classification involved. The independent
/// oracle the block-sparse path is checked against.
pub fn attention_dense<S: Scalar>(
    q: &Matrix<S>,
    k: &Matrix<S>,
    v: &Matrix<S>,
    n_heads: usize,
    spec: &MaskSpec,
    b: usize,
) -> Result<Matrix<S>> {
    let seq_len = q.rows();
    let d = q.cols();
    let d_head = head_dim(d, n_heads)?;
    let scale = S::from_f64(1.0 / (d_head as f64).sqrt());
    let mut out = Matrix::zeros(seq_len, d);
    for qi in 0..seq_len {
        let allowed: Vec<bool> = (0..seq_len).map(|kv| spec.allowed(b, qi, kv)).collect();
        for h in 0..n_heads {
            let hs = h * d_head;
            let he = hs + d_head;
            let q_vec = &q.row(qi)[hs..he];
            let scores: Vec<S> = (0..seq_len)
                .map(|kv| {
                    let k_vec = &k.row(kv)[hs..he];
                    let mut dot = S::zero();
                    for (&a, &bb) in q_vec.iter().zip(k_vec) {
                        dot = dot + a * bb;
                    }
                    dot * scale
                })
                .collect();
            let weights = masked_softmax_row(&scores, &allowed)?;
            let out_vec = &mut out.row_mut(qi)[hs..he];
            for (kv, &w) in weights.iter().enumerate() {
                if w != S::zero() {
                    let v_vec = &v.row(kv)[hs..he];
                    for (o, &vv) in out_vec.iter_mut().zip(v_vec) {
                        *o = *o + w * vv;
                    }
                }
            }
        }
    }
    Ok(out)
}

pub(super) fn head_dim(d_model: usize, n_heads: usize) -> Result<usize> {
    if n_heads == 0 || !d_model.is_multiple_of(n_heads) {
        return Err(Error::Shape(format!(
            "d_model {d_model} not divisible into {n_heads} heads"
        )));
    }
    Ok(d_model / n_heads)
}

/// Per-position RMS norm of a whole matrix; returns the normed matrix and the
/// per-position `1/sqrt(mean + eps)` factors.
pub(super) fn norm_matrix<S: Scalar>(x: &Matrix<S>, gain: &[S], eps: S) -> (Matrix<S>, Vec<S>) {
    let mut normed = Matrix::zeros(x.rows(), x.cols());
    let mut inv = Vec::with_capacity(x.rows());
    for t in 0..x.rows() {
        let row = x.row(t);
        let r = rms_norm_inv(row, eps);
        inv.push(r);
        for ((n, &xv), &g) in normed.row_mut(t).iter_mut().zip(row).zip(gain) {
            *n = xv * r * g;
        }
    }
    (normed, inv)
}

/// Rotate each head slice of every row by its position.
pub(super) fn apply_rope_heads<S: Scalar>(
    m: &mut Matrix<S>,
    positions: &[usize],
    config: &super::ModelConfig,
    inverse: bool,
) {
    let d_head = config.d_head();
    let n_heads = config.n_heads;
    for (t, &pos) in positions.iter().enumerate() {
        let row = m.row_mut(t);
        for h in 0..n_heads {
            rope_rotate_row(
                &mut row[h * d_head..(h + 1) * d_head],
                pos,
                config.rope_theta,
                inverse,
            );
        }
    }
}

pub(super) fn add_assign<S: Scalar>(target: &mut Matrix<S>, other: &Matrix<S>) {
    for (t, &o) in target.data_mut().iter_mut().zip(other.data()) {
        *t = *t + o;
    }
}
