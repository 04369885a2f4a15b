//! Manual backward pass.
//!
//! Mirrors the forward computation exactly, layer by layer in reverse, using
//! the cached activations. Accumulation orders are fixed, so gradients are
//! deterministic. Checked against central finite differences in the tests.

use crate::error::{Error, Result};
use crate::numerics::{silu, silu_grad, Matrix};
use crate::scalar::Scalar;

use super::forward::{add_assign, apply_rope_heads, head_dim, ForwardCache, RowCache};
use super::ModelParams;

/// Gradients of a scalar loss with respect to every parameter, given the
/// upstream gradient on the logits (one `L x vocab` matrix per batch row).
pub fn backward<S: Scalar>(
    params: &ModelParams<S>,
    cache: &ForwardCache<S>,
    upstream: &[Matrix<S>],
) -> Result<ModelParams<S>> {
    if upstream.len() != cache.rows.len() {
        return Err(Error::Shape(format!(
            "upstream gradient has {} rows but cache has {}",
            upstream.len(),
            cache.rows.len()
        )));
    }
    let mut grads = params.zeros_like();
    for (row, d_logits) in cache.rows.iter().zip(upstream) {
        backward_row(params, row, d_logits, &mut grads)?;
    }
    Ok(grads)
}

fn backward_row<S: Scalar>(
    params: &ModelParams<S>,
    row: &RowCache<S>,
    d_logits: &Matrix<S>,
    grads: &mut ModelParams<S>,
) -> Result<()> {
    let config = &params.config;
    let seq_len = row.tokens.len();
    if d_logits.rows() != seq_len || d_logits.cols() != config.vocab_size {
        return Err(Error::Shape(format!(
            "upstream gradient is {}x{}, expected {}x{}",
            d_logits.rows(),
            d_logits.cols(),
            seq_len,
            config.vocab_size
        )));
    }
    if row.layers.len() != params.layers.len() {
        return Err(Error::Shape(
            "forward cache does not match this model's layer count".into(),
        ));
    }

    // Output head: logits = final_normed * output.
    accumulate_at_b(&mut grads.output, &row.final_normed, d_logits);
    let d_final_normed = d_logits.matmul_transposed(&params.output)?;
    let mut d_x = rms_backward(
        &row.final_in,
        &params.final_norm,
        &row.final_rms_inv,
        &d_final_normed,
        &mut grads.final_norm,
    );

    for l in (0..params.layers.len()).rev() {
        let layer = &params.layers[l];
        let lc = &row.layers[l];
        let lg = &mut grads.layers[l];

        // MLP block: next = mlp_in + hidden * w_down.
        let d_mlp_out = &d_x;
        accumulate_at_b(&mut lg.w_down, &lc.hidden, d_mlp_out);
        let d_hidden = d_mlp_out.matmul_transposed(&layer.w_down)?;
        let mut d_gate_pre = Matrix::zeros(seq_len, config.d_ff);
        let mut d_up = Matrix::zeros(seq_len, config.d_ff);
        for i in 0..seq_len * config.d_ff {
            let dh = d_hidden.data()[i];
            let g = lc.gate_pre.data()[i];
            let u = lc.up.data()[i];
            d_gate_pre.data_mut()[i] = dh * u * silu_grad(g);
            d_up.data_mut()[i] = dh * silu(g);
        }
        accumulate_at_b(&mut lg.w_gate, &lc.mlp_normed, &d_gate_pre);
        accumulate_at_b(&mut lg.w_up, &lc.mlp_normed, &d_up);
        let mut d_mlp_normed = d_gate_pre.matmul_transposed(&layer.w_gate)?;
        add_assign(&mut d_mlp_normed, &d_up.matmul_transposed(&layer.w_up)?);
        let d_mlp_in_norm = rms_backward(
            &lc.mlp_in,
            &layer.mlp_norm,
            &lc.mlp_rms_inv,
            &d_mlp_normed,
            &mut lg.mlp_norm,
        );
        // Residual: d_mlp_in = d_next + norm-path gradient.
        let mut d_mlp_in = d_x;
        add_assign(&mut d_mlp_in, &d_mlp_in_norm);

        // Attention block: mlp_in = attn_in + attn_concat * wo.
        let d_attn_out = &d_mlp_in;
        accumulate_at_b(&mut lg.wo, &lc.attn_concat, d_attn_out);
        let d_attn_concat = d_attn_out.matmul_transposed(&layer.wo)?;

        let (mut d_q_rot, mut d_k_rot, d_v) = attention_backward(
            &lc.q_rot,
            &lc.k_rot,
            &lc.v,
            &lc.probs,
            &d_attn_concat,
            config.n_heads,
        )?;

        // RoPE is a fixed rotation; its transpose is the inverse rotation.
        apply_rope_heads(&mut d_q_rot, &row.positions, config, true);
        apply_rope_heads(&mut d_k_rot, &row.positions, config, true);

        accumulate_at_b(&mut lg.wq, &lc.attn_normed, &d_q_rot);
        accumulate_at_b(&mut lg.wk, &lc.attn_normed, &d_k_rot);
        accumulate_at_b(&mut lg.wv, &lc.attn_normed, &d_v);
        let mut d_attn_normed = d_q_rot.matmul_transposed(&layer.wq)?;
        add_assign(&mut d_attn_normed, &d_k_rot.matmul_transposed(&layer.wk)?);
        add_assign(&mut d_attn_normed, &d_v.matmul_transposed(&layer.wv)?);
        let d_attn_in_norm = rms_backward(
            &lc.attn_in,
            &layer.attn_norm,
            &lc.attn_rms_inv,
            &d_attn_normed,
            &mut lg.attn_norm,
        );
        let mut d_attn_in = d_mlp_in;
        add_assign(&mut d_attn_in, &d_attn_in_norm);
        d_x = d_attn_in;
    }

    // Embedding scatter.
    for (t, &token) in row.tokens.iter().enumerate() {
        let src = d_x.row(t);
        let dst = grads.embed.row_mut(token as usize);
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = *d + s;
        }
    }
    Ok(())
}

/// Backward through the masked softmax attention of one row, walking the same
/// sparse probability lists the forward pass produced.
fn attention_backward<S: Scalar>(
    q_rot: &Matrix<S>,
    k_rot: &Matrix<S>,
    v: &Matrix<S>,
    probs: &[Vec<(usize, S)>],
    d_out: &Matrix<S>,
    n_heads: usize,
) -> Result<(Matrix<S>, Matrix<S>, Matrix<S>)> {
    let seq_len = q_rot.rows();
    let d = q_rot.cols();
    let d_head = head_dim(d, n_heads)?;
    let scale = S::from_f64(1.0 / (d_head as f64).sqrt());
    let mut d_q = Matrix::zeros(seq_len, d);
    let mut d_k = Matrix::zeros(seq_len, d);
    let mut d_v = Matrix::zeros(seq_len, d);
    let mut d_p: Vec<S> = Vec::new();
    for h in 0..n_heads {
        let hs = h * d_head;
        let he = hs + d_head;
        for qi in 0..seq_len {
            let row_probs = &probs[h * seq_len + qi];
            let dout = &d_out.row(qi)[hs..he];
            d_p.clear();
            d_p.reserve(row_probs.len());
            let mut weighted_sum = S::zero();
            for &(kv, p) in row_probs {
                let v_vec = &v.row(kv)[hs..he];
                let mut dp = S::zero();
                for (&a, &b) in dout.iter().zip(v_vec) {
                    dp = dp + a * b;
                }
                d_p.push(dp);
                weighted_sum = weighted_sum + p * dp;
                // d_v accumulates p * dout.
                let dv = &mut d_v.row_mut(kv)[hs..he];
                for (slot, &g) in dv.iter_mut().zip(dout) {
                    *slot = *slot + p * g;
                }
            }
            let q_vec: Vec<S> = q_rot.row(qi)[hs..he].to_vec();
            for (&(kv, p), &dp) in row_probs.iter().zip(&d_p) {
                let d_score = p * (dp - weighted_sum) * scale;
                let k_vec = &k_rot.row(kv)[hs..he];
                let dq = &mut d_q.row_mut(qi)[hs..he];
                for (slot, &kvv) in dq.iter_mut().zip(k_vec) {
                    *slot = *slot + d_score * kvv;
                }
                let dk = &mut d_k.row_mut(kv)[hs..he];
                for (slot, &qv) in dk.iter_mut().zip(&q_vec) {
                    *slot = *slot + d_score * qv;
                }
            }
        }
    }
    Ok((d_q, d_k, d_v))
}

/// `grad += a^T * b`, accumulated row-by-row so the order is fixed.
fn accumulate_at_b<S: Scalar>(grad: &mut Matrix<S>, a: &Matrix<S>, b: &Matrix<S>) {
    debug_assert_eq!(grad.rows(), a.cols());
    debug_assert_eq!(grad.cols(), b.cols());
    debug_assert_eq!(a.rows(), b.rows());
    for t in 0..a.rows() {
        let a_row = a.row(t);
        let b_row = b.row(t);
        for (i, &av) in a_row.iter().enumerate() {
            let g_row = grad.row_mut(i);
            for (g, &bv) in g_row.iter_mut().zip(b_row) {
                *g = *g + av * bv;
            }
        }
    }
}

/// Backward of `y[t] = x[t] * r[t] * gain` with `r = 1/sqrt(mean(x^2)+eps)`.
/// Returns dx and accumulates the gain gradient.
fn rms_backward<S: Scalar>(
    x: &Matrix<S>,
    gain: &[S],
    inv: &[S],
    dy: &Matrix<S>,
    d_gain: &mut [S],
) -> Matrix<S> {
    let n = S::from_f64(x.cols() as f64);
    let mut dx = Matrix::zeros(x.rows(), x.cols());
    #[allow(clippy::needless_range_loop)]
    for t in 0..x.rows() {
        let r = inv[t];
        let x_row = x.row(t);
        let dy_row = dy.row(t);
        let mut projected = S::zero();
        for ((&dyv, &g), &xv) in dy_row.iter().zip(gain).zip(x_row) {
            projected = projected + dyv * g * xv;
        }
        let shrink = r * r * r * projected / n;
        let dx_row = dx.row_mut(t);
        for i in 0..x_row.len() {
            d_gain[i] = d_gain[i] + dy_row[i] * x_row[i] * r;
            dx_row[i] = r * gain[i] * dy_row[i] - shrink * x_row[i];
        }
    }
    dx
}
