//! Exact reverse-mode gradients for the decoder, mirroring the forward pass
//! step by step. Gradients are accumulated with a fixed per-element order so
//! results are bit-identical at any thread count.

use rayon::prelude::*;

use super::forward::{sigmoid, ForwardCache, LogitsBatch};
use super::rope::RopeTable;
use super::{ModelConfig, ModelParams};
use crate::error::{Error, Result};
use crate::tensor::{
    linear_backward_input, linear_backward_input_t, linear_backward_weight,
    linear_backward_weight_t, Scalar,
};

/// d(loss)/d(x) and accumulated d(loss)/d(gain) for an RMS norm layer.
fn rms_norm_backward<T: Scalar>(
    x: &[T],
    gain: &[T],
    inv_rms: &[T],
    dy: &[T],
    d: usize,
    dgain: &mut [T],
) -> Vec<T> {
    let rows = x.len() / d;
    // Gain gradient: sequential over rows to keep accumulation order fixed.
    for r in 0..rows {
        let ri = inv_rms[r];
        let x_row = &x[r * d..(r + 1) * d];
        let dy_row = &dy[r * d..(r + 1) * d];
        for ((dg, &xv), &dyv) in dgain.iter_mut().zip(x_row).zip(dy_row) {
            *dg += dyv * xv * ri;
        }
    }
    let mut dx = vec![T::zero(); x.len()];
    let denom = T::of(d as f64);
    dx.par_chunks_mut(d).enumerate().for_each(|(r, dx_row)| {
        let ri = inv_rms[r];
        let x_row = &x[r * d..(r + 1) * d];
        let dy_row = &dy[r * d..(r + 1) * d];
        let mut dot = T::zero();
        for ((&dyv, &g), &xv) in dy_row.iter().zip(gain).zip(x_row) {
            dot += dyv * g * xv;
        }
        let k = ri * ri * ri / denom * dot;
        for (((dxv, &dyv), &g), &xv) in dx_row.iter_mut().zip(dy_row).zip(gain).zip(x_row) {
            *dxv = ri * g * dyv - k * xv;
        }
    });
    dx
}

/// Gradients of the scalar loss with respect to every parameter tensor,
/// given the upstream gradient at the logits.
pub fn backward<T: Scalar>(
    params: &ModelParams<T>,
    cfg: &ModelConfig,
    cache: &ForwardCache<T>,
    d_logits: &LogitsBatch<T>,
) -> Result<ModelParams<T>> {
    if d_logits.batch != cache.batch
        || d_logits.seq_len != cache.seq_len
        || d_logits.vocab != cfg.vocab_size
    {
        return Err(Error::ShapeMismatch(
            "upstream gradient shape does not match the cached forward pass".into(),
        ));
    }
    if d_logits.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("upstream logits gradient".into()));
    }
    let rows = cache.batch * cache.seq_len;
    let mut grads = ModelParams::zeros(cfg);

    // Output head.
    let d_final_normed = match &params.lm_head {
        Some(head) => {
            let d_head = grads.lm_head.as_mut().expect("grads mirror params");
            linear_backward_weight(&cache.final_normed, &d_logits.data, rows, d_head);
            linear_backward_input(&d_logits.data, head, rows)
        }
        None => {
            linear_backward_weight_t(
                &cache.final_normed,
                &d_logits.data,
                rows,
                &mut grads.tok_embedding,
            );
            linear_backward_input_t(&d_logits.data, &params.tok_embedding, rows)
        }
    };

    backward_core(params, cfg, cache, &d_final_normed, &mut grads);
    Ok(grads)
}

/// Backward entry point for heads attached to the final hidden states
/// (e.g. classification): takes d(loss)/d(final_hidden) directly and skips
/// the language-model head.
pub fn backward_from_hidden<T: Scalar>(
    params: &ModelParams<T>,
    cfg: &ModelConfig,
    cache: &ForwardCache<T>,
    d_hidden: &[T],
) -> Result<ModelParams<T>> {
    let rows = cache.batch * cache.seq_len;
    if d_hidden.len() != rows * cfg.d_model {
        return Err(Error::ShapeMismatch(format!(
            "hidden gradient has {} values, expected {}",
            d_hidden.len(),
            rows * cfg.d_model
        )));
    }
    if d_hidden.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("upstream hidden gradient".into()));
    }
    let mut grads = ModelParams::zeros(cfg);
    backward_core(params, cfg, cache, d_hidden, &mut grads);
    Ok(grads)
}

fn backward_core<T: Scalar>(
    params: &ModelParams<T>,
    cfg: &ModelConfig,
    cache: &ForwardCache<T>,
    d_final_normed: &[T],
    grads: &mut ModelParams<T>,
) {
    let rows = cache.batch * cache.seq_len;
    let s_len = cache.seq_len;
    let d = cfg.d_model;
    let (n_heads, n_kv, hd) = (cfg.n_heads, cfg.n_kv_heads, cfg.head_dim());
    let group = cfg.group_size();
    let rope = RopeTable::<T>::new(s_len, hd, cfg.rope_base);
    let scale = T::of(1.0 / (hd as f64).sqrt());
    let keep_scale = T::of(1.0 / (1.0 - cache.dropout));

    // Final norm.
    let mut dx = rms_norm_backward(
        &cache.final_input,
        &params.final_norm,
        &cache.final_inv_rms,
        d_final_normed,
        d,
        &mut grads.final_norm,
    );

    for (layer_idx, layer) in params.layers.iter().enumerate().rev() {
        let lc = &cache.layers[layer_idx];
        let lg = &mut grads.layers[layer_idx];

        // Feed-forward branch: x_out = x_mid + w_down(silu(gate) * up).
        linear_backward_weight(&lc.ffn_mul, &dx, rows, &mut lg.w_down);
        let d_ffn_mul = linear_backward_input(&dx, &layer.w_down, rows);

        let mut d_gate_pre = vec![T::zero(); d_ffn_mul.len()];
        let mut d_up = vec![T::zero(); d_ffn_mul.len()];
        for i in 0..d_ffn_mul.len() {
            let dm = d_ffn_mul[i];
            d_up[i] = dm * lc.gate_act[i];
            let g = lc.gate_pre[i];
            let s = sigmoid(g);
            // d silu(g)/dg = sigma(g) + g * sigma(g) * (1 - sigma(g))
            let dsilu = s + g * s * (T::one() - s);
            d_gate_pre[i] = dm * lc.up[i] * dsilu;
        }
        linear_backward_weight(&lc.ffn_normed, &d_gate_pre, rows, &mut lg.w_gate);
        linear_backward_weight(&lc.ffn_normed, &d_up, rows, &mut lg.w_up);
        let mut d_ffn_normed = linear_backward_input(&d_gate_pre, &layer.w_gate, rows);
        let d_from_up = linear_backward_input(&d_up, &layer.w_up, rows);
        for (a, &b) in d_ffn_normed.iter_mut().zip(&d_from_up) {
            *a += b;
        }
        let d_norm_in = rms_norm_backward(
            &lc.x_mid,
            &layer.ffn_norm,
            &lc.ffn_inv_rms,
            &d_ffn_normed,
            d,
            &mut lg.ffn_norm,
        );
        // d(x_mid) = residual carry + feed-forward path.
        for (a, &b) in dx.iter_mut().zip(&d_norm_in) {
            *a += b;
        }

        // Attention branch: x_mid = x_in + wo(attn_concat).
        linear_backward_weight(&lc.attn_concat, &dx, rows, &mut lg.wo);
        let d_attn_concat = linear_backward_input(&dx, &layer.wo, rows);

        let mut dq = vec![T::zero(); rows * n_heads * hd];
        let mut dk = vec![T::zero(); rows * n_kv * hd];
        let mut dv = vec![T::zero(); rows * n_kv * hd];
        dq.par_chunks_mut(s_len * n_heads * hd)
            .zip(dk.par_chunks_mut(s_len * n_kv * hd))
            .zip(dv.par_chunks_mut(s_len * n_kv * hd))
            .enumerate()
            .for_each(|(b, ((dq_b, dk_b), dv_b))| {
                let mut d_probs_row = vec![T::zero(); s_len];
                for h in 0..n_heads {
                    let kvh = h / group;
                    for i in 0..s_len {
                        let d_out = &d_attn_concat[((b * s_len + i) * n_heads + h) * hd..][..hd];
                        let probs_row = &lc.probs[((b * n_heads + h) * s_len + i) * s_len..][..i + 1];
                        // dv and d(raw probs), accounting for dropout.
                        for j in 0..=i {
                            let kept = lc
                                .keep
                                .as_ref()
                                .map_or(true, |m| m[((b * n_heads + h) * s_len + i) * s_len + j] == 1);
                            if !kept {
                                d_probs_row[j] = T::zero();
                                continue;
                            }
                            let a_eff = if lc.keep.is_some() {
                                probs_row[j] * keep_scale
                            } else {
                                probs_row[j]
                            };
                            let v_vec = &lc.v[((b * s_len + j) * n_kv + kvh) * hd..][..hd];
                            let dv_vec = &mut dv_b[(j * n_kv + kvh) * hd..][..hd];
                            let mut dot = T::zero();
                            for ((dvv, &vv), &ov) in dv_vec.iter_mut().zip(v_vec).zip(d_out) {
                                *dvv += a_eff * ov;
                                dot += vv * ov;
                            }
                            d_probs_row[j] = if lc.keep.is_some() { dot * keep_scale } else { dot };
                        }
                        // Softmax backward over the causal row.
                        let mut dot_a = T::zero();
                        for j in 0..=i {
                            dot_a += probs_row[j] * d_probs_row[j];
                        }
                        let q_vec = &lc.q[((b * s_len + i) * n_heads + h) * hd..][..hd];
                        let dq_vec = &mut dq_b[(i * n_heads + h) * hd..][..hd];
                        for j in 0..=i {
                            let ds = probs_row[j] * (d_probs_row[j] - dot_a) * scale;
                            let k_vec = &lc.k[((b * s_len + j) * n_kv + kvh) * hd..][..hd];
                            let dk_vec = &mut dk_b[(j * n_kv + kvh) * hd..][..hd];
                            for ((dqv, &kv), (dkv, &qv)) in dq_vec
                                .iter_mut()
                                .zip(k_vec)
                                .zip(dk_vec.iter_mut().zip(q_vec))
                            {
                                *dqv += ds * kv;
                                *dkv += ds * qv;
                            }
                        }
                    }
                }
                // Undo the rotary encoding on the accumulated gradients.
                for i in 0..s_len {
                    for h in 0..n_heads {
                        rope.rotate_inverse(&mut dq_b[(i * n_heads + h) * hd..][..hd], i);
                    }
                    for h in 0..n_kv {
                        rope.rotate_inverse(&mut dk_b[(i * n_kv + h) * hd..][..hd], i);
                    }
                }
            });

        linear_backward_weight(&lc.attn_normed, &dq, rows, &mut lg.wq);
        linear_backward_weight(&lc.attn_normed, &dk, rows, &mut lg.wk);
        linear_backward_weight(&lc.attn_normed, &dv, rows, &mut lg.wv);
        let mut d_attn_normed = linear_backward_input(&dq, &layer.wq, rows);
        for (a, &b) in d_attn_normed
            .iter_mut()
            .zip(&linear_backward_input(&dk, &layer.wk, rows))
        {
            *a += b;
        }
        for (a, &b) in d_attn_normed
            .iter_mut()
            .zip(&linear_backward_input(&dv, &layer.wv, rows))
        {
            *a += b;
        }
        let d_norm_in = rms_norm_backward(
            &lc.x_in,
            &layer.attn_norm,
            &lc.attn_inv_rms,
            &d_attn_normed,
            d,
            &mut lg.attn_norm,
        );
        for (a, &b) in dx.iter_mut().zip(&d_norm_in) {
            *a += b;
        }
    }

    // Embedding scatter; sequential because repeated tokens collide.
    for (r, &id) in cache.ids.iter().enumerate() {
        let row = grads.tok_embedding.row_mut(id as usize);
        let dx_row = &dx[r * d..(r + 1) * d];
        for (g, &v) in row.iter_mut().zip(dx_row) {
            *g += v;
        }
    }
}
