//! Shared helpers for the integration tests: tiny configs, an independent
//! straight-line reference evaluation of the decoder, and finite-difference
//! gradient checking. The reference path deliberately shares no kernel code
//! with the library.

#![allow(dead_code)]

use desklm_core::model::{ModelConfig, ModelParams};
use desklm_core::tensor::Matrix;

pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        vocab_size: 11,
        n_layers: 2,
        n_heads: 2,
        n_kv_heads: 1,
        d_model: 8,
        d_ff: 16,
        max_seq_len: 16,
        rope_base: 10_000.0,
        tie_embeddings: false,
    }
}

pub fn tiny_config_mha() -> ModelConfig {
    ModelConfig {
        n_kv_heads: 2,
        ..tiny_config()
    }
}

const RMS_EPS: f64 = 1e-5;

fn ref_rms_norm(x: &[f64], gain: &[f64]) -> Vec<f64> {
    let d = x.len();
    let ms: f64 = x.iter().map(|v| v * v).sum::<f64>() / d as f64;
    let ri = 1.0 / (ms + RMS_EPS).sqrt();
    x.iter().zip(gain).map(|(v, g)| v * ri * g).collect()
}

fn ref_matvec(w: &Matrix<f64>, x: &[f64]) -> Vec<f64> {
    // y[c] = sum_r x[r] w[r, c]
    let mut y = vec![0.0; w.cols];
    for r in 0..w.rows {
        for c in 0..w.cols {
            y[c] += x[r] * w.data[r * w.cols + c];
        }
    }
    y
}

fn ref_rope(vec: &mut [f64], pos: usize, base: f64) {
    let hd = vec.len();
    for i in 0..hd / 2 {
        let angle = pos as f64 * base.powf(-2.0 * i as f64 / hd as f64);
        let (c, s) = (angle.cos(), angle.sin());
        let (a, b) = (vec[2 * i], vec[2 * i + 1]);
        vec[2 * i] = a * c - b * s;
        vec[2 * i + 1] = a * s + b * c;
    }
}

/// Straight-line single-sequence evaluation: every step written out
/// longhand, one position at a time. Returns logits [seq_len, vocab].
pub fn reference_forward(
    params: &ModelParams<f64>,
    cfg: &ModelConfig,
    ids: &[u32],
) -> Vec<Vec<f64>> {
    let s_len = ids.len();
    let d = cfg.d_model;
    let hd = cfg.d_model / cfg.n_heads;
    let group = cfg.n_heads / cfg.n_kv_heads;

    // Embedding
    let mut states: Vec<Vec<f64>> = ids
        .iter()
        .map(|&id| params.tok_embedding.row(id as usize).to_vec())
        .collect();

    for layer in &params.layers {
        // Attention sub-block.
        let normed: Vec<Vec<f64>> = states
            .iter()
            .map(|x| ref_rms_norm(x, &layer.attn_norm))
            .collect();
        let mut qs: Vec<Vec<f64>> = normed.iter().map(|x| ref_matvec(&layer.wq, x)).collect();
        let mut ks: Vec<Vec<f64>> = normed.iter().map(|x| ref_matvec(&layer.wk, x)).collect();
        let vs: Vec<Vec<f64>> = normed.iter().map(|x| ref_matvec(&layer.wv, x)).collect();
        for pos in 0..s_len {
            for h in 0..cfg.n_heads {
                ref_rope(&mut qs[pos][h * hd..(h + 1) * hd], pos, cfg.rope_base);
            }
            for h in 0..cfg.n_kv_heads {
                ref_rope(&mut ks[pos][h * hd..(h + 1) * hd], pos, cfg.rope_base);
            }
        }
        let mut attn_out: Vec<Vec<f64>> = Vec::with_capacity(s_len);
        for i in 0..s_len {
            let mut concat = vec![0.0; cfg.n_heads * hd];
            for h in 0..cfg.n_heads {
                let kv = h / group;
                let q = &qs[i][h * hd..(h + 1) * hd];
                let mut scores = Vec::with_capacity(i + 1);
                for j in 0..=i {
                    let k = &ks[j][kv * hd..(kv + 1) * hd];
                    let dot: f64 = q.iter().zip(k).map(|(a, b)| a * b).sum();
                    scores.push(dot / (hd as f64).sqrt());
                }
                let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
                let denom: f64 = exps.iter().sum();
                for j in 0..=i {
                    let a = exps[j] / denom;
                    let v = &vs[j][kv * hd..(kv + 1) * hd];
                    for t in 0..hd {
                        concat[h * hd + t] += a * v[t];
                    }
                }
            }
            let proj = ref_matvec(&layer.wo, &concat);
            attn_out.push(proj);
        }
        for i in 0..s_len {
            for t in 0..d {
                states[i][t] += attn_out[i][t];
            }
        }

        // Feed-forward sub-block.
        for i in 0..s_len {
            let normed = ref_rms_norm(&states[i], &layer.ffn_norm);
            let gate = ref_matvec(&layer.w_gate, &normed);
            let up = ref_matvec(&layer.w_up, &normed);
            let mixed: Vec<f64> = gate
                .iter()
                .zip(&up)
                .map(|(&g, &u)| {
                    let sig = 1.0 / (1.0 + (-g).exp());
                    g * sig * u
                })
                .collect();
            let down = ref_matvec(&layer.w_down, &mixed);
            for t in 0..d {
                states[i][t] += down[t];
            }
        }
    }

    states
        .iter()
        .map(|x| {
            let normed = ref_rms_norm(x, &params.final_norm);
            match &params.lm_head {
                Some(head) => ref_matvec(head, &normed),
                None => {
                    // Tied head: dot with each embedding row.
                    (0..cfg.vocab_size)
                        .map(|v| {
                            params
                                .tok_embedding
                                .row(v)
                                .iter()
                                .zip(&normed)
                                .map(|(a, b)| a * b)
                                .sum()
                        })
                        .collect()
                }
            }
        })
        .collect()
}

/// Central finite difference of `loss` with respect to one parameter slot.
pub fn central_difference<F>(
    params: &mut ModelParams<f64>,
    tensor_idx: usize,
    elem_idx: usize,
    step: f64,
    mut loss: F,
) -> f64
where
    F: FnMut(&ModelParams<f64>) -> f64,
{
    let original = params.tensors()[tensor_idx][elem_idx];
    {
        let mut views = params.tensors_mut();
        views[tensor_idx][elem_idx] = original + step;
    }
    let plus = loss(params);
    {
        let mut views = params.tensors_mut();
        views[tensor_idx][elem_idx] = original - step;
    }
    let minus = loss(params);
    {
        let mut views = params.tensors_mut();
        views[tensor_idx][elem_idx] = original;
    }
    (plus - minus) / (2.0 * step)
}

/// Relative error with a unit floor, the usual gradient-check metric.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / 1.0f64.max(a.abs()).max(b.abs())
}
