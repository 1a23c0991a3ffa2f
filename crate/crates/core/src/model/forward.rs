//! Forward evaluation of the decoder, with activation caching for the
//! backward pass. Attention is causal; key/value heads are shared across
//! query-head groups; the optional attention dropout is only active in the
//! training entry point.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::rope::RopeTable;
use super::{ModelConfig, ModelParams, RMS_NORM_EPS};
use crate::error::{Error, Result};
use crate::tensor::{linear_forward, linear_forward_t, Scalar};

/// A batch of token ids, row-major [batch, seq_len].
#[derive(Debug, Clone)]
pub struct TokenBatch {
    pub ids: Vec<u32>,
    pub batch: usize,
    pub seq_len: usize,
}

impl TokenBatch {
    pub fn new(ids: Vec<u32>, batch: usize, seq_len: usize) -> Result<Self> {
        if ids.len() != batch * seq_len {
            return Err(Error::ShapeMismatch(format!(
                "{} ids cannot form a [{batch} x {seq_len}] batch",
                ids.len()
            )));
        }
        Ok(TokenBatch {
            ids,
            batch,
            seq_len,
        })
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.batch * self.seq_len
    }
}

/// Model output logits, row-major [batch, seq_len, vocab].
#[derive(Debug, Clone, PartialEq)]
pub struct LogitsBatch<T> {
    pub data: Vec<T>,
    pub batch: usize,
    pub seq_len: usize,
    pub vocab: usize,
}

impl<T: Scalar> LogitsBatch<T> {
    #[inline]
    pub fn rows(&self) -> usize {
        self.batch * self.seq_len
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.vocab..(r + 1) * self.vocab]
    }
}

pub(super) struct LayerCache<T> {
    /// Residual input to the layer [R, d].
    pub x_in: Vec<T>,
    pub attn_normed: Vec<T>,
    pub attn_inv_rms: Vec<T>,
    /// Post-rotation queries [R, n_heads * head_dim].
    pub q: Vec<T>,
    /// Post-rotation keys [R, n_kv_heads * head_dim].
    pub k: Vec<T>,
    pub v: Vec<T>,
    /// Raw softmax attention probabilities [batch, n_heads, S, S].
    pub probs: Vec<T>,
    /// Dropout keep mask over `probs`, present only when dropout is active.
    pub keep: Option<Vec<u8>>,
    /// Concatenated head outputs (after dropout) [R, n_heads * head_dim].
    pub attn_concat: Vec<T>,
    /// Residual state after attention [R, d].
    pub x_mid: Vec<T>,
    pub ffn_normed: Vec<T>,
    pub ffn_inv_rms: Vec<T>,
    pub gate_pre: Vec<T>,
    pub gate_act: Vec<T>,
    pub up: Vec<T>,
    pub ffn_mul: Vec<T>,
}

/// Activations recorded during a forward pass, consumed by `backward`.
pub struct ForwardCache<T> {
    pub(super) ids: Vec<u32>,
    pub(super) batch: usize,
    pub(super) seq_len: usize,
    pub(super) layers: Vec<LayerCache<T>>,
    /// Input to the final norm [R, d].
    pub(super) final_input: Vec<T>,
    pub(super) final_normed: Vec<T>,
    pub(super) final_inv_rms: Vec<T>,
    pub(super) dropout: f64,
}

impl<T: Scalar> ForwardCache<T> {
    /// Hidden states after the final norm, [R, d]. The classifier head
    /// reads these directly.
    pub fn final_hidden(&self) -> &[T] {
        &self.final_normed
    }
}

pub(super) fn rms_norm_rows<T: Scalar>(x: &[T], gain: &[T], d: usize) -> (Vec<T>, Vec<T>) {
    let rows = x.len() / d;
    let mut normed = vec![T::zero(); x.len()];
    let mut inv_rms = vec![T::zero(); rows];
    let eps = T::of(RMS_NORM_EPS);
    let denom = T::of(d as f64);
    normed
        .chunks_mut(d)
        .zip(inv_rms.iter_mut())
        .enumerate()
        .for_each(|(r, (out, inv))| {
            let row = &x[r * d..(r + 1) * d];
            let mut ms = T::zero();
            for &v in row {
                ms += v * v;
            }
            let ri = (ms / denom + eps).sqrt().recip();
            *inv = ri;
            for ((o, &v), &g) in out.iter_mut().zip(row).zip(gain) {
                *o = v * ri * g;
            }
        });
    (normed, inv_rms)
}

#[inline]
pub(super) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn validate_batch(cfg: &ModelConfig, batch: &TokenBatch) -> Result<()> {
    if batch.seq_len > cfg.max_seq_len {
        return Err(Error::Model(format!(
            "sequence length {} exceeds max_seq_len {}",
            batch.seq_len, cfg.max_seq_len
        )));
    }
    for &id in &batch.ids {
        if id as usize >= cfg.vocab_size {
            return Err(Error::Model(format!(
                "token id {id} out of range for vocab size {}",
                cfg.vocab_size
            )));
        }
    }
    Ok(())
}

/// Forward pass without dropout. Returns logits only.
pub fn forward<T: Scalar>(
    params: &ModelParams<T>,
    cfg: &ModelConfig,
    batch: &TokenBatch,
) -> Result<LogitsBatch<T>> {
    forward_train(params, cfg, batch, 0.0, None).map(|(logits, _)| logits)
}

/// Forward pass with activation caching and optional attention dropout.
/// Dropout requires an RNG; mask draws are sequential so results do not
/// depend on thread count.
pub fn forward_train<T: Scalar>(
    params: &ModelParams<T>,
    cfg: &ModelConfig,
    batch: &TokenBatch,
    attn_dropout: f64,
    mut dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<(LogitsBatch<T>, ForwardCache<T>)> {
    cfg.validate()?;
    validate_batch(cfg, batch)?;
    if attn_dropout > 0.0 && dropout_rng.is_none() {
        return Err(Error::Model(
            "attention dropout requires a dropout RNG".into(),
        ));
    }
    if !(0.0..1.0).contains(&attn_dropout) {
        return Err(Error::InvalidConfig(format!(
            "attention dropout must lie in [0,1), got {attn_dropout}"
        )));
    }

    let (b_sz, s_len) = (batch.batch, batch.seq_len);
    let rows = batch.rows();
    let d = cfg.d_model;
    let (n_heads, n_kv, hd) = (cfg.n_heads, cfg.n_kv_heads, cfg.head_dim());
    let group = cfg.group_size();
    let rope = RopeTable::<T>::new(s_len, hd, cfg.rope_base);
    let scale = T::of(1.0 / (hd as f64).sqrt());

    // Token embedding lookup.
    let mut x = vec![T::zero(); rows * d];
    for (r, &id) in batch.ids.iter().enumerate() {
        x[r * d..(r + 1) * d].copy_from_slice(params.tok_embedding.row(id as usize));
    }

    let mut layer_caches = Vec::with_capacity(cfg.n_layers);
    for layer in &params.layers {
        let x_in = x;
        let (attn_normed, attn_inv_rms) = rms_norm_rows(&x_in, &layer.attn_norm, d);

        let mut q = linear_forward(&attn_normed, &layer.wq, rows);
        let mut k = linear_forward(&attn_normed, &layer.wk, rows);
        let v = linear_forward(&attn_normed, &layer.wv, rows);

        // Rotate each head vector by its position within the sequence.
        for r in 0..rows {
            let pos = r % s_len;
            for h in 0..n_heads {
                rope.rotate(&mut q[(r * n_heads + h) * hd..][..hd], pos);
            }
            for h in 0..n_kv {
                rope.rotate(&mut k[(r * n_kv + h) * hd..][..hd], pos);
            }
        }

        // Dropout keep mask, drawn sequentially over the causal triangle.
        let keep: Option<Vec<u8>> = if attn_dropout > 0.0 {
            let rng = dropout_rng.as_deref_mut().expect("checked above");
            let mut mask = vec![1u8; b_sz * n_heads * s_len * s_len];
            for b in 0..b_sz {
                for h in 0..n_heads {
                    for i in 0..s_len {
                        for j in 0..=i {
                            if rng.random::<f64>() < attn_dropout {
                                mask[((b * n_heads + h) * s_len + i) * s_len + j] = 0;
                            }
                        }
                    }
                }
            }
            Some(mask)
        } else {
            None
        };
        let keep_scale = T::of(1.0 / (1.0 - attn_dropout));

        let mut probs = vec![T::zero(); b_sz * n_heads * s_len * s_len];
        let mut attn_concat = vec![T::zero(); rows * n_heads * hd];
        probs
            .par_chunks_mut(n_heads * s_len * s_len)
            .zip(attn_concat.par_chunks_mut(s_len * n_heads * hd))
            .enumerate()
            .for_each(|(b, (probs_b, out_b))| {
                for h in 0..n_heads {
                    let kvh = h / group;
                    for i in 0..s_len {
                        let q_vec = &q[((b * s_len + i) * n_heads + h) * hd..][..hd];
                        let row = &mut probs_b[(h * s_len + i) * s_len..][..i + 1];
                        let mut max_score = T::neg_infinity();
                        for (j, slot) in row.iter_mut().enumerate() {
                            let k_vec = &k[((b * s_len + j) * n_kv + kvh) * hd..][..hd];
                            let mut dot = T::zero();
                            for (&qv, &kv) in q_vec.iter().zip(k_vec) {
                                dot += qv * kv;
                            }
                            let score = dot * scale;
                            *slot = score;
                            if score > max_score {
                                max_score = score;
                            }
                        }
                        let mut denom = T::zero();
                        for slot in row.iter_mut() {
                            *slot = (*slot - max_score).exp();
                            denom += *slot;
                        }
                        for slot in row.iter_mut() {
                            *slot = *slot / denom;
                        }
                        let out = &mut out_b[(i * n_heads + h) * hd..][..hd];
                        for j in 0..=i {
                            let mut a = probs_b[(h * s_len + i) * s_len + j];
                            if let Some(mask) = &keep {
                                if mask[((b * n_heads + h) * s_len + i) * s_len + j] == 0 {
                                    continue;
                                }
                                a = a * keep_scale;
                            }
                            let v_vec = &v[((b * s_len + j) * n_kv + kvh) * hd..][..hd];
                            for (o, &vv) in out.iter_mut().zip(v_vec) {
                                *o += a * vv;
                            }
                        }
                    }
                }
            });

        let attn_out = linear_forward(&attn_concat, &layer.wo, rows);
        let mut x_mid = x_in.clone();
        for (m, &a) in x_mid.iter_mut().zip(&attn_out) {
            *m += a;
        }

        let (ffn_normed, ffn_inv_rms) = rms_norm_rows(&x_mid, &layer.ffn_norm, d);
        let gate_pre = linear_forward(&ffn_normed, &layer.w_gate, rows);
        let up = linear_forward(&ffn_normed, &layer.w_up, rows);
        let gate_act: Vec<T> = gate_pre.iter().map(|&g| g * sigmoid(g)).collect();
        let ffn_mul: Vec<T> = gate_act.iter().zip(&up).map(|(&a, &u)| a * u).collect();
        let down = linear_forward(&ffn_mul, &layer.w_down, rows);

        let mut x_out = x_mid.clone();
        for (o, &dn) in x_out.iter_mut().zip(&down) {
            *o += dn;
        }

        layer_caches.push(LayerCache {
            x_in,
            attn_normed,
            attn_inv_rms,
            q,
            k,
            v,
            probs,
            keep,
            attn_concat,
            x_mid,
            ffn_normed,
            ffn_inv_rms,
            gate_pre,
            gate_act,
            up,
            ffn_mul,
        });
        x = x_out;
    }

    let final_input = x;
    let (final_normed, final_inv_rms) = rms_norm_rows(&final_input, &params.final_norm, d);

    let logits_data = match &params.lm_head {
        Some(head) => linear_forward(&final_normed, head, rows),
        None => linear_forward_t(&final_normed, &params.tok_embedding, rows),
    };

    let logits = LogitsBatch {
        data: logits_data,
        batch: b_sz,
        seq_len: s_len,
        vocab: cfg.vocab_size,
    };
    let cache = ForwardCache {
        ids: batch.ids.clone(),
        batch: b_sz,
        seq_len: s_len,
        layers: layer_caches,
        final_input,
        final_normed,
        final_inv_rms,
        dropout: attn_dropout,
    };
    Ok((logits, cache))
}
