//! A small Llama-style causal decoder: token embedding, rotary position
//! encoding, grouped-query attention, SwiGLU feed-forward, RMS normalization,
//! and an (optionally tied) output head. Forward evaluation and exact
//! reverse-mode gradients are implemented by hand in this module tree.

mod backward;
mod forward;
pub mod rope;

pub use backward::{backward, backward_from_hidden};
pub use forward::{forward, forward_train, ForwardCache, LogitsBatch, TokenBatch};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{Matrix, Scalar};

pub const RMS_NORM_EPS: f64 = 1e-5;
pub const INIT_STD: f64 = 0.02;

fn default_rope_base() -> f64 {
    10_000.0
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub n_kv_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    #[serde(default = "default_rope_base")]
    pub rope_base: f64,
    #[serde(default)]
    pub tie_embeddings: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 16_000,
            n_layers: 32,
            n_heads: 15,
            n_kv_heads: 5,
            d_model: 960,
            d_ff: 2560,
            max_seq_len: 512,
            rope_base: default_rope_base(),
            tie_embeddings: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("vocab_size", self.vocab_size),
            ("n_heads", self.n_heads),
            ("n_kv_heads", self.n_kv_heads),
            ("d_model", self.d_model),
            ("d_ff", self.d_ff),
            ("max_seq_len", self.max_seq_len),
        ] {
            if v == 0 {
                return Err(Error::InvalidConfig(format!("{name} must be positive")));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.n_heads % self.n_kv_heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "n_heads {} not divisible by n_kv_heads {}",
                self.n_heads, self.n_kv_heads
            )));
        }
        if self.head_dim() % 2 != 0 {
            return Err(Error::InvalidConfig(format!(
                "head dimension {} must be even for rotary pairs",
                self.head_dim()
            )));
        }
        if self.rope_base <= 0.0 {
            return Err(Error::InvalidConfig("rope_base must be positive".into()));
        }
        Ok(())
    }

    #[inline]
    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Key/value width: n_kv_heads * head_dim.
    #[inline]
    pub fn kv_dim(&self) -> usize {
        self.n_kv_heads * self.head_dim()
    }

    /// Query heads per key/value head.
    #[inline]
    pub fn group_size(&self) -> usize {
        self.n_heads / self.n_kv_heads
    }

    /// Exact number of scalar parameters in the `ModelParams` layout.
    pub fn param_count(&self) -> u64 {
        let d = self.d_model as u64;
        let v = self.vocab_size as u64;
        let f = self.d_ff as u64;
        let kv = self.kv_dim() as u64;
        let per_layer = d * d          // wq
            + d * kv                   // wk
            + d * kv                   // wv
            + d * d                    // wo
            + 2 * d * f                // w_gate, w_up
            + f * d                    // w_down
            + 2 * d; // attn_norm, ffn_norm
        let head = if self.tie_embeddings { 0 } else { d * v };
        v * d + self.n_layers as u64 * per_layer + d + head
    }
}

/// Per-layer weights.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<T> {
    pub attn_norm: Vec<T>,
    pub wq: Matrix<T>,
    pub wk: Matrix<T>,
    pub wv: Matrix<T>,
    pub wo: Matrix<T>,
    pub ffn_norm: Vec<T>,
    pub w_gate: Matrix<T>,
    pub w_up: Matrix<T>,
    pub w_down: Matrix<T>,
}

/// The named tensor collection for a model. The same layout doubles as the
/// gradient collection and as optimizer moment storage.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    pub tok_embedding: Matrix<T>,
    pub layers: Vec<LayerParams<T>>,
    pub final_norm: Vec<T>,
    pub lm_head: Option<Matrix<T>>,
}

impl<T: Scalar> ModelParams<T> {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let d = cfg.d_model;
        let kv = cfg.kv_dim();
        let layers = (0..cfg.n_layers)
            .map(|_| LayerParams {
                attn_norm: vec![T::zero(); d],
                wq: Matrix::zeros(d, d),
                wk: Matrix::zeros(d, kv),
                wv: Matrix::zeros(d, kv),
                wo: Matrix::zeros(d, d),
                ffn_norm: vec![T::zero(); d],
                w_gate: Matrix::zeros(d, cfg.d_ff),
                w_up: Matrix::zeros(d, cfg.d_ff),
                w_down: Matrix::zeros(cfg.d_ff, d),
            })
            .collect();
        ModelParams {
            tok_embedding: Matrix::zeros(cfg.vocab_size, d),
            layers,
            final_norm: vec![T::zero(); d],
            lm_head: if cfg.tie_embeddings {
                None
            } else {
                Some(Matrix::zeros(d, cfg.vocab_size))
            },
        }
    }

    /// Visits every tensor in canonical order as (name, shape, data).
    pub fn for_each_tensor(&self, mut f: impl FnMut(&str, &[usize], &[T])) {
        f(
            "tok_embedding",
            &[self.tok_embedding.rows, self.tok_embedding.cols],
            &self.tok_embedding.data,
        );
        for (i, layer) in self.layers.iter().enumerate() {
            let name = |t: &str| format!("layers.{i}.{t}");
            f(&name("attn_norm"), &[layer.attn_norm.len()], &layer.attn_norm);
            for (t, m) in [
                ("wq", &layer.wq),
                ("wk", &layer.wk),
                ("wv", &layer.wv),
                ("wo", &layer.wo),
            ] {
                f(&name(t), &[m.rows, m.cols], &m.data);
            }
            f(&name("ffn_norm"), &[layer.ffn_norm.len()], &layer.ffn_norm);
            for (t, m) in [
                ("w_gate", &layer.w_gate),
                ("w_up", &layer.w_up),
                ("w_down", &layer.w_down),
            ] {
                f(&name(t), &[m.rows, m.cols], &m.data);
            }
        }
        f("final_norm", &[self.final_norm.len()], &self.final_norm);
        if let Some(head) = &self.lm_head {
            f("lm_head", &[head.rows, head.cols], &head.data);
        }
    }

    /// Mutable named views of every tensor, in the same canonical order as
    /// `for_each_tensor`.
    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut [T])> {
        let mut out: Vec<(String, &mut [T])> = Vec::new();
        out.push(("tok_embedding".into(), &mut self.tok_embedding.data[..]));
        for (i, layer) in self.layers.iter_mut().enumerate() {
            out.push((format!("layers.{i}.attn_norm"), &mut layer.attn_norm[..]));
            out.push((format!("layers.{i}.wq"), &mut layer.wq.data[..]));
            out.push((format!("layers.{i}.wk"), &mut layer.wk.data[..]));
            out.push((format!("layers.{i}.wv"), &mut layer.wv.data[..]));
            out.push((format!("layers.{i}.wo"), &mut layer.wo.data[..]));
            out.push((format!("layers.{i}.ffn_norm"), &mut layer.ffn_norm[..]));
            out.push((format!("layers.{i}.w_gate"), &mut layer.w_gate.data[..]));
            out.push((format!("layers.{i}.w_up"), &mut layer.w_up.data[..]));
            out.push((format!("layers.{i}.w_down"), &mut layer.w_down.data[..]));
        }
        out.push(("final_norm".into(), &mut self.final_norm[..]));
        if let Some(head) = &mut self.lm_head {
            out.push(("lm_head".into(), &mut head.data[..]));
        }
        out
    }

    /// Mutable flat views of every tensor, in the same canonical order as
    /// `for_each_tensor`.
    pub fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        let mut out: Vec<&mut [T]> = Vec::new();
        out.push(&mut self.tok_embedding.data);
        for layer in &mut self.layers {
            out.push(&mut layer.attn_norm);
            out.push(&mut layer.wq.data);
            out.push(&mut layer.wk.data);
            out.push(&mut layer.wv.data);
            out.push(&mut layer.wo.data);
            out.push(&mut layer.ffn_norm);
            out.push(&mut layer.w_gate.data);
            out.push(&mut layer.w_up.data);
            out.push(&mut layer.w_down.data);
        }
        out.push(&mut self.final_norm);
        if let Some(head) = &mut self.lm_head {
            out.push(&mut head.data);
        }
        out
    }

    /// Immutable flat views in canonical order.
    pub fn tensors(&self) -> Vec<&[T]> {
        let mut out: Vec<&[T]> = Vec::new();
        out.push(&self.tok_embedding.data);
        for layer in &self.layers {
            out.push(&layer.attn_norm);
            out.push(&layer.wq.data);
            out.push(&layer.wk.data);
            out.push(&layer.wv.data);
            out.push(&layer.wo.data);
            out.push(&layer.ffn_norm);
            out.push(&layer.w_gate.data);
            out.push(&layer.w_up.data);
            out.push(&layer.w_down.data);
        }
        out.push(&self.final_norm);
        if let Some(head) = &self.lm_head {
            out.push(&head.data);
        }
        out
    }

    pub fn n_scalars(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|t| t.iter().all(|v| v.is_finite()))
    }
}

/// Draws fresh parameters: weights from a truncated normal (std 0.02,
/// clipped at three standard deviations), norm gains at one.
pub fn init_params<T: Scalar>(cfg: &ModelConfig, seed: u64) -> ModelParams<T> {
    let mut rng = rng::stream(seed, "model-init");
    let mut params = ModelParams::zeros(cfg);
    let mut fill = |m: &mut Matrix<T>| {
        for v in &mut m.data {
            *v = T::of(rng::truncated_normal(&mut rng, INIT_STD));
        }
    };
    fill(&mut params.tok_embedding);
    for layer in &mut params.layers {
        fill(&mut layer.wq);
        fill(&mut layer.wk);
        fill(&mut layer.wv);
        fill(&mut layer.wo);
        fill(&mut layer.w_gate);
        fill(&mut layer.w_up);
        fill(&mut layer.w_down);
        layer.attn_norm.fill(T::one());
        layer.ffn_norm.fill(T::one());
    }
    params.final_norm.fill(T::one());
    if let Some(head) = &mut params.lm_head {
        fill(head);
    }
    params
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> ModelConfig {
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

    #[test]
    fn reference_config_lands_near_345m() {
        let cfg = ModelConfig::default();
        let count = cfg.param_count() as f64;
        assert!(
            (count - 345.0e6).abs() / 345.0e6 < 0.01,
            "expected ~345M, got {count}"
        );
    }

    #[test]
    fn small_config_lands_near_16m() {
        let cfg = ModelConfig {
            vocab_size: 16_000,
            n_layers: 8,
            n_heads: 8,
            n_kv_heads: 8,
            d_model: 256,
            d_ff: 1024,
            ..ModelConfig::default()
        };
        let count = cfg.param_count() as f64;
        assert!(
            (count - 16.0e6).abs() / 16.0e6 < 0.10,
            "expected ~16M, got {count}"
        );
    }

    #[test]
    fn zero_layer_tied_closed_form() {
        let cfg = ModelConfig {
            vocab_size: 100,
            n_layers: 0,
            n_heads: 2,
            n_kv_heads: 2,
            d_model: 8,
            d_ff: 16,
            max_seq_len: 8,
            rope_base: 10_000.0,
            tie_embeddings: true,
        };
        assert_eq!(cfg.param_count(), 100 * 8 + 8);
    }

    #[test]
    fn param_count_matches_allocated_layout() {
        let cfg = tiny_config();
        let params: ModelParams<f32> = ModelParams::zeros(&cfg);
        assert_eq!(params.n_scalars() as u64, cfg.param_count());
        let tied = ModelConfig {
            tie_embeddings: true,
            ..cfg
        };
        let params: ModelParams<f32> = ModelParams::zeros(&tied);
        assert_eq!(params.n_scalars() as u64, tied.param_count());
    }

    #[test]
    fn init_is_deterministic_and_seed_sensitive() {
        let cfg = tiny_config();
        let a: ModelParams<f32> = init_params(&cfg, 3);
        let b: ModelParams<f32> = init_params(&cfg, 3);
        let c: ModelParams<f32> = init_params(&cfg, 4);
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn init_std_close_to_nominal() {
        let cfg = ModelConfig {
            vocab_size: 2000,
            n_layers: 0,
            n_heads: 2,
            n_kv_heads: 2,
            d_model: 50,
            d_ff: 8,
            max_seq_len: 8,
            rope_base: 10_000.0,
            tie_embeddings: true,
        };
        let params: ModelParams<f64> = init_params(&cfg, 0);
        let w = &params.tok_embedding.data;
        assert!(w.len() >= 100_000);
        let mean: f64 = w.iter().sum::<f64>() / w.len() as f64;
        let var: f64 = w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / w.len() as f64;
        let std = var.sqrt();
        assert!(
            (std - INIT_STD).abs() / INIT_STD < 0.05,
            "empirical std {std} deviates more than 5% from {INIT_STD}"
        );
    }

    #[test]
    fn validate_catches_bad_divisibility() {
        let mut cfg = tiny_config();
        cfg.n_heads = 3;
        assert!(cfg.validate().is_err());
        let mut cfg = tiny_config();
        cfg.n_kv_heads = 3;
        assert!(cfg.validate().is_err());
        // head_dim 7 is odd
        let cfg = ModelConfig {
            d_model: 14,
            n_heads: 2,
            n_kv_heads: 2,
            ..tiny_config()
        };
        assert!(cfg.validate().is_err());
    }
}
