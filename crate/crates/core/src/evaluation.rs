//! Held-out loss evaluation, zero-shot minimal-pair scoring, and a light
//! classifier fine-tuning path.

use std::io::BufRead;
use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::corpus::{pack_sequences, Document};
use crate::error::{Error, Result};
use crate::model::{
    backward_from_hidden, forward, forward_train, ModelConfig, ModelParams,
    TokenBatch,
};
use crate::rng;
use crate::tensor::{
    linear_backward_input, linear_backward_weight, linear_forward, Matrix, Scalar,
};
use crate::tokenizer::{TokenizerModel, BOS_ID, EOD_ID};
use crate::training::{
    adamw_update_slice, corpus_token_stream, lr_for, packed_ce_loss, AdamW, Schedule, TrainConfig,
};

/// One minimal pair: an acceptable sentence and its minimally different
/// unacceptable counterpart.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MinimalPair {
    pub sentence_good: String,
    pub sentence_bad: String,
    #[serde(default)]
    pub phenomenon: String,
}

#[derive(Debug, Clone)]
pub struct MinimalPairSuite {
    pub name: String,
    pub pairs: Vec<MinimalPair>,
}

impl MinimalPairSuite {
    pub fn new(name: impl Into<String>, pairs: Vec<MinimalPair>) -> Result<Self> {
        let suite = MinimalPairSuite {
            name: name.into(),
            pairs,
        };
        suite.validate()?;
        Ok(suite)
    }

    pub fn validate(&self) -> Result<()> {
        if self.pairs.is_empty() {
            return Err(Error::Eval(format!("suite {} has no pairs", self.name)));
        }
        for pair in &self.pairs {
            if pair.sentence_good.is_empty() || pair.sentence_bad.is_empty() {
                return Err(Error::Eval(format!(
                    "suite {} contains an empty sentence",
                    self.name
                )));
            }
        }
        Ok(())
    }

    /// Loads a JSON-lines suite file. Each line holds `sentence_good`,
    /// `sentence_bad`, and optionally `phenomenon` (falling back to the
    /// BLiMP-style `linguistics_term` or `UID` field names).
    pub fn load_jsonl(path: &Path) -> Result<Self> {
        #[derive(Deserialize)]
        struct Line {
            sentence_good: String,
            sentence_bad: String,
            #[serde(default)]
            phenomenon: Option<String>,
            #[serde(default)]
            linguistics_term: Option<String>,
            #[serde(default, rename = "UID")]
            uid: Option<String>,
        }
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let reader = std::io::BufReader::new(file);
        let mut pairs = Vec::new();
        for line in reader.lines() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let parsed: Line = serde_json::from_str(&line)?;
            pairs.push(MinimalPair {
                sentence_good: parsed.sentence_good,
                sentence_bad: parsed.sentence_bad,
                phenomenon: parsed
                    .phenomenon
                    .or(parsed.linguistics_term)
                    .or(parsed.uid)
                    .unwrap_or_default(),
            });
        }
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "suite".to_string());
        Self::new(name, pairs)
    }

    pub fn save_jsonl(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for pair in &self.pairs {
            out.push_str(&serde_json::to_string(pair)?);
            out.push('\n');
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SuiteScore {
    pub suite: String,
    pub accuracy: f64,
    pub n_pairs: usize,
}

/// Evaluation results for one checkpoint.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub checkpoint_id: String,
    pub test_loss: Option<f64>,
    pub suites: Vec<SuiteScore>,
    pub macro_average: Option<f64>,
}

impl EvalReport {
    pub fn new(checkpoint_id: String, test_loss: Option<f64>, suites: Vec<SuiteScore>) -> Self {
        let macro_average = if suites.is_empty() {
            None
        } else {
            Some(suites.iter().map(|s| s.accuracy).sum::<f64>() / suites.len() as f64)
        };
        EvalReport {
            checkpoint_id,
            test_loss,
            suites,
            macro_average,
        }
    }
}

fn check_tokenizer(ckpt: &Checkpoint, tokenizer: &TokenizerModel) -> Result<()> {
    let actual = tokenizer.fingerprint();
    if actual != ckpt.tokenizer_hash {
        return Err(Error::TokenizerMismatch {
            expected: ckpt.tokenizer_hash.clone(),
            actual,
        });
    }
    Ok(())
}

/// Mean per-token cross-entropy of a checkpoint over a held-out document
/// set, using the same packing and code path as the training-loop
/// validation metric.
pub fn eval_loss(
    ckpt: &Checkpoint,
    tokenizer: &TokenizerModel,
    test_docs: &[Document],
) -> Result<f64> {
    check_tokenizer(ckpt, tokenizer)?;
    let tokens = corpus_token_stream(tokenizer, test_docs);
    let packed = pack_sequences(&tokens, ckpt.config.max_seq_len + 1)?;
    packed_ce_loss(
        &ckpt.params,
        &ckpt.config,
        &packed,
        ckpt.meta.train_config.batch_size,
    )
}

/// How sentence log-likelihoods are aggregated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreMode {
    /// Total summed log-likelihood (the default).
    #[default]
    Sum,
    /// Mean log-likelihood per predicted token.
    PerToken,
}

/// Total log-likelihood of `sentence` under the model, with BOS prepended.
/// Refuses over-length sentences rather than truncating.
pub fn score_sentence(
    ckpt: &Checkpoint,
    tokenizer: &TokenizerModel,
    sentence: &str,
) -> Result<f64> {
    check_tokenizer(ckpt, tokenizer)?;
    score_sentence_with(&ckpt.params, &ckpt.config, tokenizer, sentence, ScoreMode::Sum)
}

/// Generic scoring entry point shared by checkpoint-level scoring and the
/// 64-bit test oracles.
pub fn score_sentence_with<T: Scalar>(
    params: &ModelParams<T>,
    cfg: &ModelConfig,
    tokenizer: &TokenizerModel,
    sentence: &str,
    mode: ScoreMode,
) -> Result<f64> {
    let mut ids = vec![BOS_ID];
    ids.extend(tokenizer.encode(sentence));
    if ids.len() > cfg.max_seq_len + 1 {
        return Err(Error::Eval(format!(
            "sentence of {} tokens exceeds max_seq_len {}; refusing to truncate",
            ids.len() - 1,
            cfg.max_seq_len
        )));
    }
    let n_pred = ids.len() - 1;
    if n_pred == 0 {
        return Ok(0.0);
    }
    let inputs = TokenBatch::new(ids[..n_pred].to_vec(), 1, n_pred)?;
    let logits = forward(params, cfg, &inputs)?;
    let mut total = 0.0f64;
    for t in 0..n_pred {
        let row = logits.row(t);
        let target = ids[t + 1] as usize;
        let max = row
            .iter()
            .map(|v| v.as_f64())
            .fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0f64;
        for v in row {
            sum += (v.as_f64() - max).exp();
        }
        let lse = max + sum.ln();
        total += row[target].as_f64() - lse;
    }
    Ok(match mode {
        ScoreMode::Sum => total,
        ScoreMode::PerToken => total / n_pred as f64,
    })
}

/// Fraction of pairs whose acceptable sentence scores strictly higher than
/// its counterpart; exact ties count one half.
pub fn minimal_pair_accuracy(
    ckpt: &Checkpoint,
    tokenizer: &TokenizerModel,
    suite: &MinimalPairSuite,
    mode: ScoreMode,
) -> Result<f64> {
    check_tokenizer(ckpt, tokenizer)?;
    suite.validate()?;
    let hits: Result<Vec<f64>> = suite
        .pairs
        .par_iter()
        .map(|pair| {
            let good = score_sentence_with(
                &ckpt.params,
                &ckpt.config,
                tokenizer,
                &pair.sentence_good,
                mode,
            )?;
            let bad = score_sentence_with(
                &ckpt.params,
                &ckpt.config,
                tokenizer,
                &pair.sentence_bad,
                mode,
            )?;
            Ok(if good > bad {
                1.0
            } else if good == bad {
                0.5
            } else {
                0.0
            })
        })
        .collect();
    let hits = hits?;
    Ok(hits.iter().sum::<f64>() / hits.len() as f64)
}

/// One labeled classification example.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LabeledText {
    pub text: String,
    pub label: usize,
}

pub fn load_labeled_jsonl(path: &Path) -> Result<Vec<LabeledText>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = std::io::BufReader::new(file);
    let mut out = Vec::new();
    for line in reader.lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

/// Per-task fine-tuning hyperparameters, mirroring a per-task preset table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FineTuneTaskConfig {
    pub task: String,
    pub max_learning_rate: f64,
    pub batch_size: usize,
    pub n_epochs: usize,
    pub weight_decay: f64,
    pub schedule: Schedule,
    pub warmup_steps: u64,
    pub n_classes: usize,
}

impl FineTuneTaskConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_learning_rate <= 0.0 || self.batch_size == 0 || self.n_classes < 2 {
            return Err(Error::InvalidConfig(format!(
                "task {} has non-positive learning rate, batch size, or fewer than two classes",
                self.task
            )));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::InvalidConfig("weight_decay must be non-negative".into()));
        }
        Ok(())
    }
}

/// Loads a JSON array of per-task configs and selects one by name.
pub fn load_task_configs(path: &Path) -> Result<Vec<FineTuneTaskConfig>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let configs: Vec<FineTuneTaskConfig> = serde_json::from_str(&text)?;
    for cfg in &configs {
        cfg.validate()?;
    }
    Ok(configs)
}

/// Result of a fine-tuning run.
pub struct FineTuneOutcome {
    pub checkpoint: Checkpoint,
    pub eval_accuracy: f64,
}

fn encode_for_classification(
    tokenizer: &TokenizerModel,
    cfg: &ModelConfig,
    text: &str,
) -> Vec<u32> {
    let mut ids = vec![BOS_ID];
    ids.extend(tokenizer.encode(text));
    ids.truncate(cfg.max_seq_len);
    ids
}

/// Forward a batch of variable-length examples; returns class logits rows
/// [n, n_classes], plus the cache and last-token row indices for backward.
fn classify_batch<'a>(
    params: &ModelParams<f32>,
    cfg: &ModelConfig,
    head: &Matrix<f32>,
    encoded: &[&'a [u32]],
) -> Result<(Vec<f32>, crate::model::ForwardCache<f32>, Vec<usize>, TokenBatch)> {
    let max_len = encoded.iter().map(|e| e.len()).max().unwrap_or(1);
    let mut ids = Vec::with_capacity(encoded.len() * max_len);
    let mut last_rows = Vec::with_capacity(encoded.len());
    for (i, ex) in encoded.iter().enumerate() {
        ids.extend_from_slice(ex);
        ids.extend(std::iter::repeat(EOD_ID).take(max_len - ex.len()));
        last_rows.push(i * max_len + ex.len() - 1);
    }
    let batch = TokenBatch::new(ids, encoded.len(), max_len)?;
    let (_, cache) = forward_train(params, cfg, &batch, 0.0, None)?;
    let hidden = cache.final_hidden();
    let mut pooled = Vec::with_capacity(encoded.len() * cfg.d_model);
    for &r in &last_rows {
        pooled.extend_from_slice(&hidden[r * cfg.d_model..(r + 1) * cfg.d_model]);
    }
    let class_logits = linear_forward(&pooled, head, encoded.len());
    Ok((class_logits, cache, last_rows, batch))
}

/// Attaches a randomly initialized linear head on the final hidden state at
/// the last non-padding token and trains the full model plus head.
/// Reports accuracy on `eval_set`.
pub fn fine_tune_classifier(
    ckpt: &Checkpoint,
    tokenizer: &TokenizerModel,
    train_set: &[LabeledText],
    eval_set: &[LabeledText],
    task: &FineTuneTaskConfig,
    seed: u64,
) -> Result<FineTuneOutcome> {
    check_tokenizer(ckpt, tokenizer)?;
    task.validate()?;
    if train_set.is_empty() || eval_set.is_empty() {
        return Err(Error::Eval("fine-tuning needs non-empty train and eval sets".into()));
    }
    for ex in train_set.iter().chain(eval_set) {
        if ex.label >= task.n_classes {
            return Err(Error::Eval(format!(
                "label {} out of range for {} classes",
                ex.label, task.n_classes
            )));
        }
    }
    let distinct: std::collections::BTreeSet<usize> =
        train_set.iter().map(|e| e.label).collect();
    if distinct.len() < 2 {
        return Err(Error::Eval(
            "training set covers a single class; nothing to learn".into(),
        ));
    }

    let cfg = ckpt.config.clone();
    let mut params = ckpt.params.clone();
    let d = cfg.d_model;

    // Head init mirrors the model's weight initialization.
    let mut head = Matrix::<f32>::zeros(d, task.n_classes);
    {
        let mut head_rng = rng::stream(seed, "classifier-head-init");
        for v in &mut head.data {
            *v = rng::truncated_normal(&mut head_rng, crate::model::INIT_STD) as f32;
        }
    }

    let encoded_train: Vec<Vec<u32>> = train_set
        .iter()
        .map(|e| encode_for_classification(tokenizer, &cfg, &e.text))
        .collect();

    let steps_per_epoch = train_set.len().div_ceil(task.batch_size) as u64;
    let total_steps = (task.n_epochs as u64 * steps_per_epoch).max(1);
    let mut order_rng = rng::stream(seed, "finetune-order");
    let base = TrainConfig::default();
    let mut opt = AdamW::new(&cfg, base.adam_beta1, base.adam_beta2, base.adam_epsilon);
    let mut head_m = vec![0.0f32; head.data.len()];
    let mut head_v = vec![0.0f32; head.data.len()];
    let mut step = 0u64;

    for _epoch in 0..task.n_epochs {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut order_rng);
        for chunk in order.chunks(task.batch_size) {
            let encoded: Vec<&[u32]> = chunk.iter().map(|&i| encoded_train[i].as_slice()).collect();
            let labels: Vec<usize> = chunk.iter().map(|&i| train_set[i].label).collect();
            let (class_logits, cache, last_rows, batch) =
                classify_batch(&params, &cfg, &head, &encoded)?;

            // Softmax cross-entropy over classes, mean over the batch.
            let n = chunk.len();
            let inv_n = 1.0f32 / n as f32;
            let mut d_class = vec![0.0f32; class_logits.len()];
            for (i, &label) in labels.iter().enumerate() {
                let row = &class_logits[i * task.n_classes..(i + 1) * task.n_classes];
                let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
                let mut denom = 0.0f32;
                for &z in row {
                    denom += (z - max).exp();
                }
                for (c, &z) in row.iter().enumerate() {
                    d_class[i * task.n_classes + c] = ((z - max).exp() / denom) * inv_n;
                }
                d_class[i * task.n_classes + label] -= inv_n;
            }

            // Head gradients plus gradient into the pooled hidden rows.
            let mut pooled = Vec::with_capacity(n * d);
            let hidden = cache.final_hidden();
            for &r in &last_rows {
                pooled.extend_from_slice(&hidden[r * d..(r + 1) * d]);
            }
            let mut d_head = Matrix::<f32>::zeros(d, task.n_classes);
            linear_backward_weight(&pooled, &d_class, n, &mut d_head);
            let d_pooled = linear_backward_input(&d_class, &head, n);

            // Scatter pooled gradients back to their rows; padding rows stay
            // zero so they contribute nothing.
            let rows = batch.rows();
            let mut d_hidden = vec![0.0f32; rows * d];
            for (i, &r) in last_rows.iter().enumerate() {
                d_hidden[r * d..(r + 1) * d].copy_from_slice(&d_pooled[i * d..(i + 1) * d]);
            }
            let grads = backward_from_hidden(&params, &cfg, &cache, &d_hidden)?;

            let lr = lr_for(
                task.schedule,
                task.max_learning_rate,
                task.warmup_steps.min(total_steps),
                step.min(total_steps),
                total_steps,
            )?;
            opt.step(&mut params, &grads, lr, task.weight_decay)?;
            adamw_update_slice(
                &mut head.data,
                &d_head.data,
                &mut head_m,
                &mut head_v,
                opt.step_count(),
                lr,
                base.adam_beta1,
                base.adam_beta2,
                base.adam_epsilon,
                task.weight_decay,
            )?;
            step += 1;
        }
    }

    // Held-out accuracy by argmax over class logits.
    let mut correct = 0usize;
    for chunk in eval_set.chunks(task.batch_size.max(1)) {
        let encoded: Vec<Vec<u32>> = chunk
            .iter()
            .map(|e| encode_for_classification(tokenizer, &cfg, &e.text))
            .collect();
        let views: Vec<&[u32]> = encoded.iter().map(|e| e.as_slice()).collect();
        let (class_logits, _, _, _) = classify_batch(&params, &cfg, &head, &views)?;
        for (i, ex) in chunk.iter().enumerate() {
            let row = &class_logits[i * task.n_classes..(i + 1) * task.n_classes];
            let pred = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap_or(std::cmp::Ordering::Equal))
                .map(|(c, _)| c)
                .unwrap_or(0);
            if pred == ex.label {
                correct += 1;
            }
        }
    }
    let eval_accuracy = correct as f64 / eval_set.len() as f64;

    let mut out = ckpt.clone();
    out.params = params;
    out.extras = vec![("classifier_head".to_string(), head)];
    Ok(FineTuneOutcome {
        checkpoint: out,
        eval_accuracy,
    })
}
