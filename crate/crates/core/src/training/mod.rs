//! Training configuration and the two pretraining loops: teacher pretraining
//! with cross-entropy, and student distillation-pretraining against the mean
//! logits of a frozen teacher ensemble.

pub mod losses;
pub mod optim;
pub mod schedule;

pub use losses::{
    cross_entropy, cross_entropy_with_grad, distillation_loss, distillation_loss_with_grad,
    ensemble_mean_logits, kl_divergence, softmax_with_temperature, TeacherEnsemble,
};
pub use optim::{adamw_update_slice, clip_grad_norm, grad_norm, AdamW};
pub use schedule::{lr_for, Schedule};

use std::io::Write;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, TrainMeta, CHECKPOINT_FORMAT_VERSION};
use crate::corpus::{pack_sequences, Document, PackedDataset, SplitCorpus};
use crate::error::{Error, Result};
use crate::model::{
    backward, forward, forward_train, init_params, ModelConfig, ModelParams, TokenBatch,
};
use crate::rng;
use crate::tokenizer::{TokenizerModel, BOS_ID, EOD_ID};

/// Optimizer, schedule, epoch/batch, and distillation hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub max_learning_rate: f64,
    pub n_epochs: usize,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub warmup_steps: u64,
    pub schedule: Schedule,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    pub max_grad_norm: Option<f64>,
    pub distill_temperature: f64,
    pub distill_alpha: f64,
    pub attn_dropout: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            max_learning_rate: 7e-4,
            n_epochs: 8,
            batch_size: 128,
            weight_decay: 5.0,
            warmup_steps: 600,
            schedule: Schedule::Cosine,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
            max_grad_norm: None,
            distill_temperature: 1.0,
            distill_alpha: 0.5,
            attn_dropout: 0.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_learning_rate <= 0.0 {
            return Err(Error::InvalidConfig("max_learning_rate must be positive".into()));
        }
        if self.n_epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidConfig(
                "n_epochs and batch_size must be positive".into(),
            ));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::InvalidConfig("weight_decay must be non-negative".into()));
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return Err(Error::InvalidConfig(format!("{name} must lie in (0,1)")));
            }
        }
        if self.adam_epsilon <= 0.0 {
            return Err(Error::InvalidConfig("adam_epsilon must be positive".into()));
        }
        if let Some(m) = self.max_grad_norm {
            if m <= 0.0 {
                return Err(Error::InvalidConfig("max_grad_norm must be positive".into()));
            }
        }
        if self.distill_temperature <= 0.0 {
            return Err(Error::InvalidConfig(
                "distill_temperature must be positive".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.distill_alpha) {
            return Err(Error::InvalidConfig("distill_alpha must lie in [0,1]".into()));
        }
        if !(0.0..1.0).contains(&self.attn_dropout) {
            return Err(Error::InvalidConfig("attn_dropout must lie in [0,1)".into()));
        }
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: TrainConfig = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepMetric {
    pub step: u64,
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochMetric {
    pub epoch: usize,
    pub step: u64,
    pub val_loss: f64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainHistory {
    pub steps: Vec<StepMetric>,
    pub validations: Vec<EpochMetric>,
}

pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub history: TrainHistory,
}

/// Encodes documents into one contiguous token stream: each document is
/// framed as BOS + content + EOD.
pub fn corpus_token_stream(tokenizer: &TokenizerModel, docs: &[Document]) -> Vec<u32> {
    let mut out = Vec::new();
    for doc in docs {
        out.push(BOS_ID);
        out.extend(tokenizer.encode(&doc.text));
        out.push(EOD_ID);
    }
    out
}

/// Mean per-token cross-entropy over a packed dataset, evaluated without
/// dropout. This single code path serves both the training-loop validation
/// metric and held-out evaluation.
pub fn packed_ce_loss(
    params: &ModelParams<f32>,
    cfg: &ModelConfig,
    packed: &PackedDataset,
    batch_size: usize,
) -> Result<f64> {
    if packed.count == 0 {
        return Err(Error::Corpus(
            "packed dataset holds no complete sequences".into(),
        ));
    }
    let indices: Vec<usize> = (0..packed.count).collect();
    let mut total = 0.0f64;
    let mut positions = 0usize;
    for chunk in indices.chunks(batch_size) {
        let (inputs, targets) = assemble_batch(packed, chunk)?;
        let logits = forward(params, cfg, &inputs)?;
        let loss = cross_entropy(&logits, &targets, None)?;
        total += loss as f64 * targets.len() as f64;
        positions += targets.len();
    }
    Ok(total / positions as f64)
}

/// Builds model inputs and next-token targets from packed sequences of
/// length L+1: inputs are positions 0..L, targets positions 1..=L.
fn assemble_batch(packed: &PackedDataset, indices: &[usize]) -> Result<(TokenBatch, Vec<u32>)> {
    let p = packed.sequence_length;
    let model_len = p - 1;
    let mut ids = Vec::with_capacity(indices.len() * model_len);
    let mut targets = Vec::with_capacity(indices.len() * model_len);
    for &i in indices {
        let seq = packed.sequence(i);
        ids.extend_from_slice(&seq[..model_len]);
        targets.extend_from_slice(&seq[1..]);
    }
    Ok((TokenBatch::new(ids, indices.len(), model_len)?, targets))
}

/// Pretrains a model on the train split with plain cross-entropy.
pub fn train_teacher(
    split: &SplitCorpus,
    tokenizer: &TokenizerModel,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    metrics: Option<&mut dyn Write>,
) -> Result<TrainOutcome> {
    run_training(split, tokenizer, None, model_cfg, train_cfg, metrics)
}

/// Pretrains a student with the distillation objective against the mean
/// logits of the frozen ensemble, recomputed for every batch.
pub fn train_student_distill(
    split: &SplitCorpus,
    tokenizer: &TokenizerModel,
    ensemble: &TeacherEnsemble,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    metrics: Option<&mut dyn Write>,
) -> Result<TrainOutcome> {
    run_training(split, tokenizer, Some(ensemble), model_cfg, train_cfg, metrics)
}

const DIVERGENCE_FACTOR: f64 = 10.0;
const DIVERGENCE_PATIENCE: usize = 100;

fn run_training(
    split: &SplitCorpus,
    tokenizer: &TokenizerModel,
    teachers: Option<&TeacherEnsemble>,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    mut metrics: Option<&mut dyn Write>,
) -> Result<TrainOutcome> {
    model_cfg.validate()?;
    train_cfg.validate()?;
    if tokenizer.vocab_size() != model_cfg.vocab_size {
        return Err(Error::InvalidConfig(format!(
            "tokenizer vocab {} does not match model vocab {}",
            tokenizer.vocab_size(),
            model_cfg.vocab_size
        )));
    }
    if let Some(ensemble) = teachers {
        let tcfg = ensemble.config();
        if tcfg.vocab_size != model_cfg.vocab_size {
            return Err(Error::InvalidConfig(format!(
                "teacher vocab {} does not match student vocab {}",
                tcfg.vocab_size, model_cfg.vocab_size
            )));
        }
        if tcfg.max_seq_len < model_cfg.max_seq_len {
            return Err(Error::InvalidConfig(
                "teachers cannot evaluate sequences as long as the student's".into(),
            ));
        }
    }

    let train_tokens = corpus_token_stream(tokenizer, &split.train);
    let val_tokens = corpus_token_stream(tokenizer, &split.validation);
    let packed = pack_sequences(&train_tokens, model_cfg.max_seq_len + 1)?;
    let val_packed = pack_sequences(&val_tokens, model_cfg.max_seq_len + 1)?;
    if packed.count == 0 {
        return Err(Error::Corpus("train split shorter than one sequence".into()));
    }
    if val_packed.count == 0 {
        return Err(Error::Corpus(
            "validation split shorter than one sequence".into(),
        ));
    }

    let steps_per_epoch = packed.count.div_ceil(train_cfg.batch_size) as u64;
    let total_steps = train_cfg.n_epochs as u64 * steps_per_epoch;
    if train_cfg.warmup_steps > total_steps {
        return Err(Error::InvalidConfig(format!(
            "warmup_steps {} exceeds total steps {total_steps}",
            train_cfg.warmup_steps
        )));
    }

    let mut params: ModelParams<f32> =
        init_params(model_cfg, rng::sub_seed(train_cfg.seed, "init"));
    let mut order_rng = rng::stream(train_cfg.seed, "data-order");
    let mut dropout_rng = rng::stream(train_cfg.seed, "attn-dropout");
    let mut opt = AdamW::new(
        model_cfg,
        train_cfg.adam_beta1,
        train_cfg.adam_beta2,
        train_cfg.adam_epsilon,
    );

    if let Some(w) = metrics.as_deref_mut() {
        writeln!(w, "step,epoch,lr,train_loss,val_loss").map_err(|e| Error::io("metrics", e))?;
    }

    let mut history = TrainHistory::default();
    let mut step: u64 = 0;
    let mut initial_loss: Option<f64> = None;
    let mut high_loss_streak = 0usize;
    let alpha = train_cfg.distill_alpha as f32;
    let temperature = train_cfg.distill_temperature as f32;

    for epoch in 0..train_cfg.n_epochs {
        let mut order: Vec<usize> = (0..packed.count).collect();
        order.shuffle(&mut order_rng);
        for chunk in order.chunks(train_cfg.batch_size) {
            let (inputs, targets) = assemble_batch(&packed, chunk)?;
            let (logits, cache) = forward_train(
                &params,
                model_cfg,
                &inputs,
                train_cfg.attn_dropout,
                Some(&mut dropout_rng),
            )?;
            let (loss, d_logits) = match teachers {
                None => cross_entropy_with_grad(&logits, &targets, None)?,
                Some(ensemble) => {
                    let teacher_logits = ensemble_mean_logits(ensemble, &inputs)?;
                    distillation_loss_with_grad(
                        &targets,
                        &logits,
                        &teacher_logits,
                        alpha,
                        temperature,
                        None,
                    )?
                }
            };
            let loss = loss as f64;
            if !loss.is_finite() {
                return Err(Error::Diverged(format!(
                    "non-finite loss at step {step} (epoch {epoch})"
                )));
            }
            let baseline = *initial_loss.get_or_insert(loss);
            if loss > DIVERGENCE_FACTOR * baseline {
                high_loss_streak += 1;
                if high_loss_streak >= DIVERGENCE_PATIENCE {
                    return Err(Error::Diverged(format!(
                        "loss {loss:.4} stayed above {DIVERGENCE_FACTOR}x the initial loss \
                         {baseline:.4} for {DIVERGENCE_PATIENCE} consecutive steps (step {step})"
                    )));
                }
            } else {
                high_loss_streak = 0;
            }

            let mut grads = backward(&params, model_cfg, &cache, &d_logits)?;
            if let Some(max_norm) = train_cfg.max_grad_norm {
                clip_grad_norm(&mut grads, max_norm);
            }
            let lr = lr_for(
                train_cfg.schedule,
                train_cfg.max_learning_rate,
                train_cfg.warmup_steps,
                step,
                total_steps,
            )?;
            opt.step(&mut params, &grads, lr, train_cfg.weight_decay)?;

            if let Some(w) = metrics.as_deref_mut() {
                writeln!(w, "{step},{epoch},{lr},{loss},")
                    .map_err(|e| Error::io("metrics", e))?;
            }
            history.steps.push(StepMetric {
                step,
                epoch,
                lr,
                train_loss: loss,
            });
            step += 1;
        }

        let val_loss = packed_ce_loss(&params, model_cfg, &val_packed, train_cfg.batch_size)?;
        if let Some(w) = metrics.as_deref_mut() {
            writeln!(w, "{},{epoch},,,{val_loss}", step.saturating_sub(1))
                .map_err(|e| Error::io("metrics", e))?;
        }
        history.validations.push(EpochMetric {
            epoch,
            step: step.saturating_sub(1),
            val_loss,
        });
    }

    let checkpoint = Checkpoint {
        config: model_cfg.clone(),
        params,
        tokenizer_hash: tokenizer.fingerprint(),
        meta: TrainMeta {
            format_version: CHECKPOINT_FORMAT_VERSION,
            train_config: train_cfg.clone(),
            total_steps,
            final_train_loss: history.steps.last().map(|s| s.train_loss).unwrap_or(f64::NAN),
            final_val_loss: history.validations.last().map(|v| v.val_loss),
        },
        extras: Vec::new(),
    };
    Ok(TrainOutcome {
        checkpoint,
        history,
    })
}
