//! Quick timing probe for sizing the desk-scale experiments.

use std::time::Instant;

use desklm_core::corpus::split_documents;
use desklm_core::model::ModelConfig;
use desklm_core::synth::toy_documents;
use desklm_core::tokenizer::TokenizerModel;
use desklm_core::training::{train_teacher, TrainConfig};

fn main() {
    let t0 = Instant::now();
    let docs = toy_documents(1, 500_000);
    println!("corpus: {} docs in {:?}", docs.len(), t0.elapsed());

    let text: String = docs
        .iter()
        .map(|d| d.text.as_str())
        .collect::<Vec<_>>()
        .join("\n");
    let t0 = Instant::now();
    let tokenizer = TokenizerModel::train(&text, 512).unwrap();
    println!(
        "tokenizer: vocab {} in {:?}",
        tokenizer.vocab_size(),
        t0.elapsed()
    );

    let t0 = Instant::now();
    let ids = tokenizer.encode(&text);
    println!(
        "encode: {} chars -> {} tokens in {:?} ({:.2} chars/token)",
        text.len(),
        ids.len(),
        t0.elapsed(),
        text.len() as f64 / ids.len() as f64
    );

    let split = split_documents(&docs, 0.9, 0).unwrap();
    let model_cfg = ModelConfig {
        vocab_size: tokenizer.vocab_size(),
        n_layers: 2,
        n_heads: 4,
        n_kv_heads: 2,
        d_model: 32,
        d_ff: 96,
        max_seq_len: 32,
        rope_base: 10_000.0,
        tie_embeddings: false,
    };
    let train_cfg = TrainConfig {
        max_learning_rate: 3e-3,
        n_epochs: 1,
        batch_size: 64,
        weight_decay: 0.05,
        warmup_steps: 20,
        max_grad_norm: Some(1.0),
        seed: 1,
        ..TrainConfig::default()
    };
    let t0 = Instant::now();
    let outcome = train_teacher(&split, &tokenizer, &model_cfg, &train_cfg, None).unwrap();
    let steps = outcome.history.steps.len();
    println!(
        "training: {} steps in {:?} ({:.1} ms/step); first loss {:.3}, last loss {:.3}, val {:.3}",
        steps,
        t0.elapsed(),
        t0.elapsed().as_millis() as f64 / steps as f64,
        outcome.history.steps.first().unwrap().train_loss,
        outcome.history.steps.last().unwrap().train_loss,
        outcome.history.validations.last().unwrap().val_loss,
    );
}
