//! Desk-scale language model laboratory.
//!
//! Everything needed to reproduce a small distillation-pretraining study on
//! a laptop: corpus splitting and packing, byte-level BPE, a Llama-style
//! decoder with hand-written exact gradients, AdamW with warmup schedules,
//! teacher/student training loops, successive-halving hyperparameter sweeps,
//! held-out loss and minimal-pair evaluation, and bit-exact checkpointing.

pub mod checkpoint;
pub mod corpus;
pub mod error;
pub mod evaluation;
pub mod model;
pub mod rng;
pub mod sweep;
pub mod synth;
pub mod tensor;
pub mod tokenizer;
pub mod training;

pub use checkpoint::{Checkpoint, TrainMeta};
pub use corpus::{load_and_split, pack_sequences, CorpusSpec, Document, PackedDataset, SplitCorpus};
pub use error::{Error, Result};
pub use evaluation::{
    eval_loss, fine_tune_classifier, minimal_pair_accuracy, score_sentence, EvalReport,
    FineTuneTaskConfig, MinimalPair, MinimalPairSuite, ScoreMode,
};
pub use model::{
    backward, forward, forward_train, init_params, LogitsBatch, ModelConfig, ModelParams,
    TokenBatch,
};
pub use sweep::{
    compute_r2, correlate_loss_and_scores, halving_schedule, run_sweep, sample_config, Prior,
    PriorSet, SweepPlan, SweepRecord,
};
pub use tokenizer::TokenizerModel;
pub use training::{
    cross_entropy, distillation_loss, ensemble_mean_logits, kl_divergence, lr_for,
    softmax_with_temperature, train_student_distill, train_teacher, Schedule, TeacherEnsemble,
    TrainConfig, TrainOutcome,
};
