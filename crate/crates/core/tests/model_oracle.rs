//! Forward-pass checks against an independent straight-line reference
//! evaluation, plus finite-difference verification of the hand-written
//! backward pass at 64-bit precision.

mod common;

use common::{central_difference, rel_err, reference_forward, tiny_config, tiny_config_mha};
use desklm_core::model::{backward, forward, forward_train, init_params, ModelConfig, TokenBatch};
use desklm_core::training::{cross_entropy_with_grad, distillation_loss_with_grad};

fn fixed_ids(cfg: &ModelConfig, len: usize, salt: u64) -> Vec<u32> {
    (0..len)
        .map(|i| ((i as u64 * 2654435761 + salt * 97 + 13) % cfg.vocab_size as u64) as u32)
        .collect()
}

#[test]
fn forward_matches_straight_line_reference() {
    let cfg = tiny_config();
    let params = init_params::<f64>(&cfg, 7);
    let ids = fixed_ids(&cfg, 6, 1);
    let batch = TokenBatch::new(ids.clone(), 1, ids.len()).unwrap();
    let logits = forward(&params, &cfg, &batch).unwrap();
    let reference = reference_forward(&params, &cfg, &ids);
    for (pos, ref_row) in reference.iter().enumerate() {
        let row = logits.row(pos);
        for (v, r) in row.iter().zip(ref_row) {
            assert!(
                rel_err(*v, *r) < 1e-9,
                "position {pos}: {v} vs reference {r}"
            );
        }
    }
}

#[test]
fn forward_matches_reference_with_tied_head() {
    let cfg = ModelConfig {
        tie_embeddings: true,
        ..tiny_config()
    };
    let params = init_params::<f64>(&cfg, 11);
    let ids = fixed_ids(&cfg, 5, 2);
    let batch = TokenBatch::new(ids.clone(), 1, ids.len()).unwrap();
    let logits = forward(&params, &cfg, &batch).unwrap();
    let reference = reference_forward(&params, &cfg, &ids);
    for (pos, ref_row) in reference.iter().enumerate() {
        for (v, r) in logits.row(pos).iter().zip(ref_row) {
            assert!(rel_err(*v, *r) < 1e-9);
        }
    }
}

#[test]
fn gqa_with_full_kv_heads_matches_plain_mha_reference() {
    // With n_kv_heads = n_heads the grouped path degenerates to plain
    // multi-head attention, which is exactly what the reference computes.
    let cfg = tiny_config_mha();
    let params = init_params::<f64>(&cfg, 3);
    let ids = fixed_ids(&cfg, 7, 3);
    let batch = TokenBatch::new(ids.clone(), 1, ids.len()).unwrap();
    let logits = forward(&params, &cfg, &batch).unwrap();
    let reference = reference_forward(&params, &cfg, &ids);
    for (pos, ref_row) in reference.iter().enumerate() {
        for (v, r) in logits.row(pos).iter().zip(ref_row) {
            assert!(rel_err(*v, *r) < 1e-9);
        }
    }
}

#[test]
fn forward_shape_and_range_checks() {
    let cfg = tiny_config();
    let params = init_params::<f32>(&cfg, 0);
    let batch = TokenBatch::new(vec![1, 2, 3, 4, 5, 6], 2, 3).unwrap();
    let logits = forward(&params, &cfg, &batch).unwrap();
    assert_eq!(logits.data.len(), 2 * 3 * cfg.vocab_size);
    assert!(logits.data.iter().all(|v| v.is_finite()));

    let bad_token = TokenBatch::new(vec![cfg.vocab_size as u32], 1, 1).unwrap();
    assert!(forward(&params, &cfg, &bad_token).is_err());

    let too_long = TokenBatch::new(vec![0; cfg.max_seq_len + 1], 1, cfg.max_seq_len + 1).unwrap();
    assert!(forward(&params, &cfg, &too_long).is_err());
}

#[test]
fn f32_and_f64_paths_agree_loosely() {
    let cfg = tiny_config();
    let p64 = init_params::<f64>(&cfg, 21);
    let mut p32 = init_params::<f32>(&cfg, 21);
    // Same seed produces the same draws; cast the 64-bit weights anyway to
    // eliminate rounding in the inputs.
    let mut views32 = p32.tensors_mut();
    let views64 = p64.tensors();
    for (t32, t64) in views32.iter_mut().zip(views64) {
        for (a, &b) in t32.iter_mut().zip(t64.iter()) {
            *a = b as f32;
        }
    }
    let ids = fixed_ids(&cfg, 6, 4);
    let batch = TokenBatch::new(ids.clone(), 1, ids.len()).unwrap();
    let l32 = forward(&p32, &cfg, &batch).unwrap();
    let l64 = forward(&p64, &cfg, &batch).unwrap();
    for (a, b) in l32.data.iter().zip(&l64.data) {
        assert!((f64::from(*a) - b).abs() < 1e-3);
    }
}

#[test]
fn causality_perturbation_only_affects_later_positions() {
    let cfg = tiny_config();
    let params = init_params::<f64>(&cfg, 5);
    let ids = fixed_ids(&cfg, 8, 5);
    let batch = TokenBatch::new(ids.clone(), 1, ids.len()).unwrap();
    let base = forward(&params, &cfg, &batch).unwrap();
    for j in 0..ids.len() {
        let mut perturbed = ids.clone();
        perturbed[j] = (perturbed[j] + 1) % cfg.vocab_size as u32;
        let batch_p = TokenBatch::new(perturbed, 1, ids.len()).unwrap();
        let out = forward(&params, &cfg, &batch_p).unwrap();
        for pos in 0..ids.len() {
            let changed = base
                .row(pos)
                .iter()
                .zip(out.row(pos))
                .any(|(a, b)| (a - b).abs() > 1e-12);
            if pos < j {
                assert!(!changed, "perturbing {j} leaked into earlier position {pos}");
            }
            if pos == j {
                assert!(changed, "perturbing {j} had no effect at its own position");
            }
        }
    }
}

#[test]
fn zero_upstream_gradient_gives_zero_parameter_gradients() {
    let cfg = tiny_config();
    let params = init_params::<f64>(&cfg, 9);
    let ids = fixed_ids(&cfg, 5, 6);
    let batch = TokenBatch::new(ids, 1, 5).unwrap();
    let (mut logits, cache) = forward_train(&params, &cfg, &batch, 0.0, None).unwrap();
    for v in logits.data.iter_mut() {
        *v = 0.0;
    }
    let grads = backward(&params, &cfg, &cache, &logits).unwrap();
    for tensor in grads.tensors() {
        assert!(tensor.iter().all(|&g| g == 0.0));
    }
}

#[test]
fn non_finite_upstream_gradient_rejected() {
    let cfg = tiny_config();
    let params = init_params::<f64>(&cfg, 9);
    let batch = TokenBatch::new(vec![1, 2, 3], 1, 3).unwrap();
    let (mut logits, cache) = forward_train(&params, &cfg, &batch, 0.0, None).unwrap();
    logits.data[0] = f64::NAN;
    assert!(backward(&params, &cfg, &cache, &logits).is_err());
}

fn check_all_gradients_against_finite_differences(cfg: &ModelConfig, distill: bool) {
    let mut params = init_params::<f64>(cfg, 17);
    let teacher = init_params::<f64>(cfg, 18);
    let ids = fixed_ids(cfg, 6, 7);
    let batch = TokenBatch::new(ids[..5].to_vec(), 1, 5).unwrap();
    let targets: Vec<u32> = ids[1..6].to_vec();

    let loss_of = |p: &desklm_core::ModelParams<f64>| -> f64 {
        let logits = forward(p, cfg, &batch).unwrap();
        if distill {
            let teacher_logits = forward(&teacher, cfg, &batch).unwrap();
            distillation_loss_with_grad(&targets, &logits, &teacher_logits, 0.5, 2.0, None)
                .unwrap()
                .0
        } else {
            cross_entropy_with_grad(&logits, &targets, None).unwrap().0
        }
    };

    let (_, cache) = forward_train(&params, cfg, &batch, 0.0, None).unwrap();
    let logits = forward(&params, cfg, &batch).unwrap();
    let d_logits = if distill {
        let teacher_logits = forward(&teacher, cfg, &batch).unwrap();
        distillation_loss_with_grad(&targets, &logits, &teacher_logits, 0.5, 2.0, None)
            .unwrap()
            .1
    } else {
        cross_entropy_with_grad(&logits, &targets, None).unwrap().1
    };
    let analytic = backward(&params, cfg, &cache, &d_logits).unwrap();

    let shapes: Vec<usize> = analytic.tensors().iter().map(|t| t.len()).collect();
    let mut worst = 0.0f64;
    for (ti, &len) in shapes.iter().enumerate() {
        for ei in 0..len {
            let numeric = central_difference(&mut params, ti, ei, 1e-3, loss_of);
            let exact = analytic.tensors()[ti][ei];
            let err = rel_err(exact, numeric);
            worst = worst.max(err);
            assert!(
                err < 1e-4,
                "tensor {ti} element {ei}: analytic {exact}, numeric {numeric}, err {err}"
            );
        }
    }
    eprintln!(
        "gradient check ({}): {} parameters, worst relative error {worst:.3e}",
        if distill { "distillation" } else { "cross-entropy" },
        shapes.iter().sum::<usize>()
    );
}

#[test]
fn gradients_match_finite_differences_cross_entropy() {
    check_all_gradients_against_finite_differences(&tiny_config(), false);
}

#[test]
fn gradients_match_finite_differences_distillation() {
    check_all_gradients_against_finite_differences(&tiny_config(), true);
}

#[test]
fn gradients_match_finite_differences_tied_embeddings() {
    let cfg = ModelConfig {
        tie_embeddings: true,
        ..tiny_config()
    };
    check_all_gradients_against_finite_differences(&cfg, false);
}

#[test]
fn masked_positions_contribute_no_gradient() {
    // The last input token appears only at the final position; masking every
    // loss term that could see it must zero its embedding-row gradient.
    let cfg = tiny_config();
    let params = init_params::<f64>(&cfg, 23);
    let pad: u32 = 9;
    let ids = vec![1, 2, 3, pad];
    let batch = TokenBatch::new(ids, 1, 4).unwrap();
    let targets = vec![2, 3, pad, pad];
    let ignore = vec![false, false, true, true];
    let (logits, cache) = forward_train(&params, &cfg, &batch, 0.0, None).unwrap();
    let (_, d_logits) = cross_entropy_with_grad(&logits, &targets, Some(&ignore)).unwrap();
    let grads = backward(&params, &cfg, &cache, &d_logits).unwrap();
    let pad_row = grads.tok_embedding.row(pad as usize);
    assert!(
        pad_row.iter().all(|&g| g == 0.0),
        "masked-only token should receive zero embedding gradient"
    );
}
