//! Loss functions: cross-entropy, temperature softmax, KL divergence, and
//! the combined distillation objective
//!
//! ```text
//! alpha * CE(y, softmax(z_s))
//!   + (1 - alpha) * T^2 * KL(softmax(z_t / T) || softmax(z_s / T))
//! ```
//!
//! with the teacher distribution as the first KL argument. The soft term is
//! computed per token position and averaged with the same mask as the
//! cross-entropy term.

use crate::error::{Error, Result};
use crate::model::{forward, LogitsBatch, ModelConfig, ModelParams, TokenBatch};
use crate::tensor::Scalar;

/// Numerically stable softmax of `z / temperature`.
pub fn softmax_with_temperature<T: Scalar>(z: &[T], temperature: T) -> Result<Vec<T>> {
    if temperature <= T::zero() {
        return Err(Error::InvalidConfig(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("softmax input".into()));
    }
    let mut out: Vec<T> = z.iter().map(|&v| v / temperature).collect();
    let max = out.iter().cloned().fold(T::neg_infinity(), T::max);
    let mut denom = T::zero();
    for v in out.iter_mut() {
        *v = (*v - max).exp();
        denom += *v;
    }
    for v in out.iter_mut() {
        *v = *v / denom;
    }
    Ok(out)
}

/// KL(p || q) = sum p ln(p/q), with 0 ln 0 = 0. Errors if q vanishes where
/// p has mass.
pub fn kl_divergence<T: Scalar>(p: &[T], q: &[T]) -> Result<T> {
    if p.len() != q.len() {
        return Err(Error::ShapeMismatch(format!(
            "distributions of length {} vs {}",
            p.len(),
            q.len()
        )));
    }
    let mut total = T::zero();
    for (&pi, &qi) in p.iter().zip(q) {
        if pi < T::zero() || qi < T::zero() {
            return Err(Error::InvalidConfig(
                "distributions must be non-negative".into(),
            ));
        }
        if pi > T::zero() {
            if qi <= T::zero() {
                return Err(Error::InvalidConfig(
                    "support violation: q is zero where p has mass".into(),
                ));
            }
            total += pi * (pi / qi).ln();
        }
    }
    Ok(total)
}

fn check_targets<T: Scalar>(
    logits: &LogitsBatch<T>,
    targets: &[u32],
    ignore: Option<&[bool]>,
) -> Result<usize> {
    let rows = logits.rows();
    if targets.len() != rows {
        return Err(Error::ShapeMismatch(format!(
            "{} targets for {} logit rows",
            targets.len(),
            rows
        )));
    }
    if let Some(mask) = ignore {
        if mask.len() != rows {
            return Err(Error::ShapeMismatch(format!(
                "ignore mask of length {} for {} rows",
                mask.len(),
                rows
            )));
        }
    }
    let mut live = 0usize;
    for (r, &t) in targets.iter().enumerate() {
        let ignored = ignore.map_or(false, |m| m[r]);
        if ignored {
            continue;
        }
        if t as usize >= logits.vocab {
            return Err(Error::Model(format!(
                "target id {t} out of range for vocab {}",
                logits.vocab
            )));
        }
        live += 1;
    }
    if live == 0 {
        return Err(Error::Eval("all positions are masked".into()));
    }
    Ok(live)
}

#[inline]
fn log_sum_exp<T: Scalar>(row: &[T]) -> T {
    let max = row.iter().cloned().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for &v in row {
        sum += (v - max).exp();
    }
    max + sum.ln()
}

/// Mean negative log-likelihood (natural log) over unmasked positions.
pub fn cross_entropy<T: Scalar>(
    logits: &LogitsBatch<T>,
    targets: &[u32],
    ignore: Option<&[bool]>,
) -> Result<T> {
    let live = check_targets(logits, targets, ignore)?;
    let mut total = 0.0f64;
    for (r, &t) in targets.iter().enumerate() {
        if ignore.map_or(false, |m| m[r]) {
            continue;
        }
        let row = logits.row(r);
        let lse = log_sum_exp(row);
        total += (lse - row[t as usize]).as_f64();
    }
    Ok(T::of(total / live as f64))
}

/// Cross-entropy plus its gradient with respect to the logits.
pub fn cross_entropy_with_grad<T: Scalar>(
    logits: &LogitsBatch<T>,
    targets: &[u32],
    ignore: Option<&[bool]>,
) -> Result<(T, LogitsBatch<T>)> {
    distillation_loss_with_grad(targets, logits, logits, T::one(), T::one(), ignore)
}

/// The combined distillation loss value.
pub fn distillation_loss<T: Scalar>(
    targets: &[u32],
    student: &LogitsBatch<T>,
    teacher_mean: &LogitsBatch<T>,
    alpha: T,
    temperature: T,
    ignore: Option<&[bool]>,
) -> Result<T> {
    distillation_loss_with_grad(targets, student, teacher_mean, alpha, temperature, ignore)
        .map(|(loss, _)| loss)
}

/// The combined distillation loss and its gradient with respect to the
/// student logits. With alpha = 1 this is exactly the cross-entropy path,
/// bit for bit; the teacher logits are then never read.
pub fn distillation_loss_with_grad<T: Scalar>(
    targets: &[u32],
    student: &LogitsBatch<T>,
    teacher_mean: &LogitsBatch<T>,
    alpha: T,
    temperature: T,
    ignore: Option<&[bool]>,
) -> Result<(T, LogitsBatch<T>)> {
    if alpha < T::zero() || alpha > T::one() {
        return Err(Error::InvalidConfig(format!(
            "alpha must lie in [0,1], got {alpha}"
        )));
    }
    if temperature <= T::zero() {
        return Err(Error::InvalidConfig(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    let soft_active = alpha < T::one();
    if soft_active
        && (student.rows() != teacher_mean.rows() || student.vocab != teacher_mean.vocab)
    {
        return Err(Error::ShapeMismatch(
            "student and teacher logits disagree in shape".into(),
        ));
    }
    let live = check_targets(student, targets, ignore)?;
    let inv_live = T::of(1.0 / live as f64);
    let ce_scale = alpha * inv_live;
    let soft_grad_scale = (T::one() - alpha) * temperature * inv_live;

    let vocab = student.vocab;
    let mut grad = vec![T::zero(); student.data.len()];
    let mut ce_sum = 0.0f64;
    let mut kl_sum = 0.0f64;

    let mut student_probs = vec![T::zero(); vocab];
    let mut teacher_probs = vec![T::zero(); vocab];
    for (r, &t) in targets.iter().enumerate() {
        if ignore.map_or(false, |m| m[r]) {
            continue;
        }
        let row = student.row(r);
        let grad_row = &mut grad[r * vocab..(r + 1) * vocab];

        if alpha > T::zero() {
            let lse = log_sum_exp(row);
            ce_sum += (lse - row[t as usize]).as_f64();
            for (g, &z) in grad_row.iter_mut().zip(row) {
                *g = ce_scale * (z - lse).exp();
            }
            grad_row[t as usize] -= ce_scale;
        }

        if soft_active {
            // Student and teacher distributions at the softened temperature.
            let mut s_max = T::neg_infinity();
            let mut t_max = T::neg_infinity();
            let teacher_row = teacher_mean.row(r);
            for i in 0..vocab {
                let sv = row[i] / temperature;
                let tv = teacher_row[i] / temperature;
                student_probs[i] = sv;
                teacher_probs[i] = tv;
                if sv > s_max {
                    s_max = sv;
                }
                if tv > t_max {
                    t_max = tv;
                }
            }
            let mut s_denom = T::zero();
            let mut t_denom = T::zero();
            for i in 0..vocab {
                student_probs[i] = (student_probs[i] - s_max).exp();
                teacher_probs[i] = (teacher_probs[i] - t_max).exp();
                s_denom += student_probs[i];
                t_denom += teacher_probs[i];
            }
            let s_lse = s_max + s_denom.ln();
            let t_lse = t_max + t_denom.ln();
            let mut kl = T::zero();
            for i in 0..vocab {
                let p = teacher_probs[i] / t_denom;
                let q = student_probs[i] / s_denom;
                if p > T::zero() {
                    let ln_p = teacher_row[i] / temperature - t_lse;
                    let ln_q = row[i] / temperature - s_lse;
                    kl += p * (ln_p - ln_q);
                }
                grad_row[i] += soft_grad_scale * (q - p);
            }
            kl_sum += kl.as_f64();
        }
    }

    let temp = temperature.as_f64();
    let loss = T::of(
        alpha.as_f64() * ce_sum / live as f64
            + (1.0 - alpha.as_f64()) * temp * temp * kl_sum / live as f64,
    );
    let grad = LogitsBatch {
        data: grad,
        batch: student.batch,
        seq_len: student.seq_len,
        vocab,
    };
    Ok((loss, grad))
}

/// Elementwise arithmetic mean of the teachers' logits on a token batch.
pub fn ensemble_mean_logits(
    ensemble: &TeacherEnsemble,
    batch: &TokenBatch,
) -> Result<LogitsBatch<f32>> {
    let teachers = ensemble.teachers();
    let mut mean: Option<LogitsBatch<f32>> = None;
    for (params, cfg) in teachers {
        let logits = forward(params, cfg, batch)?;
        match &mut mean {
            None => mean = Some(logits),
            Some(acc) => {
                for (a, &b) in acc.data.iter_mut().zip(&logits.data) {
                    *a += b;
                }
            }
        }
    }
    let mut mean = mean.expect("ensemble is non-empty by construction");
    let inv = 1.0f32 / teachers.len() as f32;
    for v in mean.data.iter_mut() {
        *v *= inv;
    }
    Ok(mean)
}

/// A frozen set of same-architecture teacher models.
pub struct TeacherEnsemble {
    teachers: Vec<(ModelParams<f32>, ModelConfig)>,
}

impl TeacherEnsemble {
    pub fn new(teachers: Vec<(ModelParams<f32>, ModelConfig)>) -> Result<Self> {
        let Some(first) = teachers.first() else {
            return Err(Error::InvalidConfig(
                "teacher ensemble must contain at least one model".into(),
            ));
        };
        let reference = first.1.clone();
        for (_, cfg) in &teachers {
            if *cfg != reference {
                return Err(Error::InvalidConfig(
                    "teachers in an ensemble must share one configuration".into(),
                ));
            }
        }
        Ok(TeacherEnsemble { teachers })
    }

    pub fn teachers(&self) -> &[(ModelParams<f32>, ModelConfig)] {
        &self.teachers
    }

    pub fn config(&self) -> &ModelConfig {
        &self.teachers[0].1
    }

    pub fn len(&self) -> usize {
        self.teachers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.teachers.is_empty()
    }
}
