//! Hyperparameter search: prior-based random sampling, successive-halving
//! early stopping over epoch budgets, incremental trial records, and the
//! loss-versus-score correlation analysis.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::corpus::{Document, SplitCorpus};
use crate::error::{Error, Result};
use crate::evaluation::{eval_loss, minimal_pair_accuracy, MinimalPairSuite, ScoreMode};
use crate::model::ModelConfig;
use crate::rng;
use crate::tokenizer::TokenizerModel;
use crate::training::{train_teacher, Schedule, TrainConfig};

/// A sampling distribution for one hyperparameter.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Prior {
    /// exp(Normal(mu, sigma)); mu and sigma live in log space.
    LogNormal { mu: f64, sigma: f64 },
    LogUniform { lo: f64, hi: f64 },
    Uniform { lo: f64, hi: f64 },
    Categorical { values: Vec<serde_json::Value> },
}

impl Prior {
    pub fn validate(&self) -> Result<()> {
        match self {
            Prior::LogNormal { sigma, .. } => {
                if *sigma <= 0.0 {
                    return Err(Error::Sweep("log-normal sigma must be positive".into()));
                }
            }
            Prior::LogUniform { lo, hi } => {
                if !(*lo > 0.0 && hi > lo) {
                    return Err(Error::Sweep(format!(
                        "log-uniform bounds must satisfy 0 < lo < hi, got [{lo}, {hi}]"
                    )));
                }
            }
            Prior::Uniform { lo, hi } => {
                if hi <= lo {
                    return Err(Error::Sweep(format!(
                        "uniform bounds must be ordered, got [{lo}, {hi}]"
                    )));
                }
            }
            Prior::Categorical { values } => {
                if values.is_empty() {
                    return Err(Error::Sweep("categorical prior has no values".into()));
                }
            }
        }
        Ok(())
    }

    fn sample(&self, rng: &mut impl Rng) -> serde_json::Value {
        match self {
            Prior::LogNormal { mu, sigma } => {
                let normal = rand_distr::Normal::new(*mu, *sigma).expect("validated");
                let x: f64 = rng.sample(normal);
                serde_json::json!(x.exp())
            }
            Prior::LogUniform { lo, hi } => {
                let u = rng.random_range(lo.ln()..hi.ln());
                serde_json::json!(u.exp())
            }
            Prior::Uniform { lo, hi } => {
                serde_json::json!(rng.random_range(*lo..*hi))
            }
            Prior::Categorical { values } => values[rng.random_range(0..values.len())].clone(),
        }
    }
}

/// Named priors over TrainConfig fields. The map is ordered so sampling
/// consumes the random stream in a stable field order.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct PriorSet {
    pub priors: BTreeMap<String, Prior>,
}

impl PriorSet {
    pub fn validate(&self) -> Result<()> {
        for (name, prior) in &self.priors {
            prior.validate()?;
            if !SWEEPABLE_FIELDS.contains(&name.as_str()) {
                return Err(Error::Sweep(format!(
                    "unknown or unsweepable field {name:?}; sweepable fields: {SWEEPABLE_FIELDS:?}"
                )));
            }
        }
        Ok(())
    }
}

/// `n_epochs` is excluded: the epoch budget belongs to the halving plan.
const SWEEPABLE_FIELDS: &[&str] = &[
    "max_learning_rate",
    "batch_size",
    "weight_decay",
    "warmup_steps",
    "schedule",
    "adam_beta1",
    "adam_beta2",
    "adam_epsilon",
    "max_grad_norm",
    "distill_temperature",
    "distill_alpha",
    "attn_dropout",
];

fn as_f64(name: &str, v: &serde_json::Value) -> Result<f64> {
    v.as_f64()
        .ok_or_else(|| Error::Sweep(format!("prior for {name} produced a non-numeric value {v}")))
}

/// Draws one trial configuration from the priors, starting from `base` for
/// every unswept field. Deterministic under `seed`.
pub fn sample_config(priors: &PriorSet, base: &TrainConfig, seed: u64) -> Result<TrainConfig> {
    priors.validate()?;
    let mut cfg = base.clone();
    let mut rng = rng::stream(seed, "config-sample");
    for (name, prior) in &priors.priors {
        let value = prior.sample(&mut rng);
        match name.as_str() {
            "max_learning_rate" => cfg.max_learning_rate = as_f64(name, &value)?,
            "batch_size" => cfg.batch_size = (as_f64(name, &value)?.round() as usize).max(1),
            "weight_decay" => cfg.weight_decay = as_f64(name, &value)?,
            "warmup_steps" => cfg.warmup_steps = as_f64(name, &value)?.round().max(0.0) as u64,
            "schedule" => {
                let s = value
                    .as_str()
                    .ok_or_else(|| Error::Sweep("schedule prior must yield strings".into()))?;
                cfg.schedule = s.parse::<Schedule>()?;
            }
            "adam_beta1" => cfg.adam_beta1 = as_f64(name, &value)?,
            "adam_beta2" => cfg.adam_beta2 = as_f64(name, &value)?,
            "adam_epsilon" => cfg.adam_epsilon = as_f64(name, &value)?,
            "max_grad_norm" => cfg.max_grad_norm = Some(as_f64(name, &value)?),
            "distill_temperature" => cfg.distill_temperature = as_f64(name, &value)?,
            "distill_alpha" => cfg.distill_alpha = as_f64(name, &value)?,
            "attn_dropout" => cfg.attn_dropout = as_f64(name, &value)?,
            _ => unreachable!("validated against SWEEPABLE_FIELDS"),
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Sweep geometry: `n_trials` configs enter rung 0; each later rung keeps
/// the best `floor(n_trials / eta^k)` and multiplies the epoch budget by
/// `eta`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepPlan {
    pub n_trials: usize,
    pub eta: usize,
    pub n_rungs: usize,
    pub rung0_epochs: usize,
}

impl SweepPlan {
    pub fn validate(&self) -> Result<()> {
        if self.eta < 2 {
            return Err(Error::Sweep("eta must be at least 2".into()));
        }
        if self.n_rungs == 0 || self.rung0_epochs == 0 {
            return Err(Error::Sweep("n_rungs and rung0_epochs must be positive".into()));
        }
        halving_schedule(self.n_trials, self.eta, self.n_rungs).map(|_| ())
    }

    pub fn rung_epochs(&self, rung: usize) -> usize {
        self.rung0_epochs * self.eta.pow(rung as u32)
    }
}

/// Survivor counts per rung: rung k keeps floor(n_trials / eta^k).
pub fn halving_schedule(n_trials: usize, eta: usize, n_rungs: usize) -> Result<Vec<usize>> {
    if eta < 2 || n_rungs == 0 {
        return Err(Error::Sweep(format!(
            "infeasible halving geometry: eta {eta}, rungs {n_rungs}"
        )));
    }
    let needed = eta.checked_pow(n_rungs as u32 - 1).ok_or_else(|| {
        Error::Sweep("halving geometry overflows".into())
    })?;
    if n_trials < needed {
        return Err(Error::Sweep(format!(
            "{n_trials} trials cannot fill {n_rungs} rungs at eta {eta} (needs >= {needed})"
        )));
    }
    Ok((0..n_rungs)
        .map(|k| n_trials / eta.pow(k as u32))
        .collect())
}

/// One trial's record. Appended to the records file after every rung so an
/// interrupted sweep can resume with identical decisions.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepRecord {
    pub trial_id: usize,
    pub config: TrainConfig,
    /// Validation loss after each completed rung, in budget order.
    pub rung_losses: Vec<f64>,
    pub diverged: bool,
    /// True once the trial has trained through every rung.
    pub completed: bool,
    pub final_test_loss: Option<f64>,
    pub eval_accuracy: Option<f64>,
}

impl SweepRecord {
    pub fn last_val_loss(&self) -> Option<f64> {
        self.rung_losses.last().copied()
    }
}

/// Optional per-trial final evaluation inputs.
pub struct SweepEval<'a> {
    pub test_docs: &'a [Document],
    pub suites: &'a [MinimalPairSuite],
    pub score_mode: ScoreMode,
}

fn append_record(path: &Path, record: &SweepRecord) -> Result<()> {
    let mut file = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let line = serde_json::to_string(record)?;
    writeln!(file, "{line}").map_err(|e| Error::io(path, e))
}

/// Reads the latest state per trial from a records file.
pub fn load_records(path: &Path) -> Result<BTreeMap<usize, SweepRecord>> {
    let mut out = BTreeMap::new();
    if !path.exists() {
        return Ok(out);
    }
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    for line in std::io::BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: SweepRecord = serde_json::from_str(&line)?;
        out.insert(record.trial_id, record);
    }
    Ok(out)
}

/// Runs (or resumes) a sweep. Trials are trained at increasing epoch budgets
/// per rung, retrained from scratch under their own seed at each budget;
/// promotion keeps the lowest validation losses, ties broken by trial id.
/// Diverged trials are recorded and never promoted. Completed trials are
/// evaluated on the held-out set when `eval` is given.
#[allow(clippy::too_many_arguments)]
pub fn run_sweep(
    split: &SplitCorpus,
    tokenizer: &TokenizerModel,
    model_cfg: &ModelConfig,
    base_cfg: &TrainConfig,
    priors: &PriorSet,
    plan: &SweepPlan,
    seed: u64,
    records_path: &Path,
    eval: Option<&SweepEval>,
) -> Result<Vec<SweepRecord>> {
    plan.validate()?;
    priors.validate()?;
    let survivors_per_rung = halving_schedule(plan.n_trials, plan.eta, plan.n_rungs)?;

    // Sample every trial config up front; resuming must see identical draws.
    let mut records: BTreeMap<usize, SweepRecord> = BTreeMap::new();
    let existing = load_records(records_path)?;
    for trial_id in 0..plan.n_trials {
        let mut config = sample_config(
            priors,
            base_cfg,
            rng::sub_seed(seed, &format!("trial-config-{trial_id}")),
        )?;
        config.seed = rng::sub_seed(seed, &format!("trial-seed-{trial_id}"));
        if let Some(prev) = existing.get(&trial_id) {
            if prev.config != config {
                return Err(Error::Sweep(format!(
                    "records file does not match this sweep: trial {trial_id} was sampled \
                     with a different configuration (wrong seed, priors, or base config?)"
                )));
            }
            records.insert(trial_id, prev.clone());
        } else {
            records.insert(
                trial_id,
                SweepRecord {
                    trial_id,
                    config,
                    rung_losses: Vec::new(),
                    diverged: false,
                    completed: false,
                    final_test_loss: None,
                    eval_accuracy: None,
                },
            );
        }
    }

    let mut active: Vec<usize> = (0..plan.n_trials).collect();
    let mut final_checkpoints: BTreeMap<usize, Checkpoint> = BTreeMap::new();
    for rung in 0..plan.n_rungs {
        let epochs = plan.rung_epochs(rung);
        let last_rung = rung + 1 == plan.n_rungs;
        for &trial_id in &active {
            let (needs_training, needs_checkpoint) = {
                let rec = &records[&trial_id];
                if rec.diverged {
                    continue;
                }
                let needs_training = rec.rung_losses.len() <= rung;
                let wants_eval = eval.is_some_and(|ev| {
                    (!ev.test_docs.is_empty() && rec.final_test_loss.is_none())
                        || (!ev.suites.is_empty() && rec.eval_accuracy.is_none())
                });
                (needs_training, last_rung && wants_eval)
            };
            if !needs_training && !needs_checkpoint {
                continue;
            }
            let mut train_cfg = records[&trial_id].config.clone();
            train_cfg.n_epochs = epochs;
            match train_teacher(split, tokenizer, model_cfg, &train_cfg, None) {
                Ok(outcome) => {
                    let val = outcome
                        .checkpoint
                        .meta
                        .final_val_loss
                        .unwrap_or(f64::INFINITY);
                    let rec = records.get_mut(&trial_id).expect("record exists");
                    if needs_training {
                        rec.rung_losses.push(val);
                        append_record(records_path, rec)?;
                    }
                    if last_rung {
                        final_checkpoints.insert(trial_id, outcome.checkpoint);
                    }
                }
                Err(Error::Diverged(_)) => {
                    let rec = records.get_mut(&trial_id).expect("record exists");
                    rec.diverged = true;
                    if needs_training {
                        rec.rung_losses.push(f64::INFINITY);
                    }
                    append_record(records_path, rec)?;
                }
                Err(other) => return Err(other),
            }
        }

        if last_rung {
            break;
        }
        // Promotion: best finite losses at this rung, ties by trial id.
        let keep = survivors_per_rung[rung + 1];
        let mut ranked: Vec<usize> = active
            .iter()
            .copied()
            .filter(|id| {
                let rec = &records[id];
                !rec.diverged && rec.rung_losses.get(rung).is_some_and(|l| l.is_finite())
            })
            .collect();
        ranked.sort_by(|a, b| {
            let la = records[a].rung_losses[rung];
            let lb = records[b].rung_losses[rung];
            la.partial_cmp(&lb)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.cmp(b))
        });
        ranked.truncate(keep);
        active = ranked;
        if active.is_empty() {
            return Err(Error::Sweep(
                "every trial diverged before the final rung".into(),
            ));
        }
    }

    // Mark completions and evaluate survivors.
    for &trial_id in &active {
        let rec = records.get_mut(&trial_id).expect("record exists");
        if rec.diverged || rec.rung_losses.len() < plan.n_rungs {
            continue;
        }
        let mut changed = !rec.completed;
        rec.completed = true;
        if let (Some(ev), Some(ckpt)) = (eval, final_checkpoints.get(&trial_id)) {
            if rec.final_test_loss.is_none() && !ev.test_docs.is_empty() {
                rec.final_test_loss = Some(eval_loss(ckpt, tokenizer, ev.test_docs)?);
                changed = true;
            }
            if rec.eval_accuracy.is_none() && !ev.suites.is_empty() {
                let mut total = 0.0;
                for suite in ev.suites {
                    total += minimal_pair_accuracy(ckpt, tokenizer, suite, ev.score_mode)?;
                }
                rec.eval_accuracy = Some(total / ev.suites.len() as f64);
                changed = true;
            }
        }
        if changed {
            append_record(records_path, rec)?;
        }
    }

    Ok(records.into_values().collect())
}

/// Coefficient of determination of the least-squares fit of y on x.
/// Constant y yields 0; constant x is an error.
pub fn compute_r2(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::Sweep(format!(
            "length mismatch: {} xs vs {} ys",
            x.len(),
            y.len()
        )));
    }
    if x.len() < 3 {
        return Err(Error::Sweep("need at least 3 points for a fit".into()));
    }
    let n = x.len() as f64;
    let mean_x = x.iter().sum::<f64>() / n;
    let mean_y = y.iter().sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    let mut sxy = 0.0;
    for (&xi, &yi) in x.iter().zip(y) {
        sxx += (xi - mean_x) * (xi - mean_x);
        syy += (yi - mean_y) * (yi - mean_y);
        sxy += (xi - mean_x) * (yi - mean_y);
    }
    if sxx == 0.0 {
        return Err(Error::Sweep("x is constant; the fit is undefined".into()));
    }
    if syy == 0.0 {
        return Ok(0.0);
    }
    Ok((sxy * sxy / (sxx * syy)).min(1.0))
}

/// OLS slope of y on x.
pub fn ols_slope(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::Sweep("need matched x/y with at least 2 points".into()));
    }
    let n = x.len() as f64;
    let mean_x = x.iter().sum::<f64>() / n;
    let mean_y = y.iter().sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    for (&xi, &yi) in x.iter().zip(y) {
        sxx += (xi - mean_x) * (xi - mean_x);
        sxy += (xi - mean_x) * (yi - mean_y);
    }
    if sxx == 0.0 {
        return Err(Error::Sweep("x is constant; the slope is undefined".into()));
    }
    Ok(sxy / sxx)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorrelationRow {
    pub trial_id: usize,
    pub validation_loss: f64,
    pub test_loss: f64,
    pub accuracy: f64,
}

/// Correlation analysis over completed trials: how well the validation loss
/// explains the held-out test loss and the benchmark accuracy.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub rows: Vec<CorrelationRow>,
    pub r2_test_vs_validation: f64,
    pub r2_accuracy_vs_validation: f64,
    pub accuracy_slope: f64,
    pub accuracy_slope_negative: bool,
}

pub fn correlate_loss_and_scores(records: &[SweepRecord]) -> Result<CorrelationReport> {
    let rows: Vec<CorrelationRow> = records
        .iter()
        .filter_map(|r| {
            let validation_loss = r.last_val_loss()?;
            let test_loss = r.final_test_loss?;
            let accuracy = r.eval_accuracy?;
            (r.completed && validation_loss.is_finite()).then_some(CorrelationRow {
                trial_id: r.trial_id,
                validation_loss,
                test_loss,
                accuracy,
            })
        })
        .collect();
    if rows.len() < 3 {
        return Err(Error::Sweep(format!(
            "correlation needs at least 3 completed trials with loss and accuracy, got {}",
            rows.len()
        )));
    }
    let val: Vec<f64> = rows.iter().map(|r| r.validation_loss).collect();
    let test: Vec<f64> = rows.iter().map(|r| r.test_loss).collect();
    let acc: Vec<f64> = rows.iter().map(|r| r.accuracy).collect();
    let r2_test_vs_validation = compute_r2(&val, &test)?;
    let r2_accuracy_vs_validation = compute_r2(&val, &acc)?;
    let accuracy_slope = ols_slope(&val, &acc)?;
    Ok(CorrelationReport {
        rows,
        r2_test_vs_validation,
        r2_accuracy_vs_validation,
        accuracy_slope,
        accuracy_slope_negative: accuracy_slope < 0.0,
    })
}

impl CorrelationReport {
    /// CSV table for plotting: one row per trial.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("trial_id,validation_loss,test_loss,accuracy\n");
        for row in &self.rows {
            out.push_str(&format!(
                "{},{},{},{}\n",
                row.trial_id, row.validation_loss, row.test_loss, row.accuracy
            ));
        }
        out
    }
}
