//! AdamW training with warmup, gradient accumulation and best-dev selection.

use ndarray::{Array2, Zip};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Checkpoint, Model};
use crate::error::{config_err, Error, Result};
use crate::seeded;
use crate::targetprep::TrainingSet;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub warmup_steps: usize,
    pub warmup_start_lr: f64,
    /// Micro-batches averaged into one update.
    pub grad_accum: usize,
    /// Number of optimizer updates.
    pub max_steps: usize,
    /// Examples per micro-batch.
    pub batch_size: usize,
    pub seed: u64,
    pub weight_decay: f64,
    /// Dev loss is measured every this many updates (and after the last).
    pub eval_every: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 5e-4,
            warmup_steps: 500,
            warmup_start_lr: 1e-7,
            grad_accum: 4,
            max_steps: 5000,
            batch_size: 8,
            seed: 1,
            weight_decay: 0.01,
            eval_every: 250,
            beta1: 0.9,
            beta2: 0.98,
            adam_eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let checks = [
            (self.learning_rate >= 0.0 && self.learning_rate.is_finite(), "learning_rate must be non-negative"),
            (self.warmup_start_lr >= 0.0, "warmup_start_lr must be non-negative"),
            (self.grad_accum >= 1, "grad_accum must be at least 1"),
            (self.batch_size >= 1, "batch_size must be at least 1"),
            (self.max_steps >= 1, "max_steps must be at least 1"),
            (self.warmup_steps <= self.max_steps, "warmup_steps must not exceed max_steps"),
            (self.eval_every >= 1, "eval_every must be at least 1"),
            (self.weight_decay >= 0.0, "weight_decay must be non-negative"),
            ((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2), "betas must be in [0, 1)"),
            (self.adam_eps > 0.0, "adam_eps must be positive"),
        ];
        match checks.iter().find(|(ok, _)| !ok) {
            Some((_, msg)) => Err(config_err(*msg)),
            None => Ok(()),
        }
    }
}

/// Learning rate for update `step` (0-based): linear from `warmup_start_lr`
/// to `learning_rate` over `warmup_steps`, then inverse square root decay.
pub fn lr_at(tc: &TrainConfig, step: usize) -> f64 {
    let w = tc.warmup_steps;
    if step < w {
        tc.warmup_start_lr + (tc.learning_rate - tc.warmup_start_lr) * step as f64 / w as f64
    } else if w == 0 {
        tc.learning_rate / ((step + 1) as f64).sqrt()
    } else {
        tc.learning_rate * (w as f64 / step as f64).sqrt()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub dev_loss: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Weights with the lowest dev loss (the final weights without a dev set).
    pub checkpoint: Checkpoint,
    pub log: Vec<LogRecord>,
    pub best_dev_loss: Option<f64>,
}

struct Adam {
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
    decay: Vec<bool>,
}

fn decays(name: &str) -> bool {
    !(name.ends_with(".bias") || name.ends_with(".gamma") || name.ends_with(".beta"))
}

fn mean_loss(model: &Model, set: &TrainingSet) -> Result<f64> {
    let mut total = 0.0;
    for ex in &set.examples {
        total += model.example_loss(ex)?;
    }
    Ok(total / set.examples.len().max(1) as f64)
}

/// Trains `model` in place on `data`. Deterministic given the config.
pub fn train(model: &mut Model, data: &TrainingSet, dev: Option<&TrainingSet>, tc: &TrainConfig) -> Result<TrainOutcome> {
    tc.validate()?;
    if data.examples.is_empty() {
        return Err(config_err("training set is empty"));
    }
    if data.mode.branch_count() != model.branch_count() {
        return Err(config_err(format!(
            "dataset mode {} needs {} branches, model has {}",
            data.mode.name(),
            data.mode.branch_count(),
            model.branch_count()
        )));
    }
    let mut order_rng: ChaCha8Rng = seeded!("train-order", tc.seed);
    let mut dropout_rng: ChaCha8Rng = seeded!("dropout", tc.seed);
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut next_example = |rng: &mut ChaCha8Rng| {
        if cursor == order.len() {
            order = (0..data.examples.len()).collect();
            order.shuffle(rng);
            cursor = 0;
        }
        cursor += 1;
        order[cursor - 1]
    };

    let mut adam = Adam {
        m: model.zero_grads(),
        v: model.zero_grads(),
        decay: model.names().iter().map(|n| decays(n)).collect(),
    };
    let mut grads = model.zero_grads();
    let mut log = Vec::with_capacity(tc.max_steps);
    let mut best: Option<(f64, Model, usize)> = None;
    let per_update = (tc.grad_accum * tc.batch_size) as f64;

    for step in 0..tc.max_steps {
        grads.iter_mut().for_each(|g| g.fill(0.0));
        let mut loss = 0.0;
        for _ in 0..tc.grad_accum * tc.batch_size {
            let ex = &data.examples[next_example(&mut order_rng)];
            loss += model.loss_and_grad(ex, &mut grads, 1.0 / per_update, Some(&mut dropout_rng))?;
        }
        loss /= per_update;
        if !loss.is_finite() || grads.iter().any(|g| g.iter().any(|x| !x.is_finite())) {
            return Err(Error::Training(format!(
                "non-finite loss or gradient at step {step} (loss {loss}, lr {})",
                lr_at(tc, step)
            )));
        }
        let lr = lr_at(tc, step);
        adam_update(model, &mut adam, &grads, tc, lr, step + 1);
        let mut rec = LogRecord {
            step: step + 1,
            loss,
            lr,
            dev_loss: None,
        };
        if let Some(dev) = dev {
            if (step + 1) % tc.eval_every == 0 || step + 1 == tc.max_steps {
                let d = mean_loss(model, dev)?;
                log::debug!("step {} loss {loss:.4} dev {d:.4}", step + 1);
                rec.dev_loss = Some(d);
                if best.as_ref().is_none_or(|(b, _, _)| d < *b) {
                    best = Some((d, model.clone(), step + 1));
                }
            }
        }
        log.push(rec);
    }
    let rng_state = Checkpoint::rng_bytes(&dropout_rng);
    let (best_dev_loss, weights, step) = match best {
        Some((d, m, s)) => (Some(d), m, s),
        None => (None, model.clone(), tc.max_steps),
    };
    Ok(TrainOutcome {
        checkpoint: Checkpoint {
            model: weights,
            step: step as u64,
            rng_state,
        },
        log,
        best_dev_loss,
    })
}

fn adam_update(model: &mut Model, adam: &mut Adam, grads: &[Array2<f64>], tc: &TrainConfig, lr: f64, t: usize) {
    let (b1, b2) = (tc.beta1, tc.beta2);
    let c1 = 1.0 - b1.powi(t as i32);
    let c2 = 1.0 - b2.powi(t as i32);
    for (i, p) in model.params_mut().iter_mut().enumerate() {
        let wd = if adam.decay[i] { tc.weight_decay } else { 0.0 };
        Zip::from(p)
            .and(&mut adam.m[i])
            .and(&mut adam.v[i])
            .and(&grads[i])
            .for_each(|p, m, v, &g| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let update = (*m / c1) / ((*v / c2).sqrt() + tc.adam_eps) + wd * *p;
                *p -= lr * update;
            });
    }
}
