//! Optimisers, the training loop, metrics and the ablation runner.

mod ablation;
mod metrics;
mod optim;

pub use ablation::{run_ablation, AblationRow, AblationTable, AblationTask};
pub use metrics::{classification_metrics, evaluate, predict_dataset, Metrics};
pub use optim::{
    adam_step, clip_global_norm, sgd_step, AdamConfig, AdamState, Optimizer, OptimizerKind,
};

use crate::config::field;
use crate::data::{batched, Batch, Dataset};
use crate::error::{Error, Result};
use crate::models::Model;
use crate::tensor::Graph;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::fmt::Write as _;
use std::time::{Duration, Instant};

const SHUFFLE_SALT: u64 = 0x5eed_0000_5bff_1e00;
const DROPOUT_SALT: u64 = 0x5eed_0000_d209_0070;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Epochs without a validation improvement before stopping; 0 never
    /// stops early.
    pub early_stop_patience: usize,
    /// Validate every this many epochs (and always after the last one).
    pub eval_every: usize,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub clip_norm: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            optimizer: OptimizerKind::Adam,
            lr: 1e-3,
            batch_size: 64,
            epochs: 20,
            seed: 0,
            early_stop_patience: 5,
            eval_every: 1,
            clip_norm: 5.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("train.lr", "must be positive"));
        }
        if self.epochs == 0 {
            return Err(Error::config("train.epochs", "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be at least 1"));
        }
        if self.eval_every == 0 {
            return Err(Error::config("train.eval_every", "must be at least 1"));
        }
        if self.clip_norm.is_nan() || self.clip_norm < 0.0 {
            return Err(Error::config("train.clip_norm", "must be non-negative"));
        }
        Ok(())
    }

    /// Applies a `[train]` configuration key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let path = format!("train.{key}");
        match key {
            "optimizer" => self.optimizer = field(&path, value)?,
            "lr" => self.lr = field(&path, value)?,
            "batch_size" => self.batch_size = field(&path, value)?,
            "epochs" => self.epochs = field(&path, value)?,
            "seed" => self.seed = field(&path, value)?,
            "early_stop_patience" => self.early_stop_patience = field(&path, value)?,
            "eval_every" => self.eval_every = field(&path, value)?,
            "clip_norm" => self.clip_norm = field(&path, value)?,
            _ => return Err(Error::config(path, "unknown key")),
        }
        Ok(())
    }

    pub fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("optimizer", self.optimizer.to_string()),
            ("lr", format!("{:?}", self.lr)),
            ("batch_size", self.batch_size.to_string()),
            ("epochs", self.epochs.to_string()),
            ("seed", self.seed.to_string()),
            ("early_stop_patience", self.early_stop_patience.to_string()),
            ("eval_every", self.eval_every.to_string()),
            ("clip_norm", format!("{:?}", self.clip_norm)),
        ]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    /// Mean training loss over the epoch's batches.
    pub loss: f64,
    /// Validation metrics, present on evaluation epochs.
    pub val: Option<Metrics>,
}

#[derive(Clone, Debug)]
pub struct RunResult {
    pub seed: u64,
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose parameters the model holds after [`fit`] returns.
    pub best_epoch: usize,
    pub best: Metrics,
    /// Number of steps whose gradient norm was clipped.
    pub clipped_steps: usize,
    pub wall_time: Duration,
}

impl RunResult {
    /// Rows of the metrics table, without header. Empty metric cells are
    /// written as `-`.
    pub fn tsv_rows(&self, variant: &str) -> String {
        let mut out = String::new();
        for e in &self.epochs {
            let (acc, f1) = match e.val {
                Some(m) => (format!("{:?}", m.accuracy), format!("{:?}", m.macro_f1)),
                None => ("-".into(), "-".into()),
            };
            let _ = writeln!(out, "{variant}\t{}\t{}\t{:?}\t{acc}\t{f1}", self.seed, e.epoch, e.loss);
        }
        out
    }

    /// A line-oriented human summary.
    pub fn summary(&self) -> String {
        let mut out = String::new();
        for e in &self.epochs {
            let _ = write!(out, "epoch {:>3}  loss {:.6}", e.epoch, e.loss);
            if let Some(m) = e.val {
                let _ = write!(out, "  val_acc {:.4}  val_macro_f1 {:.4}", m.accuracy, m.macro_f1);
            }
            out.push('\n');
        }
        let _ = writeln!(
            out,
            "best epoch {} acc {:.4} macro_f1 {:.4} ({} clipped steps, {:.2}s)",
            self.best_epoch,
            self.best.accuracy,
            self.best.macro_f1,
            self.clipped_steps,
            self.wall_time.as_secs_f64()
        );
        out
    }
}

/// Header of the metrics table produced by [`RunResult::tsv_rows`].
pub const METRICS_HEADER: &str = "variant\tseed\tepoch\tloss\tacc\tmacro_f1\n";

/// One optimisation step on `batch`. Returns the loss before the update
/// and whether the gradient was clipped.
pub fn train_step(
    model: &mut Model,
    opt: &mut Optimizer,
    batch: &Batch,
    dropout_rng: Option<&mut ChaCha8Rng>,
    clip_norm: f64,
) -> Result<(f64, bool)> {
    let mut g = Graph::new();
    let logits = model.forward(&mut g, batch, dropout_rng)?;
    let loss = g.cross_entropy(logits, &batch.labels)?;
    let value = g.value(loss).item();
    if !value.is_finite() {
        let culprit = match model.store().iter().find(|(_, _, t)| !t.is_finite()) {
            Some((_, name, _)) => format!("parameter `{name}`"),
            None => match g.first_non_finite() {
                Some((node, op)) => format!("node {node} ({op})"),
                None => "loss".into(),
            },
        };
        return Err(Error::NonFinite(format!(
            "loss is {value}; first non-finite tensor: {culprit}"
        )));
    }
    g.backward(loss)?;
    let mut grads = g.param_grads(model.store());
    let mut clipped = false;
    if clip_norm > 0.0 {
        let norm = clip_global_norm(&mut grads, clip_norm);
        if !norm.is_finite() {
            return Err(Error::NonFinite(format!("gradient norm is {norm}")));
        }
        clipped = norm > clip_norm;
    }
    opt.step(model.store_mut(), &grads);
    Ok((value, clipped))
}

/// Trains `model` and leaves it holding the parameters of the epoch with
/// the best validation accuracy (the earliest on ties).
pub fn fit(model: &mut Model, train: &Dataset, val: &Dataset, cfg: &TrainConfig) -> Result<RunResult> {
    cfg.validate()?;
    if model.config().attention.gate_override.is_some() {
        return Err(Error::config(
            "attention.gate_override",
            "is a test hook and cannot be used for training",
        ));
    }
    if train.is_empty() || val.is_empty() {
        return Err(Error::Data("training and validation sets must be non-empty".into()));
    }
    let start = Instant::now();
    let mut opt = Optimizer::new(cfg.optimizer, cfg.lr, model.store());
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ SHUFFLE_SALT);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ DROPOUT_SALT);
    let mut epochs = Vec::new();
    let mut best: Option<(usize, Metrics, crate::params::ParamStore)> = None;
    let mut since_best = 0;
    let mut clipped_steps = 0;

    for epoch in 1..=cfg.epochs {
        let order_seed: u64 = shuffle_rng.gen();
        let (mut total, mut count) = (0.0, 0usize);
        for batch in batched(train, cfg.batch_size, order_seed, true) {
            let batch = batch?;
            let (loss, clipped) = train_step(model, &mut opt, &batch, Some(&mut dropout_rng), cfg.clip_norm)
                .map_err(|e| match e {
                    Error::NonFinite(msg) => Error::NonFinite(format!("epoch {epoch}: {msg}")),
                    other => other,
                })?;
            if clipped {
                clipped_steps += 1;
                log::info!("epoch {epoch}: gradient norm clipped to {}", cfg.clip_norm);
            }
            total += loss * batch.size as f64;
            count += batch.size;
        }
        let loss = total / count as f64;
        let val_metrics = if epoch % cfg.eval_every == 0 || epoch == cfg.epochs {
            Some(evaluate(model, val, cfg.batch_size.max(64))?)
        } else {
            None
        };
        log::debug!("epoch {epoch}: loss {loss:.6} val {val_metrics:?}");
        epochs.push(EpochRecord {
            epoch,
            loss,
            val: val_metrics,
        });
        if let Some(m) = val_metrics {
            if best.as_ref().is_none_or(|(_, b, _)| m.accuracy > b.accuracy) {
                best = Some((epoch, m, model.store().clone()));
                since_best = 0;
            } else {
                since_best += cfg.eval_every;
                if cfg.early_stop_patience > 0 && since_best >= cfg.early_stop_patience {
                    log::info!("early stop after epoch {epoch}");
                    break;
                }
            }
        }
    }

    let (best_epoch, best_metrics, best_store) = best.expect("the last epoch is always evaluated");
    model.store_mut().copy_values_from(&best_store)?;
    Ok(RunResult {
        seed: cfg.seed,
        epochs,
        best_epoch,
        best: best_metrics,
        clipped_steps,
        wall_time: start.elapsed(),
    })
}

#[cfg(test)]
mod tests;
