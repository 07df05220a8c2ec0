use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::infer::infer;
use super::loss::{batch_loss_and_grad, sequence_loss, SeqRef};
use crate::dataset::SemiDataset;
use crate::error::{Error, Result};
use crate::measurement::MeasModel;
use crate::numerics::{child_seed, SeededRng};
use crate::prior_net::{NetDims, PriorNetParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_epochs: usize,
    pub learning_rate: f64,
    pub lr_decay: f64,
    /// Epochs between decays; `None` means `max_epochs / 6`.
    pub decay_every: Option<usize>,
    pub patience: usize,
    pub min_delta: f64,
    pub clip_norm: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub validation_fraction: f64,
    pub init_seed: u64,
    pub shuffle_seed: u64,
    pub validation_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            max_epochs: 2000,
            learning_rate: 5e-4,
            lr_decay: 0.9,
            decay_every: None,
            patience: 50,
            min_delta: 1e-4,
            clip_norm: 10.0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            validation_fraction: 0.1,
            init_seed: 0,
            shuffle_seed: 1,
            validation_seed: 2,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("learning_rate", self.learning_rate),
            ("lr_decay", self.lr_decay),
            ("clip_norm", self.clip_norm),
            ("adam_eps", self.adam_eps),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidArgument(format!("{name} must be positive, got {v}")));
            }
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::InvalidArgument("batch_size and max_epochs must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::InvalidArgument("Adam betas must lie in [0, 1)".into()));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) || self.min_delta < 0.0 {
            return Err(Error::InvalidArgument("invalid validation settings".into()));
        }
        Ok(())
    }

    pub fn decay_interval(&self) -> usize {
        self.decay_every.unwrap_or(self.max_epochs / 6).max(1)
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl Adam {
    pub fn new(len: usize, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
            beta1,
            beta2,
            eps,
        }
    }

    pub fn from_config(len: usize, cfg: &TrainConfig) -> Self {
        Self::new(len, cfg.beta1, cfg.beta2, cfg.adam_eps)
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut PriorNetParams, grad: &PriorNetParams, lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for (((p, g), m), v) in params
            .values_mut()
            .iter_mut()
            .zip(grad.values())
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValidationMetric {
    /// Mean squared state error of the posterior mean, per time step.
    StateMse,
    /// Unsupervised negative log-likelihood per time step.
    PredictiveNll,
    /// No held-out data: the epoch's training loss per time step.
    TrainLoss,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Objective per time step, averaged over the epoch.
    pub train_loss: f64,
    pub validation: f64,
    pub learning_rate: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub metric: ValidationMetric,
    pub initial_train_loss: f64,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_validation: f64,
    pub stopped_early: bool,
}

impl TrainLog {
    pub fn final_train_loss(&self) -> Option<f64> {
        self.epochs.last().map(|r| r.train_loss)
    }

    /// One JSON object per line: every epoch, then a summary record.
    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        for r in &self.epochs {
            serde_json::to_writer(&mut buf, r)?;
            buf.push(b'\n');
        }
        let summary = serde_json::json!({
            "summary": true,
            "metric": self.metric,
            "initial_train_loss": self.initial_train_loss,
            "best_epoch": self.best_epoch,
            "best_validation": self.best_validation,
            "stopped_early": self.stopped_early,
        });
        serde_json::to_writer(&mut buf, &summary)?;
        buf.push(b'\n');
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::File::create(path)?.write_all(&buf)?;
        Ok(())
    }
}

fn steps_in(items: &[SeqRef<'_>]) -> usize {
    items.iter().map(|s| s.measurements.len()).sum()
}

fn mean_objective(params: &PriorNetParams, items: &[SeqRef<'_>], model: &MeasModel) -> Result<f64> {
    let mut total = 0.0;
    for s in items {
        total += sequence_loss(params, *s, model)?;
    }
    Ok(total / steps_in(items).max(1) as f64)
}

fn validation_value(params: &PriorNetParams, val: &SemiDataset, model: &MeasModel) -> Result<f64> {
    if val.n_labelled() > 0 {
        let mut se = 0.0;
        let mut steps = 0usize;
        for pair in &val.labelled.items {
            let out = infer(params, &pair.measurements.measurements, model)?;
            for (t, post) in out.posteriors.iter().enumerate() {
                let x = pair.states.states.row(t);
                se += post.mean().iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
            }
            steps += out.len();
        }
        return Ok(se / steps.max(1) as f64);
    }
    let items: Vec<SeqRef<'_>> = val
        .items()
        .into_iter()
        .map(|(_, s)| SeqRef {
            measurements: s.measurements,
            states: None,
        })
        .collect();
    mean_objective(params, &items, model)
}

/// Train from the config's initial parameters, holding out a validation
/// subset of `semi` for early stopping.
pub fn train(semi: &SemiDataset, model: &MeasModel, cfg: &TrainConfig) -> Result<(PriorNetParams, TrainLog)> {
    let (fit, val) = semi.hold_out(cfg.validation_fraction, cfg.validation_seed);
    let init = PriorNetParams::init(NetDims::new(model.meas_dim(), model.state_dim()), cfg.init_seed);
    train_with_validation(&fit, &val, model, cfg, init)
}

/// Mini-batch Adam on the semi-supervised objective, returning the parameters
/// with the best validation value.
///
/// Each batch gradient is divided by the number of time steps in the batch.
pub fn train_with_validation(
    fit: &SemiDataset,
    val: &SemiDataset,
    model: &MeasModel,
    cfg: &TrainConfig,
    init: PriorNetParams,
) -> Result<(PriorNetParams, TrainLog)> {
    cfg.validate()?;
    if fit.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    let items: Vec<SeqRef<'_>> = fit.items().into_iter().map(|(_, s)| s).collect();
    let metric = if val.n_labelled() > 0 {
        ValidationMetric::StateMse
    } else if !val.is_empty() {
        ValidationMetric::PredictiveNll
    } else {
        ValidationMetric::TrainLoss
    };

    let mut params = init;
    let mut adam = Adam::from_config(params.len(), cfg);
    let mut lr = cfg.learning_rate;
    let initial_train_loss = mean_objective(&params, &items, model)?;
    let mut log = TrainLog {
        metric,
        initial_train_loss,
        epochs: Vec::new(),
        best_epoch: 0,
        best_validation: f64::INFINITY,
        stopped_early: false,
    };
    let mut best = params.clone();
    let mut since_best = 0usize;
    let mut order: Vec<usize> = (0..items.len()).collect();

    for epoch in 1..=cfg.max_epochs {
        let mut rng = SeededRng::new(child_seed(cfg.shuffle_seed, epoch as u64));
        rng.shuffle(&mut order);
        let mut epoch_loss = 0.0;
        let mut grad_norm = 0.0;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<SeqRef<'_>> = chunk.iter().map(|i| items[*i]).collect();
            let (loss, mut grad) = batch_loss_and_grad(&params, &batch, model)?;
            if !loss.is_finite() || !grad.is_finite() {
                return Err(Error::NanLoss {
                    epoch,
                    batch: b,
                    param_norm: params.norm(),
                });
            }
            epoch_loss += loss;
            grad.scale(1.0 / steps_in(&batch) as f64);
            let norm = grad.norm();
            if norm > cfg.clip_norm {
                grad.scale(cfg.clip_norm / norm);
            }
            grad_norm = norm;
            adam.step(&mut params, &grad, lr);
        }
        let train_loss = epoch_loss / steps_in(&items) as f64;
        let validation = match metric {
            ValidationMetric::TrainLoss => train_loss,
            _ => validation_value(&params, val, model)?,
        };
        log.epochs.push(EpochRecord {
            epoch,
            train_loss,
            validation,
            learning_rate: lr,
            grad_norm,
        });
        if validation < log.best_validation - cfg.min_delta {
            log.best_validation = validation;
            log.best_epoch = epoch;
            best = params.clone();
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                log.stopped_early = true;
                break;
            }
        }
        if epoch % cfg.decay_interval() == 0 {
            lr *= cfg.lr_decay;
        }
    }
    Ok((best, log))
}
