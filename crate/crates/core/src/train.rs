//! Minibatch gradient descent with element dropout, grid search and
//! per-epoch metrics.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::eval::{Evaluator, Gradient};
use crate::network::{build, ArchitectureSpec, Model};

/// Lower bound on tensor elements when switching to log storage.
pub const POSITIVE_FLOOR: f64 = 1e-4;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Optimizer {
    #[default]
    Sgd,
    Adam,
}

/// Values swept by [`grid_search`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub learning_rate: Vec<f64>,
    pub dropout_keep: Vec<f64>,
    pub bond_dim: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    /// Keep probability of each tensor element per minibatch.
    #[serde(default = "default_keep")]
    pub dropout_keep: f64,
    /// Reads `dropout_keep` as a drop probability instead.
    #[serde(default)]
    pub dropout_literal: bool,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub grid: Option<GridSpec>,
    /// Store logs of tensor elements and train those.
    #[serde(default)]
    pub positivity: bool,
    #[serde(default)]
    pub optimizer: Optimizer,
}

fn default_learning_rate() -> f64 {
    1e-4
}

fn default_keep() -> f64 {
    0.95
}

fn default_batch_size() -> usize {
    20
}

fn default_epochs() -> usize {
    100
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: default_learning_rate(),
            dropout_keep: default_keep(),
            dropout_literal: false,
            batch_size: default_batch_size(),
            epochs: default_epochs(),
            seed: 0,
            grid: None,
            positivity: false,
            optimizer: Optimizer::Sgd,
        }
    }
}

fn check_keep(field: &str, delta: f64) -> Result<()> {
    if !(delta > 0.0 && delta <= 1.0) {
        return Err(Error::validation(field, format!("{delta} is outside (0, 1]")));
    }
    Ok(())
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::validation("learning_rate", "must be finite and nonnegative"));
        }
        check_keep("dropout_keep", self.dropout_keep)?;
        if self.dropout_literal && self.dropout_keep >= 1.0 {
            return Err(Error::validation("dropout_keep", "a drop probability of 1 removes every element"));
        }
        if self.batch_size == 0 {
            return Err(Error::validation("batch_size", "must be at least 1"));
        }
        if let Some(grid) = &self.grid {
            if grid.learning_rate.is_empty() || grid.dropout_keep.is_empty() || grid.bond_dim.is_empty() {
                return Err(Error::validation("grid", "every swept list must be nonempty"));
            }
            for &d in &grid.dropout_keep {
                check_keep("grid.dropout_keep", d)?;
            }
            if grid.bond_dim.contains(&0) {
                return Err(Error::validation("grid.bond_dim", "must be at least 1"));
            }
        }
        Ok(())
    }

    /// Keep probability after resolving the literal reading.
    pub fn keep_probability(&self) -> f64 {
        if self.dropout_literal {
            1.0 - self.dropout_keep
        } else {
            self.dropout_keep
        }
    }
}

/// Per-element keep flags for every trainable tensor of a model.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DropoutMask {
    keep: Vec<Vec<bool>>,
}

impl DropoutMask {
    pub fn all_keep(model: &Model) -> Self {
        DropoutMask {
            keep: (0..model.num_tensors())
                .map(|i| vec![true; model.tensor(i).len()])
                .collect(),
        }
    }

    pub fn tensor(&self, i: usize) -> &[bool] {
        &self.keep[i]
    }

    pub fn tensor_mut(&mut self, i: usize) -> &mut [bool] {
        &mut self.keep[i]
    }

    pub fn kept(&self) -> usize {
        self.keep.iter().flatten().filter(|&&k| k).count()
    }

    pub fn total(&self) -> usize {
        self.keep.iter().map(Vec::len).sum()
    }
}

/// Bernoulli mask keeping each element with probability `delta`.
pub fn dropout_mask(model: &Model, delta: f64, rng: &mut impl Rng) -> Result<DropoutMask> {
    check_keep("dropout_keep", delta)?;
    let mut mask = DropoutMask::all_keep(model);
    if delta < 1.0 {
        for t in &mut mask.keep {
            for k in t.iter_mut() {
                *k = rng.random::<f64>() < delta;
            }
        }
    }
    Ok(mask)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_acc: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub epochs: Vec<EpochMetrics>,
    /// Epoch of the validation-selected model.
    pub best_epoch: usize,
    pub wall_clock_secs: f64,
    /// Filled in once by the caller after selection.
    pub test_accuracy: Option<f64>,
}

impl Metrics {
    /// `epoch,train_loss,train_acc,val_acc` rows with round-trip float text.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,train_acc,val_acc\n");
        for e in &self.epochs {
            out.push_str(&format!("{},{:?},{:?},{:?}\n", e.epoch, e.train_loss, e.train_acc, e.val_acc));
        }
        out
    }

    pub fn best(&self) -> Option<&EpochMetrics> {
        self.epochs.iter().find(|e| e.epoch == self.best_epoch)
    }
}

/// A failed run: the error and the last model with finite parameters.
#[derive(Debug, thiserror::Error)]
#[error("{source} (after {} completed epochs)", metrics.epochs.len())]
pub struct FitError {
    #[source]
    pub source: Error,
    pub last_good: Box<Model>,
    pub metrics: Metrics,
}

impl FitError {
    fn new(source: Error, model: &Model, metrics: &Metrics) -> Self {
        FitError {
            source,
            last_good: Box::new(model.clone()),
            metrics: metrics.clone(),
        }
    }
}

struct AdamState {
    m: Gradient,
    v: Gradient,
    t: i32,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

fn apply_step(model: &mut Model, grad: &Gradient, lr: f64, adam: Option<&mut AdamState>) {
    match adam {
        None => {
            for (i, g) in grad.tensors.iter().enumerate() {
                for (w, gv) in model.tensor_mut(i).data_mut().iter_mut().zip(g.data()) {
                    *w -= lr * gv;
                }
            }
        }
        Some(state) => {
            state.t += 1;
            let c1 = 1.0 - ADAM_BETA1.powi(state.t);
            let c2 = 1.0 - ADAM_BETA2.powi(state.t);
            for (i, g) in grad.tensors.iter().enumerate() {
                let m = state.m.tensors[i].data_mut();
                let v = state.v.tensors[i].data_mut();
                for (j, (w, gv)) in model.tensor_mut(i).data_mut().iter_mut().zip(g.data()).enumerate() {
                    m[j] = ADAM_BETA1 * m[j] + (1.0 - ADAM_BETA1) * gv;
                    v[j] = ADAM_BETA2 * v[j] + (1.0 - ADAM_BETA2) * gv * gv;
                    *w -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + ADAM_EPS);
                }
            }
        }
    }
}

fn params_finite(model: &Model) -> bool {
    (0..model.num_tensors()).all(|i| model.tensor(i).data().iter().all(|v| v.is_finite()))
}

/// One minibatch step: mask, gradient, update. Returns the batch loss.
pub fn sgd_step(
    model: &mut Model,
    ds: &Dataset,
    indices: &[usize],
    lr: f64,
    keep: f64,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let mask = if keep < 1.0 {
        Some(dropout_mask(model, keep, rng)?)
    } else {
        None
    };
    let (loss, grad) = Evaluator::with_mask(model, mask.as_ref()).batch_gradient(ds, indices, mask.as_ref())?;
    apply_step(model, &grad, lr, None);
    Ok(loss)
}

/// Trains with minibatch SGD and returns the model with the best validation
/// accuracy (earliest epoch on ties).
pub fn sgd_fit(model: Model, train: &Dataset, val: &Dataset, cfg: &TrainConfig) -> Result<(Model, Metrics), FitError> {
    sgd_fit_with(model, train, val, cfg, |_| {})
}

/// [`sgd_fit`] with a callback after every epoch.
pub fn sgd_fit_with(
    model: Model,
    train: &Dataset,
    val: &Dataset,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<(Model, Metrics), FitError> {
    let start = Instant::now();
    let mut metrics = Metrics::default();
    let fail = |e: Error, m: &Model, metrics: &Metrics| Err(FitError::new(e, m, metrics));
    if let Err(e) = cfg.validate() {
        return fail(e, &model, &metrics);
    }
    if train.is_empty() || val.is_empty() {
        return fail(Error::InvalidArgument("train and validation sets must be nonempty".into()), &model, &metrics);
    }
    if train.geometry() != val.geometry() {
        return fail(Error::validation("input", "train and validation geometries differ"), &model, &metrics);
    }
    let mut model = if cfg.positivity && !model.is_positive() {
        model.into_positive(POSITIVE_FLOOR)
    } else {
        model
    };
    let keep = cfg.keep_probability();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = (cfg.optimizer == Optimizer::Adam).then(|| AdamState {
        m: Gradient::zeros_like(&model),
        v: Gradient::zeros_like(&model),
        t: 0,
    });
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut best: Option<(f64, Model)> = None;

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let mask = if keep < 1.0 {
                match dropout_mask(&model, keep, &mut rng) {
                    Ok(m) => Some(m),
                    Err(e) => return fail(e, &model, &metrics),
                }
            } else {
                None
            };
            let grad = Evaluator::with_mask(&model, mask.as_ref()).batch_gradient(train, batch, mask.as_ref());
            let grad = match grad {
                Ok((_, g)) if g.is_finite() => g,
                Ok(_) => {
                    let e = Error::NumericOverflow {
                        message: format!("non-finite gradient in epoch {epoch}"),
                        traces: Vec::new(),
                    };
                    return fail(e, &model, &metrics);
                }
                Err(e) => return fail(e, &model, &metrics),
            };
            let before = model.clone();
            apply_step(&mut model, &grad, cfg.learning_rate, adam.as_mut());
            if !params_finite(&model) {
                let e = Error::NumericOverflow {
                    message: format!("non-finite parameters after a step in epoch {epoch}"),
                    traces: Vec::new(),
                };
                return fail(e, &before, &metrics);
            }
        }
        let evaluator = Evaluator::new(&model);
        let (train_loss, train_acc) = match evaluator.loss_and_accuracy(train) {
            Ok(v) => v,
            Err(e) => return fail(e, &model, &metrics),
        };
        let val_acc = match evaluator.loss_and_accuracy(val) {
            Ok(v) => v.1,
            Err(e) => return fail(e, &model, &metrics),
        };
        let row = EpochMetrics {
            epoch,
            train_loss,
            train_acc,
            val_acc,
        };
        on_epoch(&row);
        metrics.epochs.push(row);
        if best.as_ref().is_none_or(|(acc, _)| val_acc > *acc) {
            best = Some((val_acc, model.clone()));
            metrics.best_epoch = epoch;
        }
    }
    metrics.wall_clock_secs = start.elapsed().as_secs_f64();
    let selected = best.map_or(model, |(_, m)| m);
    Ok((selected, metrics))
}

/// Accuracy of a model on a dataset.
pub fn evaluate(model: &Model, ds: &Dataset) -> Result<f64> {
    Ok(Evaluator::new(model).loss_and_accuracy(ds)?.1)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub learning_rate: f64,
    pub dropout_keep: f64,
    pub bond_dim: usize,
    /// Best validation accuracy, or `None` when the cell failed.
    pub val_acc: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug)]
pub struct GridReport {
    pub rows: Vec<GridRow>,
    /// Index into `rows` of the selected cell.
    pub best: Option<usize>,
    pub best_model: Option<Model>,
    pub best_metrics: Option<Metrics>,
}

impl GridReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("learning_rate,dropout_keep,bond_dim,val_acc,status\n");
        for r in &self.rows {
            let acc = r.val_acc.map_or(String::new(), |a| format!("{a:?}"));
            let status = r.error.as_deref().map_or("ok".to_string(), |e| format!("failed: {}", e.replace(',', ";")));
            out.push_str(&format!("{:?},{:?},{},{},{}\n", r.learning_rate, r.dropout_keep, r.bond_dim, acc, status));
        }
        out
    }
}

/// Trains one model per `(alpha, delta, D)` cell and selects by validation
/// accuracy, breaking ties by smaller `D`, then smaller `alpha`. Failed cells
/// are recorded and skipped.
pub fn grid_search(spec: &ArchitectureSpec, train: &Dataset, val: &Dataset, cfg: &TrainConfig) -> Result<GridReport> {
    cfg.validate()?;
    let grid = cfg.grid.clone().unwrap_or(GridSpec {
        learning_rate: vec![cfg.learning_rate],
        dropout_keep: vec![cfg.dropout_keep],
        bond_dim: vec![spec.bond_dim],
    });
    let mut rows = Vec::new();
    let mut best: Option<(usize, Model, Metrics)> = None;
    for &bond_dim in &grid.bond_dim {
        let mut cell_spec = spec.clone();
        cell_spec.bond_dim = bond_dim;
        for &learning_rate in &grid.learning_rate {
            for &dropout_keep in &grid.dropout_keep {
                let cell_cfg = TrainConfig {
                    learning_rate,
                    dropout_keep,
                    grid: None,
                    ..cfg.clone()
                };
                let outcome = build(&cell_spec, cfg.seed)
                    .map_err(|e| e.to_string())
                    .and_then(|m| sgd_fit(m, train, val, &cell_cfg).map_err(|e| e.to_string()));
                let row = GridRow {
                    learning_rate,
                    dropout_keep,
                    bond_dim,
                    val_acc: None,
                    error: None,
                };
                match outcome {
                    Ok((model, metrics)) => {
                        let acc = metrics.best().map_or(0.0, |b| b.val_acc);
                        rows.push(GridRow {
                            val_acc: Some(acc),
                            ..row
                        });
                        let index = rows.len() - 1;
                        let better = best.as_ref().is_none_or(|(b, _, _)| {
                            let cur = &rows[*b];
                            let cur_acc = cur.val_acc.unwrap_or(f64::NEG_INFINITY);
                            acc > cur_acc
                                || (acc == cur_acc
                                    && (bond_dim, learning_rate) < (cur.bond_dim, cur.learning_rate))
                        });
                        if better {
                            best = Some((index, model, metrics));
                        }
                    }
                    Err(message) => rows.push(GridRow {
                        error: Some(message),
                        ..row
                    }),
                }
            }
        }
    }
    let (best, best_model, best_metrics) = match best {
        Some((i, m, met)) => (Some(i), Some(m), Some(met)),
        None => (None, None, None),
    };
    Ok(GridReport {
        rows,
        best,
        best_model,
        best_metrics,
    })
}

/// Switches a model to log storage: the network then uses `exp(theta)`
/// elementwise and every effective element is strictly positive.
pub fn positive_reparam(model: Model) -> Model {
    model.into_positive(POSITIVE_FLOOR)
}
