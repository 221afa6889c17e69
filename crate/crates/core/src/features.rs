//! Per-variable feature maps: fixed trigonometric or linear embeddings, and a
//! learnable discretized table that can be trained with the network.

use std::f64::consts::FRAC_PI_2;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::tensor::DenseTensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureKind {
    /// `x -> (1, x)`
    Linear,
    /// `x -> (cos^2(pi x / 2), sin^2(pi x / 2))`
    TrigSquared,
    /// `x -> table[floor(x * bins)]`
    LearnableTable,
}

/// Declarative feature-map settings, part of the architecture config.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureSpec {
    pub kind: FeatureKind,
    #[serde(default = "default_bins")]
    pub bins: usize,
    /// One table per input variable instead of a single shared table.
    #[serde(default)]
    pub per_variable: bool,
}

fn default_bins() -> usize {
    16
}

impl Default for FeatureSpec {
    fn default() -> Self {
        FeatureSpec {
            kind: FeatureKind::TrigSquared,
            bins: 16,
            per_variable: false,
        }
    }
}

impl FeatureSpec {
    /// Checks the settings for a map producing `out_dim` features.
    pub fn validate(&self, out_dim: usize) -> Result<()> {
        if out_dim < 2 {
            return Err(Error::validation("feature_dim", "must be at least 2"));
        }
        if self.kind == FeatureKind::Linear && out_dim != 2 {
            return Err(Error::validation("feature_dim", "the linear map has dimension 2"));
        }
        if self.kind == FeatureKind::LearnableTable && self.bins == 0 {
            return Err(Error::validation("features.bins", "must be positive"));
        }
        Ok(())
    }
}

/// Std-dev of the Gaussian noise added to a freshly initialized table.
pub const TABLE_INIT_NOISE: f64 = 0.01;

/// Maps raw scalars in `[0, 1]` to feature vectors.
#[derive(Debug)]
pub struct FeatureMap {
    kind: FeatureKind,
    out_dim: usize,
    bins: usize,
    /// `bins x out_dim` tables; one shared table or one per variable.
    tables: Vec<DenseTensor>,
    clamped: AtomicU64,
}

impl Clone for FeatureMap {
    fn clone(&self) -> Self {
        FeatureMap {
            kind: self.kind,
            out_dim: self.out_dim,
            bins: self.bins,
            tables: self.tables.clone(),
            clamped: AtomicU64::new(self.clamped.load(Ordering::Relaxed)),
        }
    }
}

impl PartialEq for FeatureMap {
    fn eq(&self, other: &Self) -> bool {
        self.kind == other.kind
            && self.out_dim == other.out_dim
            && self.bins == other.bins
            && self.tables == other.tables
    }
}

/// `C(n, k)` for the small arguments used by the generalized trig map.
fn binomial(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// Squared-trigonometric embedding generalized to `out.len()` components:
/// the binomial expansion of `(cos^2 + sin^2)^(d-1)`. For `d = 2` this is
/// exactly `(cos^2, sin^2)`. Components are nonnegative and sum to one.
fn trig_squared_into(x: f64, out: &mut [f64]) {
    let c2 = (FRAC_PI_2 * x).cos().powi(2);
    let s2 = (FRAC_PI_2 * x).sin().powi(2);
    let n = out.len() - 1;
    for (j, o) in out.iter_mut().enumerate() {
        *o = binomial(n, j) * c2.powi((n - j) as i32) * s2.powi(j as i32);
    }
}

impl FeatureMap {
    pub fn fixed(kind: FeatureKind, out_dim: usize) -> Result<Self> {
        let spec = FeatureSpec {
            kind,
            ..FeatureSpec::default()
        };
        if kind == FeatureKind::LearnableTable {
            return Err(Error::InvalidArgument(
                "use FeatureMap::learnable for table maps".into(),
            ));
        }
        spec.validate(out_dim)?;
        Ok(FeatureMap {
            kind,
            out_dim,
            bins: 0,
            tables: Vec::new(),
            clamped: AtomicU64::new(0),
        })
    }

    pub fn trig_squared() -> Self {
        FeatureMap::fixed(FeatureKind::TrigSquared, 2).expect("valid")
    }

    pub fn linear() -> Self {
        FeatureMap::fixed(FeatureKind::Linear, 2).expect("valid")
    }

    /// A learnable table initialized from the trig-squared map at bin centers
    /// plus Gaussian noise of std-dev [`TABLE_INIT_NOISE`].
    pub fn learnable(bins: usize, out_dim: usize, num_tables: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, TABLE_INIT_NOISE).expect("valid std-dev");
        let mut tables = Vec::with_capacity(num_tables);
        for _ in 0..num_tables {
            let mut table = Self::trig_table(bins, out_dim)?;
            for v in table.data_mut() {
                *v += noise.sample(&mut rng);
            }
            tables.push(table);
        }
        Self::from_tables(tables)
    }

    /// The trig-squared map sampled at the `bins` bin centers, without noise.
    pub fn trig_table(bins: usize, out_dim: usize) -> Result<DenseTensor> {
        if bins == 0 || out_dim < 2 {
            return Err(Error::InvalidArgument(format!(
                "table needs bins >= 1 and out_dim >= 2, got {bins} and {out_dim}"
            )));
        }
        let mut data = vec![0.0; bins * out_dim];
        for (b, row) in data.chunks_mut(out_dim).enumerate() {
            trig_squared_into(bin_center(b, bins), row);
        }
        DenseTensor::new(vec![bins, out_dim], data)
    }

    pub fn from_tables(tables: Vec<DenseTensor>) -> Result<Self> {
        let first = tables
            .first()
            .ok_or_else(|| Error::InvalidArgument("at least one table required".into()))?;
        if first.ndim() != 2 {
            return Err(Error::Dimension("feature tables are bins x out_dim".into()));
        }
        let (bins, out_dim) = (first.shape()[0], first.shape()[1]);
        if out_dim < 2 {
            return Err(Error::validation("features.out_dim", "must be at least 2"));
        }
        if tables.iter().any(|t| t.shape() != first.shape()) {
            return Err(Error::Dimension("all feature tables must share a shape".into()));
        }
        Ok(FeatureMap {
            kind: FeatureKind::LearnableTable,
            out_dim,
            bins,
            tables,
            clamped: AtomicU64::new(0),
        })
    }

    /// Builds the map described by `spec` for `num_variables` inputs.
    pub fn from_spec(spec: &FeatureSpec, out_dim: usize, num_variables: usize, seed: u64) -> Result<Self> {
        spec.validate(out_dim)?;
        match spec.kind {
            FeatureKind::LearnableTable => {
                let n = if spec.per_variable { num_variables } else { 1 };
                FeatureMap::learnable(spec.bins, out_dim, n, seed)
            }
            kind => FeatureMap::fixed(kind, out_dim),
        }
    }

    pub fn kind(&self) -> FeatureKind {
        self.kind
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn is_learnable(&self) -> bool {
        self.kind == FeatureKind::LearnableTable
    }

    pub fn per_variable(&self) -> bool {
        self.tables.len() > 1
    }

    pub fn tables(&self) -> &[DenseTensor] {
        &self.tables
    }

    pub fn tables_mut(&mut self) -> &mut [DenseTensor] {
        &mut self.tables
    }

    /// Index of the table used by `variable`.
    pub fn table_index(&self, variable: usize) -> usize {
        if self.tables.len() > 1 {
            variable
        } else {
            0
        }
    }

    /// Number of inputs that fell outside `[0, 1]` and were clamped.
    pub fn clamped_count(&self) -> u64 {
        self.clamped.load(Ordering::Relaxed)
    }

    fn clamp(&self, x: f64) -> f64 {
        if (0.0..=1.0).contains(&x) {
            x
        } else {
            self.clamped.fetch_add(1, Ordering::Relaxed);
            if x.is_nan() {
                0.0
            } else {
                x.clamp(0.0, 1.0)
            }
        }
    }

    /// Bin of `x` for table maps: `floor(x * bins)` clamped to `bins - 1`.
    pub fn bin(&self, x: f64) -> usize {
        bin_of(x.clamp(0.0, 1.0), self.bins)
    }

    /// Feature vector of `x` for input `variable`, written into `out`.
    /// Returns the bin for table maps.
    pub fn map_into(&self, variable: usize, x: f64, out: &mut [f64]) -> Option<usize> {
        debug_assert_eq!(out.len(), self.out_dim);
        let x = self.clamp(x);
        match self.kind {
            FeatureKind::Linear => {
                out[0] = 1.0;
                out[1] = x;
                None
            }
            FeatureKind::TrigSquared => {
                trig_squared_into(x, out);
                None
            }
            FeatureKind::LearnableTable => {
                let bin = bin_of(x, self.bins);
                let table = &self.tables[self.table_index(variable)];
                out.copy_from_slice(&table.data()[bin * self.out_dim..(bin + 1) * self.out_dim]);
                Some(bin)
            }
        }
    }

    /// Feature vector of `x` (first table for per-variable maps).
    pub fn map_input(&self, x: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.out_dim];
        self.map_into(0, x, &mut out);
        out
    }

    /// Gradient of a downstream quantity with respect to the table, given the
    /// gradient `upstream` with respect to the feature vector of `x`.
    pub fn feature_grad(&self, x: f64, upstream: &[f64]) -> Result<DenseTensor> {
        if !self.is_learnable() {
            return Err(Error::Unsupported(format!(
                "feature_grad on a fixed {:?} map",
                self.kind
            )));
        }
        if upstream.len() != self.out_dim {
            return Err(Error::Dimension(format!(
                "upstream has length {}, map has out_dim {}",
                upstream.len(),
                self.out_dim
            )));
        }
        let mut grad = DenseTensor::zeros(&[self.bins, self.out_dim]);
        let bin = self.bin(x);
        grad.data_mut()[bin * self.out_dim..(bin + 1) * self.out_dim].copy_from_slice(upstream);
        Ok(grad)
    }

    /// CSV rows `bin_center,feature_0,...` for one table, each row scaled to
    /// unit L2 norm.
    pub fn export_csv(&self, table: usize) -> Result<String> {
        if !self.is_learnable() {
            return Err(Error::Unsupported(format!(
                "{:?} maps have no learned table to export",
                self.kind
            )));
        }
        let t = self.tables.get(table).ok_or_else(|| {
            Error::InvalidArgument(format!("table {table} of {}", self.tables.len()))
        })?;
        let mut out = String::from("bin_center");
        for c in 0..self.out_dim {
            out.push_str(&format!(",feature_{c}"));
        }
        out.push('\n');
        for (b, row) in t.data().chunks(self.out_dim).enumerate() {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            out.push_str(&format!("{}", bin_center(b, self.bins)));
            for v in row {
                let scaled = if norm > 0.0 { v / norm } else { 0.0 };
                out.push_str(&format!(",{scaled}"));
            }
            out.push('\n');
        }
        Ok(out)
    }
}

pub fn bin_center(bin: usize, bins: usize) -> f64 {
    (bin as f64 + 0.5) / bins as f64
}

fn bin_of(x: f64, bins: usize) -> usize {
    ((x * bins as f64).floor() as usize).min(bins - 1)
}

/// Settings for the linear-classifier pretraining of a feature table.
#[derive(Clone, Debug)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub num_classes: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 500,
            learning_rate: 0.5,
            num_classes: 2,
        }
    }
}

/// Outcome of fitting a softmax linear probe on mapped features.
#[derive(Clone, Debug)]
pub struct ProbeReport {
    pub loss_history: Vec<f64>,
    pub final_loss: f64,
    pub train_accuracy: f64,
}

/// A pretrained feature map plus the report of the probe that trained it.
#[derive(Clone, Debug)]
pub struct Pretrained {
    pub map: FeatureMap,
    pub report: ProbeReport,
}

struct LinearProbe {
    weights: Vec<f64>, // classes x variables x out_dim
    bias: Vec<f64>,
}

/// Full-batch gradient descent of a softmax linear classifier on the
/// concatenated per-variable features. With `train_table` the feature tables
/// are updated jointly with the classifier.
fn run_probe(
    fm: &mut FeatureMap,
    ds: &Dataset,
    cfg: &PretrainConfig,
    train_table: bool,
) -> Result<ProbeReport> {
    if ds.is_empty() {
        return Err(Error::InvalidArgument("empty dataset".into()));
    }
    if ds.geometry().channels != 1 {
        return Err(Error::InvalidArgument(
            "feature pretraining needs scalar inputs".into(),
        ));
    }
    let k = cfg.num_classes;
    if let Some(&bad) = ds.labels().iter().find(|&&y| y >= k) {
        return Err(Error::InvalidArgument(format!("label {bad} with {k} classes")));
    }
    let n_vars = ds.geometry().sites();
    let d = fm.out_dim();
    let mut probe = LinearProbe {
        weights: vec![0.0; k * n_vars * d],
        bias: vec![0.0; k],
    };
    let n = ds.len() as f64;
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut features = vec![0.0; n_vars * d];
    let mut logits = vec![0.0; k];

    let evaluate = |fm: &FeatureMap, probe: &LinearProbe, features: &mut [f64], logits: &mut [f64], i: usize| {
        let x = ds.sample(i);
        for (j, &xj) in x.iter().enumerate() {
            fm.map_into(j, xj, &mut features[j * d..(j + 1) * d]);
        }
        for (c, l) in logits.iter_mut().enumerate() {
            let w = &probe.weights[c * n_vars * d..(c + 1) * n_vars * d];
            *l = probe.bias[c] + w.iter().zip(features.iter()).map(|(a, b)| a * b).sum::<f64>();
        }
        softmax_in_place(logits);
    };

    for _ in 0..cfg.epochs {
        let mut grad_w = vec![0.0; probe.weights.len()];
        let mut grad_b = vec![0.0; k];
        let mut grad_tables: Vec<DenseTensor> = fm
            .tables()
            .iter()
            .map(|t| DenseTensor::zeros(t.shape()))
            .collect();
        let mut loss = 0.0;
        for i in 0..ds.len() {
            evaluate(fm, &probe, &mut features, &mut logits, i);
            let y = ds.label(i);
            loss -= logits[y].max(f64::MIN_POSITIVE).ln();
            let x = ds.sample(i);
            for c in 0..k {
                let delta = logits[c] - if c == y { 1.0 } else { 0.0 };
                grad_b[c] += delta;
                let gw = &mut grad_w[c * n_vars * d..(c + 1) * n_vars * d];
                for (g, f) in gw.iter_mut().zip(&features) {
                    *g += delta * f;
                }
                if train_table {
                    let w = &probe.weights[c * n_vars * d..(c + 1) * n_vars * d];
                    for (j, &xj) in x.iter().enumerate() {
                        let t = fm.table_index(j);
                        let bin = fm.bin(xj);
                        let row = &mut grad_tables[t].data_mut()[bin * d..(bin + 1) * d];
                        for (r, wv) in row.iter_mut().zip(&w[j * d..(j + 1) * d]) {
                            *r += delta * wv;
                        }
                    }
                }
            }
        }
        history.push(loss / n);
        let step = cfg.learning_rate / n;
        for (w, g) in probe.weights.iter_mut().zip(&grad_w) {
            *w -= step * g;
        }
        for (b, g) in probe.bias.iter_mut().zip(&grad_b) {
            *b -= step * g;
        }
        if train_table {
            for (t, g) in fm.tables_mut().iter_mut().zip(&grad_tables) {
                for (v, gv) in t.data_mut().iter_mut().zip(g.data()) {
                    *v -= step * gv;
                }
            }
        }
    }

    let mut loss = 0.0;
    let mut correct = 0usize;
    for i in 0..ds.len() {
        evaluate(fm, &probe, &mut features, &mut logits, i);
        let y = ds.label(i);
        loss -= logits[y].max(f64::MIN_POSITIVE).ln();
        if argmax(&logits) == y {
            correct += 1;
        }
    }
    Ok(ProbeReport {
        loss_history: history,
        final_loss: loss / n,
        train_accuracy: correct as f64 / n,
    })
}

/// Trains the feature table through a softmax linear classifier over the
/// concatenated per-variable features. The classifier is discarded.
pub fn pretrain_features(fm: &FeatureMap, ds: &Dataset, cfg: &PretrainConfig) -> Result<Pretrained> {
    if !fm.is_learnable() {
        return Err(Error::Unsupported("only table maps can be pretrained".into()));
    }
    let mut map = fm.clone();
    let report = run_probe(&mut map, ds, cfg, true)?;
    Ok(Pretrained { map, report })
}

/// Fits a fresh linear probe on frozen features and reports its fit.
pub fn fit_linear_probe(fm: &FeatureMap, ds: &Dataset, cfg: &PretrainConfig) -> Result<ProbeReport> {
    let mut frozen = fm.clone();
    run_probe(&mut frozen, ds, cfg, false)
}

pub(crate) fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}

/// Index of the largest entry; the first one on ties.
pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}
