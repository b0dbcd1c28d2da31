//! Mini-batch training loop shared by every graph classifier.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::adam::{adam_step, AdamConfig, AdamState};
use super::model::{derive_seed, Mode, Model, PreparedGraph};
use crate::error::{Error, Result};
use crate::harness::metrics::{compute_metrics, MetricsReport};
use crate::nn::ops::{sigmoid, softplus};
use crate::nn::{Gradients, ParamStore, Precision, Tensor};

/// Binary cross entropy with logits.
pub fn bce_loss(logit: f64, label: f64) -> f64 {
    softplus(logit) - label * logit
}

pub fn bce_grad(logit: f64, label: f64) -> f64 {
    sigmoid(logit) - label
}

/// Nearest f32 whose magnitude does not exceed `|x|`.
pub fn f32_toward_zero(x: f64) -> f64 {
    let y = x as f32;
    if y != 0.0 && f64::from(y).abs() > x.abs() {
        f64::from(f32::from_bits(y.to_bits() - 1))
    } else {
        f64::from(y)
    }
}

/// A trainable graph-level binary classifier.
pub trait Classifier: Clone + Send + Sync + Sized {
    /// Short identifier stored in checkpoints.
    const KIND: &'static str;

    fn store(&self) -> &ParamStore;
    fn store_mut(&mut self) -> &mut ParamStore;

    /// Training-mode logit and loss gradients for one labelled graph.
    fn train_step(&self, graph: &PreparedGraph, seed: u64) -> Result<(f64, Gradients)>;

    /// Evaluation-mode logit.
    fn predict(&self, graph: &PreparedGraph) -> Result<f64>;

    /// Restores constraints after an optimizer step.
    fn after_step(&mut self, lambda_pf_max: f64, precision: Precision);

    fn config_value(&self) -> serde_json::Value;
    fn from_config_value(value: serde_json::Value, seed: u64) -> Result<Self>;
}

fn label_of(g: &PreparedGraph) -> Result<f64> {
    g.label.map(f64::from).ok_or_else(|| Error::LabelMissing(g.id.clone()))
}

impl Classifier for Model {
    const KIND: &'static str = "deepexe";

    fn store(&self) -> &ParamStore {
        &self.store
    }

    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn train_step(&self, graph: &PreparedGraph, seed: u64) -> Result<(f64, Gradients)> {
        let label = label_of(graph)?;
        let (logit, cache) = self.forward(graph, Mode::Train, seed)?;
        let (grads, _) = self.backward(graph, &cache, bce_grad(logit, label))?;
        Ok((logit, grads))
    }

    fn predict(&self, graph: &PreparedGraph) -> Result<f64> {
        Ok(self.forward(graph, Mode::Eval, 0)?.0)
    }

    fn after_step(&mut self, lambda_pf_max: f64, precision: Precision) {
        self.project(lambda_pf_max);
        let w = self.ids.w;
        for (p, t) in self.store.values_mut().iter_mut().enumerate() {
            if precision == Precision::F32 && p == w.0 {
                // truncation keeps the projected row sums feasible
                for x in t.data_mut() {
                    *x = f32_toward_zero(*x);
                }
            } else {
                t.round_to(precision);
            }
        }
    }

    fn config_value(&self) -> serde_json::Value {
        serde_json::to_value(self.config).expect("config serializes")
    }

    fn from_config_value(value: serde_json::Value, seed: u64) -> Result<Self> {
        Ok(Model::new(serde_json::from_value(value)?, seed))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub precision: Precision,
    /// Stop after this many epochs without an eval-AUC improvement.
    #[serde(default)]
    pub patience: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            adam: AdamConfig::default(),
            batch_size: 192,
            epochs: 200,
            seed: 0,
            precision: Precision::F32,
            patience: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub epoch: usize,
    pub split: Split,
    pub loss: f64,
    pub report: MetricsReport,
}

pub const METRICS_HEADER: &str = "epoch,split,loss,accuracy,precision,recall,f1,auc";

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut s = format!("{METRICS_HEADER}\n");
    for r in rows {
        let split = match r.split {
            Split::Train => "train",
            Split::Eval => "eval",
        };
        let m = &r.report;
        let _ = writeln!(
            s,
            "{},{split},{},{},{},{},{},{}",
            r.epoch, r.loss, m.accuracy, m.precision, m.recall, m.f1, m.auc
        );
    }
    s
}

#[derive(Debug, Clone, PartialEq)]
pub struct BestSnapshot {
    pub auc: f64,
    pub epoch: usize,
    pub params: Vec<Tensor>,
}

/// Training state: model, optimizer moments, epoch counter, history.
/// All randomness is derived from `(seed, epoch, position)`, so this is
/// the complete state of a run.
#[derive(Debug, Clone)]
pub struct Trainer<M: Classifier> {
    pub config: TrainConfig,
    pub model: M,
    pub adam: AdamState,
    pub epoch: usize,
    pub history: Vec<MetricsRow>,
    pub best: Option<BestSnapshot>,
    /// Epochs since the last eval-AUC improvement.
    pub stale: usize,
}

fn max_pf(graphs: &[&PreparedGraph]) -> f64 {
    graphs.iter().map(|g| g.pf_eigenvalue()).fold(0.0, f64::max)
}

impl<M: Classifier> Trainer<M> {
    /// Wraps an initialised model. Parameters are made feasible for the
    /// largest PF eigenvalue in `train` and rounded to the run precision.
    pub fn new(config: TrainConfig, mut model: M, train: &[PreparedGraph]) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::EmptyDataset);
        }
        for g in train {
            label_of(g)?;
        }
        let refs: Vec<&PreparedGraph> = train.iter().collect();
        model.after_step(max_pf(&refs), config.precision);
        let adam = AdamState::new(model.store());
        Ok(Self { config, model, adam, epoch: 0, history: Vec::new(), best: None, stale: 0 })
    }

    pub fn done(&self) -> bool {
        self.epoch >= self.config.epochs || self.config.patience.is_some_and(|p| self.stale >= p)
    }

    fn graph_seed(&self, index: usize) -> u64 {
        derive_seed(self.config.seed, &[self.epoch as u64, index as u64])
    }

    /// One pass over `train` in a seeded order, then evaluation on `eval`.
    pub fn run_epoch(&mut self, train: &[PreparedGraph], eval: &[PreparedGraph]) -> Result<()> {
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.config.seed, &[self.epoch as u64, u64::MAX]));
        order.shuffle(&mut rng);

        let mut scores = vec![0.0; train.len()];
        let mut loss_sum = 0.0;
        for batch in order.chunks(self.config.batch_size.max(1)) {
            let results: Vec<Result<(f64, Gradients)>> = {
                let model = &self.model;
                batch.par_iter().map(|&i| model.train_step(&train[i], self.graph_seed(i))).collect()
            };
            let mut total = self.model.store().zeros_like();
            for (&i, r) in batch.iter().zip(results) {
                let (logit, grads) = r?;
                let label = label_of(&train[i])?;
                let l = bce_loss(logit, label);
                if !l.is_finite() {
                    return Err(Error::NanDetected(format!("loss of graph `{}`", train[i].id)));
                }
                loss_sum += l;
                scores[i] = sigmoid(logit);
                total.add_assign(&grads);
            }
            total.scale(1.0 / batch.len() as f64);
            adam_step(self.model.store_mut(), &total, &self.config.adam, &mut self.adam);
            self.adam.round_to(self.config.precision);
            let refs: Vec<&PreparedGraph> = batch.iter().map(|&i| &train[i]).collect();
            self.model.after_step(max_pf(&refs), self.config.precision);
        }
        let labels: Vec<u8> = train.iter().map(|g| g.label.unwrap_or(0)).collect();
        let report = compute_metrics(&scores, &labels, 0.5)?;
        self.history.push(MetricsRow {
            epoch: self.epoch,
            split: Split::Train,
            loss: loss_sum / train.len() as f64,
            report,
        });

        if !eval.is_empty() {
            let (loss, report) = evaluate(&self.model, eval)?;
            self.history.push(MetricsRow { epoch: self.epoch, split: Split::Eval, loss, report });
            let improved = report.auc_defined && self.best.as_ref().is_none_or(|b| report.auc > b.auc);
            if improved {
                self.best = Some(BestSnapshot {
                    auc: report.auc,
                    epoch: self.epoch,
                    params: self.model.store().values().to_vec(),
                });
                self.stale = 0;
            } else {
                self.stale += 1;
            }
        }
        self.epoch += 1;
        Ok(())
    }

    /// Runs epochs until the budget or the patience is exhausted.
    pub fn fit(&mut self, train: &[PreparedGraph], eval: &[PreparedGraph]) -> Result<()> {
        while !self.done() {
            self.run_epoch(train, eval)?;
        }
        Ok(())
    }

    pub fn metrics_csv(&self) -> String {
        metrics_csv(&self.history)
    }

    /// The model with the best eval-AUC parameters, if any epoch had one.
    pub fn best_model(&self) -> M {
        let mut m = self.model.clone();
        if let Some(b) = &self.best {
            for (dst, src) in m.store_mut().values_mut().iter_mut().zip(&b.params) {
                *dst = src.clone();
            }
        }
        m
    }
}

/// Mean loss and metrics of eval-mode predictions.
pub fn evaluate<M: Classifier>(model: &M, graphs: &[PreparedGraph]) -> Result<(f64, MetricsReport)> {
    let logits: Vec<f64> = graphs.par_iter().map(|g| model.predict(g)).collect::<Result<_>>()?;
    let mut loss = 0.0;
    let mut labels = Vec::with_capacity(graphs.len());
    for (g, &l) in graphs.iter().zip(&logits) {
        let y = label_of(g)?;
        loss += bce_loss(l, y);
        labels.push(y as u8);
    }
    let scores: Vec<f64> = logits.iter().map(|&l| sigmoid(l)).collect();
    Ok((loss / graphs.len().max(1) as f64, compute_metrics(&scores, &labels, 0.5)?))
}
