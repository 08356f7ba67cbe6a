//! Optimization loops with early stopping, frozen-primary secondary training,
//! and the four-phase experiment driver.

pub mod phases;

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model_zoo::{Decision, ModelGraph};
use crate::nn::{adam_step, sigmoid_bce, softmax_ce, AdamState, LossOutput, Mode};
use crate::rng::substream;
use crate::tensor::Tensor;

pub use phases::{run_phase, Lineage, LineageEntry, Phase, RunConfig, Workspace};

pub const DETECTION_LR: f64 = 1e-3;
pub const ATTRIBUTION_LR: f64 = 1e-4;
pub const MAX_EPOCHS: usize = 100;
pub const DEFAULT_PATIENCE: usize = 5;
pub const DEFAULT_BATCH: usize = 32;
pub const DATA_SEED: u64 = 0;
pub const MODEL_SEEDS: [u64; 2] = [2021, 1000];
const EVAL_CHUNK: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Detection,
    Attribution,
}

impl Task {
    pub fn default_lr(self) -> f64 {
        match self {
            Task::Detection => DETECTION_LR,
            Task::Attribution => ATTRIBUTION_LR,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub task: Task,
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub data_seed: u64,
    pub model_seed: u64,
}

impl TrainConfig {
    pub fn new(task: Task) -> Self {
        TrainConfig {
            task,
            lr: task.default_lr(),
            batch_size: DEFAULT_BATCH,
            max_epochs: MAX_EPOCHS,
            patience: DEFAULT_PATIENCE,
            data_seed: DATA_SEED,
            model_seed: MODEL_SEEDS[0],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.patience == 0 || self.batch_size < 2 || self.max_epochs == 0 {
            return Err(Error::InvalidArgument(format!(
                "patience and max_epochs must be >= 1 and batch size >= 2 (got {}, {}, {})",
                self.patience, self.max_epochs, self.batch_size
            )));
        }
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(Error::InvalidArgument(format!("learning rate {} invalid", self.lr)));
        }
        Ok(())
    }
}

/// Per-sample inputs `(C, H, W)` with integer labels. Inputs are shared so
/// several label schemes over the same images cost no copies.
#[derive(Clone, Debug)]
pub struct TrainSet {
    inputs: Arc<Vec<Tensor<f32>>>,
    labels: Vec<usize>,
}

impl TrainSet {
    pub fn new(inputs: Vec<Tensor<f32>>, labels: Vec<usize>) -> Result<Self> {
        Self::shared(Arc::new(inputs), labels)
    }

    pub fn shared(inputs: Arc<Vec<Tensor<f32>>>, labels: Vec<usize>) -> Result<Self> {
        if inputs.is_empty() {
            return Err(Error::InvalidArgument("empty split".into()));
        }
        if inputs.len() != labels.len() {
            return Err(Error::Shape(format!("{} inputs but {} labels", inputs.len(), labels.len())));
        }
        let shape = inputs[0].shape();
        if let Some(bad) = inputs.iter().find(|t| t.shape() != shape) {
            return Err(Error::Shape(format!("mixed input shapes {shape:?} and {:?}", bad.shape())));
        }
        Ok(TrainSet { inputs, labels })
    }

    pub fn with_labels(&self, labels: Vec<usize>) -> Result<Self> {
        Self::shared(self.inputs.clone(), labels)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn inputs(&self) -> &[Tensor<f32>] {
        &self.inputs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn batch(&self, idx: &[usize]) -> Result<(Tensor<f32>, Vec<usize>)> {
        let items: Vec<&Tensor<f32>> = idx.iter().map(|&i| &self.inputs[i]).collect();
        Ok((Tensor::stack(&items)?, idx.iter().map(|&i| self.labels[i]).collect()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochTelemetry {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub train_accuracy: f64,
    /// Fraction of positive (non-zero class) predictions on training batches.
    pub positive_fraction: f64,
    /// Fraction of negative (class 0) labels among the samples trained on.
    pub negative_label_fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Validation loss of the weights before any update.
    pub initial_val_loss: f64,
    pub history: Vec<EpochTelemetry>,
    /// Epoch whose weights were kept; 0 means the initial weights.
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stopped_early: bool,
    pub digest: String,
}

impl TrainReport {
    /// First epoch whose validation loss is at or below `threshold`.
    pub fn epochs_to(&self, threshold: f64) -> Option<usize> {
        if self.initial_val_loss <= threshold {
            return Some(0);
        }
        self.history.iter().find(|e| e.val_loss <= threshold).map(|e| e.epoch)
    }
}

fn loss_for(decision: Decision, logits: &Tensor<f32>, labels: &[usize]) -> Result<LossOutput<f32>> {
    match decision {
        Decision::Sigmoid => {
            if let Some(&bad) = labels.iter().find(|&&l| l > 1) {
                return Err(Error::InvalidArgument(format!("binary label {bad} outside {{0, 1}}")));
            }
            let y = Tensor::from_vec(vec![labels.len(), 1], labels.iter().map(|&l| l as f32).collect())?;
            sigmoid_bce(logits, &y)
        }
        Decision::Softmax(_) => softmax_ce(logits, labels),
    }
}

fn predicted_classes(decision: Decision, probs: &Tensor<f32>) -> Vec<usize> {
    match decision {
        Decision::Sigmoid => probs.data().iter().map(|&p| (p > 0.5) as usize).collect(),
        Decision::Softmax(k) => probs
            .data()
            .chunks_exact(k)
            .map(|row| {
                row.iter()
                    .enumerate()
                    .fold((0, f32::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
                    .0
            })
            .collect(),
    }
}

type FeatureFn<'a> = &'a (dyn Fn(&Tensor<f32>) -> Result<Tensor<f32>> + Sync);

/// Mean loss of `model` over `set` in eval mode.
pub fn evaluate_loss(model: &ModelGraph<f32>, set: &TrainSet, features: Option<FeatureFn>) -> Result<f64> {
    let mut total = 0.0;
    let idx: Vec<usize> = (0..set.len()).collect();
    for chunk in idx.chunks(EVAL_CHUNK) {
        let (mut x, y) = set.batch(chunk)?;
        if let Some(f) = features {
            x = f(&x)?;
        }
        let z = model.net.infer(&x)?;
        total += loss_for(model.decision, &z, &y)?.loss * chunk.len() as f64;
    }
    Ok(total / set.len() as f64)
}

/// Trains `model` in place and leaves it holding the best-validation weights.
pub fn train(model: &mut ModelGraph<f32>, train: &TrainSet, val: &TrainSet, cfg: &TrainConfig) -> Result<TrainReport> {
    train_with(model, train, val, cfg, None)
}

/// As [`train`], with an optional eval-mode transform applied to every batch
/// before it reaches `model` (on-the-fly branch features).
pub fn train_with(
    model: &mut ModelGraph<f32>,
    train: &TrainSet,
    val: &TrainSet,
    cfg: &TrainConfig,
    features: Option<FeatureFn>,
) -> Result<TrainReport> {
    cfg.validate()?;
    if model.is_frozen() {
        return Err(Error::Contract("cannot train a frozen model".into()));
    }
    if train.is_empty() || val.is_empty() {
        return Err(Error::InvalidArgument("empty train or validation split".into()));
    }
    let initial_val_loss = evaluate_loss(model, val, features)?;
    if !initial_val_loss.is_finite() {
        return Err(Error::NonFiniteLoss { epoch: 0, batch: 0 });
    }
    let mut best = (0usize, initial_val_loss, model.net.clone());
    let mut adam = AdamState::new(model.net.params(), cfg.lr);
    let mut history = Vec::new();
    let mut stale = 0;
    let mut stopped_early = false;
    for epoch in 1..=cfg.max_epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut substream(cfg.data_seed, &format!("shuffle/{}/{epoch}", cfg.model_seed)));
        let (mut loss_sum, mut correct, mut positive, mut negative_labels, mut seen) = (0.0, 0usize, 0usize, 0usize, 0usize);
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            if idx.len() < 2 {
                continue;
            }
            let (mut x, y) = train.batch(idx)?;
            if let Some(f) = features {
                x = f(&x)?;
            }
            let z = model.net.forward(&x, Mode::Train)?;
            let out = loss_for(model.decision, &z, &y)?;
            if !out.loss.is_finite() {
                model.net.clear_tape();
                return Err(Error::NonFiniteLoss { epoch, batch: b });
            }
            let grads = model.net.backward(&out.grad)?;
            adam_step(&mut model.net.params_mut(), &grads.params, &mut adam)?;
            let pred = predicted_classes(model.decision, &out.probs);
            loss_sum += out.loss * idx.len() as f64;
            correct += pred.iter().zip(&y).filter(|(p, t)| p == t).count();
            positive += pred.iter().filter(|&&p| p != 0).count();
            negative_labels += y.iter().filter(|&&t| t == 0).count();
            seen += idx.len();
        }
        if seen == 0 {
            return Err(Error::InvalidArgument("training split too small for one batch".into()));
        }
        let val_loss = evaluate_loss(model, val, features)?;
        if !val_loss.is_finite() {
            return Err(Error::NonFiniteLoss { epoch, batch: usize::MAX });
        }
        let n = seen as f64;
        history.push(EpochTelemetry {
            epoch,
            train_loss: loss_sum / n,
            val_loss,
            train_accuracy: correct as f64 / n,
            positive_fraction: positive as f64 / n,
            negative_label_fraction: negative_labels as f64 / n,
        });
        if val_loss < best.1 {
            best = (epoch, val_loss, model.net.clone());
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                stopped_early = true;
                break;
            }
        }
    }
    model.net = best.2;
    Ok(TrainReport {
        initial_val_loss,
        history,
        best_epoch: best.0,
        best_val_loss: best.1,
        stopped_early,
        digest: model.digest(),
    })
}

/// Eval-mode branch features of every input, computed in chunks.
pub fn branch_features(primary: &ModelGraph<f32>, inputs: &[Tensor<f32>]) -> Result<Vec<Tensor<f32>>> {
    let mut out = Vec::with_capacity(inputs.len());
    for chunk in inputs.chunks(EVAL_CHUNK) {
        let refs: Vec<&Tensor<f32>> = chunk.iter().collect();
        let f = primary.branch_features(&Tensor::stack(&refs)?)?;
        out.extend((0..chunk.len()).map(|i| f.index_axis0(i)));
    }
    Ok(out)
}

/// Branch features of both splits, shareable across secondaries.
#[derive(Clone, Debug)]
pub struct FeatureCache {
    pub train: TrainSet,
    pub val: TrainSet,
}

impl FeatureCache {
    pub fn build(primary: &ModelGraph<f32>, train: &TrainSet, val: &TrainSet) -> Result<Self> {
        require_frozen(primary)?;
        Ok(FeatureCache {
            train: TrainSet::new(branch_features(primary, train.inputs())?, train.labels().to_vec())?,
            val: TrainSet::new(branch_features(primary, val.inputs())?, val.labels().to_vec())?,
        })
    }
}

fn require_frozen(primary: &ModelGraph<f32>) -> Result<()> {
    if !primary.is_frozen() {
        return Err(Error::Contract(
            "secondary training requires a frozen primary module".into(),
        ));
    }
    Ok(())
}

/// Trains a secondary on top of a frozen primary. With `cached`, branch
/// features are computed once up front; otherwise per batch.
pub fn train_secondary(
    primary: &ModelGraph<f32>,
    secondary: &mut ModelGraph<f32>,
    train: &TrainSet,
    val: &TrainSet,
    cfg: &TrainConfig,
    cached: bool,
) -> Result<TrainReport> {
    require_frozen(primary)?;
    if cached {
        let cache = FeatureCache::build(primary, train, val)?;
        train_with(secondary, &cache.train, &cache.val, cfg, None)
    } else {
        let f = |x: &Tensor<f32>| primary.branch_features(x);
        train_with(secondary, train, val, cfg, Some(&f))
    }
}

/// One secondary-training job over shared cached features.
pub struct SecondaryJob {
    pub name: String,
    pub model: ModelGraph<f32>,
    pub train_labels: Vec<usize>,
    pub val_labels: Vec<usize>,
    pub cfg: TrainConfig,
}

/// Trains every job against the same feature cache on up to `threads` worker
/// threads. Results come back in job order and do not depend on `threads`.
pub fn train_secondaries(
    cache: &FeatureCache,
    jobs: Vec<SecondaryJob>,
    threads: usize,
) -> Result<Vec<(String, ModelGraph<f32>, TrainReport)>> {
    let n = jobs.len();
    let slots: Vec<Mutex<Option<SecondaryJob>>> = jobs.into_iter().map(|j| Mutex::new(Some(j))).collect();
    let results: Vec<Mutex<Option<Result<(String, ModelGraph<f32>, TrainReport)>>>> =
        (0..n).map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let work = || loop {
        let i = next.fetch_add(1, Ordering::SeqCst);
        if i >= n {
            break;
        }
        let mut job = slots[i].lock().expect("job slot").take().expect("job taken once");
        let res = (|| {
            let tr = cache.train.with_labels(job.train_labels)?;
            let va = cache.val.with_labels(job.val_labels)?;
            let report = train(&mut job.model, &tr, &va, &job.cfg)?;
            Ok((job.name, job.model, report))
        })();
        *results[i].lock().expect("result slot") = Some(res);
    };
    let threads = threads.clamp(1, n.max(1));
    if threads == 1 {
        work();
    } else {
        std::thread::scope(|s| {
            for _ in 0..threads {
                s.spawn(&work);
            }
        });
    }
    results
        .into_iter()
        .map(|m| m.into_inner().expect("result slot").expect("every job ran"))
        .collect()
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    /// Epochs where the model predicted (almost) everything negative.
    pub stagnant_epochs: Vec<usize>,
}

impl Diagnostics {
    pub fn all_negative_stagnancy(&self) -> bool {
        !self.stagnant_epochs.is_empty()
    }
}

/// Flags epochs whose training accuracy equals the negative-label ratio while
/// almost no positive predictions were made.
pub fn epoch_telemetry_check(history: &[EpochTelemetry]) -> Diagnostics {
    Diagnostics {
        stagnant_epochs: history
            .iter()
            .filter(|e| (e.train_accuracy - e.negative_label_fraction).abs() <= 1e-6 && e.positive_fraction < 1e-3)
            .map(|e| e.epoch)
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn epoch(acc: f64, pos: f64) -> EpochTelemetry {
        EpochTelemetry {
            epoch: 1,
            train_loss: 0.5,
            val_loss: 0.5,
            train_accuracy: acc,
            positive_fraction: pos,
            negative_label_fraction: 0.75,
        }
    }

    #[test]
    fn stagnancy_flags() {
        assert!(epoch_telemetry_check(&[epoch(0.75, 0.0)]).all_negative_stagnancy());
        assert!(!epoch_telemetry_check(&[epoch(0.93, 0.2)]).all_negative_stagnancy());
    }

    #[test]
    fn config_defaults_follow_task() {
        assert_eq!(TrainConfig::new(Task::Detection).lr, 1e-3);
        assert_eq!(TrainConfig::new(Task::Attribution).lr, 1e-4);
        let bad = TrainConfig { patience: 0, ..TrainConfig::new(Task::Detection) };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn train_set_validation() {
        assert!(TrainSet::new(vec![], vec![]).is_err());
        let t = Tensor::<f32>::zeros(&[1, 2, 2]);
        assert!(TrainSet::new(vec![t.clone()], vec![0, 1]).is_err());
        assert!(TrainSet::new(vec![t, Tensor::zeros(&[1, 3, 3])], vec![0, 1]).is_err());
    }
}
