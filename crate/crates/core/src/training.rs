//! Losses, AdamW, the warmup/cosine schedule, gradient clipping, early
//! stopping and the per-fold training loop.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamStore, Real, Tape, Var};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::metrics::{argmax_rows, macro_prf1};
use crate::models::{probabilities, Model};

/// `(1 - eps) * onehot + eps / C`, row-major `N x C`.
pub fn smoothed_targets<T: Real>(labels: &[usize], classes: usize, eps: f64) -> Vec<T> {
    let off = eps / classes as f64;
    let mut out = vec![T::lit(off); labels.len() * classes];
    for (i, &y) in labels.iter().enumerate() {
        out[i * classes + y] = T::lit(1.0 - eps + off);
    }
    out
}

/// Sigmoid cross-entropy for a single logit column (binary tasks), label
/// smoothed softmax cross-entropy otherwise.
pub fn classification_loss<T: Real>(
    tape: &mut Tape<T>,
    logits: Var,
    labels: &[usize],
    classes: usize,
    label_smoothing: f64,
) -> Result<Var> {
    if classes == 2 && tape.value(logits).len() == labels.len() {
        let targets: Vec<T> = labels.iter().map(|&y| T::lit(y as f64)).collect();
        tape.bce_with_logits(logits, &targets)
    } else {
        tape.softmax_cross_entropy(logits, &smoothed_targets(labels, classes, label_smoothing))
    }
}

/// Adam with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new<T: Real>(store: &ParamStore<T>, weight_decay: f64) -> Self {
        let zeros: Vec<Vec<f64>> = store.ids().map(|id| vec![0.0; store.value(id).len()]).collect();
        Self {
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update with learning rate `lr` using the gradients in `store`.
    pub fn step<T: Real>(&mut self, store: &mut ParamStore<T>, lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let ids: Vec<_> = store.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            let (value, grad) = store.value_and_grad_mut(id);
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for j in 0..value.len() {
                let g = grad[j].as_f64();
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g * g;
                let update = (m[j] / c1) / ((v[j] / c2).sqrt() + self.eps);
                let p = value[j].as_f64();
                value[j] = T::lit(p - lr * self.weight_decay * p - lr * update);
            }
        }
    }
}

/// Linear warmup followed by cosine decay to `min_lr`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub base_lr: f64,
    pub min_lr: f64,
    pub total_steps: usize,
    pub warmup_steps: usize,
}

impl Schedule {
    /// Warmup over `ceil(warmup_fraction * total)` steps, floor at `min_fraction * base`.
    pub fn new(base_lr: f64, total_steps: usize, warmup_fraction: f64, min_fraction: f64) -> Self {
        Self {
            base_lr,
            min_lr: min_fraction * base_lr,
            total_steps,
            warmup_steps: (warmup_fraction * total_steps as f64).ceil() as usize,
        }
    }

    /// Learning rate at `step` in `0..=total_steps`; update number `t`
    /// (starting at 1) uses `lr_at(t)`.
    pub fn lr_at(&self, step: usize) -> f64 {
        let step = step.min(self.total_steps);
        if step < self.warmup_steps {
            return self.base_lr * step as f64 / self.warmup_steps as f64;
        }
        let decay = self.total_steps - self.warmup_steps;
        if decay == 0 {
            return self.min_lr;
        }
        let progress = (step - self.warmup_steps) as f64 / decay as f64;
        self.min_lr + 0.5 * (self.base_lr - self.min_lr) * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

/// Rescales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<T: Real>(store: &mut ParamStore<T>, max_norm: f64) -> f64 {
    let norm = store.grad_norm();
    if norm > max_norm {
        store.scale_grads(T::lit(max_norm / norm));
    }
    norm
}

/// Quantity watched on the monitor split.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MonitorMetric {
    #[default]
    MacroF1,
    Loss,
}

impl MonitorMetric {
    fn higher_is_better(self) -> bool {
        matches!(self, MonitorMetric::MacroF1)
    }
}

/// Patience-based early stopping that keeps the best parameters seen.
#[derive(Clone, Debug)]
pub struct EarlyStopping<T> {
    pub patience: usize,
    pub min_delta: f64,
    pub higher_is_better: bool,
    pub best: Option<f64>,
    pub best_epoch: usize,
    pub epochs_since_improve: usize,
    snapshot: Option<Vec<Vec<T>>>,
}

impl<T: Real> EarlyStopping<T> {
    pub fn new(patience: usize, min_delta: f64, higher_is_better: bool) -> Self {
        Self {
            patience,
            min_delta,
            higher_is_better,
            best: None,
            best_epoch: 0,
            epochs_since_improve: 0,
            snapshot: None,
        }
    }

    /// Records the metric of `epoch` and returns `true` once patience runs out.
    pub fn observe(&mut self, epoch: usize, metric: f64, store: &ParamStore<T>) -> bool {
        let improved = match self.best {
            None => true,
            Some(best) if self.higher_is_better => metric > best + self.min_delta,
            Some(best) => metric < best - self.min_delta,
        };
        if improved {
            self.best = Some(metric);
            self.best_epoch = epoch;
            self.epochs_since_improve = 0;
            self.snapshot = Some(store.snapshot());
        } else {
            self.epochs_since_improve += 1;
        }
        self.epochs_since_improve >= self.patience
    }

    pub fn restore_best(&self, store: &mut ParamStore<T>) {
        if let Some(s) = &self.snapshot {
            store.restore(s);
        }
    }
}

/// Optimization settings of one training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub warmup_fraction: f64,
    pub min_lr_fraction: f64,
    pub max_grad_norm: f64,
    pub label_smoothing: f64,
    pub patience: usize,
    pub min_delta: f64,
    pub monitor: MonitorMetric,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 64,
            learning_rate: 1e-3,
            weight_decay: 1e-3,
            warmup_fraction: 0.10,
            min_lr_fraction: 0.10,
            max_grad_norm: 1.0,
            label_smoothing: 0.05,
            patience: 7,
            min_delta: 1e-4,
            monitor: MonitorMetric::MacroF1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch size must be positive".into()));
        }
        if !(self.learning_rate > 0.0) || self.weight_decay < 0.0 || !(self.max_grad_norm > 0.0) {
            return Err(Error::Config(
                "learning rate and clip norm must be positive, weight decay non-negative".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) || !(0.0..=1.0).contains(&self.warmup_fraction) {
            return Err(Error::Config("label smoothing and warmup fraction must lie in [0, 1)".into()));
        }
        Ok(())
    }

    /// Steps of a full run, fixed before training starts.
    pub fn total_steps(&self, train_rows: usize) -> usize {
        self.epochs * train_rows.div_ceil(self.batch_size)
    }
}

/// Features and labels of one split.
#[derive(Clone, Copy, Debug)]
pub struct Split<'a> {
    pub classical: &'a Matrix,
    pub quantum: &'a Matrix,
    pub labels: &'a [usize],
}

impl Split<'_> {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub monitor_metric: Option<f64>,
    pub lr: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub best_metric: Option<f64>,
    pub stopped_early: bool,
}

impl History {
    pub fn epochs_ran(&self) -> usize {
        self.epochs.len()
    }
}

fn rows_as<T: Real>(m: &Matrix, rows: &[usize]) -> Vec<T> {
    let mut out = Vec::with_capacity(rows.len() * m.cols());
    for &i in rows {
        out.extend(m.row(i).iter().map(|&v| T::lit(f64::from(v))));
    }
    out
}

/// Monitor score of `model` on `split`: macro-F1 (threshold 0.5 for binary
/// tasks) or the unsmoothed loss.
pub fn evaluate_monitor<T: Real>(model: &Model<T>, split: &Split<'_>, metric: MonitorMetric) -> Result<f64> {
    let all: Vec<usize> = (0..split.len()).collect();
    let xc = rows_as::<T>(split.classical, &all);
    let xq = rows_as::<T>(split.quantum, &all);
    let mut tape = Tape::new();
    let (vc, vq) = model.inputs(&mut tape, &xc, &xq, split.len())?;
    let mut rng = rand::rngs::mock::StepRng::new(0, 0);
    let logits = model.forward(&mut tape, vc, vq, false, &mut rng)?;
    match metric {
        MonitorMetric::Loss => {
            let loss = classification_loss(&mut tape, logits, split.labels, model.classes, 0.0)?;
            Ok(tape.value(loss)[0].as_f64())
        }
        MonitorMetric::MacroF1 => {
            let values: Vec<f64> = tape.value(logits).iter().map(|v| v.as_f64()).collect();
            let width = model.output_dim();
            let probs = probabilities(&values, width);
            let pred = if width == 1 {
                probs.iter().map(|&p| usize::from(p >= 0.5)).collect()
            } else {
                argmax_rows(&probs, width)
            };
            Ok(macro_prf1(&pred, split.labels, model.classes)?.2)
        }
    }
}

/// Trains `model` on `train`, using `monitor` (if any) for early stopping.
/// With a monitor split the best parameters are restored before returning.
pub fn train_fold<T: Real>(
    model: &mut Model<T>,
    train: &Split<'_>,
    monitor: Option<&Split<'_>>,
    config: &TrainConfig,
    seed: u64,
) -> Result<History> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::Data("empty training split".into()));
    }
    let monitor = monitor.filter(|m| !m.is_empty());
    let schedule = Schedule::new(
        config.learning_rate,
        config.total_steps(train.len()),
        config.warmup_fraction,
        config.min_lr_fraction,
    );
    let mut optimizer = AdamW::new(&model.store, config.weight_decay);
    let mut stopper = EarlyStopping::new(config.patience, config.min_delta, config.monitor.higher_is_better());

    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(seed);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(seed);
    dropout_rng.set_stream(1);

    let mut history = History::default();
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=config.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        let mut lr = 0.0;
        for batch in order.chunks(config.batch_size) {
            let xc = rows_as::<T>(train.classical, batch);
            let xq = rows_as::<T>(train.quantum, batch);
            let labels: Vec<usize> = batch.iter().map(|&i| train.labels[i]).collect();

            let mut tape = Tape::new();
            let (vc, vq) = model.inputs(&mut tape, &xc, &xq, batch.len())?;
            let logits = model.forward(&mut tape, vc, vq, true, &mut dropout_rng)?;
            let loss = classification_loss(&mut tape, logits, &labels, model.classes, config.label_smoothing)?;
            tape.backward(loss)?;
            let value = tape.value(loss)[0].as_f64();
            if !value.is_finite() {
                return Err(Error::Data(format!("training loss became {value} in epoch {epoch}")));
            }
            loss_sum += value * batch.len() as f64;

            model.store.zero_grad();
            tape.accumulate_param_grads(&mut model.store);
            clip_grad_norm(&mut model.store, config.max_grad_norm);
            lr = schedule.lr_at(optimizer.steps_taken() as usize + 1);
            optimizer.step(&mut model.store, lr);
        }

        let monitor_metric = monitor
            .map(|m| evaluate_monitor(model, m, config.monitor))
            .transpose()?;
        history.epochs.push(EpochRecord {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            monitor_metric,
            lr,
        });
        log::debug!(
            "epoch {epoch}: train_loss={:.5} monitor={monitor_metric:?} lr={lr:.2e}",
            loss_sum / train.len() as f64
        );
        if let Some(metric) = monitor_metric {
            if stopper.observe(epoch, metric, &model.store) {
                history.stopped_early = epoch < config.epochs;
                break;
            }
        }
    }

    if monitor.is_some() {
        stopper.restore_best(&mut model.store);
        history.best_epoch = Some(stopper.best_epoch);
        history.best_metric = stopper.best;
    }
    Ok(history)
}
