//! SGD with momentum and weight decay, two learning-rate groups, cosine
//! annealing, seeded mini-batch shuffling and per-epoch evaluation.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::{augment_eval, augment_train, stack, AugmentConfig, Dataset};
use crate::error::{Error, Result};
use crate::model::{argmax_rows, predictions_from_probs, Model, PARTS};
use crate::nn::{Group, ParamSet};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct OptimConfig {
    pub momentum: f32,
    pub weight_decay: f32,
    /// Base learning rate of the backbone group.
    pub lr_backbone: f32,
    /// Factor applied to `lr_backbone` for graders, part convs and heads.
    pub lr_new_multiplier: f32,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            momentum: 0.9,
            weight_decay: 1e-5,
            lr_backbone: 0.002,
            lr_new_multiplier: 10.0,
            epochs: 60,
            batch_size: 32,
            seed: 0,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config("weight_decay must be >= 0"));
        }
        if !(self.lr_backbone > 0.0 && self.lr_backbone.is_finite()) {
            return Err(Error::config(format!("lr_backbone must be > 0, got {}", self.lr_backbone)));
        }
        if !(self.lr_new_multiplier > 0.0 && self.lr_new_multiplier.is_finite()) {
            return Err(Error::config("lr_new_multiplier must be > 0"));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::config("epochs and batch_size must be positive"));
        }
        Ok(())
    }

    /// Learning rates `[backbone, new]` for `epoch` under the cosine schedule.
    pub fn group_lrs(&self, epoch: usize) -> [f32; 2] {
        let lr = cosine_lr(self.lr_backbone, epoch, self.epochs);
        [lr, lr * self.lr_new_multiplier]
    }
}

/// Metrics recorded after every epoch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f32,
    pub eval_acc: f32,
    pub head_acc: [f32; PARTS],
    pub eval_loss: f32,
    /// Backbone learning rate used during the epoch.
    pub lr: f32,
}

/// Everything needed to continue training exactly where it stopped.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    /// Momentum buffers in parameter order.
    pub velocity: Vec<Tensor<f32>>,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed optimisation steps.
    pub step: usize,
    /// Training loss of every step so far.
    pub step_losses: Vec<f32>,
    pub history: Vec<EpochMetrics>,
    pub best_acc: f32,
    pub best_epoch: usize,
    /// Parameters at the best evaluation accuracy seen so far.
    pub best_params: Option<ParamSet<f32>>,
}

impl TrainState {
    pub fn new(params: &ParamSet<f32>) -> Self {
        Self {
            velocity: params.iter().map(|p| Tensor::zeros(p.value.shape())).collect(),
            epoch: 0,
            step: 0,
            step_losses: Vec::new(),
            history: Vec::new(),
            best_acc: f32::NEG_INFINITY,
            best_epoch: 0,
            best_params: None,
        }
    }

    /// Zero every momentum buffer.
    pub fn reset_velocity(&mut self) {
        for v in &mut self.velocity {
            v.data_mut().fill(0.0);
        }
    }
}

/// `v ← μ·v + (g + wd·p)`, `p ← p − lr·v`, with `lrs` indexed by group.
pub fn sgd_step(
    params: &mut ParamSet<f32>,
    grads: &[Option<Tensor<f32>>],
    velocity: &mut [Tensor<f32>],
    lrs: [f32; 2],
    cfg: &OptimConfig,
) -> Result<()> {
    if grads.len() != params.len() || velocity.len() != params.len() {
        return Err(Error::usage(format!(
            "{} parameters but {} gradients and {} velocity buffers",
            params.len(),
            grads.len(),
            velocity.len()
        )));
    }
    for ((p, g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        let g = g
            .as_ref()
            .ok_or_else(|| Error::usage(format!("no gradient for parameter {}", p.name)))?;
        if g.shape() != p.value.shape() || v.shape() != p.value.shape() {
            return Err(Error::Dimension {
                op: "sgd_step",
                lhs: p.value.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
        let lr = match p.group {
            Group::Backbone => lrs[0],
            Group::New => lrs[1],
        };
        let (mu, wd) = (cfg.momentum, cfg.weight_decay);
        for ((pv, &gv), vv) in p.value.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
            *vv = mu * *vv + (gv + wd * *pv);
            *pv -= lr * *vv;
        }
    }
    Ok(())
}

/// `0.5·base·(1 + cos(π·t/T))`, never negative.
pub fn cosine_lr(base: f32, t: usize, total: usize) -> f32 {
    let frac = t as f64 / total as f64;
    (0.5 * base as f64 * (1.0 + (std::f64::consts::PI * frac).cos())).max(0.0) as f32
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    /// Top-1 accuracy of the averaged head probabilities.
    pub accuracy: f32,
    pub head_acc: [f32; PARTS],
    /// Mean over samples of the summed head losses.
    pub mean_loss: f32,
    pub predictions: Vec<usize>,
}

/// Evaluation-transformed images of a dataset, `B×C×H×W` per batch.
pub fn eval_batches(ds: &Dataset, aug: &AugmentConfig, batch: usize) -> Result<Vec<(Tensor<f32>, Vec<usize>)>> {
    let idx: Vec<usize> = (0..ds.len()).collect();
    idx.chunks(batch.max(1))
        .map(|chunk| {
            let imgs = chunk.par_iter().map(|&i| augment_eval(ds.image(i), aug)).collect();
            Ok((stack(imgs)?, chunk.iter().map(|&i| ds.samples[i].label as usize).collect()))
        })
        .collect()
}

pub fn evaluate(model: &Model<f32>, ds: &Dataset, aug: &AugmentConfig, batch: usize) -> Result<EvalReport> {
    evaluate_batches(model, &eval_batches(ds, aug, batch)?)
}

pub fn evaluate_batches(model: &Model<f32>, batches: &[(Tensor<f32>, Vec<usize>)]) -> Result<EvalReport> {
    let mut predictions = Vec::new();
    let mut correct = 0usize;
    let mut head_correct = [0usize; PARTS];
    let mut loss_sum = 0.0f64;
    let mut n = 0usize;
    for (images, labels) in batches {
        let (loss, art) = model.forward_train(images, labels)?;
        loss_sum += loss as f64 * labels.len() as f64;
        for (h, logits) in art.logits.iter().enumerate() {
            head_correct[h] += argmax_rows(logits).iter().zip(labels).filter(|(p, l)| p == l).count();
        }
        for (p, &l) in predictions_from_probs(&art.probs).iter().zip(labels) {
            correct += (p.class == l) as usize;
            predictions.push(p.class);
        }
        n += labels.len();
    }
    if n == 0 {
        return Err(Error::data("evaluation set is empty"));
    }
    Ok(EvalReport {
        accuracy: (correct as f64 / n as f64) as f32,
        head_acc: head_correct.map(|c| (c as f64 / n as f64) as f32),
        mean_loss: (loss_sum / n as f64) as f32,
        predictions,
    })
}

/// Shuffle order of `epoch`: a function of the seed and the epoch only.
pub fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// Augmentation stream of one sample in one epoch.
fn sample_rng(seed: u64, epoch: usize, index: usize) -> ChaCha8Rng {
    let mixed = seed ^ (index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    let mut rng = ChaCha8Rng::seed_from_u64(mixed);
    rng.set_stream(epoch as u64);
    rng
}

/// Training batches of `epoch`.
pub fn train_batches(
    ds: &Dataset,
    aug: &AugmentConfig,
    cfg: &OptimConfig,
    epoch: usize,
) -> Result<Vec<(Tensor<f32>, Vec<usize>)>> {
    let order = epoch_order(cfg.seed, epoch, ds.len());
    order
        .chunks(cfg.batch_size)
        .map(|chunk| {
            let imgs = chunk
                .par_iter()
                .map(|&i| augment_train(ds.image(i), aug, &mut sample_rng(cfg.seed, epoch, i)))
                .collect();
            Ok((stack(imgs)?, chunk.iter().map(|&i| ds.samples[i].label as usize).collect()))
        })
        .collect()
}

fn check_datasets(model: &Model<f32>, sets: &[&Dataset]) -> Result<()> {
    let c = &model.cfg;
    for ds in sets {
        if ds.is_empty() {
            return Err(Error::data("dataset is empty"));
        }
        if ds.channels != c.in_channels {
            return Err(Error::data(format!(
                "dataset has {} channels, model expects {}",
                ds.channels, c.in_channels
            )));
        }
        if ds.num_classes() > c.num_classes {
            return Err(Error::data(format!(
                "dataset has labels up to {}, model has {} classes",
                ds.num_classes() - 1,
                c.num_classes
            )));
        }
    }
    Ok(())
}

/// Run epochs `state.epoch .. min(until, cfg.epochs)`. `on_epoch` sees the
/// model and state after every epoch, e.g. to write checkpoints.
#[allow(clippy::too_many_arguments)]
pub fn train_epochs(
    model: &mut Model<f32>,
    state: &mut TrainState,
    train: &Dataset,
    eval: &Dataset,
    cfg: &OptimConfig,
    aug: &AugmentConfig,
    until: usize,
    on_epoch: &mut dyn FnMut(&Model<f32>, &TrainState) -> Result<()>,
) -> Result<()> {
    cfg.validate()?;
    aug.validate()?;
    check_datasets(model, &[train, eval])?;
    if aug.crop != model.cfg.input_size {
        return Err(Error::config(format!(
            "crop size {} differs from model input size {}",
            aug.crop, model.cfg.input_size
        )));
    }
    let eval_set = eval_batches(eval, aug, cfg.batch_size)?;
    while state.epoch < until.min(cfg.epochs) {
        let epoch = state.epoch;
        let lrs = cfg.group_lrs(epoch);
        let mut loss_sum = 0.0f64;
        let mut seen = 0usize;
        for (images, labels) in train_batches(train, aug, cfg, epoch)? {
            let (loss, grads) = model.loss_and_grads(&images, &labels)?;
            if !loss.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    step: state.step,
                    loss: loss as f64,
                });
            }
            sgd_step(&mut model.params, &grads, &mut state.velocity, lrs, cfg)?;
            state.step_losses.push(loss);
            state.step += 1;
            loss_sum += loss as f64 * labels.len() as f64;
            seen += labels.len();
        }
        let report = evaluate_batches(model, &eval_set)?;
        state.history.push(EpochMetrics {
            epoch,
            train_loss: (loss_sum / seen as f64) as f32,
            eval_acc: report.accuracy,
            head_acc: report.head_acc,
            eval_loss: report.mean_loss,
            lr: lrs[0],
        });
        if report.accuracy > state.best_acc {
            state.best_acc = report.accuracy;
            state.best_epoch = epoch;
            state.best_params = Some(model.params.clone());
        }
        state.epoch += 1;
        on_epoch(model, state)?;
    }
    Ok(())
}

/// Full run from a fresh state.
pub fn train_loop(
    model: &mut Model<f32>,
    train: &Dataset,
    eval: &Dataset,
    cfg: &OptimConfig,
    aug: &AugmentConfig,
) -> Result<TrainState> {
    let mut state = TrainState::new(&model.params);
    train_epochs(model, &mut state, train, eval, cfg, aug, cfg.epochs, &mut |_, _| Ok(()))?;
    Ok(state)
}

pub const METRICS_HEADER: &str = "epoch,train_loss,eval_acc,head0_acc,head1_acc,head2_acc,lr";

/// Metric history as CSV with [`METRICS_HEADER`].
pub fn metrics_csv(history: &[EpochMetrics]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for m in history {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            m.epoch, m.train_loss, m.eval_acc, m.head_acc[0], m.head_acc[1], m.head_acc[2], m.lr
        ));
    }
    out
}
