//! SGD-with-momentum training loop and validation.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::detector::{decode, DetectionBox, DetectionModel, PyramidPrediction};
use crate::error::{Error, Result};
use crate::evaluation::{map_summary, nms, MapSummary};
use crate::numeric::{Graph, ParamId, Tensor};

use super::data::{Dataset, Sample};
use super::loss::{loss_from_levels, LossComponents, LossWeights};
use super::targets::{assign_targets, TargetSpec, Targets};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Decays linearly from the base rate to 0 over the configured epochs.
    LinearDecay,
}

/// Decoding and matching settings used for validation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub conf_threshold: f32,
    pub nms_iou: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { conf_threshold: 0.01, nms_iou: 0.5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub weights: LossWeights,
    pub seed: u64,
    pub t_small: f32,
    pub t_med: f32,
    pub schedule: LrSchedule,
    /// Rescales the whole gradient when its L2 norm exceeds this value.
    pub grad_clip: Option<f64>,
    /// Validate every this many epochs (the last epoch is always validated).
    pub eval_every: usize,
    pub eval: EvalConfig,
    /// Stop once validation mAP@0.5 reaches this value.
    pub stop_at_map50: Option<f64>,
    /// Mirror each training sample left-right and top-bottom at random.
    pub flip: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            momentum: 0.9,
            epochs: 10,
            batch_size: 8,
            weights: LossWeights::default(),
            seed: 0,
            t_small: 32.0 / 640.0,
            t_med: 96.0 / 640.0,
            schedule: LrSchedule::Constant,
            grad_clip: None,
            eval_every: 1,
            eval: EvalConfig::default(),
            stop_at_map50: None,
            flip: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be finite and nonnegative", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        if self.batch_size == 0 || self.eval_every == 0 {
            return Err(Error::Config("batch size and eval interval must be positive".into()));
        }
        self.target_spec(64, 1).validate()
    }

    pub fn target_spec(&self, input_size: usize, num_classes: usize) -> TargetSpec {
        TargetSpec { t_small: self.t_small, t_med: self.t_med, input_size, num_classes }
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        match self.schedule {
            LrSchedule::Constant => self.lr,
            LrSchedule::LinearDecay => self.lr * (1.0 - epoch as f64 / self.epochs.max(1) as f64),
        }
    }
}

/// One row of training history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    /// Batch-averaged loss components.
    pub loss: LossComponents,
    pub map50: Option<f64>,
    pub map5095: Option<f64>,
}

/// Observation hooks for a training run.
pub trait TrainObserver {
    /// Called after each optimizer step.
    fn on_step(&mut self, _epoch: usize, _batch: usize, _model: &DetectionModel) {}
    fn on_epoch(&mut self, _record: &EpochRecord) {}
}

impl TrainObserver for () {}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub history: Vec<EpochRecord>,
    pub steps: u64,
    pub collisions: usize,
}

/// Decoded, per-class NMS-filtered detections for every sample (one image per forward).
pub fn predict_dataset(model: &DetectionModel, data: &Dataset, eval: &EvalConfig) -> Result<Vec<Vec<DetectionBox>>> {
    (0..data.len())
        .map(|i| {
            let preds = model.predict(&data.batch(&[i]))?;
            let boxes = decode(&preds, eval.conf_threshold)?.pop().unwrap_or_default();
            Ok(nms(&boxes, eval.nms_iou))
        })
        .collect()
}

/// mAP summary of a model on a dataset; `None` when the dataset has no boxes.
pub fn evaluate(model: &DetectionModel, data: &Dataset, eval: &EvalConfig) -> Result<Option<MapSummary>> {
    let preds = predict_dataset(model, data, eval)?;
    Ok(map_summary(&preds, &data.ground_truth()))
}

fn check_compat(model: &DetectionModel, data: &Dataset, which: &str) -> Result<()> {
    let c = model.config();
    if data.input_size != c.input_size || data.num_classes != c.num_classes {
        return Err(Error::Config(format!(
            "{which} set is {}px with {} classes, model expects {}px with {} classes",
            data.input_size, data.num_classes, c.input_size, c.num_classes
        )));
    }
    Ok(())
}

/// Trains `model` in place. Frozen parameters never receive gradients or updates.
pub fn train(
    model: &mut DetectionModel,
    train_set: &Dataset,
    val_set: Option<&Dataset>,
    config: &TrainConfig,
    observer: &mut dyn TrainObserver,
) -> Result<TrainOutcome> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    check_compat(model, train_set, "training")?;
    if let Some(v) = val_set {
        check_compat(model, v, "validation")?;
    }
    let (input, k) = (model.config().input_size, model.config().num_classes);
    let spec = config.target_spec(input, k);
    let targets: Vec<Targets> = train_set
        .samples
        .iter()
        .map(|s| assign_targets(&s.name, &s.boxes, &spec))
        .collect::<Result<_>>()?;
    let collisions = targets.iter().map(|t| t.collisions).sum();

    let trainable: Vec<ParamId> = model.store.iter().filter(|(_, p)| !p.frozen).map(|(id, _)| id).collect();
    let mut velocity: Vec<Vec<f32>> = trainable.iter().map(|&id| vec![0.0; model.store.get(id).tensor.numel()]).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut history = Vec::new();
    let mut steps = 0u64;

    for epoch in 0..config.epochs {
        let lr = config.lr_at(epoch);
        order.shuffle(&mut rng);
        let mut sum = LossComponents::default();
        let batches: Vec<&[usize]> = order.chunks(config.batch_size).collect();
        for (b, idx) in batches.iter().enumerate() {
            let (images, batch_targets): (_, Vec<Targets>) = if config.flip {
                let samples: Vec<Sample> = idx
                    .iter()
                    .map(|&i| train_set.samples[i].flipped(rng.random_bool(0.5), rng.random_bool(0.5)))
                    .collect();
                let t = samples.iter().map(|s| assign_targets(&s.name, &s.boxes, &spec)).collect::<Result<_>>()?;
                (train_set.stack(&samples), t)
            } else {
                (train_set.batch(idx), idx.iter().map(|&i| targets[i].clone()).collect())
            };
            let loss = step(model, images, &batch_targets, config, lr, &trainable, &mut velocity)
                .map_err(|e| match e {
                    Error::NonFinite { component, .. } => Error::NonFinite { epoch, batch: b, component },
                    other => other,
                })?;
            steps += 1;
            sum.box_term += loss.box_term;
            sum.obj_term += loss.obj_term;
            sum.cls_term += loss.cls_term;
            sum.total += loss.total;
            observer.on_step(epoch, b, model);
        }
        let nb = batches.len() as f64;
        let loss = LossComponents {
            box_term: sum.box_term / nb,
            obj_term: sum.obj_term / nb,
            cls_term: sum.cls_term / nb,
            total: sum.total / nb,
        };
        let last = epoch + 1 == config.epochs;
        let summary = match val_set {
            Some(v) if last || (epoch + 1) % config.eval_every == 0 => evaluate(model, v, &config.eval)?,
            _ => None,
        };
        let record = EpochRecord {
            epoch,
            lr,
            loss,
            map50: summary.as_ref().map(|s| s.map50),
            map5095: summary.as_ref().map(|s| s.map5095),
        };
        observer.on_epoch(&record);
        let reached = matches!((record.map50, config.stop_at_map50), (Some(m), Some(t)) if m >= t);
        history.push(record);
        if reached {
            break;
        }
    }
    Ok(TrainOutcome { history, steps, collisions })
}

fn step(
    model: &mut DetectionModel,
    images: Tensor<f32>,
    targets: &[Targets],
    config: &TrainConfig,
    lr: f64,
    trainable: &[ParamId],
    velocity: &mut [Vec<f32>],
) -> Result<LossComponents> {
    let grads = {
        let mut g = Graph::with_store(&model.store);
        let x = g.input(images);
        let out = model.network.forward(&mut g, x)?;
        let preds = PyramidPrediction::from_graph(&g, &out, model.config());
        let levels: Vec<Vec<f64>> =
            preds.levels.iter().map(|t| t.data().iter().map(|&v| v as f64).collect()).collect();
        let refs: Vec<&[f64]> = levels.iter().map(Vec::as_slice).collect();
        let sides = [0, 1, 2].map(|l| preds.levels[l].shape()[2]);
        let c = model.config();
        let loss = loss_from_levels(&refs, sides, c.num_classes, c.input_size, targets, &config.weights)?;
        if let Some(component) = loss.components.non_finite() {
            return Err(Error::NonFinite { epoch: 0, batch: 0, component });
        }
        let mut total = None;
        for (l, grad) in loss.grads.into_iter().enumerate() {
            let value = if l == 0 { loss.components.total as f32 } else { 0.0 };
            let e = g.external_scalar(out.levels[l], value, grad.into_iter().map(|v| v as f32).collect())?;
            total = Some(match total {
                None => e,
                Some(t) => g.add(t, e)?,
            });
        }
        (g.backward(total.expect("three levels"))?, loss.components)
    };
    let (grads, components) = grads;

    model.store.zero_grad();
    model.store.accumulate(&grads)?;
    let mut sq = 0.0f64;
    for &id in trainable {
        if let Some(g) = model.store.get(id).tensor.grad() {
            sq += g.iter().map(|&v| (v as f64).powi(2)).sum::<f64>();
        }
    }
    if !sq.is_finite() {
        return Err(Error::NonFinite { epoch: 0, batch: 0, component: "gradient" });
    }
    let norm = sq.sqrt();
    let scale = match config.grad_clip {
        Some(clip) if norm > clip => clip / norm,
        _ => 1.0,
    };
    let (mu, lr, scale) = (config.momentum as f32, lr as f32, scale as f32);
    for (&id, vel) in trainable.iter().zip(velocity.iter_mut()) {
        let p = model.store.get_mut(id);
        let Some(grad) = p.tensor.grad().map(<[f32]>::to_vec) else { continue };
        for (v, g) in vel.iter_mut().zip(&grad) {
            *v = mu * *v + scale * g;
        }
        for (w, v) in p.tensor.data_mut().iter_mut().zip(vel.iter()) {
            *w -= lr * v;
        }
    }
    Ok(components)
}
