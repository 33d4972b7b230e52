//! Flat run configuration shared by the command-line tools, and history CSVs.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::detector::ModelConfig;
use crate::error::{Error, Result};
use crate::injection::{IntegrationStrategy, P0Mode};
use crate::training::{Dataset, EpochRecord, EvalConfig, LossComponents, LossWeights, LrSchedule, TrainConfig};

use super::ablation::{toy_train_config, DatasetSpec};

/// Every knob of a single train/eval run under one flat key set.
/// Missing keys take the toy defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub scale: String,
    pub teacher: String,
    pub strategy: IntegrationStrategy,
    pub input_size: usize,
    pub num_classes: usize,
    pub p0_mode: P0Mode,
    pub share_teacher: bool,
    /// Seeds both parameter initialization and batch shuffling.
    pub seed: u64,
    pub lr: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lambda_box: f64,
    pub lambda_obj: f64,
    pub lambda_cls: f64,
    pub t_small: f32,
    pub t_med: f32,
    pub schedule: LrSchedule,
    pub grad_clip: Option<f64>,
    pub eval_every: usize,
    pub conf_threshold: f32,
    pub nms_iou: f64,
    pub stop_at_map50: Option<f64>,
    /// Random left-right / top-bottom mirroring of training samples.
    pub flip: bool,
    pub dataset: DatasetSpec,
    /// Trailing samples held out for validation.
    pub val_samples: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = toy_train_config();
        Self {
            scale: "S".into(),
            teacher: "toy-tiny".into(),
            strategy: IntegrationStrategy::None,
            input_size: 64,
            num_classes: 2,
            p0_mode: P0Mode::default(),
            share_teacher: false,
            seed: 0,
            lr: t.lr,
            momentum: t.momentum,
            epochs: t.epochs,
            batch_size: t.batch_size,
            lambda_box: t.weights.lambda_box,
            lambda_obj: t.weights.lambda_obj,
            lambda_cls: t.weights.lambda_cls,
            t_small: t.t_small,
            t_med: t.t_med,
            schedule: t.schedule,
            grad_clip: t.grad_clip,
            eval_every: t.eval_every,
            conf_threshold: t.eval.conf_threshold,
            nms_iou: t.eval.nms_iou,
            stop_at_map50: t.stop_at_map50,
            flip: t.flip,
            dataset: DatasetSpec::default(),
            val_samples: 50,
        }
    }
}

impl RunConfig {
    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            p0_mode: self.p0_mode,
            share_teacher: self.share_teacher,
            ..ModelConfig::new(&self.scale, &self.teacher, self.strategy)
                .with_input_size(self.input_size)
                .with_classes(self.num_classes)
                .with_seed(self.seed)
        }
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            momentum: self.momentum,
            epochs: self.epochs,
            batch_size: self.batch_size,
            weights: LossWeights { lambda_box: self.lambda_box, lambda_obj: self.lambda_obj, lambda_cls: self.lambda_cls },
            seed: self.seed,
            t_small: self.t_small,
            t_med: self.t_med,
            schedule: self.schedule,
            grad_clip: self.grad_clip,
            eval_every: self.eval_every,
            eval: self.eval(),
            stop_at_map50: self.stop_at_map50,
            flip: self.flip,
        }
    }

    pub fn eval(&self) -> EvalConfig {
        EvalConfig { conf_threshold: self.conf_threshold, nms_iou: self.nms_iou }
    }

    /// Loads the dataset and splits off the trailing `val_samples` for validation.
    pub fn load_split(&self) -> Result<(Dataset, Dataset)> {
        let data = self.dataset.load(self.input_size, self.num_classes)?;
        if self.val_samples == 0 || self.val_samples >= data.len() {
            return Err(Error::Config(format!(
                "{} validation samples leave no usable split of {} samples",
                self.val_samples,
                data.len()
            )));
        }
        let n = data.len() - self.val_samples;
        Ok(data.split(n))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct HistoryRow {
    epoch: usize,
    lr: f64,
    box_loss: f64,
    obj_loss: f64,
    cls_loss: f64,
    total_loss: f64,
    map50: Option<f64>,
    map5095: Option<f64>,
}

pub fn write_history(path: &Path, history: &[EpochRecord]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    for r in history {
        w.serialize(HistoryRow {
            epoch: r.epoch,
            lr: r.lr,
            box_loss: r.loss.box_term,
            obj_loss: r.loss.obj_term,
            cls_loss: r.loss.cls_term,
            total_loss: r.loss.total,
            map50: r.map50,
            map5095: r.map5095,
        })?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_history(path: &Path) -> Result<Vec<EpochRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize::<HistoryRow>()
        .map(|row| {
            let row = row?;
            Ok(EpochRecord {
                epoch: row.epoch,
                lr: row.lr,
                loss: LossComponents {
                    box_term: row.box_loss,
                    obj_term: row.obj_loss,
                    cls_term: row.cls_loss,
                    total: row.total_loss,
                },
                map50: row.map50,
                map5095: row.map5095,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_map_to_toy_training() {
        let run = RunConfig::default();
        let mut expected = toy_train_config();
        expected.seed = run.seed;
        assert_eq!(run.train(), expected);
        assert_eq!(run.model(), ModelConfig::new("S", "toy-tiny", IntegrationStrategy::None));
    }

    #[test]
    fn partial_json_keeps_defaults_and_rejects_unknown_keys() {
        let run: RunConfig = serde_json::from_str(r#"{"strategy": "dualp0p3", "epochs": 3}"#).unwrap();
        assert_eq!(run.strategy, IntegrationStrategy::DualP0P3);
        assert_eq!(run.epochs, 3);
        assert_eq!(run.lr, RunConfig::default().lr);
        assert!(serde_json::from_str::<RunConfig>(r#"{"epoch": 3}"#).is_err());
        let dir: RunConfig =
            serde_json::from_str(r#"{"dataset": {"source": "directory", "images": "im", "labels": "lb"}}"#).unwrap();
        assert!(matches!(dir.dataset, DatasetSpec::Directory { .. }));
    }

    #[test]
    fn history_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("history.csv");
        let loss = LossComponents { box_term: 0.1, obj_term: 0.2, cls_term: 1.0 / 3.0, total: 0.1 + 0.2 + 1.0 / 3.0 };
        let rows = vec![
            EpochRecord { epoch: 0, lr: 0.02, loss, map50: None, map5095: None },
            EpochRecord { epoch: 1, lr: 0.01, loss, map50: Some(0.812345678901), map5095: Some(1e-17) },
        ];
        write_history(&path, &rows).unwrap();
        assert_eq!(read_history(&path).unwrap(), rows);
    }
}
