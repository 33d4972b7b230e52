//! YOLO-style detector with teacher injection sites, plus box decoding.

mod config;
mod network;

pub use config::{ModelConfig, ParamReport, ScaleSpec, StageSpec};
pub use network::{ForwardOutput, Network, Taps, LEVEL_STRIDES, OBJECTNESS_PRIOR_BIAS};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{sigmoid_scalar, Element, Graph, ParamId, ParamPlan, ParamStore, Tensor};

/// A built detector: layer structure plus its parameter values.
#[derive(Debug, Clone)]
pub struct DetectionModel {
    pub network: Network,
    pub store: ParamStore<f32>,
}

/// Builds a model and reports its parameter partition.
pub fn build_model(config: &ModelConfig) -> Result<(DetectionModel, ParamReport)> {
    let model = DetectionModel::new(config)?;
    let report = model.param_report();
    Ok((model, report))
}

/// Parameter accounting without allocating any values.
pub fn plan_model(config: &ModelConfig) -> Result<(ParamPlan, ParamReport)> {
    let mut plan = ParamPlan::new();
    Network::new(&mut plan, config)?;
    let report = ParamReport::from_plan(&plan);
    Ok((plan, report))
}

pub fn param_report<E: Element>(store: &ParamStore<E>) -> ParamReport {
    ParamReport::from_store(store)
}

impl DetectionModel {
    pub fn new(config: &ModelConfig) -> Result<Self> {
        let mut store = ParamStore::new(config.seed);
        let network = Network::new(&mut store, config)?;
        for id in network.head_biases() {
            let mut bias = vec![0.0f32; 5 + config.num_classes];
            bias[4] = OBJECTNESS_PRIOR_BIAS;
            store.set_value(id, &bias)?;
        }
        Ok(Self { network, store })
    }

    pub fn config(&self) -> &ModelConfig {
        self.network.config()
    }

    pub fn param_report(&self) -> ParamReport {
        ParamReport::from_store(&self.store)
    }

    /// Sets every fusion gate to `value` on all channels.
    pub fn force_gates(&mut self, value: f32) -> Result<()> {
        for id in self.network.gates() {
            let n = self.store.get(id).tensor.numel();
            self.store.set_value(id, &vec![value; n])?;
        }
        Ok(())
    }

    pub fn gates(&self) -> Vec<ParamId> {
        self.network.gates()
    }

    /// Inference on `[N, 3, H, H]` images.
    pub fn predict(&self, images: &Tensor<f32>) -> Result<PyramidPrediction> {
        let mut g = Graph::with_store(&self.store);
        let x = g.input(images.clone());
        let out = self.network.forward(&mut g, x)?;
        Ok(PyramidPrediction::from_graph(&g, &out, self.config()))
    }
}

/// Head outputs per level: `[N, 4+1+K, S, S]` with channels `tx, ty, tw, th, obj, cls..`.
#[derive(Debug, Clone, PartialEq)]
pub struct PyramidPrediction {
    pub levels: Vec<Tensor<f32>>,
    pub input_size: usize,
    pub num_classes: usize,
}

impl PyramidPrediction {
    pub fn from_graph<E: Element>(g: &Graph<'_, E>, out: &ForwardOutput, config: &ModelConfig) -> Self {
        Self {
            levels: out.levels.iter().map(|&v| g.tensor(v).cast()).collect(),
            input_size: config.input_size,
            num_classes: config.num_classes,
        }
    }

    pub fn batch(&self) -> usize {
        self.levels[0].shape()[0]
    }

    /// Level shapes, for strategy-invariance checks.
    pub fn shapes(&self) -> Vec<Vec<usize>> {
        self.levels.iter().map(|t| t.shape().to_vec()).collect()
    }
}

/// A detection (or ground-truth) box in normalized center/size form.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionBox {
    pub class: usize,
    pub cx: f32,
    pub cy: f32,
    pub w: f32,
    pub h: f32,
    pub confidence: f32,
}

impl DetectionBox {
    pub fn new(class: usize, cx: f32, cy: f32, w: f32, h: f32, confidence: f32) -> Self {
        Self { class, cx, cy, w, h, confidence }
    }

    /// `[x1, y1, x2, y2]`.
    pub fn xyxy(&self) -> [f32; 4] {
        [self.cx - self.w / 2.0, self.cy - self.h / 2.0, self.cx + self.w / 2.0, self.cy + self.h / 2.0]
    }

    /// Clips the corners to the unit square, keeping the center/size form.
    pub fn clamped(self) -> Self {
        let [x1, y1, x2, y2] = self.xyxy().map(|v| v.clamp(0.0, 1.0));
        Self { cx: (x1 + x2) / 2.0, cy: (y1 + y2) / 2.0, w: x2 - x1, h: y2 - y1, ..self }
    }
}

/// Geometry of one decoded cell, before confidence filtering.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

/// Normalized size base of a level: twice its stride.
pub fn size_base(stride: usize, input_size: usize) -> f64 {
    2.0 * stride as f64 / input_size as f64
}

/// Box of cell `(row, col)` from raw terms:
/// center = (cell + sigmoid(t)) * stride / input, size = (2 sigmoid(t))^2 * base.
pub fn decode_cell(t: [f64; 4], row: usize, col: usize, stride: usize, input_size: usize) -> CellBox {
    let s = |v: f64| 1.0 / (1.0 + (-v).exp());
    let unit = stride as f64 / input_size as f64;
    let base = size_base(stride, input_size);
    CellBox {
        cx: (col as f64 + s(t[0])) * unit,
        cy: (row as f64 + s(t[1])) * unit,
        w: (2.0 * s(t[2])).powi(2) * base,
        h: (2.0 * s(t[3])).powi(2) * base,
    }
}

/// Boxes with `sigmoid(obj) * max sigmoid(cls) >= conf_threshold`, per image, clamped
/// to the unit square.
pub fn decode(preds: &PyramidPrediction, conf_threshold: f32) -> Result<Vec<Vec<DetectionBox>>> {
    if !(0.0..=1.0).contains(&conf_threshold) {
        return Err(Error::Config(format!("confidence threshold {conf_threshold} outside [0, 1]")));
    }
    let k = preds.num_classes;
    let mut out = vec![Vec::new(); preds.batch()];
    for (level, &stride) in preds.levels.iter().zip(LEVEL_STRIDES.iter()) {
        let sh = level.shape();
        if sh[1] != 5 + k {
            return Err(Error::shape("decode", format!("level has {} channels, expected {}", sh[1], 5 + k)));
        }
        let (hh, ww) = (sh[2], sh[3]);
        let plane = hh * ww;
        let data = level.data();
        for (n, boxes) in out.iter_mut().enumerate() {
            let base = n * (5 + k) * plane;
            let at = |c: usize, cell: usize| data[base + c * plane + cell];
            for cell in 0..plane {
                let obj = sigmoid_scalar(at(4, cell));
                if obj < conf_threshold {
                    continue;
                }
                let (class, p) = (0..k)
                    .map(|c| (c, sigmoid_scalar(at(5 + c, cell))))
                    .fold((0, f32::MIN), |best, cur| if cur.1 > best.1 { cur } else { best });
                let confidence = obj * p;
                if confidence < conf_threshold {
                    continue;
                }
                let t = [0, 1, 2, 3].map(|c| at(c, cell) as f64);
                let b = decode_cell(t, cell / ww, cell % ww, stride, preds.input_size);
                boxes.push(
                    DetectionBox::new(class, b.cx as f32, b.cy as f32, b.w as f32, b.h as f32, confidence).clamped(),
                );
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests;
