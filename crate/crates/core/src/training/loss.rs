//! Composite detection loss with analytic gradients w.r.t. the raw head outputs.

use serde::{Deserialize, Serialize};

use crate::detector::{decode_cell, size_base, PyramidPrediction, LEVEL_STRIDES};
use crate::error::{Error, Result};

use super::targets::{CellTarget, Targets};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_box: f64,
    pub lambda_obj: f64,
    pub lambda_cls: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda_box: 5.0, lambda_obj: 1.0, lambda_cls: 1.0 }
    }
}

/// Weighted loss terms; `total` is their sum.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub box_term: f64,
    pub obj_term: f64,
    pub cls_term: f64,
    pub total: f64,
}

impl LossComponents {
    fn new(box_term: f64, obj_term: f64, cls_term: f64) -> Self {
        Self { box_term, obj_term, cls_term, total: box_term + obj_term + cls_term }
    }

    /// First non-finite component, by name.
    pub fn non_finite(&self) -> Option<&'static str> {
        [("box", self.box_term), ("objectness", self.obj_term), ("class", self.cls_term), ("total", self.total)]
            .into_iter()
            .find(|(_, v)| !v.is_finite())
            .map(|(n, _)| n)
    }
}

/// Loss value plus its gradient for each level tensor (same layout as the level).
#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub components: LossComponents,
    pub grads: Vec<Vec<f64>>,
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// `BCE(sigmoid(z), y)` and its derivative in `z`, stable for large `|z|`.
pub fn bce_with_logits(z: f64, y: f64) -> (f64, f64) {
    let loss = z.max(0.0) - z * y + (-z.abs()).exp().ln_1p();
    (loss, sigmoid(z) - y)
}

/// IoU of two center/size boxes and its gradient w.r.t. the first box's `(cx, cy, w, h)`.
pub fn iou_with_grad(p: [f64; 4], t: [f64; 4]) -> (f64, [f64; 4]) {
    let edges = |b: [f64; 4]| [b[0] - b[2] / 2.0, b[1] - b[3] / 2.0, b[0] + b[2] / 2.0, b[1] + b[3] / 2.0];
    let (a, b) = (edges(p), edges(t));
    let iw = a[2].min(b[2]) - a[0].max(b[0]);
    let ih = a[3].min(b[3]) - a[1].max(b[1]);
    let area_p = p[2] * p[3];
    if iw <= 0.0 || ih <= 0.0 {
        return (0.0, [0.0; 4]);
    }
    let inter = iw * ih;
    let union = area_p + t[2] * t[3] - inter;
    let iou = inter / union;
    let d_inter = (union + inter) / (union * union);
    let d_area = -inter / (union * union);
    // d inter / d edge of the predicted box (left, top, right, bottom)
    let dl = if a[0] > b[0] { -ih } else { 0.0 };
    let dt = if a[1] > b[1] { -iw } else { 0.0 };
    let dr = if a[2] < b[2] { ih } else { 0.0 };
    let db = if a[3] < b[3] { iw } else { 0.0 };
    let grad = [
        d_inter * (dl + dr),
        d_inter * (dt + db),
        d_inter * (dr - dl) / 2.0 + d_area * p[3],
        d_inter * (db - dt) / 2.0 + d_area * p[2],
    ];
    (iou, grad)
}

/// Loss over raw level values `levels[l]` laid out `[N, 5+K, S, S]` (`sides[l] = S`).
///
/// Per image: box = mean over assigned cells of `1 - IoU`, objectness = mean BCE over
/// every cell, class = mean BCE over assigned cells and classes. Each term is averaged
/// over the batch and scaled by its weight.
pub fn loss_from_levels(
    levels: &[&[f64]],
    sides: [usize; 3],
    num_classes: usize,
    input_size: usize,
    targets: &[Targets],
    weights: &LossWeights,
) -> Result<LossOutput> {
    let k = num_classes;
    let ch = 5 + k;
    let n = targets.len();
    for (l, data) in levels.iter().enumerate() {
        if data.len() != n * ch * sides[l] * sides[l] {
            return Err(Error::shape("detection_loss", format!("level {l} has {} values", data.len())));
        }
    }
    if targets.iter().any(|t| t.sides != sides) {
        return Err(Error::shape("detection_loss", "target grids differ from the prediction levels"));
    }
    let mut grads: Vec<Vec<f64>> = levels.iter().map(|d| vec![0.0; d.len()]).collect();
    let total_cells: usize = sides.iter().map(|s| s * s).sum();
    let inv_n = 1.0 / n.max(1) as f64;
    let (mut box_sum, mut obj_sum, mut cls_sum) = (0.0, 0.0, 0.0);

    for (img, tgt) in targets.iter().enumerate() {
        let assigned = tgt.assigned();
        let box_scale = if assigned > 0 { weights.lambda_box * inv_n / assigned as f64 } else { 0.0 };
        let cls_scale = if assigned > 0 { weights.lambda_cls * inv_n / (assigned * k) as f64 } else { 0.0 };
        let obj_scale = weights.lambda_obj * inv_n / total_cells as f64;
        for l in 0..3 {
            let (side, stride) = (sides[l], LEVEL_STRIDES[l]);
            let plane = side * side;
            let base = img * ch * plane;
            let data = levels[l];
            let grad = &mut grads[l];
            for cell in 0..plane {
                let at = |c: usize| base + c * plane + cell;
                let target: Option<CellTarget> = tgt.cells[l][cell];
                let (obj_loss, obj_grad) = bce_with_logits(data[at(4)], target.is_some() as u8 as f64);
                obj_sum += obj_scale * obj_loss;
                grad[at(4)] += obj_scale * obj_grad;
                let Some(t) = target else { continue };

                let raw = [0, 1, 2, 3].map(|c| data[at(c)]);
                let b = decode_cell(raw, cell / side, cell % side, stride, input_size);
                let truth = [t.cx, t.cy, t.w, t.h].map(f64::from);
                let (iou, d_iou) = iou_with_grad([b.cx, b.cy, b.w, b.h], truth);
                box_sum += box_scale * (1.0 - iou);
                let unit = stride as f64 / input_size as f64;
                let sbase = size_base(stride, input_size);
                let s = raw.map(sigmoid);
                let d_box = [
                    unit * s[0] * (1.0 - s[0]),
                    unit * s[1] * (1.0 - s[1]),
                    8.0 * sbase * s[2] * s[2] * (1.0 - s[2]),
                    8.0 * sbase * s[3] * s[3] * (1.0 - s[3]),
                ];
                for c in 0..4 {
                    grad[at(c)] -= box_scale * d_iou[c] * d_box[c];
                }

                for c in 0..k {
                    let (cl, cg) = bce_with_logits(data[at(5 + c)], (c == t.class) as u8 as f64);
                    cls_sum += cls_scale * cl;
                    grad[at(5 + c)] += cls_scale * cg;
                }
            }
        }
    }
    Ok(LossOutput { components: LossComponents::new(box_sum, obj_sum, cls_sum), grads })
}

/// [`loss_from_levels`] on a prediction.
pub fn detection_loss(preds: &PyramidPrediction, targets: &[Targets], weights: &LossWeights) -> Result<LossOutput> {
    let levels: Vec<Vec<f64>> = preds.levels.iter().map(|t| t.data().iter().map(|&v| v as f64).collect()).collect();
    let refs: Vec<&[f64]> = levels.iter().map(Vec::as_slice).collect();
    let sides = [0, 1, 2].map(|l| preds.levels[l].shape()[2]);
    loss_from_levels(&refs, sides, preds.num_classes, preds.input_size, targets, weights)
}
