//! Ground-truth boxes and in-memory datasets.

use serde::{Deserialize, Serialize};

use crate::detector::DetectionBox;
use crate::error::{Error, Result};
use crate::numeric::Tensor;

/// Slack allowed when checking that a box edge lies inside the unit square.
const EDGE_SLACK: f32 = 1e-4;

/// An annotated object: class id and normalized center/size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthBox {
    pub class: usize,
    pub cx: f32,
    pub cy: f32,
    pub w: f32,
    pub h: f32,
}

impl GroundTruthBox {
    pub fn new(class: usize, cx: f32, cy: f32, w: f32, h: f32) -> Self {
        Self { class, cx, cy, w, h }
    }

    /// Name of the first field that violates the box invariants, with the reason.
    pub fn violation(&self, num_classes: usize) -> Option<(&'static str, String)> {
        if self.class >= num_classes {
            return Some(("class", format!("{} is not below the class count {num_classes}", self.class)));
        }
        for (field, v) in [("cx", self.cx), ("cy", self.cy)] {
            if !(0.0..=1.0).contains(&v) {
                return Some((field, format!("{v} outside [0, 1]")));
            }
        }
        for (field, v) in [("w", self.w), ("h", self.h)] {
            if !(v > 0.0 && v <= 1.0) {
                return Some((field, format!("{v} outside (0, 1]")));
            }
        }
        for (field, c, s) in [("w", self.cx, self.w), ("h", self.cy, self.h)] {
            if c - s / 2.0 < -EDGE_SLACK || c + s / 2.0 > 1.0 + EDGE_SLACK {
                return Some((field, format!("box extends past the image edge ({c} +/- {})", s / 2.0)));
            }
        }
        None
    }

    pub fn validate(&self, num_classes: usize, sample: &str) -> Result<()> {
        match self.violation(num_classes) {
            None => Ok(()),
            Some((field, why)) => Err(Error::Data(format!("{sample}: field {field}: {why}"))),
        }
    }

    pub fn to_detection(self) -> DetectionBox {
        DetectionBox::new(self.class, self.cx, self.cy, self.w, self.h, 1.0)
    }
}

/// One image (`[3, H, W]`, values in `[0, 1]`) with its boxes.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub name: String,
    pub image: Tensor<f32>,
    pub boxes: Vec<GroundTruthBox>,
}

impl Sample {
    /// Mirrors the image (and its boxes) left-right and/or top-bottom.
    pub fn flipped(&self, horizontal: bool, vertical: bool) -> Sample {
        let shape = self.image.shape();
        let (c, h, w) = (shape[0], shape[1], shape[2]);
        let src = self.image.data();
        let image = Tensor::from_fn([c, h, w], |i| {
            let (ch, y, x) = (i / (h * w), (i / w) % h, i % w);
            let sy = if vertical { h - 1 - y } else { y };
            let sx = if horizontal { w - 1 - x } else { x };
            src[(ch * h + sy) * w + sx]
        });
        let boxes = self
            .boxes
            .iter()
            .map(|b| GroundTruthBox {
                cx: if horizontal { 1.0 - b.cx } else { b.cx },
                cy: if vertical { 1.0 - b.cy } else { b.cy },
                ..*b
            })
            .collect();
        Sample { name: self.name.clone(), image, boxes }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub input_size: usize,
    pub num_classes: usize,
}

impl Dataset {
    /// Checks image shapes and every box.
    pub fn new(samples: Vec<Sample>, input_size: usize, num_classes: usize) -> Result<Self> {
        for s in &samples {
            if s.image.shape() != [3, input_size, input_size] {
                return Err(Error::Data(format!(
                    "{}: image shape {:?}, expected [3, {input_size}, {input_size}]",
                    s.name,
                    s.image.shape()
                )));
            }
            for b in &s.boxes {
                b.validate(num_classes, &s.name)?;
            }
        }
        Ok(Self { samples, input_size, num_classes })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Stacks the selected images into `[N, 3, H, W]`.
    pub fn batch(&self, indices: &[usize]) -> Tensor<f32> {
        let s = self.input_size;
        let mut data = Vec::with_capacity(indices.len() * 3 * s * s);
        for &i in indices {
            data.extend_from_slice(self.samples[i].image.data());
        }
        Tensor::new([indices.len(), 3, s, s], data).expect("batch of validated samples")
    }

    /// Stacks arbitrary samples of this dataset's geometry into `[N, 3, H, W]`.
    pub fn stack(&self, samples: &[Sample]) -> Tensor<f32> {
        let s = self.input_size;
        let data = samples.iter().flat_map(|x| x.image.data().iter().copied()).collect();
        Tensor::new([samples.len(), 3, s, s], data).expect("batch of validated samples")
    }

    pub fn ground_truth(&self) -> Vec<Vec<DetectionBox>> {
        self.samples.iter().map(|s| s.boxes.iter().map(|b| b.to_detection()).collect()).collect()
    }

    /// First `n` samples and the rest.
    pub fn split(mut self, n: usize) -> (Dataset, Dataset) {
        let rest = self.samples.split_off(n.min(self.samples.len()));
        let (s, k) = (self.input_size, self.num_classes);
        (self, Dataset { samples: rest, input_size: s, num_classes: k })
    }
}
