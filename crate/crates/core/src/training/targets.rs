//! Routing ground truth to pyramid levels and cells.

use crate::detector::LEVEL_STRIDES;
use crate::error::{Error, Result};

use super::data::GroundTruthBox;

/// Level router settings: `sqrt(w * h)` up to `t_small` goes to P3, up to `t_med` to
/// P4, larger to P5 (fractions of the input side).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TargetSpec {
    pub t_small: f32,
    pub t_med: f32,
    pub input_size: usize,
    pub num_classes: usize,
}

impl TargetSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.t_small && self.t_small < self.t_med && self.t_med < 1.0) {
            return Err(Error::Config(format!(
                "size thresholds must satisfy 0 < t_small < t_med < 1, got {} and {}",
                self.t_small, self.t_med
            )));
        }
        Ok(())
    }

    /// Pyramid level (0 = P3) for a box.
    pub fn level_of(&self, b: &GroundTruthBox) -> usize {
        let size = (b.w * b.h).sqrt();
        if size <= self.t_small {
            0
        } else if size <= self.t_med {
            1
        } else {
            2
        }
    }

    pub fn sides(&self) -> [usize; 3] {
        LEVEL_STRIDES.map(|s| self.input_size / s)
    }
}

/// What an assigned cell should predict.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellTarget {
    pub class: usize,
    pub cx: f32,
    pub cy: f32,
    pub w: f32,
    pub h: f32,
}

/// Per-level `side x side` grids of optional targets (row-major).
#[derive(Debug, Clone, PartialEq)]
pub struct Targets {
    pub sides: [usize; 3],
    pub cells: [Vec<Option<CellTarget>>; 3],
    /// GTs that overwrote an earlier GT in the same cell.
    pub collisions: usize,
}

impl Targets {
    pub fn assigned(&self) -> usize {
        self.cells.iter().flatten().filter(|c| c.is_some()).count()
    }
}

/// One-to-one center-cell assignment; a later GT landing on an occupied cell replaces
/// the earlier one and is counted as a collision.
pub fn assign_targets(sample: &str, gts: &[GroundTruthBox], spec: &TargetSpec) -> Result<Targets> {
    spec.validate()?;
    let sides = spec.sides();
    let mut cells = sides.map(|s| vec![None; s * s]);
    let mut collisions = 0;
    for b in gts {
        b.validate(spec.num_classes, sample)?;
        let level = spec.level_of(b);
        let side = sides[level];
        let col = ((b.cx * side as f32) as usize).min(side - 1);
        let row = ((b.cy * side as f32) as usize).min(side - 1);
        let slot = &mut cells[level][row * side + col];
        if slot.is_some() {
            collisions += 1;
        }
        *slot = Some(CellTarget { class: b.class, cx: b.cx, cy: b.cy, w: b.w, h: b.h });
    }
    Ok(Targets { sides, cells, collisions })
}
