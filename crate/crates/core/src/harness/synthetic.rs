//! Seeded synthetic shapes on textured noise.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{param_seed, Tensor};
use crate::training::{Dataset, GroundTruthBox, Sample};

/// Placement attempts per object before the whole sample is redrawn.
const PLACEMENT_TRIES: usize = 64;
/// Redraws per sample before generation gives up.
const MAX_REDRAWS: usize = 1000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub samples: usize,
    pub image_size: usize,
    pub num_classes: usize,
    /// Inclusive object-count range per image.
    pub objects: (usize, usize),
    /// Inclusive object side range in pixels.
    pub object_size: (usize, usize),
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self { seed: 0, samples: 250, image_size: 64, num_classes: 2, objects: (1, 3), object_size: (8, 24) }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.object_size;
        if self.image_size == 0 || self.image_size % 32 != 0 {
            return Err(Error::Config(format!("image side {} is not divisible by 32", self.image_size)));
        }
        if self.num_classes == 0 || self.objects.0 > self.objects.1 || lo == 0 || lo > hi || hi > self.image_size {
            return Err(Error::Config(format!("invalid synthetic dataset ranges: {self:?}")));
        }
        Ok(())
    }
}

/// Shape drawn for a class id (cycled for ids past the list).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeKind {
    Square,
    Disc,
    Triangle,
    Ring,
}

impl ShapeKind {
    pub fn of_class(class: usize) -> Self {
        [ShapeKind::Square, ShapeKind::Disc, ShapeKind::Triangle, ShapeKind::Ring][class % 4]
    }

    /// Whether pixel `(px, py)` (integer offsets inside a `size x size` box) is covered.
    fn covers(self, px: usize, py: usize, size: usize) -> bool {
        let s = size as f64;
        let (x, y) = (px as f64 + 0.5, py as f64 + 0.5);
        let r = s / 2.0;
        let d2 = (x - r).powi(2) + (y - r).powi(2);
        match self {
            ShapeKind::Square => true,
            ShapeKind::Disc => d2 <= r * r,
            // apex centered on the top row, base on the bottom row
            ShapeKind::Triangle => {
                let half = (py as f64 + 1.0) / s * r;
                (x - r).abs() <= half.max(0.5)
            }
            ShapeKind::Ring => d2 <= r * r && d2 >= (0.55 * r).powi(2),
        }
    }
}

/// An object in pixel coordinates: top-left corner and side.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlacedShape {
    pub class: usize,
    pub x: usize,
    pub y: usize,
    pub size: usize,
    pub color: [u8; 3],
}

impl PlacedShape {
    pub fn label(&self, image_size: usize) -> GroundTruthBox {
        let n = image_size as f32;
        let s = self.size as f32;
        GroundTruthBox::new(self.class, (self.x as f32 + s / 2.0) / n, (self.y as f32 + s / 2.0) / n, s / n, s / n)
    }

    fn overlaps(&self, other: &PlacedShape, gap: usize) -> bool {
        self.x < other.x + other.size + gap
            && other.x < self.x + self.size + gap
            && self.y < other.y + other.size + gap
            && other.y < self.y + self.size + gap
    }
}

/// Draws the shapes over a noise background into `[3, N, N]` bytes.
pub fn render(background: &[u8], shapes: &[PlacedShape], image_size: usize) -> Vec<u8> {
    let plane = image_size * image_size;
    let mut img = background.to_vec();
    for s in shapes {
        let kind = ShapeKind::of_class(s.class);
        for py in 0..s.size {
            for px in 0..s.size {
                if kind.covers(px, py, s.size) {
                    let idx = (s.y + py) * image_size + s.x + px;
                    for c in 0..3 {
                        img[c * plane + idx] = s.color[c];
                    }
                }
            }
        }
    }
    img
}

fn background(rng: &mut ChaCha8Rng, n: usize) -> Vec<u8> {
    let base: [f64; 3] = [0, 1, 2].map(|_| rng.random_range(40.0..110.0));
    // two low-frequency waves plus per-pixel noise
    let (fx, fy, phase) = (rng.random_range(0.5..3.0), rng.random_range(0.5..3.0), rng.random_range(0.0..6.3));
    let amp = rng.random_range(5.0..25.0);
    let mut out = vec![0u8; 3 * n * n];
    for c in 0..3 {
        for y in 0..n {
            for x in 0..n {
                let t = std::f64::consts::TAU * (fx * x as f64 + fy * y as f64) / n as f64 + phase + c as f64;
                let v = base[c] + amp * t.sin() + rng.random_range(-20.0..20.0);
                out[c * n * n + y * n + x] = v.clamp(0.0, 255.0) as u8;
            }
        }
    }
    out
}

fn place(rng: &mut ChaCha8Rng, spec: &SyntheticSpec) -> Option<Vec<PlacedShape>> {
    let count = rng.random_range(spec.objects.0..=spec.objects.1);
    let mut shapes: Vec<PlacedShape> = Vec::with_capacity(count);
    for _ in 0..count {
        let class = rng.random_range(0..spec.num_classes);
        let size = rng.random_range(spec.object_size.0..=spec.object_size.1);
        let color = [0, 1, 2].map(|_| rng.random_range(150..=255u8));
        let max = spec.image_size - size;
        let placed = (0..PLACEMENT_TRIES).find_map(|_| {
            let cand = PlacedShape { class, x: rng.random_range(0..=max), y: rng.random_range(0..=max), size, color };
            shapes.iter().all(|s| !s.overlaps(&cand, 1)).then_some(cand)
        })?;
        shapes.push(placed);
    }
    Some(shapes)
}

/// Generated images (bytes, `[3, N, N]`) with labels and the number of redraws.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticData {
    pub images: Vec<Vec<u8>>,
    pub labels: Vec<Vec<GroundTruthBox>>,
    pub redraws: usize,
}

impl SyntheticData {
    pub fn into_dataset(self, spec: &SyntheticSpec) -> Result<Dataset> {
        let n = spec.image_size;
        let samples = self
            .images
            .into_iter()
            .zip(self.labels)
            .enumerate()
            .map(|(i, (img, boxes))| Sample {
                name: sample_name(i),
                image: Tensor::new([3, n, n], img.iter().map(|&v| v as f32 / 255.0).collect()).expect("sized"),
                boxes,
            })
            .collect();
        Dataset::new(samples, n, spec.num_classes)
    }
}

pub fn sample_name(i: usize) -> String {
    format!("sample_{i:05}")
}

/// Deterministic in `spec`: each sample draws from its own seeded stream.
pub fn gen_synthetic_dataset(spec: &SyntheticSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let n = spec.image_size;
    let mut out = SyntheticData { images: Vec::new(), labels: Vec::new(), redraws: 0 };
    for i in 0..spec.samples {
        let mut rng = ChaCha8Rng::seed_from_u64(param_seed(spec.seed, &sample_name(i)));
        let bg = background(&mut rng, n);
        let mut attempt = 0;
        let shapes = loop {
            if let Some(s) = place(&mut rng, spec) {
                break s;
            }
            attempt += 1;
            out.redraws += 1;
            if attempt >= MAX_REDRAWS {
                return Err(Error::Data(format!("{}: objects do not fit after {MAX_REDRAWS} redraws", sample_name(i))));
            }
        };
        out.images.push(render(&bg, &shapes, n));
        out.labels.push(shapes.iter().map(|s| s.label(n)).collect());
    }
    Ok(out)
}

/// Generates and converts to a [`Dataset`].
pub fn synthetic_dataset(spec: &SyntheticSpec) -> Result<Dataset> {
    gen_synthetic_dataset(spec)?.into_dataset(spec)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SyntheticSpec {
        SyntheticSpec { samples: 12, ..SyntheticSpec::default() }
    }

    #[test]
    fn deterministic() {
        assert_eq!(gen_synthetic_dataset(&small()).unwrap(), gen_synthetic_dataset(&small()).unwrap());
        let other = SyntheticSpec { seed: 1, ..small() };
        assert_ne!(gen_synthetic_dataset(&small()).unwrap().images, gen_synthetic_dataset(&other).unwrap().images);
    }

    #[test]
    fn zero_objects_give_empty_labels() {
        let d = gen_synthetic_dataset(&SyntheticSpec { objects: (0, 0), ..small() }).unwrap();
        assert!(d.labels.iter().all(Vec::is_empty));
    }

    #[test]
    fn centered_square_label() {
        let s = PlacedShape { class: 0, x: 24, y: 24, size: 16, color: [255; 3] };
        assert_eq!(s.label(64), GroundTruthBox::new(0, 0.5, 0.5, 0.25, 0.25));
    }

    #[test]
    fn labels_are_tight_bounds_of_drawn_pixels() {
        let bg = vec![0u8; 3 * 64 * 64];
        for class in 0..4 {
            for size in [7, 8, 13, 24] {
                let s = PlacedShape { class, x: 10, y: 20, size, color: [255; 3] };
                let img = render(&bg, &[s], 64);
                let lit: Vec<(usize, usize)> =
                    (0..64 * 64).filter(|&i| img[i] == 255).map(|i| (i % 64, i / 64)).collect();
                let (x0, x1) = (lit.iter().map(|p| p.0).min().unwrap(), lit.iter().map(|p| p.0).max().unwrap());
                let (y0, y1) = (lit.iter().map(|p| p.1).min().unwrap(), lit.iter().map(|p| p.1).max().unwrap());
                assert_eq!((x0, x1 + 1, y0, y1 + 1), (10, 10 + size, 20, 20 + size), "class {class} size {size}");
            }
        }
    }

    #[test]
    fn boxes_are_valid_and_in_range() {
        let spec = SyntheticSpec { samples: 50, ..SyntheticSpec::default() };
        let d = synthetic_dataset(&spec).unwrap();
        for s in &d.samples {
            assert!((1..=3).contains(&s.boxes.len()));
            for b in &s.boxes {
                let px = b.w * 64.0;
                assert!((8.0..=24.0).contains(&px));
                assert!(b.class < 2);
            }
        }
    }

    #[test]
    fn crowded_specs_redraw_or_fail() {
        let spec = SyntheticSpec { samples: 3, objects: (3, 3), object_size: (30, 30), ..SyntheticSpec::default() };
        let d = gen_synthetic_dataset(&spec).unwrap();
        assert!(d.redraws > 0);
        let impossible = SyntheticSpec { samples: 1, objects: (5, 5), object_size: (40, 40), ..SyntheticSpec::default() };
        assert!(matches!(gen_synthetic_dataset(&impossible), Err(Error::Data(_))));
        assert!(SyntheticSpec { image_size: 48, ..small() }.validate().is_err());
    }
}
