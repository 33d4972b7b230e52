//! Scale presets, model configuration and parameter reports.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::injection::{plan_injections, IntegrationStrategy, P0Mode, Site};
use crate::numeric::{Element, ParamPlan, ParamStore};
use crate::teacher::TeacherVariant;

/// One downsampling stage: a stride-2 conv to `down` channels, an optional 1x1
/// transition to `out`, then `blocks` residual conv blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSpec {
    pub down: usize,
    pub out: usize,
    pub blocks: usize,
}

/// Backbone widths and depths. Stages sit at strides 4, 8, 16 and 32 after a
/// stride-2 stem.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScaleSpec {
    pub name: String,
    pub stem: usize,
    pub stages: [StageSpec; 4],
}

impl ScaleSpec {
    pub const PRESETS: [&'static str; 4] = ["S", "M", "L", "L-full"];

    /// Toy ladder `w0, 2w0, 4w0, 8w0, 8w0` at strides 2..32.
    pub fn toy(name: &str, w0: usize, blocks: usize) -> Self {
        let st = |c| StageSpec { down: c, out: c, blocks };
        Self { name: name.into(), stem: w0, stages: [st(2 * w0), st(4 * w0), st(8 * w0), st(8 * w0)] }
    }

    pub fn preset(name: &str) -> Result<Self> {
        Ok(match name.to_ascii_uppercase().as_str() {
            "S" => Self::toy("S", 16, 1),
            "M" => Self::toy("M", 24, 2),
            "L" => Self::toy("L", 32, 2),
            // 3 -> 64 stem, 64 -> 128 -> 256 early stages, 512 at P3
            "L-FULL" => Self {
                name: "L-full".into(),
                stem: 64,
                stages: [
                    StageSpec { down: 128, out: 256, blocks: 3 },
                    StageSpec { down: 256, out: 512, blocks: 6 },
                    StageSpec { down: 512, out: 512, blocks: 6 },
                    StageSpec { down: 512, out: 512, blocks: 3 },
                ],
            },
            _ => {
                return Err(Error::Config(format!(
                    "unknown scale `{name}` (known: {})",
                    Self::PRESETS.join(", ")
                )))
            }
        })
    }

    /// Output channels at P3, P4 and P5.
    pub fn pyramid_channels(&self) -> [usize; 3] {
        [self.stages[1].out, self.stages[2].out, self.stages[3].out]
    }

    fn label(&self) -> &str {
        self.name.strip_suffix("-full").unwrap_or(&self.name)
    }
}

fn default_classes() -> usize {
    2
}

fn default_input() -> usize {
    64
}

/// Everything needed to build a detector deterministically.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub scale: String,
    pub teacher: String,
    pub strategy: IntegrationStrategy,
    #[serde(default = "default_classes")]
    pub num_classes: usize,
    #[serde(default = "default_input")]
    pub input_size: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub p0_mode: P0Mode,
    /// Reuse one teacher's weights at every site (each site keeps its own positions).
    #[serde(default)]
    pub share_teacher: bool,
}

impl ModelConfig {
    pub fn new(scale: &str, teacher: &str, strategy: IntegrationStrategy) -> Self {
        Self {
            scale: scale.into(),
            teacher: teacher.into(),
            strategy,
            num_classes: default_classes(),
            input_size: default_input(),
            seed: 0,
            p0_mode: P0Mode::default(),
            share_teacher: false,
        }
    }

    pub fn with_input_size(mut self, input_size: usize) -> Self {
        self.input_size = input_size;
        self
    }

    pub fn with_classes(mut self, num_classes: usize) -> Self {
        self.num_classes = num_classes;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn scale_spec(&self) -> Result<ScaleSpec> {
        ScaleSpec::preset(&self.scale)
    }

    pub fn teacher_variant(&self) -> Result<TeacherVariant> {
        TeacherVariant::preset(&self.teacher)
    }

    pub fn sites(&self) -> Vec<Site> {
        plan_injections(self.strategy)
    }

    /// `S-baseline` for the plain detector, otherwise `[scale]-[teacher]-[strategy]`.
    pub fn name(&self) -> String {
        let scale = ScaleSpec::preset(&self.scale).map(|s| s.label().to_string()).unwrap_or(self.scale.clone());
        if self.strategy == IntegrationStrategy::None {
            return format!("{scale}-baseline");
        }
        let teacher = TeacherVariant::preset(&self.teacher).map(|t| t.slug()).unwrap_or(self.teacher.clone());
        format!("{scale}-{teacher}-{}", self.strategy)
    }

    /// Checks names and size divisibility for the chosen strategy.
    pub fn validate(&self) -> Result<()> {
        self.scale_spec()?;
        let teacher = self.teacher_variant()?;
        if self.num_classes == 0 {
            return Err(Error::Config("num_classes must be positive".into()));
        }
        if self.input_size == 0 || self.input_size % 32 != 0 {
            return Err(Error::Config(format!("input size {} is not divisible by 32", self.input_size)));
        }
        if self.sites().contains(&Site::P0) && self.input_size % teacher.spec.patch_size != 0 {
            return Err(Error::Config(format!(
                "input size {} is not divisible by teacher patch size {}",
                self.input_size, teacher.spec.patch_size
            )));
        }
        Ok(())
    }
}

/// Parameter totals partitioned by the frozen flag.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParamReport {
    pub total: usize,
    pub trainable: usize,
    pub frozen: usize,
    pub trainable_fraction: f64,
}

impl ParamReport {
    pub fn from_counts(trainable: usize, frozen: usize) -> Self {
        let total = trainable + frozen;
        let trainable_fraction = if total == 0 { 0.0 } else { trainable as f64 / total as f64 };
        Self { total, trainable, frozen, trainable_fraction }
    }

    pub fn from_store<E: Element>(store: &ParamStore<E>) -> Self {
        Self::tally(store.iter().map(|(_, p)| (p.tensor.numel(), p.frozen)))
    }

    pub fn from_plan(plan: &ParamPlan) -> Self {
        Self::tally(plan.entries().iter().map(|p| (p.numel(), p.frozen)))
    }

    fn tally(items: impl Iterator<Item = (usize, bool)>) -> Self {
        let (mut trainable, mut frozen) = (0, 0);
        for (n, is_frozen) in items {
            if is_frozen {
                frozen += n;
            } else {
                trainable += n;
            }
        }
        Self::from_counts(trainable, frozen)
    }
}

impl fmt::Display for ParamReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "total {} | trainable {} | frozen {} | trainable fraction {:.2}%",
            self.total,
            self.trainable,
            self.frozen,
            100.0 * self.trainable_fraction
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_follow_the_table_convention() {
        assert_eq!(ModelConfig::new("L", "vitb16-full", IntegrationStrategy::DualP0P3).name(), "L-vitb16-dualp0p3");
        assert_eq!(ModelConfig::new("L-full", "vitl16-full", IntegrationStrategy::Triple).name(), "L-vitl16-triple");
        assert_eq!(ModelConfig::new("S", "toy-tiny", IntegrationStrategy::None).name(), "S-baseline");
    }

    #[test]
    fn toy_ladders_widen_with_scale() {
        let w: Vec<usize> = ["S", "M", "L"].iter().map(|s| ScaleSpec::preset(s).unwrap().stem).collect();
        assert_eq!(w, vec![16, 24, 32]);
        assert_eq!(ScaleSpec::preset("s").unwrap().pyramid_channels(), [64, 128, 128]);
        let full = ScaleSpec::preset("L-full").unwrap();
        assert_eq!((full.stem, full.stages[0].down, full.stages[0].out, full.stages[1].out), (64, 128, 256, 512));
        assert!(ScaleSpec::preset("X").is_err());
    }

    #[test]
    fn divisibility_is_validated() {
        let mut c = ModelConfig::new("S", "toy-tiny", IntegrationStrategy::SingleP0);
        assert!(c.validate().is_ok());
        c.input_size = 48;
        assert!(c.validate().is_err());
        assert!(ModelConfig::new("S", "vit-huge", IntegrationStrategy::None).validate().is_err());
    }

    #[test]
    fn report_fraction() {
        let r = ParamReport::from_counts(47, 173);
        assert_eq!(r.total, 220);
        assert!((100.0 * r.trainable_fraction - 21.36).abs() < 0.01);
        assert_eq!(ParamReport::from_counts(10, 0).trainable_fraction, 1.0);
    }

    #[test]
    fn config_json_round_trip() {
        let c = ModelConfig::new("M", "toy-small", IntegrationStrategy::DualP3P4).with_seed(9);
        let s = serde_json::to_string(&c).unwrap();
        assert_eq!(serde_json::from_str::<ModelConfig>(&s).unwrap(), c);
        let minimal: ModelConfig =
            serde_json::from_str(r#"{"scale":"S","teacher":"toy-tiny","strategy":"triple"}"#).unwrap();
        assert_eq!(minimal.input_size, 64);
    }
}
