//! Teacher-feature injection: the input preprocessor (P0), the mid-backbone gated
//! injectors (P3/P4), and the strategy-to-site planner.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::nn::{Conv2d, ConvSpec};
use crate::numeric::{Element, Graph, Init, ParamId, ParamSink, Var};
use crate::teacher::{Teacher, TeacherVariant};

/// Pipeline positions that can carry an injector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Site {
    P0,
    P3,
    P4,
}

impl Site {
    /// Feature stride at the site (1 for the raw input).
    pub fn stride(self) -> usize {
        match self {
            Site::P0 => 1,
            Site::P3 => 8,
            Site::P4 => 16,
        }
    }

    /// Grid side of the site for a square input.
    pub fn grid(self, input_size: usize) -> usize {
        input_size / self.stride()
    }

    /// Number of tokens the site's teacher processes for a square input.
    pub fn token_count(self, input_size: usize) -> usize {
        self.grid(input_size).pow(2)
    }

    fn prefix(self) -> &'static str {
        match self {
            Site::P0 => "p0_injector",
            Site::P3 => "p3_injector",
            Site::P4 => "p4_injector",
        }
    }
}

impl fmt::Display for Site {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Site::P0 => "P0",
            Site::P3 => "P3",
            Site::P4 => "P4",
        })
    }
}

/// Which subset of {P0, P3, P4} carries an injector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IntegrationStrategy {
    None,
    SingleP0,
    SingleP3,
    DualP3P4,
    DualP0P3,
    Triple,
}

impl IntegrationStrategy {
    pub const ALL: [IntegrationStrategy; 6] = [
        IntegrationStrategy::None,
        IntegrationStrategy::SingleP0,
        IntegrationStrategy::SingleP3,
        IntegrationStrategy::DualP3P4,
        IntegrationStrategy::DualP0P3,
        IntegrationStrategy::Triple,
    ];

    pub fn slug(self) -> &'static str {
        match self {
            IntegrationStrategy::None => "none",
            IntegrationStrategy::SingleP0 => "singlep0",
            IntegrationStrategy::SingleP3 => "singlep3",
            IntegrationStrategy::DualP3P4 => "dualp3p4",
            IntegrationStrategy::DualP0P3 => "dualp0p3",
            IntegrationStrategy::Triple => "triple",
        }
    }
}

impl fmt::Display for IntegrationStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.slug())
    }
}

impl FromStr for IntegrationStrategy {
    type Err = Error;

    /// Accepts the slugs plus the shorthand used in ablation tables
    /// (`single` = P3, `dual` = P3-P4).
    fn from_str(s: &str) -> Result<Self> {
        let norm: String = s.chars().filter(|c| c.is_ascii_alphanumeric()).collect::<String>().to_lowercase();
        Ok(match norm.as_str() {
            "none" | "baseline" => IntegrationStrategy::None,
            "singlep0" => IntegrationStrategy::SingleP0,
            "single" | "singlep3" => IntegrationStrategy::SingleP3,
            "dual" | "dualp3p4" => IntegrationStrategy::DualP3P4,
            "dualp0p3" => IntegrationStrategy::DualP0P3,
            "triple" | "triplep0p3p4" => IntegrationStrategy::Triple,
            _ => return Err(Error::Config(format!("unknown integration strategy `{s}`"))),
        })
    }
}

/// Injection sites of a strategy, in pipeline order.
pub fn plan_injections(strategy: IntegrationStrategy) -> Vec<Site> {
    use IntegrationStrategy::*;
    match strategy {
        None => vec![],
        SingleP0 => vec![Site::P0],
        SingleP3 => vec![Site::P3],
        DualP3P4 => vec![Site::P3, Site::P4],
        DualP0P3 => vec![Site::P0, Site::P3],
        Triple => vec![Site::P0, Site::P3, Site::P4],
    }
}

/// How the P0 preprocessor combines teacher features with the raw image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum P0Mode {
    /// `image + gate * projection` (identity at initialization).
    #[default]
    Residual,
    /// `projection` alone: the raw image is discarded.
    Replace,
}

/// Static description of one injector.
#[derive(Debug, Clone, PartialEq)]
pub struct InjectorConfig {
    pub site: Site,
    pub teacher: TeacherVariant,
    /// Channels of the fused stream (3 at P0).
    pub channels: usize,
    /// Grid side of the token layout at the site.
    pub grid: usize,
}

impl InjectorConfig {
    pub fn new(site: Site, teacher: TeacherVariant, channels: usize, input_size: usize) -> Result<Self> {
        if site == Site::P0 {
            let p = teacher.spec.patch_size;
            if input_size % p != 0 {
                return Err(Error::Config(format!(
                    "input size {input_size} is not divisible by teacher patch size {p}"
                )));
            }
            return Ok(Self { site, grid: input_size / p, channels: 3, teacher });
        }
        Ok(Self { site, grid: site.grid(input_size), channels, teacher })
    }

    pub fn token_count(&self) -> usize {
        self.grid * self.grid
    }
}

/// Per-channel residual gate, zero-initialized: `residual + gate * update`.
#[derive(Debug, Clone)]
pub struct GatedFusion {
    pub gate: ParamId,
}

impl GatedFusion {
    pub fn new(sink: &mut dyn ParamSink, name: &str, channels: usize) -> Result<Self> {
        Ok(Self { gate: sink.declare(name, &[channels], Init::Zeros, false)? })
    }

    pub fn fuse<E: Element>(&self, g: &mut Graph<'_, E>, residual: Var, update: Var) -> Result<Var> {
        let gate = g.param(self.gate)?;
        let scaled = g.channel_scale(update, gate)?;
        g.add(residual, scaled)
    }
}

/// P0: replaces the identity input mapping with teacher features projected to 3 channels.
#[derive(Debug, Clone)]
pub struct P0Preprocessor {
    pub config: InjectorConfig,
    pub teacher: Teacher,
    pub proj: Conv2d,
    pub gate: Option<GatedFusion>,
    pub mode: P0Mode,
}

impl P0Preprocessor {
    pub fn new(sink: &mut dyn ParamSink, config: InjectorConfig, mode: P0Mode) -> Result<Self> {
        let prefix = Site::P0.prefix();
        let spec = config.teacher.spec.with_pos_grid(config.grid);
        let teacher = Teacher::new(sink, &format!("{prefix}.teacher"), spec)?;
        Self::assemble(sink, config, teacher, mode)
    }

    fn assemble(sink: &mut dyn ParamSink, config: InjectorConfig, teacher: Teacher, mode: P0Mode) -> Result<Self> {
        let prefix = Site::P0.prefix();
        let d = teacher.spec().dim;
        let proj = Conv2d::new(sink, &format!("{prefix}.proj"), ConvSpec::pointwise(d, 3), false)?;
        let gate = match mode {
            P0Mode::Residual => Some(GatedFusion::new(sink, &format!("{prefix}.gate"), 3)?),
            P0Mode::Replace => None,
        };
        Ok(Self { config, teacher, proj, gate, mode })
    }

    /// `[N, 3, H, W] -> [N, 3, H, W]`.
    pub fn preprocess<E: Element>(&self, g: &mut Graph<'_, E>, image: Var) -> Result<Var> {
        let feats = self.teacher.forward_image(g, image)?;
        let up = g.upsample_nearest(feats, self.teacher.spec().patch_size)?;
        let projected = self.proj.forward(g, up)?;
        match &self.gate {
            Some(gate) => gate.fuse(g, image, projected),
            None => Ok(projected),
        }
    }
}

/// P3/P4: project `C -> D`, run the teacher over the token grid, project back, fuse.
#[derive(Debug, Clone)]
pub struct FeatureInjector {
    pub config: InjectorConfig,
    pub teacher: Teacher,
    pub proj_in: Conv2d,
    pub proj_out: Conv2d,
    pub gate: GatedFusion,
}

impl FeatureInjector {
    pub fn new(sink: &mut dyn ParamSink, config: InjectorConfig) -> Result<Self> {
        let prefix = config.site.prefix();
        let spec = config.teacher.spec.with_pos_grid(config.grid);
        let teacher = Teacher::new(sink, &format!("{prefix}.teacher"), spec)?;
        Self::assemble(sink, config, teacher)
    }

    /// An injector whose teacher blocks are shared with `base`; only the positional
    /// table is site-specific.
    pub fn sharing(sink: &mut dyn ParamSink, config: InjectorConfig, base: &Teacher) -> Result<Self> {
        let prefix = config.site.prefix();
        let teacher = base.share_with_grid(sink, &format!("{prefix}.teacher"), config.grid)?;
        Self::assemble(sink, config, teacher)
    }

    fn assemble(sink: &mut dyn ParamSink, config: InjectorConfig, teacher: Teacher) -> Result<Self> {
        if config.site == Site::P0 {
            return Err(Error::Config("feature injectors mount at P3 or P4".into()));
        }
        let prefix = config.site.prefix();
        let (c, d) = (config.channels, teacher.spec().dim);
        let proj_in = Conv2d::new(sink, &format!("{prefix}.proj_in"), ConvSpec::pointwise(c, d), false)?;
        let proj_out = Conv2d::new(sink, &format!("{prefix}.proj_out"), ConvSpec::pointwise(d, c), false)?;
        let gate = GatedFusion::new(sink, &format!("{prefix}.gate"), c)?;
        Ok(Self { config, teacher, proj_in, proj_out, gate })
    }

    /// The token sequence handed to the teacher: `[N, S*S, D]`.
    pub fn tokens<E: Element>(&self, g: &mut Graph<'_, E>, fmap: Var) -> Result<Var> {
        let s = g.shape(fmap);
        if s.len() != 4 || s[1] != self.config.channels {
            return Err(Error::shape(
                "inject_features",
                format!("expected [N, {}, S, S] features, got {s:?}", self.config.channels),
            ));
        }
        let projected = self.proj_in.forward(g, fmap)?;
        g.tokens_from_map(projected)
    }

    /// `[N, C, S, S] -> [N, C, S, S]`.
    pub fn inject<E: Element>(&self, g: &mut Graph<'_, E>, fmap: Var) -> Result<Var> {
        let (h, w) = (g.shape(fmap)[2], g.shape(fmap)[3]);
        let tokens = self.tokens(g, fmap)?;
        let z = self.teacher.forward_tokens(g, tokens)?;
        let grid = g.map_from_tokens(z, h, w)?;
        let update = self.proj_out.forward(g, grid)?;
        self.gate.fuse(g, fmap, update)
    }
}
