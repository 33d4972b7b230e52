//! Backbone, PAN neck and anchor-free heads with injector mounting points.

use crate::error::{Error, Result};
use crate::injection::{FeatureInjector, InjectorConfig, P0Preprocessor, Site};
use crate::numeric::nn::{fan_in_std, Conv2d, ConvSpec};
use crate::numeric::{Element, Graph, ParamId, ParamSink, Var};
use crate::teacher::Teacher;

use super::config::{ModelConfig, ScaleSpec};

/// Feature strides of the three prediction levels.
pub const LEVEL_STRIDES: [usize; 3] = [8, 16, 32];

/// Objectness bias at initialization: sigmoid(-4.6) is about 0.01.
pub const OBJECTNESS_PRIOR_BIAS: f32 = -4.6;

/// Init gain that keeps the second moment of a SiLU layer's output near its input's
/// (E[silu(z)^2] is about 0.355 for standard normal z).
pub const SILU_GAIN: f64 = 2.0;

/// Conv followed by SiLU.
#[derive(Debug, Clone)]
pub(crate) struct ConvAct {
    conv: Conv2d,
}

impl ConvAct {
    fn new(sink: &mut dyn ParamSink, name: &str, spec: ConvSpec) -> Result<Self> {
        let spec = spec.with_std(fan_in_std(spec.cin * spec.kernel * spec.kernel, SILU_GAIN));
        Ok(Self { conv: Conv2d::new(sink, name, spec, false)? })
    }

    fn k3(sink: &mut dyn ParamSink, name: &str, cin: usize, cout: usize) -> Result<Self> {
        Self::new(sink, name, ConvSpec::new(cin, cout, 3, 1, 1))
    }

    /// 4x4 / stride 2 / pad 1: exact halving for every even extent.
    fn down(sink: &mut dyn ParamSink, name: &str, cin: usize, cout: usize) -> Result<Self> {
        Self::new(sink, name, ConvSpec::new(cin, cout, 4, 2, 1))
    }

    fn forward<E: Element>(&self, g: &mut Graph<'_, E>, x: Var) -> Result<Var> {
        let y = self.conv.forward(g, x)?;
        Ok(g.silu(y))
    }
}

/// `x + silu(conv3x3(x))`, with a damped initialization so deep ladders start stable.
#[derive(Debug, Clone)]
struct ResidualBlock {
    conv: Conv2d,
}

impl ResidualBlock {
    fn new(sink: &mut dyn ParamSink, name: &str, c: usize) -> Result<Self> {
        let spec = ConvSpec::new(c, c, 3, 1, 1).with_std(fan_in_std(9 * c, 0.5));
        Ok(Self { conv: Conv2d::new(sink, name, spec, false)? })
    }

    fn forward<E: Element>(&self, g: &mut Graph<'_, E>, x: Var) -> Result<Var> {
        let y = self.conv.forward(g, x)?;
        let y = g.silu(y);
        g.add(x, y)
    }
}

#[derive(Debug, Clone)]
struct Stage {
    down: ConvAct,
    transition: Option<ConvAct>,
    blocks: Vec<ResidualBlock>,
}

impl Stage {
    fn forward<E: Element>(&self, g: &mut Graph<'_, E>, x: Var) -> Result<Var> {
        let mut x = self.down.forward(g, x)?;
        if let Some(t) = &self.transition {
            x = t.forward(g, x)?;
        }
        for b in &self.blocks {
            x = b.forward(g, x)?;
        }
        Ok(x)
    }
}

#[derive(Debug, Clone)]
struct Neck {
    td4: ConvAct,
    td3: ConvAct,
    bu4_down: ConvAct,
    bu4: ConvAct,
    bu5_down: ConvAct,
    bu5: ConvAct,
}

impl Neck {
    fn new(sink: &mut dyn ParamSink, [c3, c4, c5]: [usize; 3]) -> Result<Self> {
        Ok(Self {
            td4: ConvAct::k3(sink, "neck.td4", c5 + c4, c4)?,
            td3: ConvAct::k3(sink, "neck.td3", c4 + c3, c3)?,
            bu4_down: ConvAct::down(sink, "neck.bu4_down", c3, c3)?,
            bu4: ConvAct::k3(sink, "neck.bu4", c3 + c4, c4)?,
            bu5_down: ConvAct::down(sink, "neck.bu5_down", c4, c4)?,
            bu5: ConvAct::k3(sink, "neck.bu5", c4 + c5, c5)?,
        })
    }

    /// Top-down pass from P5 to P3, then bottom-up back to P5.
    fn forward<E: Element>(&self, g: &mut Graph<'_, E>, [p3, p4, p5]: [Var; 3]) -> Result<[Var; 3]> {
        let up = g.upsample_nearest(p5, 2)?;
        let cat = g.concat(&[up, p4], 1)?;
        let t4 = self.td4.forward(g, cat)?;
        let up = g.upsample_nearest(t4, 2)?;
        let cat = g.concat(&[up, p3], 1)?;
        let o3 = self.td3.forward(g, cat)?;
        let d = self.bu4_down.forward(g, o3)?;
        let cat = g.concat(&[d, t4], 1)?;
        let o4 = self.bu4.forward(g, cat)?;
        let d = self.bu5_down.forward(g, o4)?;
        let cat = g.concat(&[d, p5], 1)?;
        let o5 = self.bu5.forward(g, cat)?;
        Ok([o3, o4, o5])
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Head {
    stem: ConvAct,
    pub(crate) pred: Conv2d,
}

impl Head {
    fn new(sink: &mut dyn ParamSink, name: &str, c: usize, outputs: usize) -> Result<Self> {
        Ok(Self {
            stem: ConvAct::k3(sink, &format!("{name}.stem"), c, c)?,
            pred: Conv2d::new(sink, &format!("{name}.pred"), ConvSpec::pointwise(c, outputs).with_std(0.01), false)?,
        })
    }

    fn forward<E: Element>(&self, g: &mut Graph<'_, E>, x: Var) -> Result<Var> {
        let h = self.stem.forward(g, x)?;
        self.pred.forward(g, h)
    }
}

/// Intermediate activations exposed for feature-map export.
#[derive(Debug, Clone, Copy)]
pub struct Taps {
    pub p0_out: Var,
    pub p3_pre: Var,
    pub p3_post: Var,
    pub p4: Var,
    pub p5: Var,
}

/// Raw head outputs (`[N, 5+K, S, S]` per level) plus taps.
#[derive(Debug, Clone, Copy)]
pub struct ForwardOutput {
    pub levels: [Var; 3],
    pub taps: Taps,
}

/// Layer structure of a detector; parameter values live in a store.
#[derive(Debug, Clone)]
pub struct Network {
    config: ModelConfig,
    p0: Option<P0Preprocessor>,
    stem: ConvAct,
    stages: Vec<Stage>,
    p3: Option<FeatureInjector>,
    p4: Option<FeatureInjector>,
    neck: Neck,
    pub(crate) heads: Vec<Head>,
}

impl Network {
    pub fn new(sink: &mut dyn ParamSink, config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let scale: ScaleSpec = config.scale_spec()?;
        let variant = config.teacher_variant()?;
        let sites = config.sites();
        let pyramid = scale.pyramid_channels();

        let mut shared: Option<Teacher> = None;
        let p0 = if sites.contains(&Site::P0) {
            let cfg = InjectorConfig::new(Site::P0, variant.clone(), 3, config.input_size)?;
            let p0 = P0Preprocessor::new(sink, cfg, config.p0_mode)?;
            shared = Some(p0.teacher.clone());
            Some(p0)
        } else {
            None
        };

        let stem = ConvAct::down(sink, "backbone.stem", 3, scale.stem)?;
        let mut cin = scale.stem;
        let mut stages = Vec::with_capacity(4);
        for (i, st) in scale.stages.iter().enumerate() {
            let name = format!("backbone.stage{i}");
            let down = ConvAct::down(sink, &format!("{name}.down"), cin, st.down)?;
            let transition = if st.out != st.down {
                Some(ConvAct::new(sink, &format!("{name}.transition"), ConvSpec::pointwise(st.down, st.out))?)
            } else {
                None
            };
            let blocks = (0..st.blocks)
                .map(|j| ResidualBlock::new(sink, &format!("{name}.block{j}"), st.out))
                .collect::<Result<Vec<_>>>()?;
            stages.push(Stage { down, transition, blocks });
            cin = st.out;
        }

        let mut injector = |sink: &mut dyn ParamSink, site: Site, channels: usize| -> Result<Option<FeatureInjector>> {
            if !sites.contains(&site) {
                return Ok(None);
            }
            let cfg = InjectorConfig::new(site, variant.clone(), channels, config.input_size)?;
            let inj = match (&shared, config.share_teacher) {
                (Some(base), true) => FeatureInjector::sharing(sink, cfg, base)?,
                _ => FeatureInjector::new(sink, cfg)?,
            };
            if shared.is_none() {
                shared = Some(inj.teacher.clone());
            }
            Ok(Some(inj))
        };
        let p3 = injector(sink, Site::P3, pyramid[0])?;
        let p4 = injector(sink, Site::P4, pyramid[1])?;

        let neck = Neck::new(sink, pyramid)?;
        let outputs = 5 + config.num_classes;
        let heads = ["p3", "p4", "p5"]
            .iter()
            .zip(pyramid)
            .map(|(lvl, c)| Head::new(sink, &format!("head.{lvl}"), c, outputs))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { config: config.clone(), p0, stem, stages, p3, p4, neck, heads })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn p0(&self) -> Option<&P0Preprocessor> {
        self.p0.as_ref()
    }

    pub fn injector(&self, site: Site) -> Option<&FeatureInjector> {
        match site {
            Site::P0 => None,
            Site::P3 => self.p3.as_ref(),
            Site::P4 => self.p4.as_ref(),
        }
    }

    /// Every fusion gate in the model.
    pub fn gates(&self) -> Vec<ParamId> {
        let mut out = Vec::new();
        if let Some(g) = self.p0.as_ref().and_then(|p| p.gate.as_ref()) {
            out.push(g.gate);
        }
        out.extend(self.p3.iter().chain(self.p4.iter()).map(|i| i.gate.gate));
        out
    }

    /// Prediction biases of the heads (objectness channel gets the prior).
    pub(crate) fn head_biases(&self) -> Vec<ParamId> {
        self.heads.iter().filter_map(|h| h.pred.bias).collect()
    }

    pub fn forward<E: Element>(&self, g: &mut Graph<'_, E>, images: Var) -> Result<ForwardOutput> {
        let s = g.shape(images);
        let n = self.config.input_size;
        if s.len() != 4 || s[1] != 3 || s[2] != n || s[3] != n {
            return Err(Error::shape("detector_forward", format!("expected [N, 3, {n}, {n}] images, got {s:?}")));
        }
        let x0 = match &self.p0 {
            Some(p0) => p0.preprocess(g, images)?,
            None => images,
        };
        let mut x = self.stem.forward(g, x0)?;
        x = self.stages[0].forward(g, x)?;
        let p3_pre = self.stages[1].forward(g, x)?;
        let p3 = match &self.p3 {
            Some(inj) => inj.inject(g, p3_pre)?,
            None => p3_pre,
        };
        let p4 = self.stages[2].forward(g, p3)?;
        let p4 = match &self.p4 {
            Some(inj) => inj.inject(g, p4)?,
            None => p4,
        };
        let p5 = self.stages[3].forward(g, p4)?;
        let feats = self.neck.forward(g, [p3, p4, p5])?;
        let mut levels = [feats[0]; 3];
        for (i, (head, f)) in self.heads.iter().zip(feats).enumerate() {
            levels[i] = head.forward(g, f)?;
        }
        Ok(ForwardOutput { levels, taps: Taps { p0_out: x0, p3_pre, p3_post: p3, p4, p5 } })
    }
}
