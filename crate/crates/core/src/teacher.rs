//! Frozen vision transformer that supplies semantic features to the injectors.
//!
//! Weights are seed-generated stand-ins; every structural property (shapes, frozen
//! contract, exact parameter accounting) is independent of their values.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::nn::{Conv2d, ConvSpec, LayerNorm, Linear, MultiHeadSelfAttention};
use crate::numeric::{Element, Graph, Init, ParamId, ParamSink, Var};

const INIT_STD: f64 = 0.02;

/// Architecture of a teacher transformer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TeacherSpec {
    pub depth: usize,
    pub dim: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub patch_size: usize,
    pub include_positional: bool,
    /// Side of the square positional table (tokens = grid * grid).
    pub pos_grid: usize,
    pub frozen: bool,
}

impl TeacherSpec {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "teacher: {} heads do not divide width {}",
                self.heads, self.dim
            )));
        }
        if self.patch_size == 0 || self.mlp_ratio == 0 {
            return Err(Error::Config("teacher: patch size and mlp ratio must be positive".into()));
        }
        if self.include_positional && self.pos_grid == 0 {
            return Err(Error::Config("teacher: positional grid must be positive".into()));
        }
        Ok(())
    }

    pub fn with_pos_grid(self, pos_grid: usize) -> Self {
        Self { pos_grid, ..self }
    }

    pub fn hidden(&self) -> usize {
        self.dim * self.mlp_ratio
    }

    /// Parameters of one pre-norm block: two norms, four attention projections, MLP.
    pub fn block_params(&self) -> usize {
        let d = self.dim;
        let h = self.hidden();
        2 * (2 * d) + 4 * (d * d + d) + (d * h + h) + (h * d + d)
    }

    pub fn patch_embed_params(&self) -> usize {
        3 * self.patch_size * self.patch_size * self.dim + self.dim
    }

    pub fn positional_params(&self) -> usize {
        if self.include_positional {
            self.pos_grid * self.pos_grid * self.dim
        } else {
            0
        }
    }
}

/// Closed-form parameter count of a teacher built from `spec`:
/// `3 p^2 D + D` (patch embedding) `+ g^2 D` (positional table, if any)
/// `+ depth * (12 D^2 + 13 D)` at mlp ratio 4 (general form in
/// [`TeacherSpec::block_params`]) `+ 2 D` (final norm).
pub fn count_teacher_params(spec: &TeacherSpec) -> usize {
    spec.patch_embed_params() + spec.positional_params() + spec.depth * spec.block_params() + 2 * spec.dim
}

/// A named preset teacher configuration.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TeacherVariant {
    pub name: String,
    pub spec: TeacherSpec,
}

impl TeacherVariant {
    pub const PRESETS: [&'static str; 4] = ["vitb16-full", "vitl16-full", "toy-tiny", "toy-small"];

    pub fn preset(name: &str) -> Result<Self> {
        let base = |depth, dim, heads, patch_size, pos_grid| TeacherSpec {
            depth,
            dim,
            heads,
            mlp_ratio: 4,
            patch_size,
            include_positional: true,
            pos_grid,
            frozen: true,
        };
        let spec = match name {
            // positional tables sized for the 224-pixel pretraining grid
            "vitb16-full" => base(12, 768, 12, 16, 14),
            "vitl16-full" => base(24, 1024, 16, 16, 14),
            "toy-tiny" => base(2, 32, 4, 8, 8),
            "toy-small" => base(3, 64, 4, 8, 8),
            other => {
                return Err(Error::Config(format!(
                    "unknown teacher variant `{other}` (known: {})",
                    Self::PRESETS.join(", ")
                )))
            }
        };
        Ok(Self { name: name.to_string(), spec })
    }

    /// Short slug used in model names (`vitb16-full` -> `vitb16`).
    pub fn slug(&self) -> String {
        self.name.strip_suffix("-full").unwrap_or(&self.name).replace('-', "")
    }
}

#[derive(Debug, Clone)]
struct Block {
    norm1: LayerNorm,
    attn: MultiHeadSelfAttention,
    norm2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

impl Block {
    fn forward<E: Element>(&self, g: &mut Graph<'_, E>, x: Var) -> Result<Var> {
        let h = self.norm1.forward(g, x)?;
        let h = self.attn.forward(g, h)?;
        let x = g.add(x, h)?;
        let h = self.norm2.forward(g, x)?;
        let h = self.fc1.forward(g, h)?;
        let h = g.gelu(h);
        let h = self.fc2.forward(g, h)?;
        g.add(x, h)
    }
}

/// A built teacher: parameter ids plus its spec.
#[derive(Debug, Clone)]
pub struct Teacher {
    spec: TeacherSpec,
    prefix: String,
    patch: Conv2d,
    pos: Option<ParamId>,
    blocks: Vec<Block>,
    norm: LayerNorm,
}

impl Teacher {
    /// Declares every teacher parameter under `prefix` (frozen per `spec.frozen`).
    pub fn new(sink: &mut dyn ParamSink, prefix: &str, spec: TeacherSpec) -> Result<Self> {
        spec.validate()?;
        let frozen = spec.frozen;
        let d = spec.dim;
        let p = spec.patch_size;
        let patch = Conv2d::new(
            sink,
            &format!("{prefix}.patch_embed"),
            ConvSpec::new(3, d, p, p, 0).with_std(INIT_STD),
            frozen,
        )?;
        let pos = Self::declare_positional(sink, prefix, &spec)?;
        let blocks = (0..spec.depth)
            .map(|i| {
                let name = format!("{prefix}.blocks.{i}");
                Ok(Block {
                    norm1: LayerNorm::new(sink, &format!("{name}.norm1"), d, frozen)?,
                    attn: MultiHeadSelfAttention::new(sink, &format!("{name}.attn"), d, spec.heads, INIT_STD, frozen)?,
                    norm2: LayerNorm::new(sink, &format!("{name}.norm2"), d, frozen)?,
                    fc1: Linear::new(sink, &format!("{name}.mlp.fc1"), d, spec.hidden(), INIT_STD, frozen)?,
                    fc2: Linear::new(sink, &format!("{name}.mlp.fc2"), spec.hidden(), d, INIT_STD, frozen)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let norm = LayerNorm::new(sink, &format!("{prefix}.norm"), d, frozen)?;
        Ok(Self { spec, prefix: prefix.to_string(), patch, pos, blocks, norm })
    }

    fn declare_positional(sink: &mut dyn ParamSink, prefix: &str, spec: &TeacherSpec) -> Result<Option<ParamId>> {
        if !spec.include_positional {
            return Ok(None);
        }
        let t = spec.pos_grid * spec.pos_grid;
        sink.declare(&format!("{prefix}.pos_embed"), &[t, spec.dim], Init::Normal { std: INIT_STD }, spec.frozen)
            .map(Some)
    }

    /// A view sharing this teacher's weights but with its own positional table for a
    /// `grid x grid` token layout, declared under `prefix`.
    pub fn share_with_grid(&self, sink: &mut dyn ParamSink, prefix: &str, grid: usize) -> Result<Self> {
        let spec = self.spec.with_pos_grid(grid);
        let pos = Self::declare_positional(sink, prefix, &spec)?;
        Ok(Self { spec, prefix: prefix.to_string(), pos, ..self.clone() })
    }

    pub fn spec(&self) -> &TeacherSpec {
        &self.spec
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    fn check_image(&self, g: &Graph<'_, impl Element>, image: Var) -> Result<(usize, usize)> {
        let s = g.shape(image);
        let p = self.spec.patch_size;
        if s.len() != 4 || s[1] != 3 {
            return Err(Error::shape("teacher", format!("expected [N, 3, H, W] image, got {s:?}")));
        }
        if s[2] % p != 0 || s[3] % p != 0 {
            return Err(Error::Config(format!(
                "image {}x{} is not divisible by patch size {p}",
                s[2], s[3]
            )));
        }
        Ok((s[2] / p, s[3] / p))
    }

    fn add_positional<E: Element>(&self, g: &mut Graph<'_, E>, tokens: Var) -> Result<Var> {
        match self.pos {
            None => Ok(tokens),
            Some(pos) => {
                let t = g.shape(tokens)[1];
                let want = self.spec.pos_grid * self.spec.pos_grid;
                if t != want {
                    return Err(Error::Config(format!(
                        "teacher `{}` has a positional table for {want} tokens, got {t}",
                        self.prefix
                    )));
                }
                let pv = g.param(pos)?;
                g.add_suffix(tokens, pv)
            }
        }
    }

    fn project_patches<E: Element>(&self, g: &mut Graph<'_, E>, image: Var) -> Result<Var> {
        self.check_image(g, image)?;
        let grid = self.patch.forward(g, image)?;
        g.tokens_from_map(grid)
    }

    /// Non-overlapping patches projected to width `D`, plus positions when enabled:
    /// `[N, 3, H, W] -> [N, (H/p)(W/p), D]`.
    pub fn patch_embed<E: Element>(&self, g: &mut Graph<'_, E>, image: Var) -> Result<Var> {
        let tokens = self.project_patches(g, image)?;
        self.add_positional(g, tokens)
    }

    fn run_blocks<E: Element>(&self, g: &mut Graph<'_, E>, mut x: Var) -> Result<Var> {
        for block in &self.blocks {
            x = block.forward(g, x)?;
        }
        self.norm.forward(g, x)
    }

    /// Image path: `[N, 3, H, W] -> [N, D, H/p, W/p]`.
    pub fn forward_image<E: Element>(&self, g: &mut Graph<'_, E>, image: Var) -> Result<Var> {
        let (gh, gw) = self.check_image(g, image)?;
        let tokens = self.project_patches(g, image)?;
        let z = self.forward_tokens(g, tokens)?;
        g.map_from_tokens(z, gh, gw)
    }

    /// Token path: positions (when enabled), blocks and final norm on `[N, T, D]`.
    pub fn forward_tokens<E: Element>(&self, g: &mut Graph<'_, E>, tokens: Var) -> Result<Var> {
        let s = g.shape(tokens);
        if s.len() != 3 || s[2] != self.spec.dim {
            return Err(Error::shape(
                "teacher_forward_tokens",
                format!("expected [N, T, {}] tokens, got {s:?}", self.spec.dim),
            ));
        }
        let x = self.add_positional(g, tokens)?;
        self.run_blocks(g, x)
    }
}
