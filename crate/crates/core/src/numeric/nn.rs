//! Parameterized layers. Each layer only holds parameter ids; values live in the store
//! the graph is bound to, so one layer description serves any element type.

use crate::error::Result;

use super::param::{Init, ParamId, ParamSink};
use super::{Element, Graph, Var};

/// He-style normal std for a layer with `fan_in` inputs feeding a SiLU.
pub fn fan_in_std(fan_in: usize, gain: f64) -> f64 {
    gain / (fan_in as f64).sqrt()
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub padding: usize,
}

/// Construction arguments for [`Conv2d`].
#[derive(Debug, Clone, Copy)]
pub struct ConvSpec {
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub bias: bool,
    pub std: f64,
}

impl ConvSpec {
    pub fn new(cin: usize, cout: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        let std = fan_in_std(cin * kernel * kernel, 1.0);
        Self { cin, cout, kernel, stride, padding, bias: true, std }
    }

    pub fn pointwise(cin: usize, cout: usize) -> Self {
        Self::new(cin, cout, 1, 1, 0)
    }

    pub fn with_std(self, std: f64) -> Self {
        Self { std, ..self }
    }
}

impl Conv2d {
    pub fn new(sink: &mut dyn ParamSink, name: &str, spec: ConvSpec, frozen: bool) -> Result<Self> {
        let weight = sink.declare(
            &format!("{name}.weight"),
            &[spec.cout, spec.cin, spec.kernel, spec.kernel],
            if spec.std > 0.0 { Init::Normal { std: spec.std } } else { Init::Zeros },
            frozen,
        )?;
        let bias = if spec.bias {
            Some(sink.declare(&format!("{name}.bias"), &[spec.cout], Init::Zeros, frozen)?)
        } else {
            None
        };
        Ok(Self { weight, bias, stride: spec.stride, padding: spec.padding })
    }

    pub fn forward<E: Element>(&self, g: &mut Graph<'_, E>, x: Var) -> Result<Var> {
        let w = g.param(self.weight)?;
        let b = self.bias.map(|b| g.param(b)).transpose()?;
        g.conv2d(x, w, b, self.stride, self.padding)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new(
        sink: &mut dyn ParamSink,
        name: &str,
        din: usize,
        dout: usize,
        std: f64,
        frozen: bool,
    ) -> Result<Self> {
        let weight = sink.declare(&format!("{name}.weight"), &[dout, din], Init::Normal { std }, frozen)?;
        let bias = Some(sink.declare(&format!("{name}.bias"), &[dout], Init::Zeros, frozen)?);
        Ok(Self { weight, bias })
    }

    pub fn forward<E: Element>(&self, g: &mut Graph<'_, E>, x: Var) -> Result<Var> {
        let w = g.param(self.weight)?;
        let b = self.bias.map(|b| g.param(b)).transpose()?;
        g.linear(x, w, b)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub offset: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(sink: &mut dyn ParamSink, name: &str, dim: usize, frozen: bool) -> Result<Self> {
        let gain = sink.declare(&format!("{name}.gain"), &[dim], Init::Ones, frozen)?;
        let offset = sink.declare(&format!("{name}.offset"), &[dim], Init::Zeros, frozen)?;
        Ok(Self { gain, offset, eps: 1e-6 })
    }

    pub fn forward<E: Element>(&self, g: &mut Graph<'_, E>, x: Var) -> Result<Var> {
        let gain = g.param(self.gain)?;
        let offset = g.param(self.offset)?;
        g.layer_norm(x, gain, offset, E::from_f64_lossy(self.eps))
    }
}

/// Multi-head self-attention with separate q/k/v/output projections.
#[derive(Debug, Clone)]
pub struct MultiHeadSelfAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl MultiHeadSelfAttention {
    pub fn new(sink: &mut dyn ParamSink, name: &str, dim: usize, heads: usize, std: f64, frozen: bool) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(crate::Error::Config(format!("{heads} heads do not divide width {dim}")));
        }
        Ok(Self {
            q: Linear::new(sink, &format!("{name}.q"), dim, dim, std, frozen)?,
            k: Linear::new(sink, &format!("{name}.k"), dim, dim, std, frozen)?,
            v: Linear::new(sink, &format!("{name}.v"), dim, dim, std, frozen)?,
            out: Linear::new(sink, &format!("{name}.out"), dim, dim, std, frozen)?,
            heads,
        })
    }

    pub fn forward<E: Element>(&self, g: &mut Graph<'_, E>, tokens: Var) -> Result<Var> {
        let q = self.q.forward(g, tokens)?;
        let k = self.k.forward(g, tokens)?;
        let v = self.v.forward(g, tokens)?;
        let a = g.attention(q, k, v, self.heads)?;
        self.out.forward(g, a)
    }
}

/// Functional form of multi-head self-attention over explicit weight variables.
#[allow(clippy::too_many_arguments)]
pub fn multi_head_self_attention<E: Element>(
    g: &mut Graph<'_, E>,
    tokens: Var,
    wq: (Var, Option<Var>),
    wk: (Var, Option<Var>),
    wv: (Var, Option<Var>),
    wo: (Var, Option<Var>),
    heads: usize,
) -> Result<Var> {
    let q = g.linear(tokens, wq.0, wq.1)?;
    let k = g.linear(tokens, wk.0, wk.1)?;
    let v = g.linear(tokens, wv.0, wv.1)?;
    let a = g.attention(q, k, v, heads)?;
    g.linear(a, wo.0, wo.1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::{ParamStore, Tensor};

    #[test]
    fn single_token_attention_is_output_projection_of_value() {
        let mut store = ParamStore::<f64>::new(3);
        let attn = MultiHeadSelfAttention::new(&mut store, "attn", 4, 2, 0.5, false).unwrap();
        let x = Tensor::from_fn([1, 1, 4], |i| 0.1 * i as f64 - 0.2);
        let mut g = Graph::with_store(&store);
        let xv = g.input(x);
        let y = attn.forward(&mut g, xv).unwrap();
        let v = attn.v.forward(&mut g, xv).unwrap();
        let want = attn.out.forward(&mut g, v).unwrap();
        assert_eq!(g.value(y), g.value(want));
    }

    #[test]
    fn attention_is_permutation_equivariant() {
        let mut store = ParamStore::<f64>::new(5);
        let attn = MultiHeadSelfAttention::new(&mut store, "attn", 8, 2, 0.4, false).unwrap();
        let x = Tensor::from_fn([1, 3, 8], |i| ((i * 7) % 11) as f64 * 0.1 - 0.5);
        let perm = [2usize, 0, 1];
        let mut px = vec![0.0; 24];
        for (dst, &src) in perm.iter().enumerate() {
            px[dst * 8..dst * 8 + 8].copy_from_slice(&x.data()[src * 8..src * 8 + 8]);
        }
        let mut g = Graph::with_store(&store);
        let xv = g.input(x);
        let y = attn.forward(&mut g, xv).unwrap();
        let pv = g.input(Tensor::new([1, 3, 8], px).unwrap());
        let py = attn.forward(&mut g, pv).unwrap();
        let (yd, pyd) = (g.value(y), g.value(py));
        for (dst, &src) in perm.iter().enumerate() {
            for j in 0..8 {
                assert!((pyd[dst * 8 + j] - yd[src * 8 + j]).abs() < 1e-12);
            }
        }
    }
}
