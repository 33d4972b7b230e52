//! Data movement: reshape, concatenation, nearest upsampling and the token view.

use crate::error::{Error, Result};
use crate::numeric::graph::{Graph, Op, Var};
use crate::numeric::tensor::numel;
use crate::numeric::Element;

impl<'s, E: Element> Graph<'s, E> {
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != numel(self.shape(x)) || shape.iter().any(|&d| d == 0) {
            return Err(Error::shape("reshape", format!("cannot view {:?} as {shape:?}", self.shape(x))));
        }
        let data = self.value(x).to_vec();
        let rg = self.rg(x.0);
        Ok(self.push(shape.to_vec(), data, Op::Reshape(x.0), rg))
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs.first().ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape("concat", format!("axis {axis} out of range for {base:?}")));
        }
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", format!("{s:?} incompatible with {base:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in xs {
                let chunk = self.shape(v)[axis] * inner;
                data.extend_from_slice(&self.value(v)[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rg = xs.iter().any(|v| self.rg(v.0));
        let inputs = xs.iter().map(|v| v.0).collect();
        Ok(self.push(shape, data, Op::Concat { inputs, axis }, rg))
    }

    /// Nearest-neighbour upsampling of `[N, C, H, W]` by an integer factor.
    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::shape("upsample_nearest", format!("expected NCHW, got {s:?}")));
        }
        if factor == 0 {
            return Err(Error::Config("upsample factor must be at least 1".into()));
        }
        let (nc, h, w) = (s[0] * s[1], s[2], s[3]);
        let (oh, ow) = (h * factor, w * factor);
        let src = self.value(x);
        let mut data = Vec::with_capacity(nc * oh * ow);
        for p in 0..nc {
            for y in 0..oh {
                let row = &src[p * h * w + (y / factor) * w..][..w];
                for xx in 0..ow {
                    data.push(row[xx / factor]);
                }
            }
        }
        let rg = self.rg(x.0);
        Ok(self.push(vec![s[0], s[1], oh, ow], data, Op::Upsample { input: x.0, factor }, rg))
    }

    /// `[N, C, H, W] -> [N, H*W, C]`, positions in row-major order.
    pub fn tokens_from_map(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::shape("tokens_from_map", format!("expected NCHW, got {s:?}")));
        }
        let (n, c, t) = (s[0], s[1], s[2] * s[3]);
        let src = self.value(x);
        let mut data = vec![E::zero(); src.len()];
        for b in 0..n {
            for ch in 0..c {
                for p in 0..t {
                    data[b * t * c + p * c + ch] = src[b * c * t + ch * t + p];
                }
            }
        }
        let rg = self.rg(x.0);
        Ok(self.push(vec![n, t, c], data, Op::TokensFromMap(x.0), rg))
    }

    /// `[N, H*W, C] -> [N, C, H, W]`, the inverse of [`Graph::tokens_from_map`].
    pub fn map_from_tokens(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || s[1] != h * w {
            return Err(Error::shape("map_from_tokens", format!("{s:?} cannot form a {h}x{w} grid")));
        }
        let (n, t, c) = (s[0], s[1], s[2]);
        let src = self.value(x);
        let mut data = vec![E::zero(); src.len()];
        for b in 0..n {
            for p in 0..t {
                for ch in 0..c {
                    data[b * c * t + ch * t + p] = src[b * t * c + p * c + ch];
                }
            }
        }
        let rg = self.rg(x.0);
        Ok(self.push(vec![n, c, h, w], data, Op::MapFromTokens(x.0), rg))
    }
}

pub(crate) fn upsample_backward<E: Element>(
    g: &Graph<'_, E>,
    input: usize,
    factor: usize,
    dy: &[E],
) -> Vec<(usize, Vec<E>)> {
    let s = &g.nodes[input].shape;
    let (nc, h, w) = (s[0] * s[1], s[2], s[3]);
    let ow = w * factor;
    let mut dx = vec![E::zero(); nc * h * w];
    for p in 0..nc {
        for y in 0..h * factor {
            for x in 0..ow {
                let i = p * h * w + (y / factor) * w + x / factor;
                dx[i] = dx[i] + dy[p * h * factor * ow + y * ow + x];
            }
        }
    }
    vec![(input, dx)]
}

pub(crate) fn concat_backward<E: Element>(
    g: &Graph<'_, E>,
    inputs: &[usize],
    axis: usize,
    dy: &[E],
) -> Vec<(usize, Vec<E>)> {
    let base = &g.nodes[inputs[0]].shape;
    let outer: usize = base[..axis].iter().product();
    let inner: usize = base[axis + 1..].iter().product();
    let total: usize = inputs.iter().map(|&i| g.nodes[i].shape[axis]).sum::<usize>() * inner;
    let mut out = Vec::with_capacity(inputs.len());
    let mut offset = 0;
    for &i in inputs {
        let chunk = g.nodes[i].shape[axis] * inner;
        if g.rg(i) {
            let mut dx = Vec::with_capacity(outer * chunk);
            for o in 0..outer {
                dx.extend_from_slice(&dy[o * total + offset..][..chunk]);
            }
            out.push((i, dx));
        }
        offset += chunk;
    }
    out
}

pub(crate) fn tokens_from_map_backward<E: Element>(g: &Graph<'_, E>, x: usize, dy: &[E]) -> Vec<(usize, Vec<E>)> {
    let s = &g.nodes[x].shape;
    let (n, c, t) = (s[0], s[1], s[2] * s[3]);
    let mut dx = vec![E::zero(); dy.len()];
    for b in 0..n {
        for ch in 0..c {
            for p in 0..t {
                dx[b * c * t + ch * t + p] = dy[b * t * c + p * c + ch];
            }
        }
    }
    vec![(x, dx)]
}

pub(crate) fn map_from_tokens_backward<E: Element>(
    g: &Graph<'_, E>,
    out: usize,
    x: usize,
    dy: &[E],
) -> Vec<(usize, Vec<E>)> {
    let s = &g.nodes[out].shape;
    let (n, c, t) = (s[0], s[1], s[2] * s[3]);
    let mut dx = vec![E::zero(); dy.len()];
    for b in 0..n {
        for p in 0..t {
            for ch in 0..c {
                dx[b * t * c + p * c + ch] = dy[b * c * t + ch * t + p];
            }
        }
    }
    vec![(x, dx)]
}
