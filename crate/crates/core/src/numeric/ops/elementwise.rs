//! Elementwise maps, activations, reductions and broadcasts.

use crate::error::{Error, Result};
use crate::numeric::graph::{Graph, Op, Var};
use crate::numeric::tensor::numel;
use crate::numeric::Element;

pub(crate) fn sigmoid_scalar<E: Element>(x: E) -> E {
    if x >= E::zero() {
        E::one() / (E::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (E::one() + e)
    }
}

fn gelu_parts<E: Element>(x: E) -> (E, E) {
    // tanh approximation: 0.5 x (1 + tanh(c (x + a x^3)))
    let c = E::from_f64_lossy((2.0 / std::f64::consts::PI).sqrt());
    let a = E::from_f64_lossy(0.044_715);
    let half = E::from_f64_lossy(0.5);
    let three = E::from_f64_lossy(3.0);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let y = half * x * (E::one() + t);
    let du = c * (E::one() + three * a * x * x);
    let dy = half * (E::one() + t) + half * x * (E::one() - t * t) * du;
    (y, dy)
}

/// Splits `shape` around `axis` into (outer, extent, inner) strides.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<'s, E: Element> Graph<'s, E> {
    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    fn unary(&mut self, x: Var, f: impl Fn(E) -> E, op: Op<E>) -> Var {
        let data = self.value(x).iter().map(|&v| f(v)).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x.0);
        self.push(shape, data, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x + y).collect();
        let rg = self.rg(a.0) || self.rg(b.0);
        Ok(self.push(self.shape(a).to_vec(), data, Op::Add(a.0, b.0), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let data = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x - y).collect();
        let rg = self.rg(a.0) || self.rg(b.0);
        Ok(self.push(self.shape(a).to_vec(), data, Op::Sub(a.0, b.0), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x * y).collect();
        let rg = self.rg(a.0) || self.rg(b.0);
        Ok(self.push(self.shape(a).to_vec(), data, Op::Mul(a.0, b.0), rg))
    }

    /// `input + suffix`, where `suffix`'s shape is a trailing suffix of `input`'s shape.
    pub fn add_suffix(&mut self, input: Var, suffix: Var) -> Result<Var> {
        let (xs, ss) = (self.shape(input), self.shape(suffix));
        if ss.len() > xs.len() || xs[xs.len() - ss.len()..] != *ss {
            return Err(Error::shape("add_suffix", format!("{ss:?} is not a suffix of {xs:?}")));
        }
        let s = self.value(suffix);
        let m = s.len();
        let data = self.value(input).iter().enumerate().map(|(i, &v)| v + s[i % m]).collect();
        let rg = self.rg(input.0) || self.rg(suffix.0);
        Ok(self.push(xs.to_vec(), data, Op::AddSuffix { input: input.0, suffix: suffix.0 }, rg))
    }

    /// Multiplies channel `c` of `input[N, C, ...]` by `scale[c]`.
    pub fn channel_scale(&mut self, input: Var, scale: Var) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        if xs.len() < 2 || self.shape(scale) != [xs[1]] {
            return Err(Error::shape(
                "channel_scale",
                format!("scale {:?} does not match channels of {xs:?}", self.shape(scale)),
            ));
        }
        let inner: usize = xs[2..].iter().product();
        let c = xs[1];
        let s = self.value(scale);
        let data = self
            .value(input)
            .iter()
            .enumerate()
            .map(|(i, &v)| v * s[(i / inner) % c])
            .collect();
        let rg = self.rg(input.0) || self.rg(scale.0);
        Ok(self.push(xs, data, Op::ChannelScale { input: input.0, scale: scale.0 }, rg))
    }

    pub fn scale(&mut self, input: Var, factor: E) -> Var {
        self.unary(input, |v| v * factor, Op::Scale { input: input.0, factor })
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let s = self.value(input).iter().copied().sum();
        let rg = self.rg(input.0);
        self.push(vec![1], vec![s], Op::Sum(input.0), rg)
    }

    pub fn mean(&mut self, input: Var) -> Var {
        let n = E::from_usize(numel(self.shape(input))).expect("count");
        let s = self.sum(input);
        self.scale(s, E::one() / n)
    }

    /// `sum(input * weights)` with constant weights.
    pub fn weighted_sum(&mut self, input: Var, weights: Vec<E>) -> Result<Var> {
        if weights.len() != numel(self.shape(input)) {
            return Err(Error::shape("weighted_sum", "weight count differs from element count"));
        }
        let s = self.value(input).iter().zip(&weights).map(|(&a, &w)| a * w).sum();
        let rg = self.rg(input.0);
        Ok(self.push(vec![1], vec![s], Op::WeightedSum { input: input.0, weights }, rg))
    }

    /// A scalar computed outside the tape, with its precomputed gradient w.r.t. `input`.
    pub fn external_scalar(&mut self, input: Var, value: E, grad: Vec<E>) -> Result<Var> {
        if grad.len() != numel(self.shape(input)) {
            return Err(Error::shape("external_scalar", "gradient length differs from input"));
        }
        let rg = self.rg(input.0);
        Ok(self.push(vec![1], vec![value], Op::External { input: input.0, grad }, rg))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * sigmoid_scalar(v), Op::Silu(x.0))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid_scalar, Op::Sigmoid(x.0))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, |v| gelu_parts(v).0, Op::Gelu(x.0))
    }

    /// Softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape("softmax", format!("axis {axis} out of range for {shape:?}")));
        }
        let (outer, n, inner) = axis_split(&shape, axis);
        let src = self.value(x);
        let mut out = vec![E::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * n * inner + j * inner + i;
                let m = (0..n).map(|j| src[at(j)]).fold(E::neg_infinity(), E::max);
                let mut z = E::zero();
                for j in 0..n {
                    let e = (src[at(j)] - m).exp();
                    out[at(j)] = e;
                    z = z + e;
                }
                for j in 0..n {
                    out[at(j)] = out[at(j)] / z;
                }
            }
        }
        let rg = self.rg(x.0);
        Ok(self.push(shape, out, Op::Softmax { input: x.0, axis }, rg))
    }
}

pub(crate) fn mul_backward<E: Element>(g: &Graph<'_, E>, a: usize, b: usize, dy: &[E]) -> Vec<(usize, Vec<E>)> {
    let (av, bv) = (g.data(a), g.data(b));
    let mut out = Vec::with_capacity(2);
    if g.rg(a) {
        out.push((a, dy.iter().zip(bv).map(|(&d, &y)| d * y).collect()));
    }
    if g.rg(b) {
        out.push((b, dy.iter().zip(av).map(|(&d, &x)| d * x).collect()));
    }
    out
}

pub(crate) fn add_suffix_backward<E: Element>(
    g: &Graph<'_, E>,
    input: usize,
    suffix: usize,
    dy: &[E],
) -> Vec<(usize, Vec<E>)> {
    let m = numel(&g.nodes[suffix].shape);
    let mut ds = vec![E::zero(); m];
    for (i, &d) in dy.iter().enumerate() {
        ds[i % m] = ds[i % m] + d;
    }
    vec![(input, dy.to_vec()), (suffix, ds)]
}

pub(crate) fn channel_scale_backward<E: Element>(
    g: &Graph<'_, E>,
    input: usize,
    scale: usize,
    dy: &[E],
) -> Vec<(usize, Vec<E>)> {
    let shape = &g.nodes[input].shape;
    let c = shape[1];
    let inner: usize = shape[2..].iter().product();
    let (x, s) = (g.data(input), g.data(scale));
    let mut out = Vec::with_capacity(2);
    if g.rg(input) {
        out.push((input, dy.iter().enumerate().map(|(i, &d)| d * s[(i / inner) % c]).collect()));
    }
    if g.rg(scale) {
        let mut ds = vec![E::zero(); c];
        for (i, (&d, &xv)) in dy.iter().zip(x).enumerate() {
            let ch = (i / inner) % c;
            ds[ch] = ds[ch] + d * xv;
        }
        out.push((scale, ds));
    }
    out
}

pub(crate) fn silu_backward<E: Element>(g: &Graph<'_, E>, x: usize, dy: &[E]) -> Vec<(usize, Vec<E>)> {
    let d = g
        .data(x)
        .iter()
        .zip(dy)
        .map(|(&v, &d)| {
            let s = sigmoid_scalar(v);
            d * s * (E::one() + v * (E::one() - s))
        })
        .collect();
    vec![(x, d)]
}

pub(crate) fn sigmoid_backward<E: Element>(
    g: &Graph<'_, E>,
    out: usize,
    x: usize,
    dy: &[E],
) -> Vec<(usize, Vec<E>)> {
    let d = g.data(out).iter().zip(dy).map(|(&s, &d)| d * s * (E::one() - s)).collect();
    vec![(x, d)]
}

pub(crate) fn gelu_backward<E: Element>(g: &Graph<'_, E>, x: usize, dy: &[E]) -> Vec<(usize, Vec<E>)> {
    let d = g.data(x).iter().zip(dy).map(|(&v, &d)| d * gelu_parts(v).1).collect();
    vec![(x, d)]
}

pub(crate) fn softmax_backward<E: Element>(
    g: &Graph<'_, E>,
    out: usize,
    x: usize,
    axis: usize,
    dy: &[E],
) -> Vec<(usize, Vec<E>)> {
    let shape = &g.nodes[out].shape;
    let (outer, n, inner) = axis_split(shape, axis);
    let y = g.data(out);
    let mut dx = vec![E::zero(); y.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| o * n * inner + j * inner + i;
            let dot: E = (0..n).map(|j| dy[at(j)] * y[at(j)]).sum();
            for j in 0..n {
                dx[at(j)] = y[at(j)] * (dy[at(j)] - dot);
            }
        }
    }
    vec![(x, dx)]
}
