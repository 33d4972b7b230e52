//! 2-D convolution (im2col + GEMM) and the affine map over a trailing axis.

use crate::error::{Error, Result};
use crate::numeric::element::{gemm, MatMut, MatRef};
use crate::numeric::graph::{Graph, Op, Var};
use crate::numeric::Element;

#[derive(Clone, Copy)]
struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.padding == 0
    }

    fn patch(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn pixels(&self) -> usize {
        self.oh * self.ow
    }
}

fn out_extent(len: usize, k: usize, stride: usize, padding: usize, axis: &str) -> Result<usize> {
    let span = len + 2 * padding;
    if span < k {
        return Err(Error::Config(format!(
            "conv2d: kernel {k} larger than padded {axis} extent {span}"
        )));
    }
    if (span - k) % stride != 0 {
        return Err(Error::Config(format!(
            "conv2d: ({len} + 2*{padding} - {k}) / {stride} + 1 is not an integer {axis} extent"
        )));
    }
    Ok((span - k) / stride + 1)
}

fn im2col<E: Element>(x: &[E], g: &ConvGeom, cols: &mut [E]) {
    let npix = g.pixels();
    for c in 0..g.c {
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = (c * g.kh + i) * g.kw + j;
                let dst = &mut cols[row * npix..(row + 1) * npix];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + i) as isize - g.padding as isize;
                    let line = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        line.iter_mut().for_each(|v| *v = E::zero());
                        continue;
                    }
                    let src = &x[c * g.h * g.w + iy as usize * g.w..][..g.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + j) as isize - g.padding as isize;
                        *v = if ix < 0 || ix >= g.w as isize { E::zero() } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

fn col2im<E: Element>(cols: &[E], g: &ConvGeom, dx: &mut [E]) {
    let npix = g.pixels();
    for c in 0..g.c {
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = (c * g.kh + i) * g.kw + j;
                let src = &cols[row * npix..(row + 1) * npix];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + i) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let base = c * g.h * g.w + iy as usize * g.w;
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + j) as isize - g.padding as isize;
                        if ix >= 0 && ix < g.w as isize {
                            let d = &mut dx[base + ix as usize];
                            *d = *d + src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

impl<'s, E: Element> Graph<'s, E> {
    /// Cross-correlation of `input[N, C, H, W]` with `kernel[O, C, kh, kw]`.
    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        let ks = self.shape(kernel).to_vec();
        if xs.len() != 4 || ks.len() != 4 {
            return Err(Error::shape("conv2d", format!("expected 4-d input and kernel, got {xs:?} and {ks:?}")));
        }
        if xs[1] != ks[1] {
            return Err(Error::shape(
                "conv2d",
                format!("kernel expects {} input channels, input has {}", ks[1], xs[1]),
            ));
        }
        if stride == 0 {
            return Err(Error::Config("conv2d: stride must be positive".into()));
        }
        if let Some(b) = bias {
            if self.shape(b) != [ks[0]] {
                return Err(Error::shape("conv2d", format!("bias {:?} for {} outputs", self.shape(b), ks[0])));
            }
        }
        let geom = ConvGeom {
            c: xs[1],
            h: xs[2],
            w: xs[3],
            kh: ks[2],
            kw: ks[3],
            stride,
            padding,
            oh: out_extent(xs[2], ks[2], stride, padding, "height")?,
            ow: out_extent(xs[3], ks[3], stride, padding, "width")?,
        };
        let (n, o) = (xs[0], ks[0]);
        let npix = geom.pixels();
        let mut out = vec![E::zero(); n * o * npix];
        {
            let x = self.data(input.0);
            let k = self.data(kernel.0);
            let mut cols = if geom.is_pointwise() { Vec::new() } else { vec![E::zero(); geom.patch() * npix] };
            let per_in = geom.c * geom.h * geom.w;
            for b in 0..n {
                let xb = &x[b * per_in..(b + 1) * per_in];
                let rhs = if geom.is_pointwise() {
                    MatRef::dense(xb, 0, geom.patch(), npix)
                } else {
                    im2col(xb, &geom, &mut cols);
                    MatRef::dense(&cols, 0, geom.patch(), npix)
                };
                gemm(
                    MatRef::dense(k, 0, o, geom.patch()),
                    rhs,
                    E::zero(),
                    MatMut::dense(&mut out, b * o * npix, o, npix),
                );
            }
            if let Some(bv) = bias {
                let bd = self.data(bv.0);
                for (i, chunk) in out.chunks_mut(npix).enumerate() {
                    let bb = bd[i % o];
                    chunk.iter_mut().for_each(|v| *v = *v + bb);
                }
            }
        }
        let rg = self.rg(input.0) || self.rg(kernel.0) || bias.is_some_and(|b| self.rg(b.0));
        let op = Op::Conv2d { input: input.0, kernel: kernel.0, bias: bias.map(|b| b.0), stride, padding };
        Ok(self.push(vec![n, o, geom.oh, geom.ow], out, op, rg))
    }

    /// Affine map over the trailing axis: `input[.., Din] -> input * weight^T + bias`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        let ws = self.shape(weight).to_vec();
        if ws.len() != 2 || xs.last() != Some(&ws[1]) {
            return Err(Error::shape("linear", format!("input {xs:?} does not end in weight width of {ws:?}")));
        }
        let (dout, din) = (ws[0], ws[1]);
        if let Some(b) = bias {
            if self.shape(b) != [dout] {
                return Err(Error::shape("linear", format!("bias {:?} for {dout} outputs", self.shape(b))));
            }
        }
        let m = xs.iter().product::<usize>() / din;
        let mut out = vec![E::zero(); m * dout];
        gemm(
            MatRef::dense(self.data(input.0), 0, m, din),
            MatRef::dense(self.data(weight.0), 0, dout, din).t(),
            E::zero(),
            MatMut::dense(&mut out, 0, m, dout),
        );
        if let Some(b) = bias {
            let bd = self.data(b.0);
            for row in out.chunks_mut(dout) {
                row.iter_mut().zip(bd).for_each(|(v, &bb)| *v = *v + bb);
            }
        }
        let mut shape = xs;
        *shape.last_mut().expect("non-empty") = dout;
        let rg = self.rg(input.0) || self.rg(weight.0) || bias.is_some_and(|b| self.rg(b.0));
        Ok(self.push(shape, out, Op::Linear { input: input.0, weight: weight.0, bias: bias.map(|b| b.0) }, rg))
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward<E: Element>(
    g: &Graph<'_, E>,
    out_idx: usize,
    input: usize,
    kernel: usize,
    bias: Option<usize>,
    stride: usize,
    padding: usize,
    dy: &[E],
) -> Vec<(usize, Vec<E>)> {
    let xs = &g.nodes[input].shape;
    let ks = &g.nodes[kernel].shape;
    let ys = &g.nodes[out_idx].shape;
    let geom = ConvGeom {
        c: xs[1],
        h: xs[2],
        w: xs[3],
        kh: ks[2],
        kw: ks[3],
        stride,
        padding,
        oh: ys[2],
        ow: ys[3],
    };
    let (n, o) = (xs[0], ks[0]);
    let npix = geom.pixels();
    let per_in = geom.c * geom.h * geom.w;
    let x = g.data(input);
    let k = g.data(kernel);
    let need_x = g.rg(input);
    let need_k = g.rg(kernel);
    let mut dx = if need_x { vec![E::zero(); x.len()] } else { Vec::new() };
    let mut dk = if need_k { vec![E::zero(); k.len()] } else { Vec::new() };
    let mut cols = if geom.is_pointwise() { Vec::new() } else { vec![E::zero(); geom.patch() * npix] };
    for b in 0..n {
        let dyb = MatRef::dense(dy, b * o * npix, o, npix);
        if need_k {
            let xb = &x[b * per_in..(b + 1) * per_in];
            let lhs_t = if geom.is_pointwise() {
                MatRef::dense(xb, 0, geom.patch(), npix).t()
            } else {
                im2col(xb, &geom, &mut cols);
                MatRef::dense(&cols, 0, geom.patch(), npix).t()
            };
            gemm(dyb, lhs_t, E::one(), MatMut::dense(&mut dk, 0, o, geom.patch()));
        }
        if need_x {
            let kt = MatRef::dense(k, 0, o, geom.patch()).t();
            if geom.is_pointwise() {
                gemm(kt, dyb, E::zero(), MatMut::dense(&mut dx, b * per_in, geom.patch(), npix));
            } else {
                gemm(kt, dyb, E::zero(), MatMut::dense(&mut cols, 0, geom.patch(), npix));
                col2im(&cols, &geom, &mut dx[b * per_in..(b + 1) * per_in]);
            }
        }
    }
    let mut res = Vec::with_capacity(3);
    if need_x {
        res.push((input, dx));
    }
    if need_k {
        res.push((kernel, dk));
    }
    if let Some(bi) = bias.filter(|&bi| g.rg(bi)) {
        let mut db = vec![E::zero(); o];
        for (i, chunk) in dy.chunks(npix).enumerate() {
            db[i % o] = db[i % o] + chunk.iter().copied().sum();
        }
        res.push((bi, db));
    }
    res
}

pub(crate) fn linear_backward<E: Element>(
    g: &Graph<'_, E>,
    input: usize,
    weight: usize,
    bias: Option<usize>,
    dy: &[E],
) -> Vec<(usize, Vec<E>)> {
    let ws = &g.nodes[weight].shape;
    let (dout, din) = (ws[0], ws[1]);
    let m = dy.len() / dout;
    let mut res = Vec::with_capacity(3);
    if g.rg(input) {
        let mut dx = vec![E::zero(); m * din];
        gemm(
            MatRef::dense(dy, 0, m, dout),
            MatRef::dense(g.data(weight), 0, dout, din),
            E::zero(),
            MatMut::dense(&mut dx, 0, m, din),
        );
        res.push((input, dx));
    }
    if g.rg(weight) {
        let mut dw = vec![E::zero(); dout * din];
        gemm(
            MatRef::dense(dy, 0, m, dout).t(),
            MatRef::dense(g.data(input), 0, m, din),
            E::zero(),
            MatMut::dense(&mut dw, 0, dout, din),
        );
        res.push((weight, dw));
    }
    if let Some(b) = bias.filter(|&b| g.rg(b)) {
        let mut db = vec![E::zero(); dout];
        for row in dy.chunks(dout) {
            db.iter_mut().zip(row).for_each(|(a, &d)| *a = *a + d);
        }
        res.push((b, db));
    }
    res
}

#[cfg(test)]
mod tests {
    use crate::error::Error;
    use crate::numeric::{Graph, Tensor};

    #[test]
    fn identity_kernel_is_identity() {
        let mut g = Graph::<f32>::new();
        let x = g.input(Tensor::from_fn([2, 1, 3, 4], |i| i as f32 * 0.3 - 1.0));
        let k = g.input(Tensor::full([1, 1, 1, 1], 1.0));
        let y = g.conv2d(x, k, None, 1, 0).unwrap();
        assert_eq!(g.value(y), g.value(x));
    }

    #[test]
    fn zero_input_gives_zero_output() {
        let mut g = Graph::<f32>::new();
        let x = g.input(Tensor::zeros([1, 2, 5, 5]));
        let k = g.input(Tensor::from_fn([3, 2, 3, 3], |i| i as f32));
        let y = g.conv2d(x, k, None, 2, 1).unwrap();
        assert_eq!(g.shape(y), &[1, 3, 3, 3]);
        assert!(g.value(y).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn hand_summation() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::from_fn([1, 1, 3, 3], |i| (i + 1) as f64));
        let k = g.input(Tensor::full([1, 1, 3, 3], 1.0));
        let y = g.conv2d(x, k, None, 1, 0).unwrap();
        assert_eq!(g.shape(y), &[1, 1, 1, 1]);
        assert_eq!(g.value(y), &[45.0]);
    }

    #[test]
    fn extent_errors() {
        let mut g = Graph::<f32>::new();
        let x = g.input(Tensor::zeros([1, 2, 4, 4]));
        let wrong_c = g.input(Tensor::zeros([1, 3, 1, 1]));
        assert!(matches!(g.conv2d(x, wrong_c, None, 1, 0), Err(Error::Shape { .. })));
        let k3 = g.input(Tensor::zeros([1, 2, 3, 3]));
        // (4 + 2 - 3) / 2 is not integral
        assert!(matches!(g.conv2d(x, k3, None, 2, 1), Err(Error::Config(_))));
        let k4 = g.input(Tensor::zeros([1, 2, 4, 4]));
        assert!(g.conv2d(x, k4, None, 2, 1).is_ok());
    }

    #[test]
    fn linear_hand_product() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::new([1, 2], vec![1.0, 2.0]).unwrap());
        let w = g.input(Tensor::new([2, 2], vec![1.0, 1.0, 1.0, -1.0]).unwrap());
        let b = g.input(Tensor::new([2], vec![0.0, 1.0]).unwrap());
        let y = g.linear(x, w, Some(b)).unwrap();
        assert_eq!(g.value(y), &[3.0, 0.0]);
        let zero_w = g.input(Tensor::zeros([2, 2]));
        let rows = g.input(Tensor::from_fn([3, 2], |i| i as f64));
        let yb = g.linear(rows, zero_w, Some(b)).unwrap();
        assert_eq!(g.value(yb), &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        let bad = g.input(Tensor::zeros([2, 3]));
        assert!(g.linear(x, bad, None).is_err());
    }
}
