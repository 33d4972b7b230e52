use crate::error::{Error, Result};
use crate::numeric::graph::{Graph, Op, Var};
use crate::numeric::Element;

impl<'s, E: Element> Graph<'s, E> {
    /// Normalizes each trailing-axis vector to zero mean / unit variance, then applies
    /// `gain` and `offset`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, offset: Var, eps: E) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let d = *s.last().ok_or_else(|| Error::shape("layer_norm", "scalar input"))?;
        if self.shape(gain) != [d] || self.shape(offset) != [d] {
            return Err(Error::shape(
                "layer_norm",
                format!("gain {:?} / offset {:?} for width {d}", self.shape(gain), self.shape(offset)),
            ));
        }
        if eps <= E::zero() {
            return Err(Error::Config("layer_norm eps must be positive".into()));
        }
        let src = self.data(x.0);
        let (gd, od) = (self.data(gain.0), self.data(offset.0));
        let inv_d = E::one() / E::from_usize(d).expect("width");
        let mut xhat = vec![E::zero(); src.len()];
        let mut rstd = Vec::with_capacity(src.len() / d);
        let mut out = vec![E::zero(); src.len()];
        for (r, row) in src.chunks(d).enumerate() {
            let mean = row.iter().copied().sum::<E>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<E>() * inv_d;
            let rs = E::one() / (var + eps).sqrt();
            rstd.push(rs);
            for j in 0..d {
                let xh = (row[j] - mean) * rs;
                xhat[r * d + j] = xh;
                out[r * d + j] = xh * gd[j] + od[j];
            }
        }
        let rg = self.rg(x.0) || self.rg(gain.0) || self.rg(offset.0);
        Ok(self.push(s, out, Op::LayerNorm { input: x.0, gain: gain.0, offset: offset.0, xhat, rstd }, rg))
    }
}

pub(crate) fn layer_norm_backward<E: Element>(
    g: &Graph<'_, E>,
    input: usize,
    gain: usize,
    offset: usize,
    xhat: &[E],
    rstd: &[E],
    dy: &[E],
) -> Vec<(usize, Vec<E>)> {
    let gd = g.data(gain);
    let d = gd.len();
    let inv_d = E::one() / E::from_usize(d).expect("width");
    let mut res = Vec::with_capacity(3);
    if g.rg(input) {
        let mut dx = vec![E::zero(); dy.len()];
        for (r, &rs) in rstd.iter().enumerate() {
            let row = r * d..(r + 1) * d;
            let (dyr, xhr) = (&dy[row.clone()], &xhat[row.clone()]);
            let mut sum_g = E::zero();
            let mut sum_gx = E::zero();
            for j in 0..d {
                let gj = dyr[j] * gd[j];
                sum_g = sum_g + gj;
                sum_gx = sum_gx + gj * xhr[j];
            }
            for j in 0..d {
                let gj = dyr[j] * gd[j];
                dx[r * d + j] = rs * (gj - inv_d * sum_g - xhr[j] * inv_d * sum_gx);
            }
        }
        res.push((input, dx));
    }
    if g.rg(gain) {
        let mut dgain = vec![E::zero(); d];
        for (i, (&a, &b)) in dy.iter().zip(xhat).enumerate() {
            dgain[i % d] = dgain[i % d] + a * b;
        }
        res.push((gain, dgain));
    }
    if g.rg(offset) {
        let mut doff = vec![E::zero(); d];
        for (i, &a) in dy.iter().enumerate() {
            doff[i % d] = doff[i % d] + a;
        }
        res.push((offset, doff));
    }
    res
}

#[cfg(test)]
mod tests {
    use crate::numeric::{Graph, Tensor};

    fn ln(x: Vec<f64>, eps: f64) -> Vec<f64> {
        let d = x.len();
        let mut g = Graph::<f64>::new();
        let xv = g.input(Tensor::new([d], x).unwrap());
        let gain = g.input(Tensor::full([d], 1.0));
        let off = g.input(Tensor::zeros([d]));
        let y = g.layer_norm(xv, gain, off, eps).unwrap();
        g.value(y).to_vec()
    }

    #[test]
    fn constant_input_returns_offset() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::full([2, 3], 5.0));
        let gain = g.input(Tensor::full([3], 2.0));
        let off = g.input(Tensor::new([3], vec![0.1, 0.2, 0.3]).unwrap());
        let y = g.layer_norm(x, gain, off, 1e-5).unwrap();
        assert_eq!(g.value(y), &[0.1, 0.2, 0.3, 0.1, 0.2, 0.3]);
    }

    #[test]
    fn unit_pair() {
        let y = ln(vec![1.0, -1.0], 1e-12);
        assert!((y[0] - 1.0).abs() < 1e-9 && (y[1] + 1.0).abs() < 1e-9);
    }

    #[test]
    fn scale_invariant() {
        let x = vec![0.3, -1.2, 2.5, 0.7];
        let a = ln(x.clone(), 1e-12);
        let b = ln(x.iter().map(|v| v * 37.0).collect(), 1e-12);
        for (p, q) in a.iter().zip(&b) {
            assert!((p - q).abs() < 1e-9);
        }
    }
}
