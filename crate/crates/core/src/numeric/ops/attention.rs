//! Scaled dot-product attention over `heads` interleaved column groups.

use crate::error::{Error, Result};
use crate::numeric::element::{gemm, MatMut, MatRef};
use crate::numeric::graph::{Graph, Op, Var};
use crate::numeric::Element;

fn head_view<E>(data: &[E], n: usize, h: usize, t: usize, d: usize, dh: usize) -> MatRef<'_, E> {
    MatRef { data, offset: n * t * d + h * dh, rows: t, cols: dh, rs: d, cs: 1 }
}

fn head_view_mut<E>(data: &mut [E], n: usize, h: usize, t: usize, d: usize, dh: usize) -> MatMut<'_, E> {
    MatMut { data, offset: n * t * d + h * dh, rows: t, cols: dh, rs: d, cs: 1 }
}

impl<'s, E: Element> Graph<'s, E> {
    /// `softmax(Q K^T / sqrt(D / heads)) V` per head, for `q, k, v` of shape `[N, T, D]`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let s = self.shape(q).to_vec();
        if s.len() != 3 || self.shape(k) != s.as_slice() || self.shape(v) != s.as_slice() {
            return Err(Error::shape(
                "attention",
                format!("q/k/v must share a [N, T, D] shape, got {s:?}, {:?}, {:?}", self.shape(k), self.shape(v)),
            ));
        }
        let (n, t, d) = (s[0], s[1], s[2]);
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!("{heads} heads do not divide width {d}")));
        }
        let dh = d / heads;
        let scale = E::one() / E::from_usize(dh).expect("width").sqrt();
        let mut probs = vec![E::zero(); n * heads * t * t];
        let mut out = vec![E::zero(); n * t * d];
        let (qd, kd, vd) = (self.data(q.0), self.data(k.0), self.data(v.0));
        for b in 0..n {
            for h in 0..heads {
                let p_off = (b * heads + h) * t * t;
                gemm(
                    head_view(qd, b, h, t, d, dh),
                    head_view(kd, b, h, t, d, dh).t(),
                    E::zero(),
                    MatMut::dense(&mut probs, p_off, t, t),
                );
                for row in probs[p_off..p_off + t * t].chunks_mut(t) {
                    let m = row.iter().fold(E::neg_infinity(), |a, &x| a.max(x * scale));
                    let mut z = E::zero();
                    for x in row.iter_mut() {
                        *x = (*x * scale - m).exp();
                        z = z + *x;
                    }
                    row.iter_mut().for_each(|x| *x = *x / z);
                }
                gemm(
                    MatRef::dense(&probs, p_off, t, t),
                    head_view(vd, b, h, t, d, dh),
                    E::zero(),
                    head_view_mut(&mut out, b, h, t, d, dh),
                );
            }
        }
        let rg = self.rg(q.0) || self.rg(k.0) || self.rg(v.0);
        Ok(self.push(s, out, Op::Attention { q: q.0, k: k.0, v: v.0, heads, probs }, rg))
    }
}

pub(crate) fn attention_backward<E: Element>(
    g: &Graph<'_, E>,
    q: usize,
    k: usize,
    v: usize,
    heads: usize,
    probs: &[E],
    dy: &[E],
) -> Vec<(usize, Vec<E>)> {
    let s = &g.nodes[q].shape;
    let (n, t, d) = (s[0], s[1], s[2]);
    let dh = d / heads;
    let scale = E::one() / E::from_usize(dh).expect("width").sqrt();
    let (qd, kd, vd) = (g.data(q), g.data(k), g.data(v));
    let mut dq = vec![E::zero(); qd.len()];
    let mut dk = vec![E::zero(); kd.len()];
    let mut dv = vec![E::zero(); vd.len()];
    let mut dp = vec![E::zero(); t * t];
    for b in 0..n {
        for h in 0..heads {
            let p_off = (b * heads + h) * t * t;
            let p = MatRef::dense(probs, p_off, t, t);
            let dout = head_view(dy, b, h, t, d, dh);
            gemm(p.t(), dout, E::zero(), head_view_mut(&mut dv, b, h, t, d, dh));
            gemm(dout, head_view(vd, b, h, t, d, dh).t(), E::zero(), MatMut::dense(&mut dp, 0, t, t));
            for (r, row) in dp.chunks_mut(t).enumerate() {
                let prow = &probs[p_off + r * t..p_off + (r + 1) * t];
                let dot: E = row.iter().zip(prow).map(|(&a, &b)| a * b).sum();
                for (x, &pp) in row.iter_mut().zip(prow) {
                    *x = pp * (*x - dot) * scale;
                }
            }
            let ds = MatRef::dense(&dp, 0, t, t);
            gemm(ds, head_view(kd, b, h, t, d, dh), E::zero(), head_view_mut(&mut dq, b, h, t, d, dh));
            gemm(ds.t(), head_view(qd, b, h, t, d, dh), E::zero(), head_view_mut(&mut dk, b, h, t, d, dh));
        }
    }
    vec![(q, dq), (k, dk), (v, dv)]
}

#[cfg(test)]
mod tests {
    use crate::numeric::{Graph, Tensor};

    #[test]
    fn single_token_returns_values() {
        let mut g = Graph::<f64>::new();
        let q = g.input(Tensor::from_fn([1, 1, 4], |i| i as f64));
        let k = g.input(Tensor::from_fn([1, 1, 4], |i| -(i as f64)));
        let v = g.input(Tensor::from_fn([1, 1, 4], |i| 10.0 + i as f64));
        let y = g.attention(q, k, v, 2).unwrap();
        assert_eq!(g.value(y), g.value(v));
    }

    #[test]
    fn two_token_hand_oracle() {
        // one head, D = 2: q = k = v = [[1, 0], [0, 1]]
        // scores / sqrt(2): row 0 = [1, 0] / sqrt2 -> weights [s, 1-s], s = sigmoid(1/sqrt2)
        let mut g = Graph::<f64>::new();
        let x = Tensor::new([1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let q = g.input(x.clone());
        let k = g.input(x.clone());
        let v = g.input(x);
        let y = g.attention(q, k, v, 1).unwrap();
        let s = 1.0 / (1.0 + (-(1.0f64 / 2f64.sqrt())).exp());
        let want = [s, 1.0 - s, 1.0 - s, s];
        for (a, b) in g.value(y).iter().zip(want) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn heads_must_divide_width() {
        let mut g = Graph::<f32>::new();
        let x = g.input(Tensor::zeros([1, 3, 6]));
        assert!(g.attention(x, x, x, 4).is_err());
        assert!(g.attention(x, x, x, 3).is_ok());
    }
}
