//! Finite-difference verification of reverse-mode gradients (64-bit only).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

use super::{Graph, Tensor, Var};

/// Denominator floor of the relative error, so near-zero gradients are compared on an
/// absolute scale instead of amplifying rounding noise.
pub const REL_ERROR_FLOOR: f64 = 1e-3;

/// Random standard-normal tensor of the given shape.
pub fn random_tensor(shape: &[usize], seed: u64, scale: f64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape.to_vec(), |_| {
        let v: f64 = StandardNormal.sample(&mut rng);
        v * scale
    })
}

/// Compares the reverse-mode gradient of `sum(w * op(inputs))` (with fixed random `w`)
/// against central differences for every input element; returns the worst relative
/// error `|a - n| / max(|a|, |n|, REL_ERROR_FLOOR)`.
pub fn grad_check<F>(inputs: &[Tensor<f64>], eps: f64, seed: u64, op: F) -> Result<f64>
where
    F: Fn(&mut Graph<'_, f64>, &[Var]) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::Config(format!("grad_check eps {eps} outside [1e-7, 1e-3]")));
    }
    let eval = |vals: &[Tensor<f64>], weights: Option<&[f64]>| -> Result<(f64, Vec<f64>, Vec<Vec<f64>>)> {
        let mut g = Graph::<f64>::new();
        let vars: Vec<Var> = vals.iter().map(|t| g.input(t.clone().with_requires_grad(true))).collect();
        let y = op(&mut g, &vars)?;
        let w = match weights {
            Some(w) => w.to_vec(),
            None => random_tensor(g.shape(y), seed ^ 0x5eed, 1.0).into_data(),
        };
        let loss = g.weighted_sum(y, w.clone())?;
        let value = g.value(loss)[0];
        let grads = if weights.is_none() {
            let gr = g.backward(loss)?;
            vars.iter()
                .map(|&v| gr.wrt(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; g.shape(v).iter().product()]))
                .collect()
        } else {
            Vec::new()
        };
        Ok((value, w, grads))
    };
    let (_, weights, analytic) = eval(inputs, None)?;
    let mut worst = 0.0f64;
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (ti, t) in inputs.iter().enumerate() {
        for ei in 0..t.numel() {
            let orig = t.data()[ei];
            work[ti].data_mut()[ei] = orig + eps;
            let (fp, _, _) = eval(&work, Some(&weights))?;
            work[ti].data_mut()[ei] = orig - eps;
            let (fm, _, _) = eval(&work, Some(&weights))?;
            work[ti].data_mut()[ei] = orig;
            let numeric = (fp - fm) / (2.0 * eps);
            let a = analytic[ti][ei];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_ERROR_FLOOR);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

type OpFn = Box<dyn Fn(&mut Graph<'_, f64>, &[Var]) -> Result<Var>>;

/// Runs [`grad_check`] over every differentiable graph op on small random inputs drawn
/// from `seed`; returns `(op, worst relative error)` per case.
pub fn op_suite(seed: u64) -> Result<Vec<(&'static str, f64)>> {
    let base = seed.wrapping_mul(0x9e37_79b9);
    let t = |shape: &[usize], k: u64| random_tensor(shape, base.wrapping_add(k), 1.0);
    let cases: Vec<(&'static str, Vec<Tensor<f64>>, OpFn)> = vec![
        (
            "conv2d 3x3",
            vec![t(&[2, 3, 5, 5], 0), t(&[4, 3, 3, 3], 1), t(&[4], 2)],
            Box::new(|g, v| g.conv2d(v[0], v[1], Some(v[2]), 1, 1)),
        ),
        ("conv2d 4x4/2", vec![t(&[1, 2, 6, 6], 3), t(&[3, 2, 4, 4], 4)], Box::new(|g, v| g.conv2d(v[0], v[1], None, 2, 1))),
        (
            "conv2d 1x1",
            vec![t(&[2, 3, 4, 4], 5), t(&[2, 3, 1, 1], 6), t(&[2], 7)],
            Box::new(|g, v| g.conv2d(v[0], v[1], Some(v[2]), 1, 0)),
        ),
        ("linear", vec![t(&[2, 3, 4], 8), t(&[5, 4], 9), t(&[5], 10)], Box::new(|g, v| g.linear(v[0], v[1], Some(v[2])))),
        (
            "attention",
            vec![t(&[2, 4, 6], 11), t(&[2, 4, 6], 12), t(&[2, 4, 6], 13)],
            Box::new(|g, v| g.attention(v[0], v[1], v[2], 2)),
        ),
        (
            "layer_norm",
            vec![t(&[3, 5], 14), t(&[5], 15), t(&[5], 16)],
            Box::new(|g, v| g.layer_norm(v[0], v[1], v[2], 1e-6)),
        ),
        ("silu", vec![t(&[7], 17)], Box::new(|g, v| Ok(g.silu(v[0])))),
        ("sigmoid", vec![t(&[7], 18)], Box::new(|g, v| Ok(g.sigmoid(v[0])))),
        ("gelu", vec![t(&[7], 19)], Box::new(|g, v| Ok(g.gelu(v[0])))),
        ("softmax", vec![t(&[2, 3, 4], 20)], Box::new(|g, v| g.softmax(v[0], 1))),
        ("add", vec![t(&[2, 3], 21), t(&[2, 3], 22)], Box::new(|g, v| g.add(v[0], v[1]))),
        ("sub", vec![t(&[2, 3], 23), t(&[2, 3], 24)], Box::new(|g, v| g.sub(v[0], v[1]))),
        ("mul", vec![t(&[2, 3], 25), t(&[2, 3], 26)], Box::new(|g, v| g.mul(v[0], v[1]))),
        ("add_suffix", vec![t(&[2, 3, 4], 27), t(&[3, 4], 28)], Box::new(|g, v| g.add_suffix(v[0], v[1]))),
        ("channel_scale", vec![t(&[2, 3, 2, 2], 29), t(&[3], 30)], Box::new(|g, v| g.channel_scale(v[0], v[1]))),
        ("scale", vec![t(&[4], 31)], Box::new(|g, v| Ok(g.scale(v[0], 0.7)))),
        ("sum", vec![t(&[2, 3], 32)], Box::new(|g, v| Ok(g.sum(v[0])))),
        ("mean", vec![t(&[2, 3], 33)], Box::new(|g, v| Ok(g.mean(v[0])))),
        ("weighted_sum", vec![t(&[5], 34)], Box::new(|g, v| g.weighted_sum(v[0], vec![0.5, -1.0, 2.0, 0.25, 3.0]))),
        ("upsample_nearest", vec![t(&[1, 2, 3, 3], 35)], Box::new(|g, v| g.upsample_nearest(v[0], 2))),
        ("concat", vec![t(&[1, 2, 2, 2], 36), t(&[1, 3, 2, 2], 37)], Box::new(|g, v| g.concat(&[v[0], v[1]], 1))),
        ("reshape", vec![t(&[2, 6], 38)], Box::new(|g, v| g.reshape(v[0], &[3, 4]))),
        ("tokens_from_map", vec![t(&[2, 3, 2, 2], 39)], Box::new(|g, v| g.tokens_from_map(v[0]))),
        ("map_from_tokens", vec![t(&[2, 4, 3], 40)], Box::new(|g, v| g.map_from_tokens(v[0], 2, 2))),
    ];
    cases.into_iter().map(|(name, inputs, op)| Ok((name, grad_check(&inputs, 1e-5, seed, op)?))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_eps() {
        let x = random_tensor(&[2], 0, 1.0);
        assert!(grad_check(&[x.clone()], 1e-2, 0, |g, v| Ok(g.silu(v[0]))).is_err());
        assert!(grad_check(&[x], 1e-6, 0, |g, v| Ok(g.silu(v[0]))).unwrap() < 1e-6);
    }

    #[test]
    fn catches_a_wrong_gradient() {
        // External op with a deliberately wrong gradient must be flagged.
        let x = random_tensor(&[3], 1, 1.0);
        let err = grad_check(&[x], 1e-6, 0, |g, v| {
            let s: f64 = g.value(v[0]).iter().map(|a| a * a).sum();
            g.external_scalar(v[0], s, vec![1.0; 3])
        })
        .unwrap();
        assert!(err > 1e-2);
    }

    #[test]
    fn every_op_passes() {
        for (name, err) in op_suite(7).unwrap() {
            assert!(err < 1e-5, "{name}: {err}");
        }
    }
}
