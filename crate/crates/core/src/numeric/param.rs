use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

use super::graph::Gradients;
use super::tensor::numel;
use super::{Element, Tensor};

/// Index of a parameter inside its owning store or plan.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Initial value distribution for a declared parameter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    Normal { std: f64 },
}

/// A named tensor with a frozen flag.
#[derive(Debug, Clone)]
pub struct Parameter<E = f32> {
    pub name: String,
    pub tensor: Tensor<E>,
    pub frozen: bool,
}

/// Anything that parameters can be declared into: a materializing [`ParamStore`]
/// or a shape-only [`ParamPlan`].
pub trait ParamSink {
    fn declare(&mut self, name: &str, shape: &[usize], init: Init, frozen: bool) -> Result<ParamId>;
}

/// 64-bit FNV-1a, used to derive a stable per-parameter seed from its name.
pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Seed of the RNG that initializes parameter `name` under model seed `seed`.
///
/// Depends only on the pair, so identically named parameters get identical values
/// regardless of which other parameters the model declares.
pub fn param_seed(seed: u64, name: &str) -> u64 {
    let mut z = seed ^ fnv1a(name.as_bytes());
    // splitmix64 finalizer
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn check_decl(name: &str, shape: &[usize], names: &HashMap<String, ParamId>) -> Result<()> {
    if names.contains_key(name) {
        return Err(Error::Config(format!("duplicate parameter name `{name}`")));
    }
    if shape.is_empty() || shape.iter().any(|&d| d == 0) {
        return Err(Error::Config(format!("parameter `{name}` has invalid shape {shape:?}")));
    }
    Ok(())
}

/// Owns every parameter of a model.
#[derive(Debug, Clone)]
pub struct ParamStore<E = f32> {
    seed: u64,
    params: Vec<Parameter<E>>,
    names: HashMap<String, ParamId>,
}

impl<E: Element> ParamStore<E> {
    pub fn new(seed: u64) -> Self {
        Self { seed, params: Vec::new(), names: HashMap::new() }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter<E> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<E> {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.names.get(name).copied()
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter<E>> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<E>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Parameter<E>)> {
        self.params.iter_mut().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    /// Zeroes every gradient buffer.
    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(|p| p.tensor.zero_grad());
    }

    /// Adds the gradients from one backward pass. Frozen parameters are skipped.
    pub fn accumulate(&mut self, grads: &Gradients<E>) -> Result<()> {
        for (id, g) in grads.params() {
            let p = &mut self.params[id.0];
            if !p.frozen {
                p.tensor.accumulate_grad(g)?;
            }
        }
        Ok(())
    }

    /// Overwrites the value of an existing parameter, keeping its shape.
    pub fn set_value(&mut self, id: ParamId, data: &[E]) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.tensor.numel() != data.len() {
            return Err(Error::shape(
                "set_value",
                format!("`{}` holds {} elements, got {}", p.name, p.tensor.numel(), data.len()),
            ));
        }
        p.tensor.data_mut().copy_from_slice(data);
        Ok(())
    }

    /// Element-type conversion of the whole store.
    pub fn cast<F: Element>(&self) -> ParamStore<F> {
        ParamStore {
            seed: self.seed,
            params: self
                .params
                .iter()
                .map(|p| Parameter { name: p.name.clone(), tensor: p.tensor.cast(), frozen: p.frozen })
                .collect(),
            names: self.names.clone(),
        }
    }
}

impl<E: Element> ParamSink for ParamStore<E> {
    fn declare(&mut self, name: &str, shape: &[usize], init: Init, frozen: bool) -> Result<ParamId> {
        check_decl(name, shape, &self.names)?;
        let n = numel(shape);
        let data: Vec<E> = match init {
            Init::Zeros => vec![E::zero(); n],
            Init::Ones => vec![E::one(); n],
            Init::Normal { std } => {
                let mut rng = ChaCha8Rng::seed_from_u64(param_seed(self.seed, name));
                let dist = Normal::new(0.0, std)
                    .map_err(|e| Error::Config(format!("init of `{name}`: {e}")))?;
                (0..n).map(|_| E::from_f64_lossy(dist.sample(&mut rng))).collect()
            }
        };
        let tensor = Tensor::new(shape.to_vec(), data)?.with_requires_grad(!frozen);
        let id = ParamId(self.params.len());
        self.params.push(Parameter { name: name.to_string(), tensor, frozen });
        self.names.insert(name.to_string(), id);
        Ok(id)
    }
}

/// One declared parameter without storage.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlannedParam {
    pub name: String,
    pub shape: Vec<usize>,
    pub frozen: bool,
}

impl PlannedParam {
    pub fn numel(&self) -> usize {
        numel(&self.shape)
    }
}

/// Shape-only record of what a builder would allocate; used for exact accounting of
/// configurations too large to materialize.
#[derive(Debug, Clone, Default)]
pub struct ParamPlan {
    entries: Vec<PlannedParam>,
    names: HashMap<String, ParamId>,
}

impl ParamPlan {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn entries(&self) -> &[PlannedParam] {
        &self.entries
    }
}

impl ParamSink for ParamPlan {
    fn declare(&mut self, name: &str, shape: &[usize], _init: Init, frozen: bool) -> Result<ParamId> {
        check_decl(name, shape, &self.names)?;
        let id = ParamId(self.entries.len());
        self.entries.push(PlannedParam { name: name.to_string(), shape: shape.to_vec(), frozen });
        self.names.insert(name.to_string(), id);
        Ok(id)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_unique() {
        let mut s = ParamStore::<f32>::new(0);
        s.declare("a.weight", &[2, 2], Init::Zeros, false).unwrap();
        assert!(s.declare("a.weight", &[2, 2], Init::Zeros, false).is_err());
        let mut p = ParamPlan::new();
        p.declare("a", &[1], Init::Zeros, true).unwrap();
        assert!(p.declare("a", &[1], Init::Zeros, true).is_err());
    }

    #[test]
    fn init_depends_on_seed_and_name_only() {
        let mut a = ParamStore::<f32>::new(7);
        let mut b = ParamStore::<f32>::new(7);
        b.declare("other", &[3], Init::Normal { std: 1.0 }, false).unwrap();
        let ia = a.declare("w", &[16], Init::Normal { std: 1.0 }, false).unwrap();
        let ib = b.declare("w", &[16], Init::Normal { std: 1.0 }, false).unwrap();
        assert_eq!(a.get(ia).tensor.data(), b.get(ib).tensor.data());
        let mut c = ParamStore::<f32>::new(8);
        let ic = c.declare("w", &[16], Init::Normal { std: 1.0 }, false).unwrap();
        assert_ne!(a.get(ia).tensor.data(), c.get(ic).tensor.data());
    }

    #[test]
    fn frozen_params_ignore_accumulation() {
        let mut s = ParamStore::<f64>::new(0);
        let f = s.declare("frozen", &[2], Init::Ones, true).unwrap();
        let t = s.declare("train", &[2], Init::Ones, false).unwrap();
        let grads = Gradients::from_params(vec![(f, vec![1.0, 1.0]), (t, vec![1.0, 2.0])]);
        s.accumulate(&grads).unwrap();
        assert!(s.get(f).tensor.grad().is_none());
        assert_eq!(s.get(t).tensor.grad().unwrap(), &[1.0, 2.0]);
    }
}
