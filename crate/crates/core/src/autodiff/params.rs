use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{Graph, Real, Tensor, Var};
use crate::error::{Error, Result};

/// Named, ordered collection of network tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet<T> {
    entries: Vec<(String, Tensor<T>)>,
    index: HashMap<String, usize>,
}

impl<T> Default for ParamSet<T> {
    fn default() -> Self {
        Self { entries: Vec::new(), index: HashMap::new() }
    }
}

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) {
        let name = name.into();
        if let Some(&i) = self.index.get(&name) {
            self.entries[i].1 = t;
        } else {
            self.index.insert(name.clone(), self.entries.len());
            self.entries.push((name, t));
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor<T>> {
        self.entries.iter_mut().map(|(_, t)| t)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        ParamSet {
            entries: self.entries.iter().map(|(n, t)| (n.clone(), t.cast())).collect(),
            index: self.index.clone(),
        }
    }

    /// Checks that `other` has exactly the same names and shapes, in order.
    pub fn check_layout(&self, other: &ParamSet<T>) -> Result<()> {
        if self.len() != other.len() {
            return Err(Error::WeightsMismatch(format!("expected {} tensors, found {}", self.len(), other.len())));
        }
        for ((na, ta), (nb, tb)) in self.iter().zip(other.iter()) {
            if na != nb || ta.shape() != tb.shape() {
                return Err(Error::WeightsMismatch(format!(
                    "expected `{na}` {:?}, found `{nb}` {:?}",
                    ta.shape(),
                    tb.shape()
                )));
            }
        }
        Ok(())
    }

    /// Registers every tensor as a graph leaf.
    pub fn bind<'a>(&'a self, g: &mut Graph<T>, trainable: bool) -> Bound<'a, T> {
        let vars = self.entries.iter().map(|(_, t)| g.leaf(t.clone(), trainable)).collect();
        Bound { set: self, vars }
    }
}

/// Graph handles for a bound [`ParamSet`].
pub struct Bound<'a, T> {
    set: &'a ParamSet<T>,
    vars: Vec<Var>,
}

impl<T: Real> Bound<'_, T> {
    /// Panics if `name` is not part of the set; network code only asks for
    /// names from its own validated layout.
    pub fn get(&self, name: &str) -> Var {
        match self.set.index.get(name) {
            Some(&i) => self.vars[i],
            None => panic!("parameter `{name}` missing from bound set"),
        }
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn has(&self, name: &str) -> bool {
        self.set.index.contains_key(name)
    }

    /// Routes `name` to an existing node instead of its bound leaf.
    pub fn rebind(&mut self, name: &str, v: Var) {
        let i = self.set.index[name];
        self.vars[i] = v;
    }
}

/// He-normal kernel `N(0, 2 / fan_in)` for an `O×I×K×K` convolution.
pub fn he_kernel<T: Real, R: Rng>(rng: &mut R, out_c: usize, in_c: usize, k: usize) -> Tensor<T> {
    let fan_in = (in_c * k * k) as f64;
    let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("positive std");
    let data = (0..out_c * in_c * k * k).map(|_| T::lit(normal.sample(rng))).collect();
    Tensor::from_parts(vec![out_c, in_c, k, k], data)
}
