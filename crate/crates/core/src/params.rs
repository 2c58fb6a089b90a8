//! Named parameter sets, graph binding and the Adam optimizer.

use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::autograd::{Gradients, Graph, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Ordered collection of named `f32` parameter arrays.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    entries: Vec<(String, Tensor<f32>)>,
    index: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<f32>) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::InvalidInput(format!("duplicate parameter name {name}")));
        }
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push((name, value));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<f32>> {
        self.index.get(name).map(|&i| &mut self.entries[i].1)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<f32>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
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

    /// Total number of scalar weights.
    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    /// Subset of parameters whose names satisfy `keep`, in order.
    pub fn filter(&self, keep: impl Fn(&str) -> bool) -> ParamSet {
        let mut out = ParamSet::new();
        for (n, t) in self.iter().filter(|(n, _)| keep(n)) {
            out.insert(n, t.clone()).expect("names are unique");
        }
        out
    }

    /// Bit-level equality of every parameter.
    pub fn bits_eq(&self, other: &ParamSet) -> bool {
        self.len() == other.len()
            && self.iter().zip(other.iter()).all(|((na, a), (nb, b))| {
                na == nb
                    && a.shape() == b.shape()
                    && a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }

    /// Places every parameter in `graph`. Names for which `trainable`
    /// returns true become gradient-carrying leaves; the rest are constants.
    pub fn bind<'g, T: Scalar>(&self, graph: &'g Graph<T>, trainable: impl Fn(&str) -> bool) -> Bound<'g, T> {
        let mut vars = HashMap::with_capacity(self.len());
        let mut order = Vec::with_capacity(self.len());
        for (name, t) in self.iter() {
            let train = trainable(name);
            let v = graph.leaf(t.cast::<T>(), train);
            vars.insert(name.to_string(), v);
            if train {
                order.push(name.to_string());
            }
        }
        Bound { vars, trainable: order }
    }
}

/// A [`ParamSet`] placed in a graph.
pub struct Bound<'g, T> {
    vars: HashMap<String, Var<'g, T>>,
    trainable: Vec<String>,
}

impl<'g, T: Scalar> Bound<'g, T> {
    pub fn get(&self, name: &str) -> Var<'g, T> {
        *self.vars.get(name).unwrap_or_else(|| panic!("parameter {name} not bound"))
    }

    pub fn try_get(&self, name: &str) -> Option<Var<'g, T>> {
        self.vars.get(name).copied()
    }

    /// Gradients of the trainable parameters, zeros where unused.
    pub fn gradients(&self, grads: &Gradients<T>) -> Vec<(String, Tensor<T>)> {
        self.trainable.iter().map(|n| (n.clone(), grads.get_or_zeros(self.vars[n]))).collect()
    }
}

/// Fan-in scaled uniform initializer, `U(-sqrt(6 / fan_in), sqrt(6 / fan_in))`.
pub fn he_uniform(rng: &mut impl Rng, shape: &[usize], fan_in: usize) -> Tensor<f32> {
    let bound = (6.0 / fan_in as f64).sqrt() as f32;
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| dist.sample(rng)).collect())
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first: HashMap<String, Vec<f32>>,
    second: HashMap<String, Vec<f32>>,
}

impl Default for Adam {
    fn default() -> Self {
        Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, first: HashMap::new(), second: HashMap::new() }
    }
}

impl Adam {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn update(&mut self, params: &mut ParamSet, grads: &[(String, Tensor<f32>)], lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        for (name, g) in grads {
            let p = params.get_mut(name).unwrap_or_else(|| panic!("gradient for unknown parameter {name}"));
            let m = self.first.entry(name.clone()).or_insert_with(|| vec![0.0; g.numel()]);
            let v = self.second.entry(name.clone()).or_insert_with(|| vec![0.0; g.numel()]);
            for (((w, &gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mv = b1 * *mv + (1.0 - b1) * gv;
                *vv = b2 * *vv + (1.0 - b2) * gv * gv;
                let mhat = *mv as f64 / c1;
                let vhat = *vv as f64 / c2;
                *w -= (lr * mhat / (vhat.sqrt() + self.eps)) as f32;
            }
        }
    }

    /// Optimizer moments as a parameter set (`m/<name>`, `v/<name>`),
    /// plus the step counter, for checkpointing.
    pub fn state(&self) -> (ParamSet, u64) {
        let mut names: Vec<&String> = self.first.keys().collect();
        names.sort();
        let mut set = ParamSet::new();
        for n in names {
            let m = &self.first[n];
            let v = &self.second[n];
            set.insert(format!("m/{n}"), Tensor::new(vec![m.len()], m.clone())).expect("unique");
            set.insert(format!("v/{n}"), Tensor::new(vec![v.len()], v.clone())).expect("unique");
        }
        (set, self.step)
    }

    pub fn from_state(state: &ParamSet, step: u64) -> Self {
        let mut adam = Adam { step, ..Adam::default() };
        for (name, t) in state.iter() {
            if let Some(n) = name.strip_prefix("m/") {
                adam.first.insert(n.to_string(), t.data().to_vec());
            } else if let Some(n) = name.strip_prefix("v/") {
                adam.second.insert(n.to_string(), t.data().to_vec());
            }
        }
        adam
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut p = ParamSet::new();
        p.insert("a", Tensor::zeros(&[1])).unwrap();
        assert!(p.insert("a", Tensor::zeros(&[1])).is_err());
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::new(vec![2], vec![1.0, -1.0])).unwrap();
        let mut adam = Adam::new();
        let grads = vec![("w".to_string(), Tensor::new(vec![2], vec![0.5, -3.0]))];
        adam.update(&mut p, &grads, 0.1);
        let w = p.get("w").unwrap().data();
        assert!((w[0] - 0.9).abs() < 1e-6);
        assert!((w[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn adam_state_round_trip() {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::new(vec![1], vec![1.0])).unwrap();
        let mut adam = Adam::new();
        let grads = vec![("w".to_string(), Tensor::new(vec![1], vec![0.5]))];
        adam.update(&mut p, &grads, 0.1);
        let (state, step) = adam.state();
        let mut restored = Adam::from_state(&state, step);
        let mut q = p.clone();
        adam.update(&mut p, &grads, 0.1);
        restored.update(&mut q, &grads, 0.1);
        assert!(p.bits_eq(&q));
    }
}
