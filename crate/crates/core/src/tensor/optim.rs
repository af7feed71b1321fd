use std::collections::BTreeMap;

use super::{Gradients, Tape, Tensor, Var};
use crate::error::{shape_err, Result};

/// Named parameter tensors, iterated in name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    arrays: BTreeMap<String, Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.arrays.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.arrays.get(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.arrays.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.arrays.remove(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.arrays.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.arrays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.arrays.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.arrays.values().map(Tensor::numel).sum()
    }

    /// Records every parameter as a leaf on `tape`.
    pub fn register(&self, tape: &mut Tape, requires_grad: bool) -> BTreeMap<String, Var> {
        self.arrays
            .iter()
            .map(|(k, v)| (k.clone(), tape.leaf(v.clone(), requires_grad)))
            .collect()
    }

    /// Gathers the gradient of each registered parameter.
    pub fn collect_grads(vars: &BTreeMap<String, Var>, grads: &Gradients) -> ParamSet {
        ParamSet {
            arrays: vars
                .iter()
                .filter_map(|(k, &v)| grads.get(v).map(|g| (k.clone(), g.clone())))
                .collect(),
        }
    }

    pub fn zeros_like(&self) -> ParamSet {
        ParamSet {
            arrays: self
                .arrays
                .iter()
                .map(|(k, v)| (k.clone(), Tensor::zeros(v.shape().to_vec())))
                .collect(),
        }
    }

    /// `self += other`, name by name.
    pub fn add_assign(&mut self, other: &ParamSet) -> Result<()> {
        for (name, g) in &other.arrays {
            let Some(dst) = self.arrays.get_mut(name) else {
                return Err(shape_err("param_add", format!("unknown parameter {name}")));
            };
            if dst.shape() != g.shape() {
                return Err(shape_err("param_add", format!("{name}: {:?} vs {:?}", dst.shape(), g.shape())));
            }
            dst.data_mut().iter_mut().zip(g.data()).for_each(|(d, s)| *d += s);
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: f64) {
        for t in self.arrays.values_mut() {
            t.data_mut().iter_mut().for_each(|v| *v *= factor);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.arrays.values().all(|t| t.data().iter().all(|v| v.is_finite()))
    }
}

/// SGD with heavy-ball momentum and L2 weight decay:
/// `v ← μ·v + g + λ·p`, `p ← p − lr·v`.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: BTreeMap<String, Vec<f64>>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            lr,
            momentum,
            weight_decay,
            velocity: BTreeMap::new(),
        }
    }

    /// Applies one update to every parameter that has a gradient in `grads`.
    pub fn step(&mut self, params: &mut ParamSet, grads: &ParamSet) -> Result<()> {
        for (name, g) in &grads.arrays {
            let Some(p) = params.arrays.get_mut(name) else {
                return Err(shape_err("sgd", format!("gradient for unknown parameter {name}")));
            };
            if p.shape() != g.shape() {
                return Err(shape_err("sgd", format!("{name}: param {:?}, grad {:?}", p.shape(), g.shape())));
            }
            let v = self
                .velocity
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; g.numel()]);
            for ((pv, vv), gv) in p.data_mut().iter_mut().zip(v.iter_mut()).zip(g.data()) {
                *vv = self.momentum * *vv + gv + self.weight_decay * *pv;
                *pv -= self.lr * *vv;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(v: f64) -> ParamSet {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::scalar(v));
        p
    }

    #[test]
    fn zero_lr_leaves_params_unchanged() {
        let mut p = single(1.5);
        Sgd::new(0.0, 0.9, 5e-4).step(&mut p, &single(3.0)).unwrap();
        assert_eq!(p.get("w").unwrap().item().unwrap(), 1.5);
    }

    #[test]
    fn vanilla_step() {
        let mut p = single(1.0);
        Sgd::new(0.1, 0.0, 0.0).step(&mut p, &single(2.0)).unwrap();
        assert!((p.get("w").unwrap().item().unwrap() - 0.8).abs() < 1e-15);
    }

    #[test]
    fn momentum_recurrence_two_steps() {
        let mut p = single(0.0);
        let mut opt = Sgd::new(0.1, 0.9, 0.0);
        opt.step(&mut p, &single(1.0)).unwrap();
        assert!((p.get("w").unwrap().item().unwrap() + 0.1).abs() < 1e-15);
        opt.step(&mut p, &single(1.0)).unwrap();
        assert!((p.get("w").unwrap().item().unwrap() + 0.29).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut p = single(0.0);
        let mut g = ParamSet::new();
        g.insert("w", Tensor::zeros(vec![2]));
        assert!(Sgd::new(0.1, 0.9, 0.0).step(&mut p, &g).is_err());
    }
}
