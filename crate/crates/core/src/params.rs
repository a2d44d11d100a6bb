//! Named parameter arrays with SGD-momentum updates.
//!
//! Parameters live in a sorted map so every iteration order (staging,
//! updates, checkpointing) is deterministic.

use crate::tape::{Gradients, Tape, Var};
use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

#[derive(Clone, Default)]
pub struct ParamStore {
    params: BTreeMap<String, ArrayD<f64>>,
    velocity: BTreeMap<String, ArrayD<f64>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Creates `name` with uniform values in `[-scale, scale)` if absent.
    /// Draws from `rng` only on creation, so build order fixes the draws.
    pub fn ensure_uniform(
        &mut self,
        name: &str,
        shape: &[usize],
        scale: f64,
        rng: &mut ChaCha8Rng,
    ) {
        if self.params.contains_key(name) {
            return;
        }
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-scale..scale)).collect();
        self.params
            .insert(name.to_string(), ArrayD::from_shape_vec(IxDyn(shape), data).unwrap());
    }

    pub fn ensure_zeros(&mut self, name: &str, shape: &[usize]) {
        self.params
            .entry(name.to_string())
            .or_insert_with(|| ArrayD::zeros(IxDyn(shape)));
    }

    pub fn get(&self, name: &str) -> &ArrayD<f64> {
        self.params
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn insert(&mut self, name: String, data: ArrayD<f64>) {
        self.params.insert(name, data);
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ArrayD<f64>)> {
        self.params.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn n_scalars(&self) -> usize {
        self.params.values().map(|a| a.len()).sum()
    }

    /// Puts every parameter on the tape as a leaf; name-to-var map returned.
    pub fn stage(&self, tape: &mut Tape) -> Staged {
        let mut vars = BTreeMap::new();
        for (name, data) in &self.params {
            vars.insert(name.clone(), tape.leaf(data.clone()));
        }
        Staged { vars }
    }

    /// One SGD step with momentum and decoupled-from-nothing weight decay
    /// folded into the gradient: g <- g + wd*p; v <- mu*v + g; p <- p - lr*v.
    /// Parameters missing from `grads` are left untouched.
    pub fn sgd_step(
        &mut self,
        grads: &BTreeMap<String, ArrayD<f64>>,
        lr: f64,
        momentum: f64,
        weight_decay: f64,
    ) {
        for (name, p) in self.params.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            let v = self
                .velocity
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(p.raw_dim()));
            let ps = p.as_slice_mut().unwrap();
            let vs = v.as_slice_mut().unwrap();
            let gs = g.as_slice().unwrap();
            for i in 0..ps.len() {
                let grad = gs[i] + weight_decay * ps[i];
                vs[i] = momentum * vs[i] + grad;
                ps[i] -= lr * vs[i];
            }
        }
    }

    /// Momentum buffers that exist so far (only updated parameters have one).
    pub fn velocity_iter(&self) -> impl Iterator<Item = (&String, &ArrayD<f64>)> {
        self.velocity.iter()
    }

    pub fn set_velocity(&mut self, name: String, data: ArrayD<f64>) {
        self.velocity.insert(name, data);
    }

    /// Largest absolute parameter value, for divergence diagnostics.
    pub fn max_abs(&self) -> f64 {
        self.params
            .values()
            .flat_map(|a| a.iter())
            .fold(0.0f64, |m, v| m.max(v.abs()))
    }
}

/// Tape handles for one staging of the store.
pub struct Staged {
    vars: BTreeMap<String, Var>,
}

impl Staged {
    pub fn var(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name} was not staged"))
    }

    /// Adds this staging's gradients into a running per-name sum.
    pub fn accumulate_into(
        &self,
        grads: &mut Gradients,
        into: &mut BTreeMap<String, ArrayD<f64>>,
    ) {
        for (name, &var) in &self.vars {
            if let Some(g) = grads.take(var) {
                match into.get_mut(name) {
                    Some(acc) => *acc += &g,
                    None => {
                        into.insert(name.clone(), g);
                    }
                }
            }
        }
    }
}
