//! Parameter storage, initialization helpers, and the Adam optimizer.

use rand::Rng;

use crate::graph::{Gradients, Graph};
use crate::tensor::Tensor;

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct ParamId(pub(crate) usize);

/// Ordered, named parameter set. Order is construction order and is stable,
/// which checkpointing and the optimizer both rely on.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter name {name}");
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(|n| n.as_str()).zip(self.values.iter())
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    /// Total scalar parameter count.
    pub fn total_len(&self) -> usize {
        self.values.iter().map(|t| t.len()).sum()
    }

    /// FNV-1a digest over the raw parameter bits; used to assert that
    /// evaluation does not mutate the model.
    pub fn digest(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        for t in &self.values {
            for v in t.data() {
                for b in v.to_bits().to_le_bytes() {
                    h ^= b as u64;
                    h = h.wrapping_mul(0x100000001b3);
                }
            }
        }
        h
    }
}

/// Collect backward gradients into a vector indexed by `ParamId`.
pub fn param_grads(graph: &Graph, grads: &mut Gradients, n_params: usize) -> Vec<Option<Tensor>> {
    let mut out: Vec<Option<Tensor>> = (0..n_params).map(|_| None).collect();
    for (pid, var) in graph.bound_params() {
        out[pid] = grads.take(var);
    }
    out
}

/// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) initialization.
pub fn init_linear(rng: &mut impl Rng, rows: usize, cols: usize, fan_in: usize) -> Tensor {
    let mut t = Tensor::zeros(1, rows, cols);
    t.uniform_fill(rng, 1.0 / (fan_in as f64).sqrt());
    t
}

/// Adam with decoupled step-count bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        let m: Vec<Tensor> = store
            .ids()
            .map(|id| {
                let t = store.get(id);
                Tensor::zeros(t.batch(), t.rows(), t.cols())
            })
            .collect();
        let v = m.clone();
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m, v }
    }

    pub fn apply(&mut self, store: &mut ParamStore, grads: &[Option<Tensor>]) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for id in store.ids() {
            let Some(g) = grads[id.0].as_ref() else { continue };
            let m = &mut self.m[id.0];
            let v = &mut self.v[id.0];
            let p = store.get_mut(id);
            for ((pv, mv), (vv, gv)) in p
                .data_mut()
                .iter_mut()
                .zip(m.data_mut())
                .zip(v.data_mut().iter_mut().zip(g.data()))
            {
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                *pv -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn state(&self) -> (u64, &[Tensor], &[Tensor]) {
        (self.step, &self.m, &self.v)
    }

    pub fn restore(&mut self, step: u64, m: Vec<Tensor>, v: Vec<Tensor>) {
        assert_eq!(m.len(), self.m.len(), "optimizer state size mismatch");
        assert_eq!(v.len(), self.v.len(), "optimizer state size mismatch");
        self.step = step;
        self.m = m;
        self.v = v;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_moves_against_gradient() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::scalar(1.0));
        let mut opt = Adam::new(&store, 0.1);
        let grads = vec![Some(Tensor::scalar(2.0))];
        opt.apply(&mut store, &grads);
        assert!(store.get(id).data()[0] < 1.0);
    }

    #[test]
    fn digest_changes_with_values() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::scalar(1.0));
        let d1 = store.digest();
        store.get_mut(ParamId(0)).data_mut()[0] = 1.5;
        assert_ne!(d1, store.digest());
    }
}
