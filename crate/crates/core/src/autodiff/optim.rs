use serde::{Deserialize, Serialize};

use super::{ParamId, ParamStore, Tensor};

/// Adam moments for every parameter of a store.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros = |id| {
            let t: &Tensor = store.value(id);
            Tensor::zeros(t.rows, t.cols)
        };
        AdamState {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: store.ids().map(zeros).collect(),
            v: store.ids().map(zeros).collect(),
        }
    }

    /// Adds `l2 * param` to the gradients, then applies one bias-corrected
    /// Adam update to the selected parameters (all when `subset` is `None`).
    /// Gradients are left in place.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64, l2: f64, subset: Option<&[ParamId]>) {
        if l2 != 0.0 {
            apply_l2(store, l2, subset);
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        let ids: Vec<ParamId> = match subset {
            Some(s) => s.to_vec(),
            None => store.ids().collect(),
        };
        for id in ids {
            let g = store.grad(id).data.clone();
            let (m, v) = (&mut self.m[id.0], &mut self.v[id.0]);
            let w = store.value_mut(id);
            for (((wi, gi), mi), vi) in w.data.iter_mut().zip(&g).zip(m.data.iter_mut()).zip(v.data.iter_mut()) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let mhat = *mi / c1;
                let vhat = *vi / c2;
                *wi -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

fn selected(store: &ParamStore, subset: Option<&[ParamId]>) -> Vec<ParamId> {
    match subset {
        Some(s) => s.to_vec(),
        None => store.ids().collect(),
    }
}

/// `grad += coeff * param` for the selected parameters.
pub fn apply_l2(store: &mut ParamStore, coeff: f64, subset: Option<&[ParamId]>) {
    for id in selected(store, subset) {
        let w = store.value(id).data.clone();
        for (g, x) in store.grad_mut(id).data.iter_mut().zip(w) {
            *g += coeff * x;
        }
    }
}

pub fn global_grad_norm(store: &ParamStore, subset: Option<&[ParamId]>) -> f64 {
    selected(store, subset).into_iter().map(|id| store.grad(id).norm_sq()).sum::<f64>().sqrt()
}

/// Rescales the selected gradients so their joint L2 norm is at most
/// `max_norm`. Returns the norms before and after.
pub fn clip_global_norm(store: &mut ParamStore, max_norm: f64, subset: Option<&[ParamId]>) -> (f64, f64) {
    let norm = global_grad_norm(store, subset);
    if norm <= max_norm || norm == 0.0 {
        return (norm, norm);
    }
    let s = max_norm / norm;
    for id in selected(store, subset) {
        store.grad_mut(id).scale_assign(s);
    }
    (norm, global_grad_norm(store, subset))
}
