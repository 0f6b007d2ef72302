use std::collections::HashMap;

use ndarray::{Array2, Zip};

use crate::nn::{ParamId, ParamStore};
use crate::tape::Gradients;

/// Scale every gradient so the global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut Gradients, ids: &[ParamId], max_norm: f64) -> f64 {
    let norm = ids
        .iter()
        .filter_map(|&id| grads.param(id))
        .map(|g| g.iter().map(|x| x * x).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let k = max_norm / norm;
        for &id in ids {
            if let Some(g) = grads.param_mut(id) {
                g.mapv_inplace(|x| x * k);
            }
        }
    }
    norm
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: i32,
    moments: HashMap<ParamId, (Array2<f64>, Array2<f64>)>,
}

impl Default for Adam {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            moments: HashMap::new(),
        }
    }
}

impl Adam {
    pub fn new() -> Self {
        Self::default()
    }

    /// One update of every parameter in `store`; missing gradients count as zero.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients, lr: f64) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        let ids: Vec<ParamId> = store.ids().collect();
        for id in ids {
            let zero;
            let g = match grads.param(id) {
                Some(g) => g,
                None if self.moments.contains_key(&id) => {
                    zero = Array2::zeros(store.value(id).raw_dim());
                    &zero
                }
                None => continue,
            };
            let value = store.value(id);
            let (m, v) = self
                .moments
                .entry(id)
                .or_insert_with(|| (Array2::zeros(value.raw_dim()), Array2::zeros(value.raw_dim())));
            let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
            Zip::from(&mut *m).and(&mut *v).and(g).for_each(|m, v, &g| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
            });
            Zip::from(store.value_mut(id)).and(&*m).and(&*v).for_each(|p, &m, &v| {
                *p -= lr * (m / c1) / ((v / c2).sqrt() + eps);
            });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::Tape;
    use ndarray::array;

    #[test]
    fn clipping_caps_the_norm() {
        let mut store = ParamStore::new();
        let a = store.add("a", array![[3.0, 0.0]]);
        let b = store.add("b", array![[0.0, 4.0]]);
        let mut t = Tape::new();
        let pa = t.param(&store, a);
        let pb = t.param(&store, b);
        let x = t.add(pa, pb);
        let sq = t.mul(x, x);
        let l = t.sum(sq);
        let mut g = t.backward(l);
        let before = clip_global_norm(&mut g, &[a, b], 1.0);
        assert!((before - 200f64.sqrt()).abs() < 1e-12);
        let after = clip_global_norm(&mut g, &[a, b], 1.0);
        assert!(after <= 1.0 + 1e-9);
    }

    #[test]
    fn adam_minimises_a_quadratic() {
        let mut store = ParamStore::new();
        let w = store.add("w", array![[5.0, -3.0]]);
        let mut opt = Adam::new();
        for _ in 0..2000 {
            let mut t = Tape::new();
            let p = t.param(&store, w);
            let sq = t.mul(p, p);
            let l = t.sum(sq);
            let g = t.backward(l);
            opt.step(&mut store, &g, 0.05);
        }
        assert!(store.value(w).iter().all(|x| x.abs() < 1e-2));
    }

    #[test]
    fn untouched_parameters_stay_put() {
        let mut store = ParamStore::new();
        let w = store.add("w", array![[1.0]]);
        let idle = store.add("idle", array![[0.1]]);
        let mut opt = Adam::new();
        for _ in 0..10 {
            let mut t = Tape::new();
            let p = t.param(&store, w);
            let l = t.sum(p);
            let g = t.backward(l);
            opt.step(&mut store, &g, 0.1);
        }
        assert_eq!(store.value(idle)[[0, 0]], 0.1);
    }
}
