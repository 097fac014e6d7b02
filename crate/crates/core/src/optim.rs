use std::collections::HashMap;

use crate::error::Result;
use crate::graph::Gradients;
use crate::nn::{ParamId, ParamStore};
use crate::tensor::{Element, Tensor};

/// Adaptive moment estimation without weight decay.
#[derive(Debug, Clone)]
pub struct Adam<T: Element = f32> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    state: HashMap<ParamId, (Tensor<T>, Tensor<T>, u64)>,
}

impl<T: Element> Adam<T> {
    pub fn new(beta1: f64, beta2: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps: 1e-8,
            state: HashMap::new(),
        }
    }

    /// Updates every trainable parameter that has a gradient. Parameters
    /// without a gradient (frozen, unused, or buffers) are not touched.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &Gradients<T>, lr: f64) -> Result<usize> {
        let mut ids: Vec<ParamId> = grads.params().map(|(id, _)| id).filter(|&id| store.is_trainable(id)).collect();
        ids.sort();
        for &id in &ids {
            let g = grads.param(id).expect("listed above");
            let (m, v, t) = self
                .state
                .entry(id)
                .or_insert_with(|| (Tensor::zeros(g.shape()), Tensor::zeros(g.shape()), 0));
            *t += 1;
            let (b1, b2) = (self.beta1, self.beta2);
            let c1 = 1.0 - b1.powi(*t as i32);
            let c2 = 1.0 - b2.powi(*t as i32);
            let step = lr * c2.sqrt() / c1;
            let eps = self.eps * c2.sqrt();
            let p = store.value_mut(id);
            for (((pv, mv), vv), &gv) in p
                .data_mut()
                .iter_mut()
                .zip(m.data_mut())
                .zip(v.data_mut())
                .zip(g.data())
            {
                let gf = gv.as_f64();
                let mf = b1 * mv.as_f64() + (1.0 - b1) * gf;
                let vf = b2 * vv.as_f64() + (1.0 - b2) * gf * gf;
                *mv = T::from_f64_lossy(mf);
                *vv = T::from_f64_lossy(vf);
                *pv = T::from_f64_lossy(pv.as_f64() - step * mf / (vf.sqrt() + eps));
            }
        }
        Ok(ids.len())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Graph;

    #[test]
    fn minimizes_a_quadratic() {
        let mut ps = ParamStore::<f64>::new();
        let id = ps.add_weight("x", Tensor::full(&[3], 5.0));
        let mut opt = Adam::new(0.9, 0.999);
        for _ in 0..500 {
            let mut g = Graph::new();
            let x = g.param(&ps, id);
            let sq = g.unary(x, crate::graph::Unary::Square);
            let loss = g.sum(sq);
            let grads = g.backward(loss).unwrap();
            opt.step(&mut ps, &grads, 0.05).unwrap();
        }
        assert!(ps.value(id).data().iter().all(|v| v.abs() < 1e-2));
    }

    #[test]
    fn frozen_parameters_are_untouched() {
        let mut ps = ParamStore::<f64>::new();
        let a = ps.add_weight("a", Tensor::full(&[2], 1.0));
        let b = ps.add_weight("b", Tensor::full(&[2], 1.0));
        ps.set_trainable(b, false);
        let mut g = Graph::new();
        let (va, vb) = (g.param(&ps, a), g.param(&ps, b));
        let s = g.add(va, vb).unwrap();
        let loss = g.sum(s);
        let grads = g.backward(loss).unwrap();
        assert!(grads.param(b).is_none());
        Adam::new(0.9, 0.999).step(&mut ps, &grads, 0.1).unwrap();
        assert_eq!(ps.value(b).data(), &[1.0, 1.0]);
        assert_ne!(ps.value(a).data(), &[1.0, 1.0]);
    }
}
