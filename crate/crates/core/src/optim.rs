//! Adam with per-parameter moment buffers.

use crate::params::{ParamGrads, ParamId, ParamStore};
use crate::tensor::Matrix;

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub(crate) first: Vec<Option<Matrix>>,
    pub(crate) second: Vec<Option<Matrix>>,
    pub(crate) steps: Vec<u64>,
}

impl Adam {
    pub fn new(num_params: usize) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            first: vec![None; num_params],
            second: vec![None; num_params],
            steps: vec![0; num_params],
        }
    }

    /// Applies one update to every parameter that received a gradient.
    /// Parameters without a gradient keep both their values and their moments.
    pub fn step(&mut self, params: &mut ParamStore, grads: &ParamGrads, lr: f64) {
        let ids: Vec<ParamId> = grads.touched().collect();
        for id in ids {
            let g = grads.get(id).expect("touched gradient");
            let i = id.index();
            let m = self.first[i].get_or_insert_with(|| Matrix::zeros(g.rows(), g.cols()));
            let v = self.second[i].get_or_insert_with(|| Matrix::zeros(g.rows(), g.cols()));
            self.steps[i] += 1;
            let t = self.steps[i] as i32;
            let bc1 = 1.0 - self.beta1.powi(t);
            let bc2 = 1.0 - self.beta2.powi(t);
            let p = params.get_mut(id);
            for (((pv, &gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut())
                .zip(v.data_mut().iter_mut())
            {
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
                let m_hat = *mv / bc1;
                let v_hat = *vv / bc2;
                *pv -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }

    pub fn moments(&self, id: ParamId) -> (Option<&Matrix>, Option<&Matrix>, u64) {
        let i = id.index();
        (self.first[i].as_ref(), self.second[i].as_ref(), self.steps[i])
    }

    pub fn set_moments(&mut self, id: ParamId, first: Matrix, second: Matrix, steps: u64) {
        let i = id.index();
        self.first[i] = Some(first);
        self.second[i] = Some(second);
        self.steps[i] = steps;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_descends_a_quadratic() {
        let mut store = ParamStore::new();
        let id = store.add("x", Matrix::scalar(3.0));
        let mut opt = Adam::new(store.len());
        for _ in 0..2000 {
            let x = store.get(id).item();
            let mut grads = ParamGrads::new(1);
            grads.accumulate(id, &Matrix::scalar(2.0 * x));
            opt.step(&mut store, &grads, 0.01);
        }
        assert!(store.get(id).item().abs() < 1e-2);
    }

    #[test]
    fn untouched_parameters_are_left_alone() {
        let mut store = ParamStore::new();
        let a = store.add("a", Matrix::scalar(1.0));
        let b = store.add("b", Matrix::scalar(1.0));
        let mut opt = Adam::new(store.len());
        let mut grads = ParamGrads::new(2);
        grads.accumulate(a, &Matrix::scalar(1.0));
        opt.step(&mut store, &grads, 0.1);
        assert_ne!(store.get(a).item(), 1.0);
        assert_eq!(store.get(b).item(), 1.0);
        assert_eq!(opt.moments(b).2, 0);
    }
}
