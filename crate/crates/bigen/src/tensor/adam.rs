//! Adam with decoupled weight decay, one moment pair per parameter slot.

use super::{ParamStore, Scalar, Tensor, TensorError};

#[derive(Debug, Clone)]
pub struct AdamState<T> {
    step: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(store: &ParamStore<T>, lr: f64, weight_decay: f64) -> Self {
        AdamState {
            step: 0,
            m: store
                .iter()
                .map(|(_, _, t)| Tensor::zeros(t.shape().to_vec()))
                .collect(),
            v: store
                .iter()
                .map(|(_, _, t)| Tensor::zeros(t.shape().to_vec()))
                .collect(),
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update over every slot. `grads` aligns with store order; `None`
    /// counts as a zero gradient (the slot still sees weight decay).
    pub fn step(
        &mut self,
        store: &mut ParamStore<T>,
        grads: &[Option<Tensor<T>>],
    ) -> Result<(), TensorError> {
        assert_eq!(grads.len(), self.m.len(), "gradient list misaligned");
        self.step += 1;
        let t = self.step as i32;
        let b1 = T::from_f64(self.beta1);
        let b2 = T::from_f64(self.beta2);
        let one = T::one();
        let bc1 = T::from_f64(1.0 - self.beta1.powi(t));
        let bc2 = T::from_f64(1.0 - self.beta2.powi(t));
        let lr = T::from_f64(self.lr);
        let eps = T::from_f64(self.epsilon);
        let decay = T::from_f64(self.lr * self.weight_decay);

        for (i, grad) in grads.iter().enumerate() {
            let param = store.get_mut(super::ParamId(i));
            if let Some(g) = grad {
                if g.shape() != param.shape() {
                    return Err(TensorError::ShapeMismatch {
                        op: "adam_step",
                        lhs: param.shape().to_vec(),
                        rhs: g.shape().to_vec(),
                    });
                }
            }
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let p = param.data_mut();
            for j in 0..p.len() {
                let gj = grad.as_ref().map_or(T::zero(), |g| g.data()[j]);
                m[j] = b1 * m[j] + (one - b1) * gj;
                v[j] = b2 * v[j] + (one - b2) * gj * gj;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                p[j] = p[j] - lr * m_hat / (v_hat.sqrt() + eps);
                p[j] = p[j] - decay * p[j];
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(value: f64) -> (ParamStore<f64>, super::super::ParamId) {
        let mut store = ParamStore::new();
        let id = store.add("p", Tensor::scalar(value));
        (store, id)
    }

    #[test]
    fn zero_grad_zero_decay_leaves_param_unchanged() {
        let (mut store, id) = scalar_store(1.5);
        let mut adam = AdamState::new(&store, 1e-4, 0.0);
        adam.step(&mut store, &[None]).unwrap();
        assert_eq!(store.get(id).data()[0], 1.5);
        assert_eq!(adam.step_count(), 1);
    }

    #[test]
    fn zero_grad_with_decay_only_shrinks() {
        let (mut store, id) = scalar_store(2.0);
        let mut adam = AdamState::new(&store, 1e-4, 5e-5);
        adam.step(&mut store, &[None]).unwrap();
        let expected = 2.0 * (1.0 - 1e-4 * 5e-5);
        assert!((store.get(id).data()[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn positive_grad_decreases_param() {
        let (mut store, id) = scalar_store(1.0);
        let mut adam = AdamState::new(&store, 1e-4, 0.0);
        adam.step(&mut store, &[Some(Tensor::scalar(1.0))]).unwrap();
        assert!(store.get(id).data()[0] < 1.0);
    }

    #[test]
    fn converges_on_quadratic() {
        // Minimize (p - 3)^2 from p = 0 with grad 2(p - 3).
        let (mut store, id) = scalar_store(0.0);
        let mut adam = AdamState::new(&store, 0.1, 0.0);
        for _ in 0..200 {
            let p = store.get(id).data()[0];
            let g = 2.0 * (p - 3.0);
            adam.step(&mut store, &[Some(Tensor::scalar(g))]).unwrap();
        }
        let p = store.get(id).data()[0];
        assert!((p - 3.0).abs() < 0.1, "p = {p}");
    }

    #[test]
    fn shape_mismatch_rejected() {
        let (mut store, _) = scalar_store(0.0);
        let mut adam = AdamState::new(&store, 1e-4, 0.0);
        let bad = Tensor::new(vec![2], vec![1.0, 1.0]).unwrap();
        let err = adam.step(&mut store, &[Some(bad)]).unwrap_err();
        assert!(matches!(err, TensorError::ShapeMismatch { .. }));
    }
}
