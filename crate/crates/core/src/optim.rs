use crate::params::Params;

/// Adam optimizer over a [`Params`] set.
///
/// Moment buffers are keyed by parameter slot and allocated lazily on the
/// first step that delivers a gradient for that slot. Parameters without a
/// gradient in a step are left untouched.
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    m: Vec<Option<Vec<f64>>>,
    v: Vec<Option<Vec<f64>>>,
    step: u64,
}

impl Adam {
    pub fn new(learning_rate: f64) -> Self {
        Adam {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            m: Vec::new(),
            v: Vec::new(),
            step: 0,
        }
    }

    /// Apply one update from per-slot gradients (as produced by
    /// `Tape::param_grads`). Non-trainable entries are skipped.
    pub fn step(&mut self, params: &mut Params, grads: &[Option<Vec<f64>>]) {
        self.m.resize(params.len(), None);
        self.v.resize(params.len(), None);
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);

        let slots: Vec<_> = params
            .iter()
            .filter(|(_, e)| e.trainable)
            .map(|(pid, _)| pid)
            .collect();
        for pid in slots {
            let id = pid.index();
            let Some(grad) = grads.get(id).and_then(|g| g.as_ref()) else {
                continue;
            };
            let value = params.value_mut(pid);
            let n = value.len();
            let m = self.m[id].get_or_insert_with(|| vec![0.0; n]);
            let v = self.v[id].get_or_insert_with(|| vec![0.0; n]);
            let data = value.data_mut();
            for i in 0..n {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * grad[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                data[i] -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn zero_learning_rate_leaves_params_bit_identical() {
        let mut params = Params::new();
        params.insert("w", Tensor::from_vec(vec![0.5, -1.5]), true).unwrap();
        let before = params.value(params.id("w").unwrap()).clone();
        let mut adam = Adam::new(0.0);
        for _ in 0..10 {
            adam.step(&mut params, &[Some(vec![1.0, -2.0])]);
        }
        assert_eq!(params.value(params.id("w").unwrap()), &before);
    }

    #[test]
    fn descends_a_quadratic() {
        // minimize (w - 3)^2; gradient 2(w - 3)
        let mut params = Params::new();
        let id = params.insert("w", Tensor::from_vec(vec![0.0]), true).unwrap();
        let mut adam = Adam::new(0.1);
        for _ in 0..500 {
            let w = params.value(id).data()[0];
            adam.step(&mut params, &[Some(vec![2.0 * (w - 3.0)])]);
        }
        let w = params.value(id).data()[0];
        assert!((w - 3.0).abs() < 1e-2, "w = {w}");
    }

    #[test]
    fn skips_non_trainable_entries() {
        let mut params = Params::new();
        let id = params.insert("buf", Tensor::from_vec(vec![7.0]), false).unwrap();
        let mut adam = Adam::new(1.0);
        adam.step(&mut params, &[Some(vec![100.0])]);
        assert_eq!(params.value(id).data(), &[7.0]);
    }
}
