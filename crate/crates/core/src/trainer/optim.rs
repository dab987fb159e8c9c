use super::TrainConfig;
use crate::tensor::{ParamStore, Tensor};

/// Adam with bias-corrected moments, one moment pair per parameter.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(cfg: &TrainConfig, store: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = store.iter().map(|(_, p)| Tensor::zeros(p.value.shape().clone())).collect();
        Adam {
            lr: cfg.learning_rate,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    /// Applies one update from the gradients currently held by `store`.
    pub fn step(&mut self, store: &mut ParamStore) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for ((p, m), v) in store.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let grads = p.grad.data();
            let values = p.value.data_mut();
            for (((x, &g), m), v) in values
                .iter_mut()
                .zip(grads)
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let update = self.lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
                *x -= update;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::tensor::{Init, Shape};

    fn store() -> ParamStore {
        let mut s = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        s.register("w", Shape::new(vec![3]).unwrap(), Init::Uniform { bound: 1.0 }, &mut rng)
            .unwrap();
        s
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut s = store();
        let before = s.value(s.id("w").unwrap()).clone();
        let mut adam = Adam::new(&TrainConfig::default(), &s);
        adam.step(&mut s);
        let after = s.value(s.id("w").unwrap());
        for (a, b) in before.data().iter().zip(after.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut s = store();
        let id = s.id("w").unwrap();
        let before = s.value(id).clone();
        s.get_mut(id).grad = Tensor::from_vec(&[3], vec![2.0, -0.5, 1e-3]).unwrap();
        let cfg = TrainConfig {
            learning_rate: 0.1,
            ..TrainConfig::default()
        };
        let mut adam = Adam::new(&cfg, &s);
        adam.step(&mut s);
        let expect = [-0.1, 0.1, -0.1];
        for ((a, b), e) in before.data().iter().zip(s.value(id).data()).zip(expect) {
            assert!((b - a - e).abs() < 1e-6);
        }
        assert_eq!(adam.steps(), 1);
    }
}
