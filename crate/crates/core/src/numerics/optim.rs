use super::ParamStore;

pub trait Optimizer {
    /// Applies one update from the gradients currently held in `store`.
    fn step(&mut self, store: &mut ParamStore);
}

#[derive(Clone, Debug)]
pub struct Sgd {
    pub lr: f64,
}

impl Optimizer for Sgd {
    fn step(&mut self, store: &mut ParamStore) {
        for p in store.iter_mut() {
            let lr = self.lr;
            p.value
                .data_mut()
                .iter_mut()
                .zip(p.grad.data())
                .for_each(|(w, g)| *w -= lr * g);
        }
    }
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }
}

impl Optimizer for Adam {
    fn step(&mut self, store: &mut ParamStore) {
        if self.m.len() != store.len() {
            self.m = store.iter().map(|(_, p)| vec![0.0; p.value.numel()]).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for ((p, m), v) in store.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let grad = p.grad.data();
            for (i, w) in p.value.data_mut().iter_mut().enumerate() {
                let g = grad[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                *w -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    fn store() -> ParamStore {
        let mut s = ParamStore::new();
        s.add("w", Tensor::vector(vec![0.5, -1.5, 2.0])).unwrap();
        s
    }

    #[test]
    fn adam_with_zero_grads_is_identity() {
        let mut s = store();
        let before = s.value(s.id("w").unwrap()).clone();
        let mut opt = Adam::new(0.1);
        for _ in 0..5 {
            opt.step(&mut s);
        }
        assert_eq!(s.value(s.id("w").unwrap()), &before);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut s = store();
        let id = s.id("w").unwrap();
        s.get_mut(id).grad = Tensor::vector(vec![1.0, -2.0, 0.0]);
        let mut opt = Adam::new(0.01);
        opt.step(&mut s);
        let w = s.value(id).data();
        assert!((w[0] - 0.49).abs() < 1e-7);
        assert!((w[1] - -1.49).abs() < 1e-7);
        assert_eq!(w[2], 2.0);
    }

    #[test]
    fn sgd_follows_negative_gradient() {
        let mut s = store();
        let id = s.id("w").unwrap();
        s.get_mut(id).grad = Tensor::vector(vec![1.0, 1.0, 1.0]);
        Sgd { lr: 0.5 }.step(&mut s);
        assert_eq!(s.value(id).data(), &[0.0, -2.0, 1.5]);
    }
}
