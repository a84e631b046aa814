use crate::autodiff::ParamStore;
use crate::{Error, Result};

/// Moment buffers of the Adam optimizer.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|(_, p)| vec![0.0; p.value.len()]).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Applies one bias-corrected update from the gradients stored in
    /// `params`. Fails without touching anything if a gradient is not finite.
    pub fn step(&mut self, params: &mut ParamStore, lr: f64) -> Result<()> {
        if let Some(p) = params.iter().find(|(_, p)| p.grad.iter().any(|g| !g.is_finite())) {
            return Err(Error::Numerical(format!("non-finite gradient in `{}`", p.1.name)));
        }
        if self.m.len() != params.len() {
            return Err(Error::shape("optimizer state does not match the parameters"));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let data = p.value.data_mut();
            for i in 0..data.len() {
                let g = p.grad[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                data[i] -= lr * mh / (vh.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;

    fn store(x: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("x", Tensor::scalar(x)).unwrap();
        s
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut s = store(1.25);
        let mut adam = AdamState::new(&s);
        for _ in 0..5 {
            adam.step(&mut s, 0.1).unwrap();
        }
        assert_eq!(s.iter().next().unwrap().1.value.data()[0], 1.25);
        assert_eq!(adam.step, 5);
    }

    #[test]
    fn first_step_has_magnitude_lr() {
        for g in [3.0, -0.01, 250.0] {
            let mut s = store(0.0);
            let mut adam = AdamState::new(&s);
            s.iter_mut().next().unwrap().grad[0] = g;
            adam.step(&mut s, 0.05).unwrap();
            let x = s.iter().next().unwrap().1.value.data()[0];
            assert!((x + 0.05 * f64::signum(g)).abs() < 1e-7);
        }
    }

    /// Scalar reference recurrence for (x - 3)^2.
    fn oracle(steps: usize, lr: f64) -> f64 {
        let (mut x, mut m, mut v) = (0.0f64, 0.0f64, 0.0f64);
        for t in 1..=steps {
            let g = 2.0 * (x - 3.0);
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t as i32));
            let vh = v / (1.0 - 0.999f64.powi(t as i32));
            x -= lr * mh / (vh.sqrt() + 1e-8);
        }
        x
    }

    #[test]
    fn quadratic_converges_like_reference() {
        let mut s = store(0.0);
        let mut adam = AdamState::new(&s);
        for _ in 0..2000 {
            let p = s.iter_mut().next().unwrap();
            p.grad[0] = 2.0 * (p.value.data()[0] - 3.0);
            adam.step(&mut s, 0.05).unwrap();
        }
        let x = s.iter().next().unwrap().1.value.data()[0];
        assert!((x - 3.0).abs() < 1e-3);
        assert_eq!(x, oracle(2000, 0.05));
    }

    #[test]
    fn nan_gradient_is_numerical_error() {
        let mut s = store(0.0);
        let mut adam = AdamState::new(&s);
        s.iter_mut().next().unwrap().grad[0] = f64::NAN;
        assert!(matches!(adam.step(&mut s, 0.1), Err(Error::Numerical(_))));
        assert_eq!(adam.step, 0);
    }
}
