//! Adam optimizer over flat parameter lists.

use crate::Element;
use ndarray::ArrayD;

/// Adam with bias correction, one moment pair per parameter tensor.
pub struct Adam<F: Element> {
    lr: F,
    beta1: F,
    beta2: F,
    eps: F,
    t: i32,
    m: Vec<ArrayD<F>>,
    v: Vec<ArrayD<F>>,
}

impl<F: Element> Adam<F> {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr: F::from_f64(lr),
            beta1: F::from_f64(0.9),
            beta2: F::from_f64(0.999),
            eps: F::from_f64(1e-8),
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = F::from_f64(lr);
    }

    pub fn step(&mut self, params: &mut [ArrayD<F>], grads: &[ArrayD<F>]) {
        assert_eq!(params.len(), grads.len());
        if self.m.is_empty() {
            self.m = params.iter().map(|p| ArrayD::zeros(p.raw_dim())).collect();
            self.v = params.iter().map(|p| ArrayD::zeros(p.raw_dim())).collect();
        }
        self.t += 1;
        let bc1 = F::one() - self.beta1.powi(self.t);
        let bc2 = F::one() - self.beta2.powi(self.t);
        let one = F::one();
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads.iter())
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            assert_eq!(p.shape(), g.shape(), "param/grad shape mismatch");
            let ps = p.as_slice_mut().unwrap();
            let gs = g.as_slice().expect("grads must be standard layout");
            let ms = m.as_slice_mut().unwrap();
            let vs = v.as_slice_mut().unwrap();
            for i in 0..ps.len() {
                ms[i] = self.beta1 * ms[i] + (one - self.beta1) * gs[i];
                vs[i] = self.beta2 * vs[i] + (one - self.beta2) * gs[i] * gs[i];
                let mhat = ms[i] / bc1;
                let vhat = vs[i] / bc2;
                ps[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;

    #[test]
    fn quadratic_converges() {
        // minimize (x - 3)^2
        let mut p = vec![ArrayD::from_elem(IxDyn(&[1]), 0.0f64)];
        let mut opt = Adam::new(0.1);
        for _ in 0..500 {
            let g = vec![p[0].mapv(|x| 2.0 * (x - 3.0))];
            opt.step(&mut p, &g);
        }
        assert!((p[0][[0]] - 3.0).abs() < 1e-3);
    }
}
