use super::Params;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

fn grads_of<S: Scalar, M: Params<S>>(grads: &M) -> Vec<Tensor<S>> {
    let mut out = Vec::new();
    grads.visit("", &mut |_, t| out.push(t.clone()));
    out
}

/// SGD with (optionally Nesterov) momentum and coupled L2 weight decay.
#[derive(Clone, Debug)]
pub struct Sgd<S> {
    pub momentum: f64,
    pub nesterov: bool,
    pub weight_decay: f64,
    velocity: Vec<Tensor<S>>,
}

impl<S: Scalar> Sgd<S> {
    pub fn new(momentum: f64, nesterov: bool, weight_decay: f64) -> Self {
        Self {
            momentum,
            nesterov,
            weight_decay,
            velocity: Vec::new(),
        }
    }

    pub fn step<M: Params<S>>(&mut self, params: &mut M, grads: &M, lr: f64) {
        let grads = grads_of(grads);
        if self.velocity.is_empty() {
            self.velocity = grads.iter().map(|g| Tensor::zeros(g.shape())).collect();
        }
        let (mu, wd, lr) = (S::lit(self.momentum), S::lit(self.weight_decay), S::lit(lr));
        let nesterov = self.nesterov;
        let mut i = 0;
        let velocity = &mut self.velocity;
        params.visit_mut("", &mut |_, w| {
            let g = &grads[i];
            let v = &mut velocity[i];
            for ((wj, &gj), vj) in w.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                let d = gj + wd * *wj;
                *vj = mu * *vj + d;
                let update = if nesterov { d + mu * *vj } else { *vj };
                *wj -= lr * update;
            }
            i += 1;
        });
    }
}

#[derive(Clone, Debug)]
pub struct Adam<S> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: Vec<Tensor<S>>,
    v: Vec<Tensor<S>>,
}

impl<S: Scalar> Adam<S> {
    pub fn new(beta1: f64, beta2: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step<M: Params<S>>(&mut self, params: &mut M, grads: &M, lr: f64) {
        let grads = grads_of(grads);
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| Tensor::zeros(g.shape())).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let (b1, b2) = (S::lit(self.beta1), S::lit(self.beta2));
        let c1 = S::lit(1.0 - self.beta1.powi(self.t));
        let c2 = S::lit(1.0 - self.beta2.powi(self.t));
        let (lr, eps) = (S::lit(lr), S::lit(self.eps));
        let (ms, vs) = (&mut self.m, &mut self.v);
        let mut i = 0;
        params.visit_mut("", &mut |_, w| {
            let g = grads[i].data();
            let m = ms[i].data_mut();
            let v = vs[i].data_mut();
            for j in 0..g.len() {
                m[j] = b1 * m[j] + (S::one() - b1) * g[j];
                v[j] = b2 * v[j] + (S::one() - b2) * g[j] * g[j];
                let mhat = m[j] / c1;
                let vhat = v[j] / c2;
                w.data_mut()[j] -= lr * mhat / (vhat.sqrt() + eps);
            }
            i += 1;
        });
    }
}

/// Piecewise-constant schedule: `initial * decay^(milestones passed)`.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiStepLr {
    pub initial: f64,
    pub milestones: Vec<usize>,
    pub decay: f64,
}

impl MultiStepLr {
    /// Milestones given as fractions of `total_steps`.
    pub fn from_fractions(initial: f64, fractions: &[f64], decay: f64, total_steps: usize) -> Self {
        let mut milestones: Vec<usize> = fractions
            .iter()
            .map(|f| (f * total_steps as f64).round() as usize)
            .collect();
        milestones.sort_unstable();
        Self {
            initial,
            milestones,
            decay,
        }
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        let passed = self.milestones.iter().filter(|&&m| step >= m).count();
        self.initial * self.decay.powi(passed as i32)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{zeros_like, Linear};
    use crate::rng::SeededRng;

    #[test]
    fn nesterov_matches_hand_computation() {
        let mut p = Linear::<f64>::zeros(1, 1);
        p.weight.data_mut()[0] = 1.0;
        let mut g = zeros_like(&p);
        g.weight.data_mut()[0] = 0.5;
        let mut opt = Sgd::new(0.9, true, 0.1);
        opt.step(&mut p, &g, 0.1);
        // d = 0.5 + 0.1*1 = 0.6; v = 0.6; update = 0.6 + 0.9*0.6 = 1.14
        assert!((p.weight.data()[0] - (1.0 - 0.114)).abs() < 1e-12);
        let w1 = p.weight.data()[0];
        opt.step(&mut p, &g, 0.1);
        let d = 0.5 + 0.1 * w1;
        let v = 0.9 * 0.6 + d;
        assert!((p.weight.data()[0] - (w1 - 0.1 * (d + 0.9 * v))).abs() < 1e-12);
    }

    #[test]
    fn zero_lr_leaves_params_bit_identical() {
        let mut rng = SeededRng::new(0, "opt");
        let mut p = Linear::<f32>::new(3, 2, &mut rng);
        let before = p.clone();
        let g = Linear::<f32>::new(3, 2, &mut rng);
        let mut opt = Sgd::new(0.9, true, 1e-3);
        for _ in 0..3 {
            opt.step(&mut p, &g, 0.0);
        }
        assert!(p.weight.bit_eq(&before.weight));
        assert!(p.bias.bit_eq(&before.bias));
    }

    #[test]
    fn multistep_schedule() {
        let s = MultiStepLr::from_fractions(1.0, &[0.6, 0.9], 0.1, 100);
        assert_eq!(s.milestones, vec![60, 90]);
        assert_eq!(s.lr_at(0), 1.0);
        assert_eq!(s.lr_at(59), 1.0);
        assert!((s.lr_at(60) - 0.1).abs() < 1e-15);
        assert!((s.lr_at(99) - 0.01).abs() < 1e-15);
    }

    #[test]
    fn adam_moves_against_gradient() {
        let mut p = Linear::<f64>::zeros(1, 1);
        let mut g = zeros_like(&p);
        g.weight.data_mut()[0] = 2.0;
        let mut opt = Adam::new(0.9, 0.999);
        opt.step(&mut p, &g, 0.01);
        assert!((p.weight.data()[0] + 0.01).abs() < 1e-6);
    }
}
