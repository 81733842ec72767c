//! AdamW, gradient clipping and the warmup/cosine learning-rate schedule.

use crate::nn::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Matrix;

/// Linear warmup to `peak`, then cosine decay to `min_lr` at `total` steps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub peak: f64,
    pub warmup: u64,
    pub total: u64,
    pub min_lr: f64,
}

impl LrSchedule {
    pub fn at(&self, step: u64) -> f64 {
        if step < self.warmup {
            return self.peak * (step + 1) as f64 / self.warmup as f64;
        }
        let span = self.total.saturating_sub(self.warmup).max(1);
        let progress = ((step - self.warmup) as f64 / span as f64).min(1.0);
        self.min_lr + 0.5 * (self.peak - self.min_lr) * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

/// Scales all gradients so their joint L2 norm is at most `max_norm`; returns the norm before scaling.
pub fn clip_grad_norm<T: Scalar>(grads: &mut [Option<Matrix<T>>], max_norm: f64) -> f64 {
    let norm = grads.iter().flatten().map(|g| g.sq_norm().to_f64_lossy()).sum::<f64>().sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = T::from_f64_lossy(max_norm / (norm + 1e-6));
        grads.iter_mut().flatten().for_each(|g| g.scale_assign(s));
    }
    norm
}

/// Adam with decoupled weight decay, applied only to parameters flagged for decay.
#[derive(Debug, Clone)]
pub struct AdamW<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<Matrix<T>>,
    v: Vec<Matrix<T>>,
    t: u64,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(store: &ParamStore<T>, betas: (f64, f64), weight_decay: f64) -> Self {
        let zeros = || store.ids().map(|id| Matrix::zeros(store.get(id).rows(), store.get(id).cols())).collect();
        Self { beta1: betas.0, beta2: betas.1, eps: 1e-8, weight_decay, m: zeros(), v: zeros(), t: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Option<Matrix<T>>], lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let (b1, b2) = (T::from_f64_lossy(self.beta1), T::from_f64_lossy(self.beta2));
        let (one_b1, one_b2) = (T::one() - b1, T::one() - b2);
        let step_size = T::from_f64_lossy(lr / bc1);
        let inv_bc2_sqrt = T::from_f64_lossy(1.0 / bc2.sqrt());
        let eps = T::from_f64_lossy(self.eps);
        let ids: Vec<_> = store.ids().collect();
        for (i, id) in ids.into_iter().enumerate() {
            let Some(g) = grads.get(i).and_then(Option::as_ref) else { continue };
            let decay = store.decays(id);
            let p = store.get_mut(id);
            if self.m[i].shape() != p.shape() {
                // parameter was resized; restart its moments
                self.m[i] = Matrix::zeros(p.rows(), p.cols());
                self.v[i] = Matrix::zeros(p.rows(), p.cols());
            }
            let shrink = T::one() - T::from_f64_lossy(lr * self.weight_decay);
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (((x, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + one_b1 * gi;
                *vi = b2 * *vi + one_b2 * gi * gi;
                if decay {
                    *x *= shrink;
                }
                *x -= step_size * *mi / (vi.sqrt() * inv_bc2_sqrt + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_shape() {
        let s = LrSchedule { peak: 3e-4, warmup: 10, total: 110, min_lr: 0.0 };
        assert!((s.at(0) - 3e-5).abs() < 1e-15);
        assert!((s.at(10) - 3e-4).abs() < 1e-9);
        assert!((s.at(60) - 1.5e-4).abs() < 1e-12);
        assert!(s.at(110).abs() < 1e-15);
        assert!(s.at(500).abs() < 1e-15);
        for k in 10..110 {
            assert!(s.at(k + 1) <= s.at(k));
        }
    }

    #[test]
    fn clipping() {
        let mut g = vec![Some(Matrix::from_vec(1, 2, vec![3.0f64, 4.0])), None];
        assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
        let n = g[0].as_ref().unwrap().sq_norm().sqrt();
        assert!((n - 1.0).abs() < 1e-6);
        let mut small = vec![Some(Matrix::from_vec(1, 1, vec![0.5f64]))];
        clip_grad_norm(&mut small, 1.0);
        assert_eq!(small[0].as_ref().unwrap().item(), 0.5);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut store = ParamStore::<f64>::new();
        let a = store.add("a", Matrix::from_vec(1, 2, vec![1.0, -1.0]), false);
        let b = store.add("b", Matrix::from_vec(1, 1, vec![2.0]), true);
        let mut opt = AdamW::new(&store, (0.9, 0.95), 0.5);
        let grads = vec![Some(Matrix::from_vec(1, 2, vec![0.3, -7.0])), Some(Matrix::from_vec(1, 1, vec![0.0]))];
        opt.step(&mut store, &grads, 0.1);
        let pa = store.get(a);
        assert!((pa.get(0, 0) - 0.9).abs() < 1e-6);
        assert!((pa.get(0, 1) + 0.9).abs() < 1e-6);
        // zero gradient, decay only
        assert!((store.get(b).item() - 2.0 * (1.0 - 0.05)).abs() < 1e-12);
    }

    #[test]
    fn minimises_quadratic() {
        let mut store = ParamStore::<f32>::new();
        let x = store.add("x", Matrix::from_vec(1, 3, vec![2.0, -3.0, 0.5]), false);
        let mut opt = AdamW::new(&store, (0.9, 0.95), 0.0);
        for _ in 0..500 {
            let g = store.get(x).map(|v| 2.0 * v);
            opt.step(&mut store, &[Some(g)], 0.05);
        }
        assert!(store.get(x).data().iter().all(|v| v.abs() < 0.05));
    }
}
