//! Adam with bias correction, one moment pair per named tensor.

use crate::diffcore::{PTensor, Real};

#[derive(Debug, Clone, PartialEq)]
pub struct Moments<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    /// Completed update steps (bias correction uses step + 1 internally).
    pub step: u64,
    /// One entry per optimized tensor, in canonical parameter order.
    pub entries: Vec<Moments<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn new(sizes: &[usize]) -> Self {
        AdamState {
            step: 0,
            entries: sizes
                .iter()
                .map(|&n| Moments { m: vec![T::zero(); n], v: vec![T::zero(); n] })
                .collect(),
        }
    }

    /// Advance the shared step counter; call once per optimization step
    /// before updating the tensors of that step.
    pub fn begin_step(&mut self) -> u64 {
        self.step += 1;
        self.step
    }
}

/// One bias-corrected Adam update for a single tensor. `step` is the
/// 1-based step count. A missing gradient means zero gradient everywhere
/// (moments still decay).
#[allow(clippy::too_many_arguments)]
pub fn adam_step<T: Real>(
    param: &mut PTensor<T>,
    grad: Option<&[T]>,
    moments: &mut Moments<T>,
    step: u64,
    lr: T,
    beta1: T,
    beta2: T,
    eps: T,
) {
    debug_assert_eq!(param.data.len(), moments.m.len());
    let one = T::one();
    let bc1 = one - beta1.powi(step as i32);
    let bc2 = one - beta2.powi(step as i32);
    let n = param.data.len();
    for i in 0..n {
        let g = grad.map(|g| g[i]).unwrap_or_else(T::zero);
        moments.m[i] = beta1 * moments.m[i] + (one - beta1) * g;
        moments.v[i] = beta2 * moments.v[i] + (one - beta2) * g * g;
        let m_hat = moments.m[i] / bc1;
        let v_hat = moments.v[i] / bc2;
        param.data[i] = param.data[i] - lr * m_hat / (v_hat.sqrt() + eps);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Independent scalar recurrence for the same update.
    struct ScalarAdam {
        m: f64,
        v: f64,
    }

    impl ScalarAdam {
        fn update(&mut self, x: f64, g: f64, step: u64, lr: f64, b1: f64, b2: f64, eps: f64) -> f64 {
            self.m = b1 * self.m + (1.0 - b1) * g;
            self.v = b2 * self.v + (1.0 - b2) * g * g;
            let mh = self.m / (1.0 - b1.powi(step as i32));
            let vh = self.v / (1.0 - b2.powi(step as i32));
            x - lr * mh / (vh.sqrt() + eps)
        }
    }

    #[test]
    fn matches_scalar_recurrence_oracle() {
        let (lr, b1, b2, eps) = (1e-2, 0.9, 0.999, 1e-8);
        let mut p = PTensor::<f64>::new(vec![0.5], &[1]);
        let mut mom = Moments { m: vec![0.0], v: vec![0.0] };
        let mut oracle = ScalarAdam { m: 0.0, v: 0.0 };
        let mut x = 0.5;
        let grads = [0.3, -0.1, 0.25, 0.0, 0.7, -0.4];
        for (i, &g) in grads.iter().enumerate() {
            let step = (i + 1) as u64;
            adam_step(&mut p, Some(&[g]), &mut mom, step, lr, b1, b2, eps);
            x = oracle.update(x, g, step, lr, b1, b2, eps);
            assert!((p.data[0] - x).abs() < 1e-15, "step {step}: {} vs {x}", p.data[0]);
        }
        // first step moves roughly by lr in the gradient sign direction
        let mut p1 = PTensor::<f64>::new(vec![1.0], &[1]);
        let mut m1 = Moments { m: vec![0.0], v: vec![0.0] };
        adam_step(&mut p1, Some(&[0.3]), &mut m1, 1, lr, b1, b2, eps);
        assert!((p1.data[0] - (1.0 - lr)).abs() < 1e-6);
    }

    #[test]
    fn zero_gradient_keeps_fresh_parameter() {
        let (lr, b1, b2, eps) = (1e-2, 0.9, 0.999, 1e-8);
        let mut p = PTensor::<f64>::new(vec![2.5, -1.5], &[2]);
        let mut mom = Moments { m: vec![0.0; 2], v: vec![0.0; 2] };
        adam_step(&mut p, None, &mut mom, 1, lr, b1, b2, eps);
        adam_step(&mut p, Some(&[0.0, 0.0]), &mut mom, 2, lr, b1, b2, eps);
        assert_eq!(p.data, vec![2.5, -1.5]);
    }

    #[test]
    fn deterministic_across_runs() {
        let run = || {
            let mut p = PTensor::<f32>::new(vec![0.1, 0.2, 0.3], &[3]);
            let mut mom = Moments { m: vec![0.0f32; 3], v: vec![0.0; 3] };
            for s in 1..=100u64 {
                let g = [(s as f32 * 0.01).sin(), -(s as f32 * 0.02).cos(), 0.05];
                adam_step(&mut p, Some(&g), &mut mom, s, 1e-3, 0.9, 0.999, 1e-8);
            }
            p.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }
}
