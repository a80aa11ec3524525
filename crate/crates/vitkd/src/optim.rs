//! Decoupled-weight-decay Adam and the warmup-cosine schedule.

use crate::tensor::Tensor;

pub struct AdamW {
    params: Vec<Tensor>,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    t: u64,
    pub betas: (f32, f32),
    pub eps: f32,
    pub weight_decay: f32,
}

impl AdamW {
    pub fn new(params: Vec<Tensor>, betas: (f32, f32), eps: f32, weight_decay: f32) -> AdamW {
        let m = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        let v = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        AdamW {
            params,
            m,
            v,
            t: 0,
            betas,
            eps,
            weight_decay,
        }
    }

    pub fn zero_grad(&self) {
        for p in &self.params {
            p.zero_grad();
        }
    }

    /// One update. Decay applies multiplicatively to the weights before
    /// the adaptive step; a missing gradient counts as zero.
    pub fn step(&mut self, lr: f32) {
        self.t += 1;
        let (b1, b2) = self.betas;
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        for (idx, p) in self.params.iter().enumerate() {
            let grad = p.grad();
            let g = grad.as_deref().unwrap_or(&[]);
            let mut data = p.data_vec();
            let decay = 1.0 - lr * self.weight_decay;
            if self.weight_decay != 0.0 {
                for w in data.iter_mut() {
                    *w *= decay;
                }
            }
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            for j in 0..data.len() {
                let gj = if g.is_empty() { 0.0 } else { g[j] };
                m[j] = b1 * m[j] + (1.0 - b1) * gj;
                v[j] = b2 * v[j] + (1.0 - b2) * gj * gj;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                data[j] -= lr * mhat / (vhat.sqrt() + self.eps);
            }
            p.set_data(&data).expect("optimizer shapes are fixed");
        }
    }
}

/// Linear warmup to `lr_max` over `warmup` steps, then cosine decay to
/// `lr_min` at `total` steps.
pub fn cosine_lr(step: u64, total: u64, warmup: u64, lr_max: f32, lr_min: f32) -> f32 {
    if warmup > 0 && step < warmup {
        return lr_max * step as f32 / warmup as f32;
    }
    if step >= total || total <= warmup {
        return lr_min;
    }
    let progress = (step - warmup) as f32 / (total - warmup) as f32;
    lr_min + 0.5 * (lr_max - lr_min) * (1.0 + (std::f32::consts::PI * progress).cos())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_grad_without_decay_leaves_params() {
        let p = Tensor::from_vec(&[3], vec![1.0, -2.0, 0.5]).unwrap();
        p.set_requires_grad(true);
        let mut opt = AdamW::new(vec![p.clone()], (0.9, 0.999), 1e-8, 0.0);
        opt.step(0.1);
        assert_eq!(p.data_vec(), vec![1.0, -2.0, 0.5]);
    }

    #[test]
    fn decoupled_decay_scales_params() {
        let p = Tensor::from_vec(&[2], vec![4.0, -8.0]).unwrap();
        p.set_requires_grad(true);
        let mut opt = AdamW::new(vec![p.clone()], (0.9, 0.999), 1e-8, 0.1);
        opt.step(0.1);
        // p * (1 - lr * wd) = 0.99 p, no adaptive movement on zero grad
        let d = p.data_vec();
        assert!((d[0] - 3.96).abs() < 1e-6);
        assert!((d[1] + 7.92).abs() < 1e-6);
    }

    #[test]
    fn first_step_with_unit_grad_moves_by_lr() {
        let p = Tensor::from_vec(&[1], vec![0.0]).unwrap();
        p.set_requires_grad(true);
        p.accumulate_grad(&[1.0]);
        let mut opt = AdamW::new(vec![p.clone()], (0.9, 0.999), 1e-12, 0.0);
        opt.step(0.1);
        // bias-corrected mhat / sqrt(vhat) is exactly 1 at step 1
        assert!((p.data_vec()[0] + 0.1).abs() < 1e-6);
    }

    #[test]
    fn cosine_schedule_landmarks() {
        let (total, warmup) = (1000u64, 100u64);
        let (mx, mn) = (1e-3f32, 1e-5f32);
        assert_eq!(cosine_lr(0, total, warmup, mx, mn), 0.0);
        assert!((cosine_lr(warmup, total, warmup, mx, mn) - mx).abs() < 1e-10);
        assert!((cosine_lr(total, total, warmup, mx, mn) - mn).abs() < 1e-10);
        let mid = warmup + (total - warmup) / 2;
        let want = 0.5 * (mx + mn);
        assert!((cosine_lr(mid, total, warmup, mx, mn) - want).abs() < 1e-8);
        // warmup is linear
        assert!((cosine_lr(50, total, warmup, mx, mn) - 0.5 * mx).abs() < 1e-10);
    }
}
