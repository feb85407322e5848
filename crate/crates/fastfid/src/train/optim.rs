//! AdamW with decoupled weight decay, global-norm gradient clipping, and
//! the two learning-rate schedules (linear warmup+decay, constant).

use crate::model::ParamSet;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct AdamW {
    pub weight_decay: f64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    /// Completed optimizer steps.
    pub t: usize,
}

impl AdamW {
    pub fn new(params: &ParamSet, weight_decay: f64) -> Self {
        Self {
            weight_decay,
            m: params.iter().map(|e| vec![0.0; e.data.len()]).collect(),
            v: params.iter().map(|e| vec![0.0; e.data.len()]).collect(),
            t: 0,
        }
    }

    /// One update. `grads` is indexed like the param registry; empty inner
    /// vectors mean "no gradient this step". Norm-gain / bias tensors are
    /// exempt from decay.
    pub fn step(&mut self, params: &mut ParamSet, grads: &[Vec<f64>], lr: f64) {
        self.t += 1;
        let t = self.t as f64;
        let bc1 = 1.0 - ADAM_BETA1.powf(t);
        let bc2 = 1.0 - ADAM_BETA2.powf(t);
        for idx in 0..params.len() {
            let g = &grads[idx];
            if g.is_empty() {
                continue;
            }
            let decay = params.entry(idx).decay;
            let entry = params.entry_mut(idx);
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            for i in 0..g.len() {
                m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g[i];
                v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                let mut update = m_hat / (v_hat.sqrt() + ADAM_EPS);
                if decay && self.weight_decay > 0.0 {
                    update += self.weight_decay * entry.data[i];
                }
                entry.data[i] -= lr * update;
            }
        }
    }
}

/// Scale gradients in place so their global L2 norm is at most `max_norm`;
/// returns the pre-clip norm.
pub fn clip_global_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let mut sq = 0.0;
    for g in grads.iter() {
        for &x in g {
            sq += x * x;
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            for x in g.iter_mut() {
                *x *= s;
            }
        }
    }
    norm
}

/// Linear warmup for the first `warmup_ratio` of `total` steps, then
/// linear decay to zero. `step` is 1-based.
pub fn linear_warmup_decay(step: usize, total: usize, warmup_ratio: f64, max_lr: f64) -> f64 {
    let total = total.max(1);
    let warmup = ((total as f64 * warmup_ratio).ceil() as usize).max(1);
    if step <= warmup {
        max_lr * step as f64 / warmup as f64
    } else if step >= total {
        0.0
    } else {
        max_lr * (total - step) as f64 / (total - warmup) as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_step_on_quadratic_decreases_magnitude() {
        // f(w) = w^2 at w = 1, grad = 2
        let mut params = ParamSet::default();
        params.push("w", &[1], vec![1.0], true);
        let mut opt = AdamW::new(&params, 0.0);
        opt.step(&mut params, &[vec![2.0]], 0.1);
        let w = params.get("w").data[0];
        assert!(w.abs() < 1.0, "w = {w}");
    }

    #[test]
    fn warmup_matches_ramp_formula() {
        let max_lr = 1e-4;
        let total = 100;
        // at step t < 0.1 * total, lr = max_lr * t / (0.1 * total)
        for t in 1..10 {
            let want = max_lr * t as f64 / 10.0;
            assert!((linear_warmup_decay(t, total, 0.1, max_lr) - want).abs() < 1e-15);
        }
        assert!((linear_warmup_decay(10, total, 0.1, max_lr) - max_lr).abs() < 1e-15);
        // halfway through the decay: (100-55)/90
        let mid = linear_warmup_decay(55, total, 0.1, max_lr);
        assert!((mid - max_lr * 0.5).abs() < 1e-15);
        assert_eq!(linear_warmup_decay(100, total, 0.1, max_lr), 0.0);
    }

    #[test]
    fn clip_rescales_only_above_threshold() {
        let mut grads = vec![vec![3.0, 4.0]];
        let norm = clip_global_norm(&mut grads, 1.0);
        assert!((norm - 5.0).abs() < 1e-12);
        let new_norm: f64 = grads[0].iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((new_norm - 1.0).abs() < 1e-12);
        let mut small = vec![vec![0.1, 0.1]];
        clip_global_norm(&mut small, 1.0);
        assert_eq!(small[0], vec![0.1, 0.1]);
    }

    #[test]
    fn weight_decay_skips_exempt_tensors() {
        let mut params = ParamSet::default();
        params.push("w", &[1], vec![1.0], true);
        params.push("gain", &[1], vec![1.0], false);
        let mut opt = AdamW::new(&params, 0.5);
        // zero gradient on both: only decay can move them
        opt.step(&mut params, &[vec![0.0], vec![0.0]], 0.1);
        assert!(params.get("w").data[0] < 1.0);
        assert_eq!(params.get("gain").data[0], 1.0);
    }
}
