//! AdamW with decoupled weight decay, plus global-norm gradient clipping.

use crate::params::ParamSet;
use crate::tensor::Tensor;
use crate::{shape_err, NnError, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.05 }
    }
}

/// Optimizer state: first/second moments shaped like their parameters and a
/// strictly increasing step counter.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: AdamWConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl AdamW {
    pub fn new(config: AdamWConfig, params: &ParamSet) -> Self {
        let zeros = || params.iter().map(|p| vec![0.0; p.tensor.numel()]).collect::<Vec<_>>();
        Self { config, m: zeros(), v: zeros(), step: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update at learning rate `lr`. Parameters with `trainable[i] == false`
    /// are skipped entirely (no decay, no moment update).
    pub fn step(&mut self, params: &mut ParamSet, grads: &[Tensor], trainable: &[bool], lr: f64) -> Result<()> {
        if grads.len() != params.len() || trainable.len() != params.len() || self.m.len() != params.len() {
            return Err(shape_err(
                "adamw_step",
                format!("{} params, {} grads, {} mask entries", params.len(), grads.len(), trainable.len()),
            ));
        }
        for (i, g) in grads.iter().enumerate() {
            if g.shape() != params.tensor(i).shape() {
                return Err(shape_err(
                    "adamw_step",
                    format!("{}: grad {:?} vs param {:?}", params.param(i).name, g.shape(), params.tensor(i).shape()),
                ));
            }
        }
        self.step += 1;
        let AdamWConfig { beta1, beta2, eps, weight_decay, .. } = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for i in 0..params.len() {
            if !trainable[i] {
                continue;
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let p = params.tensor_mut(i).data_mut();
            for (((pj, &gj), mj), vj) in p.iter_mut().zip(grads[i].data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *pj -= lr * weight_decay * *pj;
                *mj = beta1 * *mj + (1.0 - beta1) * gj;
                *vj = beta2 * *vj + (1.0 - beta2) * gj * gj;
                let m_hat = *mj / bc1;
                let v_hat = *vj / bc2;
                *pj -= lr * m_hat / (v_hat.sqrt() + eps);
            }
            if !params.tensor(i).is_finite() {
                return Err(NnError::NonFinite("adamw_step"));
            }
        }
        Ok(())
    }
}

pub fn global_norm(grads: &[Tensor]) -> f64 {
    grads.iter().map(Tensor::sq_norm).sum::<f64>().sqrt()
}

/// Rescales all gradients by `ceiling / N` when their global L2 norm `N`
/// exceeds `ceiling`. Returns `N` as measured before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], ceiling: f64) -> f64 {
    assert!(ceiling > 0.0, "clip ceiling must be positive");
    let norm = global_norm(grads);
    if norm > ceiling {
        let s = ceiling / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn single(value: f64) -> ParamSet {
        let mut p = ParamSet::new();
        p.insert("w", "g", Tensor::scalar(value)).unwrap();
        p
    }

    #[test]
    fn zero_grad_zero_decay_is_identity() {
        let mut p = single(0.7);
        let cfg = AdamWConfig { weight_decay: 0.0, ..Default::default() };
        let mut opt = AdamW::new(cfg, &p);
        opt.step(&mut p, &[Tensor::scalar(0.0)], &[true], 0.1).unwrap();
        assert_eq!(p.tensor(0).data(), &[0.7]);
    }

    #[test]
    fn first_step_closed_form() {
        // m̂ = v̂ = 1, so the update is lr·1/(1+eps)
        let mut p = single(0.0);
        let cfg = AdamWConfig { weight_decay: 0.0, ..Default::default() };
        let mut opt = AdamW::new(cfg, &p);
        opt.step(&mut p, &[Tensor::scalar(1.0)], &[true], 0.1).unwrap();
        assert!((p.tensor(0).data()[0] + 0.1).abs() < 1e-8);
        assert_eq!(opt.steps(), 1);
    }

    #[test]
    fn decoupled_decay_is_geometric() {
        let mut p = single(2.0);
        let mut opt = AdamW::new(AdamWConfig { weight_decay: 0.05, ..Default::default() }, &p);
        opt.step(&mut p, &[Tensor::scalar(0.0)], &[true], 0.1).unwrap();
        assert_eq!(p.tensor(0).data()[0], 2.0 - 0.1 * 0.05 * 2.0);
        for _ in 0..9 {
            opt.step(&mut p, &[Tensor::scalar(0.0)], &[true], 0.1).unwrap();
        }
        assert!((p.tensor(0).data()[0] - 2.0 * 0.995f64.powi(10)).abs() < 1e-12);
    }

    #[test]
    fn frozen_params_untouched_and_shapes_checked() {
        let mut p = single(1.5);
        let mut opt = AdamW::new(AdamWConfig::default(), &p);
        opt.step(&mut p, &[Tensor::scalar(3.0)], &[false], 0.1).unwrap();
        assert_eq!(p.tensor(0).data(), &[1.5]);
        assert!(opt.step(&mut p, &[Tensor::zeros(&[2])], &[true], 0.1).is_err());
    }

    #[test]
    fn clip_examples() {
        let mut g = vec![Tensor::new(vec![2], vec![0.0, 2.0]).unwrap()];
        assert_eq!(clip_global_norm(&mut g, 1.0), 2.0);
        assert_eq!(g[0].data(), &[0.0, 1.0]);
        let mut g = vec![Tensor::new(vec![2], vec![0.3, 0.4]).unwrap()];
        clip_global_norm(&mut g, 1.0);
        assert_eq!(g[0].data(), &[0.3, 0.4]);
    }

    proptest! {
        #[test]
        fn post_clip_norm_within_ceiling(
            vals in proptest::collection::vec(-50.0f64..50.0, 1..40),
            ceiling in 1e-3f64..10.0,
        ) {
            let half = vals.len() / 2;
            let mut g = vec![Tensor::new(vec![vals.len()], vals.clone()).unwrap()];
            if half > 0 {
                g.push(Tensor::new(vec![half], vals[..half].to_vec()).unwrap());
            }
            clip_global_norm(&mut g, ceiling);
            let recomputed: f64 = g.iter().flat_map(|t| t.data().iter()).map(|v| v * v).sum::<f64>().sqrt();
            prop_assert!(recomputed <= ceiling + 1e-9);
        }
    }
}
