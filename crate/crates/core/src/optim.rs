//! Decoupled-weight-decay adaptive-moment optimizer with warmup and
//! global-norm gradient clipping.

use crate::math::{Mat, ParamGrads, ParamStore};
use crate::scalar::Scalar;

/// Optimizer hyperparameters.
#[derive(Debug, Clone, Copy)]
pub struct AdamWConfig {
    pub learning_rate: f64,
    pub betas: (f64, f64),
    pub epsilon: f64,
    pub weight_decay: f64,
}

/// Scale all gradients so the global L2 norm does not exceed `max_norm`.
/// Returns `(pre_clip_norm, post_clip_norm)`.
pub fn clip_global_norm<S: Scalar>(grads: &mut ParamGrads<S>, max_norm: f64) -> (f64, f64) {
    let norm = grads.global_norm();
    if norm > max_norm && norm > 0.0 {
        grads.scale(max_norm / norm);
        (norm, max_norm)
    } else {
        (norm, norm)
    }
}

/// Linear warmup to 1.0 over `warmup_steps`, constant afterwards.
/// `step` is 1-based.
pub fn warmup_constant_schedule(step: usize, warmup_steps: usize) -> f64 {
    if warmup_steps == 0 {
        1.0
    } else {
        (step as f64 / warmup_steps as f64).min(1.0)
    }
}

/// AdamW over a [`ParamStore`]. Moment state is aligned with the store by
/// position; decay is decoupled from the adaptive update and skipped for
/// bias and normalization parameters.
pub struct AdamW<S> {
    config: AdamWConfig,
    m: Vec<Mat<S>>,
    v: Vec<Mat<S>>,
    decay_mask: Vec<bool>,
    step: usize,
}

fn decays(name: &str) -> bool {
    !(name.ends_with(".bias") || name.ends_with(".beta") || name.ends_with(".gamma"))
}

impl<S: Scalar> AdamW<S> {
    pub fn new(store: &ParamStore<S>, config: AdamWConfig) -> AdamW<S> {
        let m = store
            .iter()
            .map(|(_, mat)| Mat::zeros(mat.rows(), mat.cols()))
            .collect();
        let v = store
            .iter()
            .map(|(_, mat)| Mat::zeros(mat.rows(), mat.cols()))
            .collect();
        let decay_mask = store.iter().map(|(name, _)| decays(name)).collect();
        AdamW {
            config,
            m,
            v,
            decay_mask,
            step: 0,
        }
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// One update. `lr_scale` multiplies the base learning rate (the warmup
    /// schedule); parameters without a gradient are left untouched.
    pub fn step(&mut self, store: &mut ParamStore<S>, grads: &ParamGrads<S>, lr_scale: f64) {
        self.step += 1;
        let (beta1, beta2) = self.config.betas;
        let lr = self.config.learning_rate * lr_scale;
        let bias_correction1 = 1.0 - beta1.powi(self.step as i32);
        let bias_correction2 = 1.0 - beta2.powi(self.step as i32);

        for id in store.ids() {
            let Some(grad) = grads.get(id) else { continue };
            let m = &mut self.m[id.0];
            let v = &mut self.v[id.0];
            let value = store.value_mut(id);
            let decay = if self.decay_mask[id.0] {
                self.config.weight_decay
            } else {
                0.0
            };
            for i in 0..value.data().len() {
                let g = grad.data()[i].as_f64();
                let m_next = beta1 * m.data()[i].as_f64() + (1.0 - beta1) * g;
                let v_next = beta2 * v.data()[i].as_f64() + (1.0 - beta2) * g * g;
                m.data_mut()[i] = S::of_f64(m_next);
                v.data_mut()[i] = S::of_f64(v_next);
                let m_hat = m_next / bias_correction1;
                let v_hat = v_next / bias_correction2;
                let old = value.data()[i].as_f64();
                let update = lr * (m_hat / (v_hat.sqrt() + self.config.epsilon) + decay * old);
                value.data_mut()[i] = S::of_f64(old - update);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::ParamId;

    #[test]
    fn clipping_caps_global_norm() {
        let mut grads: ParamGrads<f64> = ParamGrads {
            grads: vec![
                Some(Mat::from_vec(1, 2, vec![3.0, 4.0])),
                None,
                Some(Mat::from_vec(1, 1, vec![12.0])),
            ],
        };
        // norm = sqrt(9 + 16 + 144) = 13
        let (pre, post) = clip_global_norm(&mut grads, 1.0);
        assert!((pre - 13.0).abs() < 1e-12);
        assert!((post - 1.0).abs() < 1e-12);
        assert!((grads.global_norm() - 1.0).abs() < 1e-9);

        let mut small: ParamGrads<f64> = ParamGrads {
            grads: vec![Some(Mat::from_vec(1, 1, vec![0.5]))],
        };
        let (pre, post) = clip_global_norm(&mut small, 1.0);
        assert_eq!(pre, 0.5);
        assert_eq!(post, 0.5);
    }

    #[test]
    fn warmup_then_constant() {
        assert_eq!(warmup_constant_schedule(1, 100), 0.01);
        assert_eq!(warmup_constant_schedule(50, 100), 0.5);
        assert_eq!(warmup_constant_schedule(100, 100), 1.0);
        assert_eq!(warmup_constant_schedule(5000, 100), 1.0);
        assert_eq!(warmup_constant_schedule(3, 0), 1.0);
    }

    #[test]
    fn adamw_descends_a_quadratic() {
        // minimize f(x) = x² with plain gradient feed; expects monotone-ish
        // approach to zero.
        let mut store: ParamStore<f64> = ParamStore::new();
        let x = store.add("w.weight", Mat::from_vec(1, 1, vec![2.0]));
        let mut opt = AdamW::new(
            &store,
            AdamWConfig {
                learning_rate: 0.1,
                betas: (0.9, 0.999),
                epsilon: 1e-8,
                weight_decay: 0.0,
            },
        );
        for _ in 0..200 {
            let g = 2.0 * store.value(x).get(0, 0);
            let grads = ParamGrads {
                grads: vec![Some(Mat::from_vec(1, 1, vec![g]))],
            };
            opt.step(&mut store, &grads, 1.0);
        }
        assert!(store.value(x).get(0, 0).abs() < 1e-2);
    }

    #[test]
    fn weight_decay_skips_norm_and_bias_params() {
        let mut store: ParamStore<f64> = ParamStore::new();
        let w = store.add("layer.0.ff.in.weight", Mat::from_vec(1, 1, vec![1.0]));
        let b = store.add("layer.0.ff.in.bias", Mat::from_vec(1, 1, vec![1.0]));
        let g = store.add("layer.0.ln1.gamma", Mat::from_vec(1, 1, vec![1.0]));
        let mut opt = AdamW::new(
            &store,
            AdamWConfig {
                learning_rate: 0.5,
                betas: (0.9, 0.999),
                epsilon: 1e-8,
                weight_decay: 0.1,
            },
        );
        // Zero gradients: only decay moves parameters.
        let grads = ParamGrads {
            grads: vec![
                Some(Mat::zeros(1, 1)),
                Some(Mat::zeros(1, 1)),
                Some(Mat::zeros(1, 1)),
            ],
        };
        opt.step(&mut store, &grads, 1.0);
        assert!(store.value(ParamId(w.0)).get(0, 0) < 1.0);
        assert_eq!(store.value(ParamId(b.0)).get(0, 0), 1.0);
        assert_eq!(store.value(ParamId(g.0)).get(0, 0), 1.0);
    }
}
