//! Adam optimizer with bias correction, plus global gradient-norm clipping.

use std::collections::{BTreeMap, HashMap};

use crate::scalar::{s, Scalar};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct AdamConfig<S> {
    pub lr: S,
    pub beta1: S,
    pub beta2: S,
    pub eps: S,
}

impl<S: Scalar> Default for AdamConfig<S> {
    fn default() -> Self {
        AdamConfig {
            lr: s(0.001),
            beta1: s(0.9),
            beta2: s(0.999),
            eps: s(1e-8),
        }
    }
}

/// Per-parameter first/second moment estimates keyed by parameter name.
#[derive(Clone, Debug, Default)]
pub struct AdamState<S> {
    pub step: u64,
    m: HashMap<String, Tensor<S>>,
    v: HashMap<String, Tensor<S>>,
}

impl<S: Scalar> AdamState<S> {
    pub fn new() -> Self {
        AdamState {
            step: 0,
            m: HashMap::new(),
            v: HashMap::new(),
        }
    }

    /// One update over named (param, grad) pairs. Parameters without a grad
    /// entry are left untouched; the step counter always advances.
    pub fn step(
        &mut self,
        cfg: &AdamConfig<S>,
        params: &mut [(String, &mut Tensor<S>)],
        grads: &BTreeMap<String, Tensor<S>>,
    ) {
        self.step += 1;
        let t = s::<S>(self.step as f64);
        let bc1 = S::one() - cfg.beta1.powf(t);
        let bc2 = S::one() - cfg.beta2.powf(t);
        for (name, param) in params.iter_mut() {
            let Some(grad) = grads.get(name.as_str()) else {
                continue;
            };
            debug_assert_eq!(param.shape(), grad.shape(), "adam: {name}");
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(param.shape().to_vec()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(param.shape().to_vec()));
            for ((p, g), (mi, vi)) in param
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()))
            {
                *mi = cfg.beta1 * *mi + (S::one() - cfg.beta1) * *g;
                *vi = cfg.beta2 * *vi + (S::one() - cfg.beta2) * *g * *g;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *p = *p - cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
            }
        }
    }
}

/// Scale all gradients so their global L2 norm is at most `max_norm`.
pub fn clip_global_norm<S: Scalar>(grads: &mut BTreeMap<String, Tensor<S>>, max_norm: S) {
    let total: S = grads.values().map(|g| g.sq_l2()).sum();
    let norm = total.sqrt();
    if norm > max_norm && norm > S::zero() {
        let k = max_norm / norm;
        for g in grads.values_mut() {
            g.scale_assign(k);
        }
    }
}
