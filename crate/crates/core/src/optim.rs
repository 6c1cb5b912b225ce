//! Adaptive-moment optimizer with per-parameter step sizes.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::params::ParamSet;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone)]
struct Moments<T> {
    m: Tensor<T>,
    v: Tensor<T>,
    steps: u64,
}

/// Moment estimates are created lazily and advance only for parameters that
/// are actually updated, so frozen tensors carry no optimizer state.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    config: AdamConfig,
    state: BTreeMap<String, Moments<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self { config, state: BTreeMap::new() }
    }

    /// Apply one update. `rate` maps a parameter name to its step size, or
    /// `None` to leave the parameter untouched.
    pub fn step(
        &mut self,
        params: &mut ParamSet<T>,
        grads: &BTreeMap<String, Tensor<T>>,
        rate: impl Fn(&str) -> Option<f64>,
    ) {
        let (b1, b2) = (T::lit(self.config.beta1), T::lit(self.config.beta2));
        let eps = T::lit(self.config.eps);
        for (name, grad) in grads {
            let Some(lr) = rate(name) else { continue };
            let Some(param) = params.get_mut(name) else { continue };
            let st = self.state.entry(name.clone()).or_insert_with(|| Moments {
                m: Tensor::zeros(grad.rows(), grad.cols()),
                v: Tensor::zeros(grad.rows(), grad.cols()),
                steps: 0,
            });
            st.steps += 1;
            let t = st.steps as i32;
            let c1 = T::one() - b1.powi(t);
            let c2 = T::one() - b2.powi(t);
            let lr = T::lit(lr);
            for (((p, g), m), v) in param
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(st.m.data_mut().iter_mut())
                .zip(st.v.data_mut().iter_mut())
            {
                *m = b1 * *m + (T::one() - b1) * *g;
                *v = b2 * *v + (T::one() - b2) * *g * *g;
                let mhat = *m / c1;
                let vhat = *v / c2;
                *p -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }

    pub fn tracked(&self) -> impl Iterator<Item = &str> {
        self.state.keys().map(String::as_str)
    }
}

/// Elementwise mean of per-example gradient maps, summed in the given order.
pub fn mean_gradients<T: Scalar>(parts: Vec<BTreeMap<String, Tensor<T>>>) -> BTreeMap<String, Tensor<T>> {
    let n = T::from_usize(parts.len().max(1)).expect("count");
    let mut out: BTreeMap<String, Tensor<T>> = BTreeMap::new();
    for part in parts {
        for (name, g) in part {
            match out.get_mut(&name) {
                Some(acc) => acc.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += *b),
                None => {
                    out.insert(name, g);
                }
            }
        }
    }
    for g in out.values_mut() {
        g.data_mut().iter_mut().for_each(|v| *v /= n);
    }
    out
}
