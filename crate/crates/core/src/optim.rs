//! Adam with bias correction.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment estimates for one [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    m: BTreeMap<String, Tensor<T>>,
    v: BTreeMap<String, Tensor<T>>,
    t: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(config: AdamConfig) -> Self {
        AdamState {
            config,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
            t: 0,
        }
    }

    /// Number of updates applied so far.
    pub fn step_count(&self) -> u64 {
        self.t
    }

    pub fn first_moment(&self, name: &str) -> Option<&Tensor<T>> {
        self.m.get(name)
    }

    pub fn second_moment(&self, name: &str) -> Option<&Tensor<T>> {
        self.v.get(name)
    }

    /// Restores saved state. Moment shapes are checked on the next step.
    pub fn restore(&mut self, t: u64, m: BTreeMap<String, Tensor<T>>, v: BTreeMap<String, Tensor<T>>) {
        self.t = t;
        self.m = m;
        self.v = v;
    }

    pub fn moments(&self) -> impl Iterator<Item = (&str, &Tensor<T>, &Tensor<T>)> {
        self.m
            .iter()
            .filter_map(|(k, m)| self.v.get(k).map(|v| (k.as_str(), m, v)))
    }

    /// Applies one update to every parameter in `params` and clears the gradients.
    pub fn step(&mut self, params: &mut ParamStore<T>) -> Result<()> {
        let cfg = self.config;
        let (values, grads) = params.values_and_grads();
        for name in values.keys() {
            match grads.get(name) {
                Some(g) if g.shape() == values[name].shape() => {}
                Some(g) => {
                    return Err(Error::shape(
                        "adam_step",
                        alloc::format!("gradient of `{name}` is {}", g.shape()),
                    ))
                }
                None => return Err(Error::MissingGradient(name.clone())),
            }
        }
        self.t += 1;
        let t = self.t as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        let (b1, b2) = (T::from_f64(cfg.beta1), T::from_f64(cfg.beta2));
        let (one_b1, one_b2) = (T::from_f64(1.0 - cfg.beta1), T::from_f64(1.0 - cfg.beta2));
        let step = T::from_f64(cfg.lr / bc1);
        let inv_bc2 = T::from_f64(1.0 / bc2);
        let eps = T::from_f64(cfg.eps);
        for (name, p) in values.iter_mut() {
            let g = &grads[name];
            let shape = p.shape();
            let m = self
                .m
                .entry(name.to_string())
                .or_insert_with(|| Tensor::zeros(shape));
            let v = self
                .v
                .entry(name.to_string())
                .or_insert_with(|| Tensor::zeros(shape));
            if m.shape() != shape || v.shape() != shape {
                return Err(Error::shape("adam_step", alloc::format!("moments of `{name}`")));
            }
            for (((pv, &gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mv = b1 * *mv + one_b1 * gv;
                *vv = b2 * *vv + one_b2 * gv * gv;
                *pv = *pv - step * *mv / ((*vv * inv_bc2).sqrt() + eps);
            }
        }
        params.clear_grads();
        Ok(())
    }
}
