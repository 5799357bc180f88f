use std::collections::BTreeMap;

use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

use super::store::{ParameterStore, StoredTensor};
use super::{join, Layer, Real};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction. Moments are keyed by `prefix.param_name`.
pub struct Adam<T: Real> {
    pub cfg: AdamConfig,
    pub step: u64,
    moments: BTreeMap<String, (ArrayD<T>, ArrayD<T>)>,
}

impl<T: Real> Adam<T> {
    pub fn new(cfg: AdamConfig) -> Self {
        Self {
            cfg,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    /// One update of every trainable parameter of the given nets from their
    /// accumulated gradients.
    pub fn step(&mut self, nets: &mut [(&str, &mut dyn Layer<T>)]) {
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let c1 = T::of(1.0 - b1.powi(t));
        let c2 = T::of(1.0 - b2.powi(t));
        let (b1t, b2t) = (T::of(b1), T::of(b2));
        let (lr, eps) = (T::of(self.cfg.lr), T::of(self.cfg.eps));
        let moments = &mut self.moments;
        for (prefix, net) in nets.iter_mut() {
            net.visit_mut(prefix, &mut |name, p| {
                if p.frozen {
                    return;
                }
                let (m, v) = moments
                    .entry(name.to_string())
                    .or_insert_with(|| (ArrayD::zeros(p.value.raw_dim()), ArrayD::zeros(p.value.raw_dim())));
                ndarray::Zip::from(&mut p.value).and(m).and(v).and(&p.grad).for_each(|w, m, v, &g| {
                    *m = b1t * *m + (T::one() - b1t) * g;
                    *v = b2t * *v + (T::one() - b2t) * g * g;
                    let mhat = *m / c1;
                    let vhat = *v / c2;
                    *w -= lr * mhat / (vhat.sqrt() + eps);
                });
            });
        }
    }

    pub fn to_store(&self) -> ParameterStore {
        let mut s = ParameterStore::default();
        for (k, (m, v)) in &self.moments {
            s.insert(join("m", k), StoredTensor::from_array(m, false));
            s.insert(join("v", k), StoredTensor::from_array(v, false));
        }
        s
    }

    pub fn from_store(cfg: AdamConfig, step: u64, store: &ParameterStore) -> Result<Self> {
        let ms = store.sub("m");
        let vs = store.sub("v");
        let mut moments = BTreeMap::new();
        for (k, m) in &ms.tensors {
            let v = vs
                .get(k)
                .ok_or_else(|| Error::Incompatible(format!("optimizer state for {k} has no second moment")))?;
            moments.insert(k.clone(), (m.to_array()?, v.to_array()?));
        }
        Ok(Self { cfg, step, moments })
    }
}
