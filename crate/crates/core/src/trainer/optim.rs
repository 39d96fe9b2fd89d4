use std::collections::BTreeMap;

use ndarray::{ArrayD, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{ParamKind, ParamStore};

/// Adam with decoupled weight decay applied to `ParamKind::Weight` tensors only.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub hyper: AdamWHyper,
    pub step: u64,
    pub m: BTreeMap<String, ArrayD<f32>>,
    pub v: BTreeMap<String, ArrayD<f32>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamW {
    pub fn new(hyper: AdamWHyper) -> Self {
        Self {
            hyper,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// One update with learning rate `lr` from the given gradients.
    pub fn update(&mut self, store: &mut ParamStore<f32>, grads: &BTreeMap<String, ArrayD<f32>>, lr: f64) -> Result<()> {
        self.step += 1;
        let h = self.hyper;
        let bc1 = 1.0 - h.beta1.powi(self.step as i32);
        let bc2 = 1.0 - h.beta2.powi(self.step as i32);
        let (b1, b2) = (h.beta1 as f32, h.beta2 as f32);
        let step_size = (lr / bc1) as f32;
        let bc2_sqrt = bc2.sqrt() as f32;
        let eps = h.eps as f32;
        let decay = (1.0 - lr * h.weight_decay) as f32;
        for (name, g) in grads {
            let param = store
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("gradient for unknown parameter `{name}`")))?;
            if !param.kind.trainable() {
                continue;
            }
            let decays = param.kind == ParamKind::Weight;
            let mut value = param.value.clone();
            if g.shape() != value.shape() {
                return Err(Error::Shape(format!("gradient {:?} for `{name}` {:?}", g.shape(), value.shape())));
            }
            let m = self.m.entry(name.clone()).or_insert_with(|| ArrayD::zeros(g.raw_dim()));
            let v = self.v.entry(name.clone()).or_insert_with(|| ArrayD::zeros(g.raw_dim()));
            Zip::from(&mut value).and(&mut *m).and(&mut *v).and(g).for_each(|p, m, v, &g| {
                if decays {
                    *p *= decay;
                }
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= step_size * *m / (v.sqrt() / bc2_sqrt + eps);
            });
            store.set_value(name, value)?;
        }
        Ok(())
    }
}
