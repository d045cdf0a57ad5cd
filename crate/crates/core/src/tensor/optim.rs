use std::collections::BTreeMap;

use super::{ParamStore, Tensor};
use crate::error::{dim_err, Result};

/// AdamW with decoupled weight decay.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self {
            lr: 2.5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1.25e-3,
        }
    }
}

/// First/second moment buffers, keyed like the parameters they track.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

impl AdamState {
    pub fn new(params: &ParamStore) -> Self {
        let zeros = |t: &Tensor| Tensor::zeros(t.shape());
        Self {
            step: 0,
            m: params.iter().map(|(k, t)| (k.clone(), zeros(t))).collect(),
            v: params.iter().map(|(k, t)| (k.clone(), zeros(t))).collect(),
        }
    }
}

impl AdamW {
    /// One update of every parameter. Parameters without an entry in
    /// `grads` are treated as having zero gradient.
    pub fn step(&self, params: &mut ParamStore, grads: &BTreeMap<String, Tensor>, state: &mut AdamState) -> Result<()> {
        state.step += 1;
        let t = state.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (name, p) in params.iter_mut() {
            let (Some(m), Some(v)) = (state.m.get_mut(name), state.v.get_mut(name)) else {
                return dim_err(format!("optimizer state missing for {}", name));
            };
            if m.shape() != p.shape() || v.shape() != p.shape() {
                return dim_err(format!("optimizer state for {} has shape {:?}, parameter {:?}", name, m.shape(), p.shape()));
            }
            let g = grads.get(name);
            if let Some(g) = g {
                if g.shape() != p.shape() {
                    return dim_err(format!("gradient for {} has shape {:?}, parameter {:?}", name, g.shape(), p.shape()));
                }
            }
            let (pd, md, vd) = (p.data_mut(), m.data_mut(), v.data_mut());
            for i in 0..pd.len() {
                let gi = g.map_or(0.0, |g| g.data()[i]);
                md[i] = self.beta1 * md[i] + (1.0 - self.beta1) * gi;
                vd[i] = self.beta2 * vd[i] + (1.0 - self.beta2) * gi * gi;
                pd[i] -= self.lr * self.weight_decay * pd[i];
                pd[i] -= self.lr * (md[i] / bc1) / ((vd[i] / bc2).sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
