use ndarray::{ArrayD, Zip};
use serde::{Deserialize, Serialize};

use crate::net::ParamSet;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
        }
    }

    /// Updates moments and, unless `lr` is zero, the parameters.
    pub fn step(&self, params: &mut ParamSet, grads: &ParamSet, state: &mut AdamState) {
        state.t += 1;
        let bc1 = 1.0 - self.beta1.powi(state.t as i32);
        let bc2 = 1.0 - self.beta2.powi(state.t as i32);
        for (name, p) in params.iter_mut() {
            let g = &grads[name];
            let m = state.m.get_mut(name).expect("moment for every parameter");
            let v = state.v.get_mut(name).expect("moment for every parameter");
            Zip::from(&mut *m).and(&mut *v).and(g).for_each(|m, v, &g| {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            });
            if self.lr == 0.0 {
                continue;
            }
            Zip::from(p).and(&*m).and(&*v).for_each(|p, &m, &v| {
                *p -= self.lr * (m / bc1) / ((v / bc2).sqrt() + self.eps);
            });
        }
    }
}

/// First and second moments plus the step count.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AdamState {
    pub m: ParamSet,
    pub v: ParamSet,
    pub t: u64,
}

impl AdamState {
    pub fn zeros_like(params: &ParamSet) -> Self {
        let zeros: ParamSet = params
            .iter()
            .map(|(k, a)| (k.clone(), ArrayD::zeros(a.raw_dim())))
            .collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }
}

/// Clamps every parameter into `[-c, c]`.
pub fn clip_weights(params: &mut ParamSet, c: f64) {
    for a in params.values_mut() {
        a.mapv_inplace(|v| v.clamp(-c, c));
    }
}
