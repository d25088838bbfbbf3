use serde::{Deserialize, Serialize};

use super::NetworkParams;
use crate::error::{Error, Result};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPSILON: f64 = 1e-8;

/// First and second moment estimates, shaped like the network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub first: NetworkParams,
    pub second: NetworkParams,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &NetworkParams) -> Self {
        AdamState {
            first: params.zeros_like(),
            second: params.zeros_like(),
            t: 0,
        }
    }

    /// One bias-corrected Adam update of `params` in place.
    pub fn step(&mut self, params: &mut NetworkParams, grads: &NetworkParams, lr: f64) -> Result<()> {
        if params.num_params() != grads.num_params() || params.num_params() != self.first.num_params() {
            return Err(Error::Shape("gradient and optimizer shapes differ from the network".into()));
        }
        self.t += 1;
        let correct1 = 1.0 - ADAM_BETA1.powi(self.t as i32);
        let correct2 = 1.0 - ADAM_BETA2.powi(self.t as i32);
        let g = grads.slices();
        let mut m = self.first.slices_mut();
        let mut v = self.second.slices_mut();
        for (s, p) in params.slices_mut().into_iter().enumerate() {
            if p.len() != g[s].len() {
                return Err(Error::Shape(format!("parameter block {s} length mismatch")));
            }
            for i in 0..p.len() {
                let gi = g[s][i];
                m[s][i] = ADAM_BETA1 * m[s][i] + (1.0 - ADAM_BETA1) * gi;
                v[s][i] = ADAM_BETA2 * v[s][i] + (1.0 - ADAM_BETA2) * gi * gi;
                let m_hat = m[s][i] / correct1;
                let v_hat = v[s][i] / correct2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPSILON);
            }
        }
        Ok(())
    }
}
