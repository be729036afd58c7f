//! Adam optimizer over named parameter sets.
//!
//! Moments are keyed by parameter name and lazily created. Parameters
//! without a gradient in a given step are skipped entirely (their moments
//! and update counts do not advance), so a parameter that only sometimes
//! participates in the loss — the null embedding during conditional
//! draws — keeps correct bias correction.

use std::collections::BTreeMap;

use super::tensor::Tensor;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AdamError {
    #[error("non-finite gradient for parameter '{0}'; step rejected")]
    NonFiniteGradient(String),
    #[error("gradient shape {got:?} does not match parameter '{name}' shape {want:?}")]
    ShapeMismatch {
        name: String,
        want: Vec<usize>,
        got: Vec<usize>,
    },
}

#[derive(Clone, Debug)]
struct Moments {
    m: Tensor,
    v: Tensor,
    t: u64,
}

/// Optimizer state: hyperparameters plus per-parameter moment estimates.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    moments: BTreeMap<String, Moments>,
}

impl AdamState {
    pub fn new(lr: f64) -> AdamState {
        assert!(lr >= 0.0, "negative learning rate");
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    /// Global step count; strictly increasing across successful steps.
    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One Adam update. Gradients are validated before any mutation; a
    /// non-finite gradient rejects the whole step.
    pub fn step(
        &mut self,
        params: &mut [(&str, &mut Tensor)],
        grads: &BTreeMap<String, Tensor>,
    ) -> Result<(), AdamError> {
        for (name, param) in params.iter() {
            if let Some(g) = grads.get(*name) {
                if !g.is_finite() {
                    return Err(AdamError::NonFiniteGradient(name.to_string()));
                }
                if g.shape() != param.shape() {
                    return Err(AdamError::ShapeMismatch {
                        name: name.to_string(),
                        want: param.shape().to_vec(),
                        got: g.shape().to_vec(),
                    });
                }
            }
        }
        self.step += 1;
        for (name, param) in params.iter_mut() {
            let Some(g) = grads.get(*name) else { continue };
            let entry = self
                .moments
                .entry(name.to_string())
                .or_insert_with(|| Moments {
                    m: Tensor::zeros_like(param),
                    v: Tensor::zeros_like(param),
                    t: 0,
                });
            entry.t += 1;
            let (b1, b2) = (self.beta1, self.beta2);
            let bc1 = 1.0 - b1.powi(entry.t as i32);
            let bc2 = 1.0 - b2.powi(entry.t as i32);
            let pdata = param.data_mut();
            let mdata = entry.m.data_mut();
            let vdata = entry.v.data_mut();
            for i in 0..pdata.len() {
                let gi = g.data()[i];
                mdata[i] = b1 * mdata[i] + (1.0 - b1) * gi;
                vdata[i] = b2 * vdata[i] + (1.0 - b2) * gi * gi;
                let mhat = mdata[i] / bc1;
                let vhat = vdata[i] / bc2;
                pdata[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }

    /// Serializes state into named arrays (for checkpoints).
    pub fn to_arrays(&self, prefix: &str) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        out.insert(format!("{prefix}.step"), Tensor::scalar(self.step as f64));
        out.insert(format!("{prefix}.lr"), Tensor::scalar(self.lr));
        for (name, mom) in &self.moments {
            out.insert(format!("{prefix}.m.{name}"), mom.m.clone());
            out.insert(format!("{prefix}.v.{name}"), mom.v.clone());
            out.insert(format!("{prefix}.t.{name}"), Tensor::scalar(mom.t as f64));
        }
        out
    }

    /// Rebuilds state from arrays written by [`AdamState::to_arrays`].
    pub fn from_arrays(prefix: &str, arrays: &BTreeMap<String, Tensor>) -> Option<AdamState> {
        let step = arrays.get(&format!("{prefix}.step"))?.item() as u64;
        let lr = arrays.get(&format!("{prefix}.lr"))?.item();
        let mut state = AdamState::new(lr);
        state.step = step;
        let mprefix = format!("{prefix}.m.");
        for (key, m) in arrays.range(mprefix.clone()..) {
            let Some(name) = key.strip_prefix(&mprefix) else { break };
            let v = arrays.get(&format!("{prefix}.v.{name}"))?.clone();
            let t = arrays.get(&format!("{prefix}.t.{name}"))?.item() as u64;
            state
                .moments
                .insert(name.to_string(), Moments { m: m.clone(), v, t });
        }
        Some(state)
    }
}
