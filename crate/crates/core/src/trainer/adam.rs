use std::collections::BTreeMap;

use crate::avmodel::ModelParams;
use crate::diffcore::Tensor;
use crate::error::{Error, Result};

/// Adaptive moment estimation with bias correction and optional decoupled
/// weight decay. Parameters are rounded to binary32 after every step so that
/// the in-memory model always equals its checkpoint.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Apply one update. `grads` is aligned with `params.trainable_names()`.
    pub fn step(&mut self, params: &mut ModelParams, names: &[String], grads: &[Tensor]) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (name, g) in names.iter().zip(grads) {
            let p = params
                .get_mut(name)
                .ok_or_else(|| Error::Contract(format!("optimizer got unknown parameter {name}")))?;
            let n = p.numel();
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
            for (((x, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let update = (*mi / c1) / ((*vi / c2).sqrt() + self.eps);
                *x -= self.lr * (update + self.weight_decay * *x);
            }
            p.round_to_f32();
            if !p.is_finite() {
                return Err(Error::Numeric {
                    op: "adam",
                    detail: format!("parameter {name} became non-finite at step {}", self.step),
                });
            }
        }
        Ok(())
    }
}
