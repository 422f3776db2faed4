//! Adam with bias correction and an optional per-coordinate freeze mask.
//!
//! Masked-off coordinates are held at exactly 0.0: their gradients are
//! discarded, both moment buffers are cleared, and the value is rewritten
//! to positive zero after every step. Without clearing the moments, stale
//! momentum would drag a freshly zeroed weight away from zero on the next
//! step, silently undoing the freeze.

use indexmap::IndexMap;

use crate::{shape_err, Result};

/// One parameter's view for a single optimizer step.
pub struct AdamParam<'a> {
    pub name: &'a str,
    pub value: &'a mut [f64],
    pub grad: &'a [f64],
    /// `false` entries are frozen at 0.0.
    pub mask: Option<&'a [bool]>,
}

struct Slot {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Optimizer state: first/second moment buffers keyed by parameter name,
/// plus the shared step counter that drives bias correction and warmup.
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Steps over which the learning rate ramps linearly from lr/warmup
    /// to lr; 0 disables the ramp.
    pub warmup_steps: usize,
    t: usize,
    slots: IndexMap<String, Slot>,
}

impl AdamState {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            warmup_steps: 100,
            t: 0,
            slots: IndexMap::new(),
        }
    }

    /// Completed steps.
    pub fn steps(&self) -> usize {
        self.t
    }

    /// Learning rate the *next* step will use.
    pub fn next_lr(&self) -> f64 {
        let t = (self.t + 1) as f64;
        if self.warmup_steps == 0 {
            self.lr
        } else {
            self.lr * (t / self.warmup_steps as f64).min(1.0)
        }
    }

    /// Apply one update to every listed parameter. The step counter ticks
    /// once per call, not once per parameter.
    pub fn step(&mut self, params: &mut [AdamParam<'_>]) -> Result<()> {
        let lr = self.next_lr();
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for p in params {
            if p.value.len() != p.grad.len() {
                return Err(shape_err(
                    "adam",
                    format!("{}: value {} vs grad {}", p.name, p.value.len(), p.grad.len()),
                ));
            }
            if let Some(mask) = p.mask {
                if mask.len() != p.value.len() {
                    return Err(shape_err(
                        "adam",
                        format!("{}: mask {} vs value {}", p.name, mask.len(), p.value.len()),
                    ));
                }
            }
            let slot = self.slots.entry(p.name.to_string()).or_insert_with(|| Slot {
                m: vec![0.0; p.value.len()],
                v: vec![0.0; p.value.len()],
            });
            if slot.m.len() != p.value.len() {
                return Err(shape_err(
                    "adam",
                    format!("{}: state {} vs value {}", p.name, slot.m.len(), p.value.len()),
                ));
            }
            for i in 0..p.value.len() {
                if let Some(mask) = p.mask {
                    if !mask[i] {
                        slot.m[i] = 0.0;
                        slot.v[i] = 0.0;
                        p.value[i] = 0.0;
                        continue;
                    }
                }
                let g = p.grad[i];
                slot.m[i] = self.beta1 * slot.m[i] + (1.0 - self.beta1) * g;
                slot.v[i] = self.beta2 * slot.v[i] + (1.0 - self.beta2) * g * g;
                let mhat = slot.m[i] / bc1;
                let vhat = slot.v[i] / bc2;
                p.value[i] -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
