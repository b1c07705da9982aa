//! Parameter application for ascent gradients: plain SGD and bias-corrected ADAM.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::model::HelmholtzMachine;
use crate::{Error, Result};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

const STATE_MAGIC: &[u8; 6] = b"HMOPT1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    #[default]
    Sgd,
    Adam,
}

/// ADAM moments for one parameter tensor. Each tensor counts its own steps.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

/// Ascent update of `params` by `grad` (both flat, same length).
///
/// SGD: `theta <- theta + lr * g`, i.e. descent on the negated objective.
/// ADAM: standard bias-corrected moments on the same ascent direction.
pub fn apply_update(
    params: &mut [f64],
    grad: &[f64],
    kind: OptimizerKind,
    moments: &mut Moments,
    lr: f64,
) {
    assert_eq!(params.len(), grad.len(), "parameter/gradient length mismatch");
    match kind {
        OptimizerKind::Sgd => {
            for (p, g) in params.iter_mut().zip(grad) {
                *p += lr * g;
            }
        }
        OptimizerKind::Adam => {
            if moments.m.len() != params.len() {
                moments.m = vec![0.0; params.len()];
                moments.v = vec![0.0; params.len()];
                moments.t = 0;
            }
            moments.t += 1;
            let bc1 = 1.0 - ADAM_BETA1.powi(moments.t as i32);
            let bc2 = 1.0 - ADAM_BETA2.powi(moments.t as i32);
            for ((p, &g), (m, v)) in params
                .iter_mut()
                .zip(grad)
                .zip(moments.m.iter_mut().zip(moments.v.iter_mut()))
            {
                *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
                *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                *p += lr * mhat / (vhat.sqrt() + ADAM_EPS);
            }
        }
    }
}

/// Optimizer state for every tensor of a machine: `p` layers, the prior, then `q` layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub lr: f64,
    slots: Vec<Moments>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, hm: &HelmholtzMachine) -> Self {
        let depth = hm.architecture().depth();
        Self {
            kind,
            lr,
            slots: vec![Moments::default(); 2 * depth + 1],
        }
    }

    pub(crate) fn p_slot(&mut self, layer: usize) -> &mut Moments {
        &mut self.slots[layer]
    }

    pub(crate) fn prior_slot(&mut self) -> &mut Moments {
        let depth = (self.slots.len() - 1) / 2;
        &mut self.slots[depth]
    }

    pub(crate) fn q_slot(&mut self, layer: usize) -> &mut Moments {
        let depth = (self.slots.len() - 1) / 2;
        &mut self.slots[depth + 1 + layer]
    }

    /// Serializes the ADAM moments (empty for SGD) for run resumption.
    pub fn write_state<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(STATE_MAGIC)?;
        w.write_all(&[matches!(self.kind, OptimizerKind::Adam) as u8])?;
        w.write_all(&(self.slots.len() as u32).to_le_bytes())?;
        for s in &self.slots {
            w.write_all(&s.t.to_le_bytes())?;
            w.write_all(&(s.m.len() as u64).to_le_bytes())?;
            for x in s.m.iter().chain(&s.v) {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_state<R: Read>(&mut self, mut r: R) -> Result<()> {
        let bad = |m: &str| Error::Config(format!("optimizer state: {m}"));
        let mut magic = [0u8; 6];
        r.read_exact(&mut magic)?;
        if &magic != STATE_MAGIC {
            return Err(bad("bad magic"));
        }
        let mut b = [0u8; 1];
        r.read_exact(&mut b)?;
        let kind = if b[0] == 1 {
            OptimizerKind::Adam
        } else {
            OptimizerKind::Sgd
        };
        if kind != self.kind {
            return Err(bad("optimizer kind differs from the configuration"));
        }
        let mut u4 = [0u8; 4];
        r.read_exact(&mut u4)?;
        if u32::from_le_bytes(u4) as usize != self.slots.len() {
            return Err(bad("slot count differs from the model"));
        }
        let mut u8b = [0u8; 8];
        for s in &mut self.slots {
            r.read_exact(&mut u8b)?;
            s.t = u64::from_le_bytes(u8b);
            r.read_exact(&mut u8b)?;
            let len = u64::from_le_bytes(u8b) as usize;
            if len > (1 << 32) {
                return Err(bad("implausible moment length"));
            }
            let mut read_vec = |len: usize| -> std::io::Result<Vec<f64>> {
                let mut buf = vec![0u8; len * 8];
                r.read_exact(&mut buf)?;
                Ok(buf
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect())
            };
            s.m = read_vec(len)?;
            s.v = read_vec(len)?;
        }
        Ok(())
    }
}
