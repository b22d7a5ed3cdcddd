//! SGD with heavy-ball momentum, no weight decay.

use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

use crate::model::{Group, GroupGrads, ParamSet};

/// One velocity buffer set per `(slot, group)`; slots let several objectives
/// update the same group without sharing momentum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sgd {
    pub momentum: f64,
    velocity: Vec<Velocity>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Velocity {
    slot: u8,
    group: Group,
    buffers: Vec<ArrayD<f64>>,
}

impl Sgd {
    pub fn new(momentum: f64) -> Self {
        Self {
            momentum,
            velocity: Vec::new(),
        }
    }

    /// `v ← μ·v + g`, `θ ← θ − lr·v`.
    pub fn step(&mut self, slot: u8, group: Group, params: &mut ParamSet, grads: &GroupGrads, lr: f64) {
        assert_eq!(params.values.len(), grads.len(), "gradient count mismatch for {group:?}");
        let mu = self.momentum;
        let pos = match self.velocity.iter().position(|v| v.slot == slot && v.group == group) {
            Some(pos) => pos,
            None => {
                self.velocity.push(Velocity {
                    slot,
                    group,
                    buffers: params.zeros_like(),
                });
                self.velocity.len() - 1
            }
        };
        let vel = &mut self.velocity[pos].buffers;
        for ((p, g), v) in params.values.iter_mut().zip(grads).zip(vel.iter_mut()) {
            assert_eq!(p.shape(), g.shape(), "gradient shape mismatch for {group:?}");
            v.zip_mut_with(g, |v, &g| *v = mu * *v + g);
            p.zip_mut_with(v, |p, &v| *p -= lr * v);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;

    #[test]
    fn momentum_accumulates() {
        let mut params = ParamSet {
            names: vec!["w".into()],
            values: vec![ArrayD::from_elem(IxDyn(&[2]), 1.0)],
        };
        let g = vec![ArrayD::from_elem(IxDyn(&[2]), 1.0)];
        let mut opt = Sgd::new(0.9);
        opt.step(0, Group::Mapping, &mut params, &g, 0.1);
        assert!((params.values[0][[0]] - 0.9).abs() < 1e-15);
        opt.step(0, Group::Mapping, &mut params, &g, 0.1);
        assert!((params.values[0][[0]] - (0.9 - 0.19)).abs() < 1e-15);
        // a separate slot has its own velocity
        opt.step(1, Group::Mapping, &mut params, &g, 0.1);
        assert!((params.values[0][[0]] - (0.71 - 0.1)).abs() < 1e-15);
    }
}
