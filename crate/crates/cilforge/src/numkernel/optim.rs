//! First-order optimizers with milestone learning-rate decay.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::params::ParamSet;
use super::tape::GradMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimAlgo {
    SgdMomentum,
    Adam,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OptimConfig {
    pub algo: OptimAlgo,
    pub lr: f64,
    pub momentum: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Epoch indices at which the learning rate is multiplied by `lr_decay`.
    pub milestones: Vec<usize>,
    pub lr_decay: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            algo: OptimAlgo::Adam,
            lr: 0.01,
            momentum: 0.9,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            milestones: Vec::new(),
            lr_decay: 0.1,
        }
    }
}

#[derive(Default, Clone)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

/// Optimizer over any number of [`ParamSet`]s; moment buffers are keyed by
/// the set token plus parameter index, so sets can be stepped independently.
pub struct Optimizer {
    cfg: OptimConfig,
    epoch: usize,
    moments: HashMap<(u64, usize), Moments>,
}

impl Optimizer {
    pub fn new(cfg: OptimConfig) -> Self {
        Optimizer {
            cfg,
            epoch: 0,
            moments: HashMap::new(),
        }
    }

    pub fn set_epoch(&mut self, epoch: usize) {
        self.epoch = epoch;
    }

    /// `base_lr * lr_decay^k` where `k` counts milestones at or before the
    /// current epoch.
    pub fn effective_lr(&self) -> f64 {
        let k = self.cfg.milestones.iter().filter(|&&m| m <= self.epoch).count();
        self.cfg.lr * self.cfg.lr_decay.powi(k as i32)
    }

    /// Apply one update to every trainable parameter that has a gradient.
    pub fn step(&mut self, params: &mut ParamSet, grads: &GradMap) {
        let lr = self.effective_lr();
        let token = params.token();
        for id in params.ids().collect::<Vec<_>>() {
            if !params.get(id).trainable {
                continue;
            }
            let Some(grad) = grads.get(params, id) else {
                continue;
            };
            let g: Vec<f64> = if self.cfg.weight_decay != 0.0 {
                grad.data()
                    .iter()
                    .zip(params.value(id).data())
                    .map(|(g, w)| g + self.cfg.weight_decay * w)
                    .collect()
            } else {
                grad.data().to_vec()
            };
            let state = self
                .moments
                .entry((token, id.0))
                .or_insert_with(|| Moments {
                    m: vec![0.0; g.len()],
                    v: vec![0.0; g.len()],
                    t: 0,
                });
            let w = params.value_mut(id).data_mut();
            match self.cfg.algo {
                OptimAlgo::SgdMomentum => {
                    for i in 0..g.len() {
                        state.m[i] = self.cfg.momentum * state.m[i] + g[i];
                        w[i] -= lr * state.m[i];
                    }
                }
                OptimAlgo::Adam => {
                    state.t += 1;
                    let b1t = 1.0 - self.cfg.beta1.powi(state.t as i32);
                    let b2t = 1.0 - self.cfg.beta2.powi(state.t as i32);
                    for i in 0..g.len() {
                        state.m[i] = self.cfg.beta1 * state.m[i] + (1.0 - self.cfg.beta1) * g[i];
                        state.v[i] =
                            self.cfg.beta2 * state.v[i] + (1.0 - self.cfg.beta2) * g[i] * g[i];
                        let m_hat = state.m[i] / b1t;
                        let v_hat = state.v[i] / b2t;
                        w[i] -= lr * m_hat / (v_hat.sqrt() + self.cfg.eps);
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkernel::{Tape, Tensor};

    #[test]
    fn milestone_schedule_exact() {
        let cfg = OptimConfig {
            lr: 0.5,
            milestones: vec![2, 5, 9],
            lr_decay: 0.1,
            ..OptimConfig::default()
        };
        let mut opt = Optimizer::new(cfg);
        let expect = |e: usize| {
            let k = [2usize, 5, 9].iter().filter(|&&m| m <= e).count();
            0.5 * 0.1f64.powi(k as i32)
        };
        for e in 0..12 {
            opt.set_epoch(e);
            assert_eq!(opt.effective_lr(), expect(e), "epoch {e}");
        }
    }

    fn quadratic_grad(set: &ParamSet, id: crate::numkernel::ParamId) -> GradMap {
        // loss = mean(w^2); grad = 2w/n
        let mut tape = Tape::new();
        let w = tape.param(set, id);
        let sq = tape.square(w).unwrap();
        let loss = tape.mean(sq);
        tape.backward(loss).unwrap().into_param_grads()
    }

    #[test]
    fn sgd_momentum_descends_quadratic() {
        let mut set = ParamSet::new();
        let id = set.add("w", Tensor::from_vec(vec![1.0, -2.0, 0.5]), true);
        let mut opt = Optimizer::new(OptimConfig {
            algo: OptimAlgo::SgdMomentum,
            lr: 0.1,
            ..OptimConfig::default()
        });
        for _ in 0..200 {
            let grads = quadratic_grad(&set, id);
            opt.step(&mut set, &grads);
        }
        for w in set.value(id).data() {
            assert!(w.abs() < 1e-3, "w = {w}");
        }
    }

    #[test]
    fn adam_descends_quadratic() {
        let mut set = ParamSet::new();
        let id = set.add("w", Tensor::from_vec(vec![3.0, -1.0]), true);
        let mut opt = Optimizer::new(OptimConfig::default());
        for _ in 0..2000 {
            let grads = quadratic_grad(&set, id);
            opt.step(&mut set, &grads);
        }
        for w in set.value(id).data() {
            assert!(w.abs() < 5e-2, "w = {w}");
        }
    }

    #[test]
    fn frozen_params_not_updated() {
        let mut set = ParamSet::new();
        let id = set.add("w", Tensor::from_vec(vec![1.0]), true);
        let frozen = set.add("f", Tensor::from_vec(vec![5.0]), false);
        let mut opt = Optimizer::new(OptimConfig::default());
        let mut tape = Tape::new();
        let w = tape.param(&set, id);
        let f = tape.param(&set, frozen);
        let p = tape.mul(w, f).unwrap();
        let loss = tape.mean(p);
        let grads = tape.backward(loss).unwrap().into_param_grads();
        opt.step(&mut set, &grads);
        assert_eq!(set.value(frozen).data(), &[5.0]);
        assert_ne!(set.value(id).data(), &[1.0]);
    }
}
