//! Adam optimizer with per-parameter moment state and step counters.

use std::collections::BTreeMap;

use crate::nn::graph::GradMap;
use crate::nn::layers::ParamStore;
use crate::nn::tensor::Tensor;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

struct Moments {
    m: Tensor,
    v: Tensor,
    t: u64,
}

/// Adam with bias correction. Parameters absent from a gradient map keep
/// their state untouched, so heads trained in alternating phases stay
/// correctly bias-corrected.
pub struct Adam {
    pub lr: f64,
    state: BTreeMap<String, Moments>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self { lr, state: BTreeMap::new() }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &GradMap) {
        for (name, g) in grads {
            let p = store.get_mut(name);
            let entry = self.state.entry(name.clone()).or_insert_with(|| Moments {
                m: Tensor::zeros(g.rows(), g.cols()),
                v: Tensor::zeros(g.rows(), g.cols()),
                t: 0,
            });
            entry.t += 1;
            let bc1 = 1.0 - BETA1.powi(entry.t as i32);
            let bc2 = 1.0 - BETA2.powi(entry.t as i32);
            let pd = p.data_mut();
            for ((pv, gv), (mv, vv)) in pd
                .iter_mut()
                .zip(g.data())
                .zip(entry.m.data_mut().iter_mut().zip(entry.v.data_mut()))
            {
                *mv = BETA1 * *mv + (1.0 - BETA1) * gv;
                *vv = BETA2 * *vv + (1.0 - BETA2) * gv * gv;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                *pv -= self.lr * mhat / (vhat.sqrt() + EPS);
            }
        }
    }
}
