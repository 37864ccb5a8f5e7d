//! First-order optimizers and learning-rate schedules.

use std::collections::{BTreeMap, HashMap};

use dpmkit_autograd::Matrix;
use ndarray::Zip;

use crate::params::ParamStore;

#[derive(Clone, Debug, PartialEq)]
pub enum LrSchedule {
    Constant,
    /// Linear warmup, then cosine decay to zero at `total_epochs`.
    WarmupCosine {
        warmup_epochs: usize,
        total_epochs: usize,
    },
    /// Linear warmup, then multiply by `gamma` at each milestone epoch.
    WarmupStep {
        warmup_epochs: usize,
        milestones: Vec<usize>,
        gamma: f64,
    },
}

/// Warmup starts at this fraction of the base rate.
const WARMUP_START: f64 = 0.1;

impl LrSchedule {
    /// Multiplier applied to the base rate during `epoch` (0-based).
    pub fn factor(&self, epoch: usize) -> f64 {
        let warm = |w: usize| {
            if epoch < w {
                Some(WARMUP_START + (1.0 - WARMUP_START) * epoch as f64 / w as f64)
            } else {
                None
            }
        };
        match self {
            LrSchedule::Constant => 1.0,
            LrSchedule::WarmupCosine {
                warmup_epochs,
                total_epochs,
            } => warm(*warmup_epochs).unwrap_or_else(|| {
                let span = total_epochs.saturating_sub(*warmup_epochs).max(1) as f64;
                let t = (epoch - warmup_epochs) as f64 / span;
                0.5 * (1.0 + (std::f64::consts::PI * t).cos())
            }),
            LrSchedule::WarmupStep {
                warmup_epochs,
                milestones,
                gamma,
            } => warm(*warmup_epochs).unwrap_or_else(|| {
                let passed = milestones.iter().filter(|&&m| epoch >= m).count();
                gamma.powi(passed as i32)
            }),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OptimizerKind {
    Adam { beta1: f64, beta2: f64, eps: f64 },
    Sgd { momentum: f64 },
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimSpec {
    pub kind: OptimizerKind,
    pub lr: f64,
    /// L2 penalty added to the gradient.
    pub weight_decay: f64,
    pub schedule: LrSchedule,
}

#[derive(Default)]
struct Slot {
    m: Option<Matrix>,
    v: Option<Matrix>,
    t: i32,
}

/// Applies one optimizer spec to the parameters it is handed.
pub struct Optimizer {
    spec: OptimSpec,
    state: HashMap<String, Slot>,
}

impl Optimizer {
    pub fn new(spec: OptimSpec) -> Self {
        Self {
            spec,
            state: HashMap::new(),
        }
    }

    pub fn spec(&self) -> &OptimSpec {
        &self.spec
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.spec.lr * self.spec.schedule.factor(epoch)
    }

    /// Updates `name` in place. Names are visited in the caller's order, so
    /// iterate gradients from a `BTreeMap` for reproducibility.
    pub fn step(&mut self, store: &mut ParamStore, name: &str, grad: &Matrix, epoch: usize) {
        let lr = self.lr_at(epoch);
        let wd = self.spec.weight_decay;
        let Some(param) = store.get_mut(name) else {
            return;
        };
        let slot = self.state.entry(name.to_string()).or_default();
        let mut g = grad.clone();
        if wd != 0.0 {
            g.zip_mut_with(param, |gv, &pv| *gv += wd * pv);
        }
        match self.spec.kind {
            OptimizerKind::Adam { beta1, beta2, eps } => {
                slot.t += 1;
                let m = slot.m.get_or_insert_with(|| Matrix::zeros(g.raw_dim()));
                let v = slot.v.get_or_insert_with(|| Matrix::zeros(g.raw_dim()));
                let bc1 = 1.0 - beta1.powi(slot.t);
                let bc2 = 1.0 - beta2.powi(slot.t);
                Zip::from(param)
                    .and(m)
                    .and(v)
                    .and(&g)
                    .for_each(|p, m, v, &gv| {
                        *m = beta1 * *m + (1.0 - beta1) * gv;
                        *v = beta2 * *v + (1.0 - beta2) * gv * gv;
                        let mh = *m / bc1;
                        let vh = *v / bc2;
                        *p -= lr * mh / (vh.sqrt() + eps);
                    });
            }
            OptimizerKind::Sgd { momentum } => {
                let buf = slot.m.get_or_insert_with(|| Matrix::zeros(g.raw_dim()));
                Zip::from(param).and(buf).and(&g).for_each(|p, b, &gv| {
                    *b = momentum * *b + gv;
                    *p -= lr * *b;
                });
            }
        }
    }
}

/// Routes each trainable parameter to the first group whose predicate claims it.
pub struct GroupedOptimizer {
    groups: Vec<(Box<dyn Fn(&str) -> bool + Send + Sync>, Optimizer)>,
}

impl GroupedOptimizer {
    pub fn new() -> Self {
        Self { groups: Vec::new() }
    }

    pub fn add_group(
        &mut self,
        claims: impl Fn(&str) -> bool + Send + Sync + 'static,
        spec: OptimSpec,
    ) {
        self.groups.push((Box::new(claims), Optimizer::new(spec)));
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &BTreeMap<String, Matrix>, epoch: usize) {
        for (name, grad) in grads {
            if let Some((_, opt)) = self.groups.iter_mut().find(|(claims, _)| claims(name)) {
                opt.step(store, name, grad, epoch);
            }
        }
    }
}

impl Default for GroupedOptimizer {
    fn default() -> Self {
        Self::new()
    }
}
