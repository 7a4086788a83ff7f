//! First-order optimizers over a [`ParamStore`].

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamGrads, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    Adam,
    SgdMomentum,
}

impl std::fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            OptimizerKind::Adam => "adam",
            OptimizerKind::SgdMomentum => "sgd-momentum",
        })
    }
}

/// Optimizer state. Parameters without a gradient in a step are left alone
/// and keep their moment buffers untouched.
#[derive(Clone, Debug)]
pub enum Optimizer {
    Adam {
        lr: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
        step: u64,
        m: Vec<Option<Array2<f64>>>,
        v: Vec<Option<Array2<f64>>>,
    },
    Sgd {
        lr: f64,
        momentum: f64,
        velocity: Vec<Option<Array2<f64>>>,
    },
}

impl Optimizer {
    pub fn adam(lr: f64, n_params: usize) -> Self {
        Optimizer::Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: vec![None; n_params],
            v: vec![None; n_params],
        }
    }

    pub fn sgd(lr: f64, momentum: f64, n_params: usize) -> Self {
        Optimizer::Sgd {
            lr,
            momentum,
            velocity: vec![None; n_params],
        }
    }

    pub fn new(kind: OptimizerKind, lr: f64, momentum: f64, n_params: usize) -> Self {
        match kind {
            OptimizerKind::Adam => Self::adam(lr, n_params),
            OptimizerKind::SgdMomentum => Self::sgd(lr, momentum, n_params),
        }
    }

    pub fn learning_rate(&self) -> f64 {
        match self {
            Optimizer::Adam { lr, .. } | Optimizer::Sgd { lr, .. } => *lr,
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &ParamGrads) {
        match self {
            Optimizer::Adam {
                lr,
                beta1,
                beta2,
                eps,
                step,
                m,
                v,
            } => {
                *step += 1;
                let bc1 = 1.0 - beta1.powi(*step as i32);
                let bc2 = 1.0 - beta2.powi(*step as i32);
                let ids: Vec<_> = store.ids().collect();
                for id in ids {
                    let Some(g) = grads.get(id) else { continue };
                    let i = id.index();
                    let mi = m[i].get_or_insert_with(|| Array2::zeros(g.dim()));
                    let vi = v[i].get_or_insert_with(|| Array2::zeros(g.dim()));
                    let p = store.get_mut(id);
                    ndarray::Zip::from(p)
                        .and(mi)
                        .and(vi)
                        .and(g)
                        .for_each(|p, m, v, &g| {
                            *m = *beta1 * *m + (1.0 - *beta1) * g;
                            *v = *beta2 * *v + (1.0 - *beta2) * g * g;
                            let mh = *m / bc1;
                            let vh = *v / bc2;
                            *p -= *lr * mh / (vh.sqrt() + *eps);
                        });
                }
            }
            Optimizer::Sgd {
                lr,
                momentum,
                velocity,
            } => {
                let ids: Vec<_> = store.ids().collect();
                for id in ids {
                    let Some(g) = grads.get(id) else { continue };
                    let vel = velocity[id.index()].get_or_insert_with(|| Array2::zeros(g.dim()));
                    let p = store.get_mut(id);
                    ndarray::Zip::from(p).and(vel).and(g).for_each(|p, v, &g| {
                        *v = *momentum * *v + g;
                        *p -= *lr * *v;
                    });
                }
            }
        }
    }
}
