use serde::{Deserialize, Serialize};

use crate::tensor::{Gradients, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum OptimizerConfig {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Applies updates to every trainable parameter; frozen ones are skipped.
pub struct Optimizer {
    config: OptimizerConfig,
    lr: f64,
    step: i32,
    moments: Vec<Option<(Vec<f64>, Vec<f64>)>>,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig, lr: f64, store: &ParamStore) -> Self {
        let moments = store
            .iter()
            .map(|(_, p)| match config {
                OptimizerConfig::Adam { .. } if !p.frozen => Some((vec![0.0; p.value.len()], vec![0.0; p.value.len()])),
                _ => None,
            })
            .collect();
        Optimizer {
            config,
            lr,
            step: 0,
            moments,
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) {
        self.step += 1;
        let ids: Vec<_> = store.trainable().collect();
        for id in ids {
            let grad = grads.param(id);
            let value = store.value_mut(id).data_mut();
            match self.config {
                OptimizerConfig::Sgd => {
                    if let Some(g) = grad {
                        for (v, g) in value.iter_mut().zip(g) {
                            *v -= self.lr * g;
                        }
                    }
                }
                OptimizerConfig::Adam { beta1, beta2, eps } => {
                    let (m, s) = self.moments[id.index()].as_mut().expect("adam state");
                    let c1 = 1.0 - beta1.powi(self.step);
                    let c2 = 1.0 - beta2.powi(self.step);
                    for i in 0..value.len() {
                        let g = grad.map_or(0.0, |g| g[i]);
                        m[i] = beta1 * m[i] + (1.0 - beta1) * g;
                        s[i] = beta2 * s[i] + (1.0 - beta2) * g * g;
                        value[i] -= self.lr * (m[i] / c1) / ((s[i] / c2).sqrt() + eps);
                    }
                }
            }
        }
    }
}
