//! First-order optimizers over a model's parameter list.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    #[default]
    AdaptiveMoment,
    PlainSgd,
}

#[derive(Debug, Clone)]
pub enum Optimizer {
    Sgd {
        learning_rate: f64,
    },
    Adam {
        learning_rate: f64,
        beta1: f64,
        beta2: f64,
        epsilon: f64,
        step: u64,
        first: Vec<Tensor>,
        second: Vec<Tensor>,
    },
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, learning_rate: f64, model: &Model) -> Self {
        match kind {
            OptimizerKind::PlainSgd => Optimizer::Sgd { learning_rate },
            OptimizerKind::AdaptiveMoment => {
                let zeros: Vec<Tensor> = model
                    .params()
                    .iter()
                    .map(|p| Tensor::zeros(p.shape()))
                    .collect();
                Optimizer::Adam {
                    learning_rate,
                    beta1: 0.9,
                    beta2: 0.999,
                    epsilon: 1e-8,
                    step: 0,
                    first: zeros.clone(),
                    second: zeros,
                }
            }
        }
    }

    /// Applies one update. `grads` must follow the model's manifest order.
    pub fn step(&mut self, model: &mut Model, grads: &[Tensor]) -> Result<()> {
        let params = model.params_mut()?;
        if params.len() != grads.len() {
            return Err(Error::LengthMismatch {
                what: "gradients vs parameters",
                left: grads.len(),
                right: params.len(),
            });
        }
        match self {
            Optimizer::Sgd { learning_rate } => {
                for (p, g) in params.iter_mut().zip(grads) {
                    for (w, d) in p.data_mut().iter_mut().zip(g.data()) {
                        *w -= *learning_rate * d;
                    }
                }
            }
            Optimizer::Adam {
                learning_rate,
                beta1,
                beta2,
                epsilon,
                step,
                first,
                second,
            } => {
                *step += 1;
                let t = *step as i32;
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                for ((p, g), (m, v)) in params
                    .iter_mut()
                    .zip(grads)
                    .zip(first.iter_mut().zip(second.iter_mut()))
                {
                    let (m, v) = (m.data_mut(), v.data_mut());
                    for (i, (w, &d)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                        m[i] = *beta1 * m[i] + (1.0 - *beta1) * d;
                        v[i] = *beta2 * v[i] + (1.0 - *beta2) * d * d;
                        let m_hat = m[i] / c1;
                        let v_hat = v[i] / c2;
                        *w -= *learning_rate * m_hat / (v_hat.sqrt() + *epsilon);
                    }
                }
            }
        }
        Ok(())
    }
}
