//! SGD and Adam over the model's parameters in visitation order.

use super::config::OptimizerSpec;
use super::model::{LayerGrads, ToyModel};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub enum Optimizer {
    Sgd,
    Adam {
        beta1: f64,
        beta2: f64,
        eps: f64,
        step: u64,
        m: Vec<Vec<f64>>,
        v: Vec<Vec<f64>>,
    },
}

impl Optimizer {
    pub fn new(spec: OptimizerSpec) -> Self {
        match spec {
            OptimizerSpec::Sgd => Optimizer::Sgd,
            OptimizerSpec::Adam { beta1, beta2, eps } => Optimizer::Adam {
                beta1,
                beta2,
                eps,
                step: 0,
                m: Vec::new(),
                v: Vec::new(),
            },
        }
    }

    /// Applies one update with learning rate `lr`. `grads` must come from
    /// `ToyModel::backward` on the same model (layer order and parameter
    /// names match). Every gradient is multiplied by `grad_factor` first.
    pub fn step(
        &mut self,
        model: &mut ToyModel,
        grads: &[LayerGrads],
        lr: f64,
        grad_factor: f64,
    ) -> Result<()> {
        if grads.len() != model.layers().len() {
            return Err(Error::Shape(format!(
                "{} gradient sets for {} layers",
                grads.len(),
                model.layers().len()
            )));
        }
        let mut slot = 0;
        if let Optimizer::Adam { step, .. } = self {
            *step += 1;
        }
        for (nl, lg) in model.layers_mut().iter_mut().zip(grads) {
            for (name, param) in nl.layer.params_mut() {
                let g = lg.grads.get(name).ok_or_else(|| {
                    Error::Shape(format!("missing gradient {}.{name}", lg.key.name))
                })?;
                if g.shape() != param.shape() {
                    return Err(Error::Shape(format!(
                        "gradient {}.{name} has shape {:?}, parameter {:?}",
                        lg.key.name,
                        g.shape(),
                        param.shape()
                    )));
                }
                self.update(slot, param.data_mut(), g.data(), lr, grad_factor);
                slot += 1;
            }
        }
        Ok(())
    }

    fn update(&mut self, slot: usize, p: &mut [f64], g: &[f64], lr: f64, factor: f64) {
        let scaled = |x: f64| if factor == 1.0 { x } else { x * factor };
        match self {
            Optimizer::Sgd => {
                for (w, &gv) in p.iter_mut().zip(g) {
                    *w -= lr * scaled(gv);
                }
            }
            Optimizer::Adam {
                beta1,
                beta2,
                eps,
                step,
                m,
                v,
            } => {
                if m.len() <= slot {
                    m.push(vec![0.0; p.len()]);
                    v.push(vec![0.0; p.len()]);
                }
                let c1 = 1.0 - beta1.powi(*step as i32);
                let c2 = 1.0 - beta2.powi(*step as i32);
                for ((w, &gv), (mi, vi)) in p
                    .iter_mut()
                    .zip(g)
                    .zip(m[slot].iter_mut().zip(v[slot].iter_mut()))
                {
                    let gv = scaled(gv);
                    *mi = *beta1 * *mi + (1.0 - *beta1) * gv;
                    *vi = *beta2 * *vi + (1.0 - *beta2) * gv * gv;
                    *w -= lr * (*mi / c1) / ((*vi / c2).sqrt() + *eps);
                }
            }
        }
    }
}
