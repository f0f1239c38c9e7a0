use serde::{Deserialize, Serialize};

use super::Parameters;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl OptimizerConfig {
    pub fn adam(lr: f64, weight_decay: f64) -> Self {
        Self {
            kind: OptimizerKind::Adam,
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn sgd(lr: f64, weight_decay: f64) -> Self {
        Self {
            kind: OptimizerKind::Sgd,
            ..Self::adam(lr, weight_decay)
        }
    }

    pub fn with_lr(self, lr: f64) -> Self {
        Self { lr, ..self }
    }
}

/// Optimizer bound to one parameter layout.
///
/// SGD applies coupled decay `p ← p − η(g + λp)`. Adam applies the
/// bias-corrected moment update with decoupled decay
/// `p ← p − η(m̂/(√v̂ + ε) + λp)`.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    config: OptimizerConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl OptimizerState {
    pub fn new(config: OptimizerConfig, params: &impl Parameters) -> Self {
        let n = match config.kind {
            OptimizerKind::Adam => params.num_params(),
            OptimizerKind::Sgd => 0,
        };
        Self {
            config,
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step<P, G>(&mut self, params: &mut P, grads: &G) -> Result<()>
    where
        P: Parameters + ?Sized,
        G: Parameters + ?Sized,
    {
        if params.shapes() != grads.shapes() {
            return Err(Error::shape(
                "optimizer_step",
                format!("params {:?} vs grads {:?}", params.shapes(), grads.shapes()),
            ));
        }
        let grad_tensors = grads.tensors();
        if grad_tensors.iter().any(|t| !t.is_finite()) {
            return Err(Error::Numeric {
                client: 0,
                batch: 0,
                msg: "non-finite gradient".into(),
            });
        }
        let OptimizerConfig {
            kind,
            lr,
            weight_decay: wd,
            beta1,
            beta2,
            eps,
        } = self.config;
        self.step += 1;
        match kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.tensors_mut().into_iter().zip(grad_tensors) {
                    for (pv, gv) in p.as_mut_slice().iter_mut().zip(g.as_slice()) {
                        *pv -= lr * (gv + wd * *pv);
                    }
                }
            }
            OptimizerKind::Adam => {
                if self.m.len() != params.num_params() {
                    return Err(Error::shape(
                        "optimizer_step",
                        format!(
                            "moment buffers hold {} values, params {}",
                            self.m.len(),
                            params.num_params()
                        ),
                    ));
                }
                let t = self.step as i32;
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                let mut offset = 0;
                for (p, g) in params.tensors_mut().into_iter().zip(grad_tensors) {
                    let n = p.len();
                    let m = &mut self.m[offset..offset + n];
                    let v = &mut self.v[offset..offset + n];
                    for (((pv, &gv), mv), vv) in p.as_mut_slice().iter_mut().zip(g.as_slice()).zip(m).zip(v) {
                        *mv = beta1 * *mv + (1.0 - beta1) * gv;
                        *vv = beta2 * *vv + (1.0 - beta2) * gv * gv;
                        let m_hat = *mv / c1;
                        let v_hat = *vv / c2;
                        *pv -= lr * (m_hat / (v_hat.sqrt() + eps) + wd * *pv);
                    }
                    offset += n;
                }
            }
        }
        Ok(())
    }
}
