use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::model::ModelParams;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    #[default]
    Adam,
    Sgd,
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "adam" => Ok(Self::Adam),
            "sgd" => Ok(Self::Sgd),
            _ => Err(Error::Config(format!("optimizer {s:?} must be adam or sgd"))),
        }
    }
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Adam => "adam",
            Self::Sgd => "sgd",
        })
    }
}

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// Adam moments (empty for SGD), aligned with the parameter enumeration.
#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, params: &ModelParams) -> Result<Self> {
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be finite and non-negative, got {lr}")));
        }
        let zeros = || -> Vec<Vec<f64>> {
            match kind {
                OptimizerKind::Adam => params.tensors().iter().map(|t| vec![0.0; t.numel()]).collect(),
                OptimizerKind::Sgd => Vec::new(),
            }
        };
        Ok(Self {
            kind,
            lr,
            step: 0,
            first: zeros(),
            second: zeros(),
        })
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update. `grads[i]` is `None` for tensors the loss did not
    /// reach; those are left untouched, as are frozen tensors.
    pub fn apply(&mut self, params: &mut ModelParams, grads: &[Option<Vec<f64>>]) -> Result<()> {
        if grads.len() != params.tensors().len() {
            return Err(Error::dim("optimizer gradients", &[params.tensors().len()], &[grads.len()]));
        }
        for (i, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Numeric(format!(
                        "non-finite gradient in {}; training aborted",
                        params.names()[i]
                    )));
                }
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let (c1, c2) = (1.0 - BETA1.powi(t), 1.0 - BETA2.powi(t));
        for (i, (tensor, g)) in params.tensors_mut().iter_mut().zip(grads).enumerate() {
            let Some(g) = g else { continue };
            if !tensor.requires_grad() {
                continue;
            }
            let p = tensor.data_mut();
            match self.kind {
                OptimizerKind::Sgd => {
                    for (p, g) in p.iter_mut().zip(g) {
                        *p -= self.lr * g;
                    }
                }
                OptimizerKind::Adam => {
                    let (m, v) = (&mut self.first[i], &mut self.second[i]);
                    for j in 0..p.len() {
                        m[j] = BETA1 * m[j] + (1.0 - BETA1) * g[j];
                        v[j] = BETA2 * v[j] + (1.0 - BETA2) * g[j] * g[j];
                        let m_hat = m[j] / c1;
                        let v_hat = v[j] / c2;
                        p[j] -= self.lr * m_hat / (v_hat.sqrt() + EPSILON);
                    }
                }
            }
        }
        Ok(())
    }

    /// State as named tensors for checkpointing.
    pub(crate) fn state_tensors(&self, params: &ModelParams) -> Vec<(String, Tensor)> {
        let kind = match self.kind {
            OptimizerKind::Adam => 0.0,
            OptimizerKind::Sgd => 1.0,
        };
        let mut out = vec![
            ("optimizer/kind".to_string(), Tensor::scalar(kind)),
            ("optimizer/lr".to_string(), Tensor::scalar(self.lr)),
            ("optimizer/step".to_string(), Tensor::scalar(self.step as f64)),
        ];
        for (label, buffers) in [("m", &self.first), ("v", &self.second)] {
            for ((name, t), buf) in params.names().iter().zip(params.tensors()).zip(buffers) {
                let state = Tensor::new(t.shape().to_vec(), buf.clone()).expect("moment matches tensor shape");
                out.push((format!("optimizer/{label}/{name}"), state));
            }
        }
        out
    }

    /// Rebuilds the optimizer from [`Optimizer::state_tensors`] output.
    pub(crate) fn from_state(params: &ModelParams, state: &[(String, Tensor)]) -> Result<Self> {
        let find = |name: &str| state.iter().find(|(n, _)| n == name).map(|(_, t)| t);
        let scalar = |name: &str| {
            find(name)
                .filter(|t| t.numel() == 1)
                .map(|t| t.data()[0])
                .ok_or_else(|| Error::Load(format!("checkpoint lacks {name}")))
        };
        let kind = if scalar("optimizer/kind")? == 0.0 { OptimizerKind::Adam } else { OptimizerKind::Sgd };
        let mut opt = Self::new(kind, scalar("optimizer/lr")?, params)?;
        opt.step = scalar("optimizer/step")? as u64;
        if kind == OptimizerKind::Adam {
            for (label, buffers) in [("m", &mut opt.first), ("v", &mut opt.second)] {
                for ((name, t), buf) in params.names().iter().zip(params.tensors()).zip(buffers.iter_mut()) {
                    let key = format!("optimizer/{label}/{name}");
                    let saved = find(&key).ok_or_else(|| Error::Load(format!("checkpoint lacks {key}")))?;
                    if saved.shape() != t.shape() {
                        return Err(Error::Load(format!("{key} has shape {:?}, expected {:?}", saved.shape(), t.shape())));
                    }
                    buf.copy_from_slice(saved.data());
                }
            }
        }
        Ok(opt)
    }
}
