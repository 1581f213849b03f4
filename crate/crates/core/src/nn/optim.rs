use serde::{Deserialize, Serialize};

use super::network::{Gradients, NetworkState};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Sgd,
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub method: Method,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Seeds minibatch shuffling.
    pub seed: u64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            method: Method::Adam,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            seed: 0,
        }
    }
}

impl OptimizerConfig {
    pub fn sgd(learning_rate: f64) -> Self {
        Self {
            method: Method::Sgd,
            learning_rate,
            ..Self::default()
        }
    }

    pub fn adam(learning_rate: f64) -> Self {
        Self {
            method: Method::Adam,
            learning_rate,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return Err(Error::InvalidArgument(format!(
                    "{name} must lie in (0, 1), got {b}"
                )));
            }
        }
        if self.epsilon.is_nan() || self.epsilon < 0.0 {
            return Err(Error::InvalidArgument("epsilon must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Optimizer state bound to one network's parameter layout.
#[derive(Clone, Debug)]
pub struct Optimizer {
    cfg: OptimizerConfig,
    step_index: u64,
    first_moment: Vec<Vec<f64>>,
    second_moment: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(cfg: OptimizerConfig, net: &NetworkState) -> Result<Self> {
        cfg.validate()?;
        let zeros: Vec<Vec<f64>> = net
            .param_slices()
            .iter()
            .map(|s| vec![0.0; s.len()])
            .collect();
        Ok(Self {
            cfg,
            step_index: 0,
            first_moment: zeros.clone(),
            second_moment: zeros,
        })
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.cfg
    }

    /// Number of updates applied so far.
    pub fn step_index(&self) -> u64 {
        self.step_index
    }

    pub fn step(&mut self, net: &mut NetworkState, grads: &Gradients) -> Result<()> {
        let grad_slices: Vec<&[f64]> = grads
            .params
            .iter()
            .flatten()
            .flat_map(|p| [p.weight.data(), p.bias.data()])
            .collect();
        let mut params = net.param_slices_mut();
        if grad_slices.len() != params.len()
            || grad_slices
                .iter()
                .zip(&params)
                .any(|(g, p)| g.len() != p.len())
            || params.len() != self.first_moment.len()
        {
            return Err(Error::Shape(
                "gradient layout does not match parameters".into(),
            ));
        }
        self.step_index += 1;
        let lr = self.cfg.learning_rate;
        match self.cfg.method {
            Method::Sgd => {
                for (p, g) in params.iter_mut().zip(&grad_slices) {
                    for (w, gv) in p.iter_mut().zip(g.iter()) {
                        *w -= lr * gv;
                    }
                }
            }
            Method::Adam => {
                let (b1, b2, eps) = (self.cfg.beta1, self.cfg.beta2, self.cfg.epsilon);
                let t = self.step_index as i32;
                let c1 = 1.0 - b1.powi(t);
                let c2 = 1.0 - b2.powi(t);
                for (((p, g), m), v) in params
                    .iter_mut()
                    .zip(&grad_slices)
                    .zip(&mut self.first_moment)
                    .zip(&mut self.second_moment)
                {
                    for i in 0..p.len() {
                        let gv = g[i];
                        m[i] = b1 * m[i] + (1.0 - b1) * gv;
                        v[i] = b2 * v[i] + (1.0 - b2) * gv * gv;
                        let m_hat = m[i] / c1;
                        let v_hat = v[i] / c2;
                        p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}
