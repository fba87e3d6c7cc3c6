use serde::{Deserialize, Serialize};

use super::net::{DenseNet, GradientSet, LayerGrad};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Adam,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl OptimizerConfig {
    pub fn sgd(learning_rate: f64) -> Self {
        Self {
            kind: OptimizerKind::Sgd,
            learning_rate,
            ..Self::default()
        }
    }

    pub fn adam(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning rate must be finite and non-negative"));
        }
        if self.kind == OptimizerKind::Adam
            && !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2) && self.epsilon > 0.0)
        {
            return Err(Error::invalid("adam needs beta1, beta2 in [0,1) and epsilon > 0"));
        }
        Ok(())
    }
}

/// Optimizer state bound to the parameter layout of one network.
#[derive(Debug, Clone)]
pub struct OptimizerState<T> {
    config: OptimizerConfig,
    first_moment: Vec<LayerGrad<T>>,
    second_moment: Vec<LayerGrad<T>>,
    step: u64,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(config: OptimizerConfig, net: &DenseNet<T>) -> Result<Self> {
        config.validate()?;
        let (m, v) = match config.kind {
            OptimizerKind::Sgd => (Vec::new(), Vec::new()),
            OptimizerKind::Adam => {
                let z = GradientSet::zeros_like(net).layers;
                (z.clone(), z)
            }
        };
        Ok(Self {
            config,
            first_moment: m,
            second_moment: v,
            step: 0,
        })
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    /// Applies one update in place. Fails if any parameter becomes non-finite.
    pub fn apply_update(&mut self, net: &mut DenseNet<T>, grads: &GradientSet<T>) -> Result<()> {
        if !grads.matches(net) {
            return Err(Error::invalid("gradient shapes do not match network"));
        }
        if self.config.kind == OptimizerKind::Adam
            && (self.first_moment.len() != grads.layers.len()
                || self.first_moment.iter().zip(&grads.layers).any(|(m, g)| {
                    m.weights.len() != g.weights.len() || m.bias.len() != g.bias.len()
                }))
        {
            return Err(Error::invalid("optimizer state was built for a different network"));
        }
        self.step += 1;
        let lr = T::lit(self.config.learning_rate);
        match self.config.kind {
            OptimizerKind::Sgd => {
                for (layer, g) in net.layers_mut().iter_mut().zip(&grads.layers) {
                    sgd(layer.weights_mut(), &g.weights, lr);
                    sgd(layer.bias_mut(), &g.bias, lr);
                }
            }
            OptimizerKind::Adam => {
                let b1 = T::lit(self.config.beta1);
                let b2 = T::lit(self.config.beta2);
                let t = self.step as i32;
                let hp = AdamStep {
                    lr,
                    b1,
                    b2,
                    eps: T::lit(self.config.epsilon),
                    c1: T::one() - b1.powi(t),
                    c2: T::one() - b2.powi(t),
                };
                for (((layer, g), m), v) in net
                    .layers_mut()
                    .iter_mut()
                    .zip(&grads.layers)
                    .zip(&mut self.first_moment)
                    .zip(&mut self.second_moment)
                {
                    hp.apply(layer.weights_mut(), &g.weights, &mut m.weights, &mut v.weights);
                    hp.apply(layer.bias_mut(), &g.bias, &mut m.bias, &mut v.bias);
                }
            }
        }
        if !net.is_finite() {
            return Err(Error::NonFinite(format!(
                "parameter became non-finite at optimizer step {}",
                self.step
            )));
        }
        Ok(())
    }
}

fn sgd<T: Scalar>(p: &mut [T], g: &[T], lr: T) {
    for (pi, &gi) in p.iter_mut().zip(g) {
        *pi -= lr * gi;
    }
}

struct AdamStep<T> {
    lr: T,
    b1: T,
    b2: T,
    eps: T,
    c1: T,
    c2: T,
}

impl<T: Scalar> AdamStep<T> {
    fn apply(&self, p: &mut [T], g: &[T], m: &mut [T], v: &mut [T]) {
        let one = T::one();
        for i in 0..p.len() {
            m[i] = self.b1 * m[i] + (one - self.b1) * g[i];
            v[i] = self.b2 * v[i] + (one - self.b2) * g[i] * g[i];
            let m_hat = m[i] / self.c1;
            let v_hat = v[i] / self.c2;
            p[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}
