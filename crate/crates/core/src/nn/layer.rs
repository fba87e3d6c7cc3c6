use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    /// ELU with unit scale: `z` for `z > 0`, `exp(z) - 1` otherwise.
    Elu,
    Identity,
}

impl Activation {
    #[inline]
    pub fn apply<T: Scalar>(self, z: T) -> T {
        match self {
            Activation::Relu => z.max(T::zero()),
            Activation::Elu => {
                if z > T::zero() {
                    z
                } else {
                    z.exp_m1()
                }
            }
            Activation::Identity => z,
        }
    }

    /// Derivative with respect to the pre-activation `z`.
    #[inline]
    pub fn derivative<T: Scalar>(self, z: T) -> T {
        match self {
            Activation::Relu => {
                if z > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::Elu => {
                if z > T::zero() {
                    T::one()
                } else {
                    z.exp()
                }
            }
            Activation::Identity => T::one(),
        }
    }

    /// Derivative expressed through the activation output `a = apply(z)`.
    #[inline]
    pub fn derivative_from_output<T: Scalar>(self, a: T) -> T {
        match self {
            Activation::Relu => {
                if a > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::Elu => {
                if a > T::zero() {
                    T::one()
                } else {
                    a + T::one()
                }
            }
            Activation::Identity => T::one(),
        }
    }
}

/// Affine map followed by an element-wise activation.
///
/// Weights are row-major with shape `(out_dim, in_dim)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer<T> {
    in_dim: usize,
    out_dim: usize,
    pub(crate) weights: Vec<T>,
    pub(crate) bias: Vec<T>,
    activation: Activation,
}

impl<T: Scalar> DenseLayer<T> {
    pub fn new(weights: Vec<T>, bias: Vec<T>, in_dim: usize, activation: Activation) -> Result<Self> {
        let out_dim = bias.len();
        if in_dim == 0 || out_dim == 0 {
            return Err(Error::invalid("layer dimensions must be positive"));
        }
        if weights.len() != in_dim * out_dim {
            return Err(Error::invalid(format!(
                "weight length {} does not match {out_dim}x{in_dim}",
                weights.len()
            )));
        }
        Ok(Self {
            in_dim,
            out_dim,
            weights,
            bias,
            activation,
        })
    }

    /// Glorot-uniform weights in `±sqrt(6 / (fan_in + fan_out))`, zero bias.
    pub fn glorot<R: Rng + ?Sized>(in_dim: usize, out_dim: usize, activation: Activation, rng: &mut R) -> Result<Self> {
        if in_dim == 0 || out_dim == 0 {
            return Err(Error::invalid("layer dimensions must be positive"));
        }
        let limit = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let dist = Uniform::new_inclusive(-limit, limit).expect("finite glorot limit");
        let weights = (0..in_dim * out_dim).map(|_| T::lit(dist.sample(rng))).collect();
        Self::new(weights, vec![T::zero(); out_dim], in_dim, activation)
    }

    pub fn zeros(in_dim: usize, out_dim: usize, activation: Activation) -> Result<Self> {
        Self::new(vec![T::zero(); in_dim * out_dim], vec![T::zero(); out_dim], in_dim, activation)
    }

    #[inline]
    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    #[inline]
    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    #[inline]
    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn weights(&self) -> &[T] {
        &self.weights
    }

    pub fn bias(&self) -> &[T] {
        &self.bias
    }

    pub fn weights_mut(&mut self) -> &mut [T] {
        &mut self.weights
    }

    pub fn bias_mut(&mut self) -> &mut [T] {
        &mut self.bias
    }

    #[inline]
    pub(crate) fn weight_row(&self, o: usize) -> &[T] {
        &self.weights[o * self.in_dim..(o + 1) * self.in_dim]
    }

    pub fn num_parameters(&self) -> usize {
        self.weights.len() + self.bias.len()
    }
}
