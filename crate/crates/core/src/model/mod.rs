//! Shared representation with one outcome head per treatment, the balanced
//! factual loss, and the matched/augmented training loop.

mod checkpoint;
mod loss;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointHeader};
pub use loss::{loss_eq1, mmd_linear, Batch, LossBreakdown, ModelGradients};
pub use train::{train, train_with_index, EpochRecord, Matching, TrainConfig, TrainOutcome};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Activation, DenseNet, Matrix};
use crate::scalar::Scalar;

/// Layer widths for the representation and the heads.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Architecture {
    pub phi_hidden: Vec<usize>,
    pub repr_dim: usize,
    pub head_hidden: Vec<usize>,
    pub activation: Activation,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            phi_hidden: vec![64, 64],
            repr_dim: 32,
            head_hidden: vec![32],
            activation: Activation::Elu,
        }
    }
}

/// Representation network `phi: R^d -> R^r` and `K` heads `h_k: R^r -> R`.
#[derive(Debug, Clone)]
pub struct MultiHeadNet<T> {
    phi: DenseNet<T>,
    heads: Vec<DenseNet<T>>,
}

impl<T: Scalar> PartialEq for MultiHeadNet<T> {
    fn eq(&self, other: &Self) -> bool {
        self.phi == other.phi && self.heads == other.heads
    }
}

/// Decorrelates the per-network init seeds derived from one run seed.
fn derive_seed(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl<T: Scalar> MultiHeadNet<T> {
    pub fn new(d: usize, k: usize, arch: &Architecture, seed: u64) -> Result<Self> {
        if k < 2 {
            return Err(Error::invalid("at least two treatment heads required"));
        }
        let phi = DenseNet::mlp(
            d,
            &arch.phi_hidden,
            arch.repr_dim,
            arch.activation,
            arch.activation,
            derive_seed(seed, 0),
        )?;
        let heads = (0..k)
            .map(|h| {
                DenseNet::mlp(
                    arch.repr_dim,
                    &arch.head_hidden,
                    1,
                    arch.activation,
                    Activation::Identity,
                    derive_seed(seed, h as u64 + 1),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_parts(phi, heads)
    }

    pub fn from_parts(phi: DenseNet<T>, heads: Vec<DenseNet<T>>) -> Result<Self> {
        if heads.len() < 2 {
            return Err(Error::invalid("at least two treatment heads required"));
        }
        for (k, h) in heads.iter().enumerate() {
            if h.input_dim() != phi.output_dim() || h.output_dim() != 1 {
                return Err(Error::invalid(format!(
                    "head {k} maps {} -> {}, expected {} -> 1",
                    h.input_dim(),
                    h.output_dim(),
                    phi.output_dim()
                )));
            }
        }
        Ok(Self { phi, heads })
    }

    pub fn phi(&self) -> &DenseNet<T> {
        &self.phi
    }

    pub fn heads(&self) -> &[DenseNet<T>] {
        &self.heads
    }

    pub(crate) fn parts_mut(&mut self) -> (&mut DenseNet<T>, &mut [DenseNet<T>]) {
        (&mut self.phi, &mut self.heads)
    }

    pub fn clear_caches(&mut self) {
        self.phi.clear_cache();
        self.heads.iter_mut().for_each(DenseNet::clear_cache);
    }

    pub fn input_dim(&self) -> usize {
        self.phi.input_dim()
    }

    pub fn repr_dim(&self) -> usize {
        self.phi.output_dim()
    }

    pub fn k(&self) -> usize {
        self.heads.len()
    }

    pub fn num_parameters(&self) -> usize {
        self.phi.num_parameters() + self.heads.iter().map(DenseNet::num_parameters).sum::<usize>()
    }

    /// Representation parameters followed by each head's, in head order.
    pub fn parameters(&self) -> Vec<T> {
        let mut p = self.phi.parameters();
        for h in &self.heads {
            p.extend(h.parameters());
        }
        p
    }

    pub fn set_parameters(&mut self, params: &[T]) -> Result<()> {
        if params.len() != self.num_parameters() {
            return Err(Error::invalid(format!(
                "expected {} parameters, got {}",
                self.num_parameters(),
                params.len()
            )));
        }
        let mut off = self.phi.num_parameters();
        self.phi.set_parameters(&params[..off])?;
        for h in &mut self.heads {
            let n = h.num_parameters();
            h.set_parameters(&params[off..off + n])?;
            off += n;
        }
        Ok(())
    }

    /// Representation of each row of `x`.
    pub fn represent(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        self.phi.forward(x)
    }

    /// Predicted outcome under every treatment, one row per sample.
    pub fn predict_matrix(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        let rep = self.phi.forward(x)?;
        let k = self.k();
        let mut out = Matrix::zeros(x.rows(), k);
        for (h, head) in self.heads.iter().enumerate() {
            let col = head.forward(&rep)?;
            for r in 0..x.rows() {
                out.row_mut(r)[h] = col.get(r, 0);
            }
        }
        Ok(out)
    }

    /// `h_k(phi(x))` for every `k`.
    pub fn predict_all(&self, x: &[T]) -> Result<Vec<T>> {
        let m = Matrix::from_vec(1, x.len(), x.to_vec())?;
        Ok(self.predict_matrix(&m)?.into_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::DenseLayer;

    fn tiny() -> MultiHeadNet<f64> {
        // phi: 2 -> 2 elu, W = [[1, -1], [0.5, 2]], b = [0, 0.1]
        let phi = DenseNet::from_layers(
            vec![DenseLayer::new(vec![1.0, -1.0, 0.5, 2.0], vec![0.0, 0.1], 2, Activation::Elu).unwrap()],
            0,
        )
        .unwrap();
        let h0 = DenseNet::from_layers(
            vec![DenseLayer::new(vec![2.0, 1.0], vec![-1.0], 2, Activation::Identity).unwrap()],
            0,
        )
        .unwrap();
        let h1 = DenseNet::from_layers(
            vec![DenseLayer::new(vec![-0.5, 3.0], vec![0.25], 2, Activation::Identity).unwrap()],
            0,
        )
        .unwrap();
        MultiHeadNet::from_parts(phi, vec![h0, h1]).unwrap()
    }

    #[test]
    fn predict_all_matches_hand_composition() {
        let net = tiny();
        let x = [0.5, 1.0];
        // z = [0.5 - 1, 0.25 + 2 + 0.1] = [-0.5, 2.35]
        let r = [(-0.5f64).exp_m1(), 2.35];
        let expected = [2.0 * r[0] + r[1] - 1.0, -0.5 * r[0] + 3.0 * r[1] + 0.25];
        let got = net.predict_all(&x).unwrap();
        assert!((got[0] - expected[0]).abs() < 1e-15);
        assert!((got[1] - expected[1]).abs() < 1e-15);
    }

    #[test]
    fn zero_heads_predict_zero() {
        let phi = DenseNet::<f64>::mlp(3, &[4], 2, Activation::Elu, Activation::Elu, 1).unwrap();
        let heads = (0..3)
            .map(|_| DenseNet::from_layers(vec![DenseLayer::zeros(2, 1, Activation::Identity).unwrap()], 0).unwrap())
            .collect();
        let net = MultiHeadNet::from_parts(phi, heads).unwrap();
        assert_eq!(net.predict_all(&[1.0, -2.0, 0.5]).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn permuting_heads_permutes_outputs() {
        let net = MultiHeadNet::<f64>::new(3, 3, &Architecture::default(), 5).unwrap();
        let perm = [2usize, 0, 1];
        let heads = perm.iter().map(|&i| net.heads()[i].clone()).collect();
        let swapped = MultiHeadNet::from_parts(net.phi().clone(), heads).unwrap();
        let x = [0.3, -0.7, 1.1];
        let a = net.predict_all(&x).unwrap();
        let b = swapped.predict_all(&x).unwrap();
        for (j, &i) in perm.iter().enumerate() {
            assert_eq!(b[j], a[i]);
        }
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let net = tiny();
        assert!(matches!(net.predict_all(&[1.0]), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn parameter_round_trip() {
        let mut net = MultiHeadNet::<f64>::new(4, 3, &Architecture::default(), 2).unwrap();
        let p = net.parameters();
        let shifted: Vec<f64> = p.iter().map(|v| v + 1.0).collect();
        net.set_parameters(&shifted).unwrap();
        assert_eq!(net.parameters(), shifted);
    }
}
