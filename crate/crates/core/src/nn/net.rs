use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::layer::{Activation, DenseLayer};
use super::matrix::{axpy, dot, dot4, Matrix};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Gradient of one layer, same shapes as the layer parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad<T> {
    pub weights: Vec<T>,
    pub bias: Vec<T>,
}

/// Per-parameter gradients mirroring a [`DenseNet`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet<T> {
    pub layers: Vec<LayerGrad<T>>,
}

impl<T: Scalar> GradientSet<T> {
    pub fn zeros_like(net: &DenseNet<T>) -> Self {
        Self {
            layers: net
                .layers
                .iter()
                .map(|l| LayerGrad {
                    weights: vec![T::zero(); l.weights.len()],
                    bias: vec![T::zero(); l.bias.len()],
                })
                .collect(),
        }
    }

    pub fn matches(&self, net: &DenseNet<T>) -> bool {
        self.layers.len() == net.layers.len()
            && self
                .layers
                .iter()
                .zip(&net.layers)
                .all(|(g, l)| g.weights.len() == l.weights.len() && g.bias.len() == l.bias.len())
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|g| g.weights.iter().chain(&g.bias).all(|v| v.is_finite()))
    }

    pub fn is_zero(&self) -> bool {
        self.layers
            .iter()
            .all(|g| g.weights.iter().chain(&g.bias).all(|v| v.is_zero()))
    }

    /// Flattened in the same order as [`DenseNet::parameters`].
    pub fn flatten(&self) -> Vec<T> {
        let mut out = Vec::new();
        for g in &self.layers {
            out.extend_from_slice(&g.weights);
            out.extend_from_slice(&g.bias);
        }
        out
    }
}

/// Activations recorded by [`DenseNet::forward_train`] for the backward pass.
#[derive(Debug, Clone)]
struct ForwardCache<T> {
    /// Input of each layer (`inputs[0]` is the batch).
    inputs: Vec<Matrix<T>>,
    /// Output of the last layer.
    output: Matrix<T>,
}

/// Stack of dense layers.
#[derive(Debug, Clone)]
pub struct DenseNet<T> {
    layers: Vec<DenseLayer<T>>,
    rng_seed: u64,
    cache: Option<ForwardCache<T>>,
}

impl<T: Scalar> PartialEq for DenseNet<T> {
    fn eq(&self, other: &Self) -> bool {
        self.layers == other.layers && self.rng_seed == other.rng_seed
    }
}

impl<T: Scalar> DenseNet<T> {
    /// Seeded Glorot-initialized network: `widths[i]` units with `activations[i]`.
    pub fn new(input_dim: usize, widths: &[usize], activations: &[Activation], seed: u64) -> Result<Self> {
        if widths.len() != activations.len() {
            return Err(Error::invalid("one activation per layer required"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::with_capacity(widths.len());
        let mut in_dim = input_dim;
        for (&w, &a) in widths.iter().zip(activations) {
            layers.push(DenseLayer::glorot(in_dim, w, a, &mut rng)?);
            in_dim = w;
        }
        Self::from_layers(layers, seed)
    }

    /// Hidden layers share `hidden_activation`; the last layer uses `output_activation`.
    pub fn mlp(
        input_dim: usize,
        hidden: &[usize],
        output_dim: usize,
        hidden_activation: Activation,
        output_activation: Activation,
        seed: u64,
    ) -> Result<Self> {
        let mut widths = hidden.to_vec();
        widths.push(output_dim);
        let mut acts = vec![hidden_activation; hidden.len()];
        acts.push(output_activation);
        Self::new(input_dim, &widths, &acts, seed)
    }

    pub fn from_layers(layers: Vec<DenseLayer<T>>, rng_seed: u64) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::invalid("network needs at least one layer"));
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(Error::invalid(format!(
                    "layer {i} outputs {} but layer {} expects {}",
                    pair[0].out_dim(),
                    i + 1,
                    pair[1].in_dim()
                )));
            }
        }
        Ok(Self {
            layers,
            rng_seed,
            cache: None,
        })
    }

    pub fn layers(&self) -> &[DenseLayer<T>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [DenseLayer<T>] {
        self.cache = None;
        &mut self.layers
    }

    pub fn rng_seed(&self) -> u64 {
        self.rng_seed
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    pub fn num_parameters(&self) -> usize {
        self.layers.iter().map(DenseLayer::num_parameters).sum()
    }

    /// All parameters, layer by layer, weights before bias.
    pub fn parameters(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.num_parameters());
        for l in &self.layers {
            out.extend_from_slice(&l.weights);
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn set_parameters(&mut self, params: &[T]) -> Result<()> {
        if params.len() != self.num_parameters() {
            return Err(Error::invalid(format!(
                "expected {} parameters, got {}",
                self.num_parameters(),
                params.len()
            )));
        }
        let mut off = 0;
        for l in &mut self.layers {
            let nw = l.weights.len();
            l.weights.copy_from_slice(&params[off..off + nw]);
            off += nw;
            let nb = l.bias.len();
            l.bias.copy_from_slice(&params[off..off + nb]);
            off += nb;
        }
        self.cache = None;
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(&l.bias).all(|v| v.is_finite()))
    }

    fn check_input(&self, batch: &Matrix<T>) -> Result<()> {
        if batch.cols() != self.input_dim() {
            return Err(Error::invalid(format!(
                "batch has {} columns, network expects {}",
                batch.cols(),
                self.input_dim()
            )));
        }
        Ok(())
    }

    /// Pure inference pass.
    pub fn forward(&self, batch: &Matrix<T>) -> Result<Matrix<T>> {
        self.check_input(batch)?;
        let mut a = batch.clone();
        for l in &self.layers {
            let mut z = affine(l, &a);
            activate(l.activation(), &mut z);
            a = z;
        }
        Ok(a)
    }

    /// Forward pass that records activations for a following [`DenseNet::backward`].
    pub fn forward_train(&mut self, batch: &Matrix<T>) -> Result<Matrix<T>> {
        self.check_input(batch)?;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut a = batch.clone();
        for l in &self.layers {
            let mut z = affine(l, &a);
            activate(l.activation(), &mut z);
            inputs.push(std::mem::replace(&mut a, z));
        }
        self.cache = Some(ForwardCache {
            inputs,
            output: a.clone(),
        });
        Ok(a)
    }

    pub fn clear_cache(&mut self) {
        self.cache = None;
    }

    /// Gradients of `sum(upstream ⊙ output)` for the cached batch.
    ///
    /// Returns the parameter gradients and the gradient with respect to the batch.
    pub fn backward(&self, upstream: &Matrix<T>) -> Result<(GradientSet<T>, Matrix<T>)> {
        let (g, dx) = self.backward_impl(upstream, true)?;
        Ok((g, dx.expect("input gradient requested")))
    }

    /// As [`DenseNet::backward`] without the input gradient.
    pub fn backward_params(&self, upstream: &Matrix<T>) -> Result<GradientSet<T>> {
        Ok(self.backward_impl(upstream, false)?.0)
    }

    fn backward_impl(&self, upstream: &Matrix<T>, want_input: bool) -> Result<(GradientSet<T>, Option<Matrix<T>>)> {
        let cache = self
            .cache
            .as_ref()
            .ok_or_else(|| Error::State("backward called without a cached forward pass".into()))?;
        let b = cache.inputs[0].rows();
        if upstream.rows() != b || upstream.cols() != self.output_dim() {
            return Err(Error::invalid(format!(
                "upstream gradient is {}x{}, expected {b}x{}",
                upstream.rows(),
                upstream.cols(),
                self.output_dim()
            )));
        }

        let mut grads = GradientSet::zeros_like(self);
        let mut delta = upstream.clone();
        for (li, l) in self.layers.iter().enumerate().rev() {
            let out = cache.inputs.get(li + 1).unwrap_or(&cache.output);
            let input = &cache.inputs[li];
            let act = l.activation();
            if act != Activation::Identity {
                for (d, &a) in delta.as_mut_slice().iter_mut().zip(out.as_slice()) {
                    *d *= act.derivative_from_output(a);
                }
            }
            let g = &mut grads.layers[li];
            let in_dim = l.in_dim();
            let propagate = li > 0 || want_input;
            let mut next = Matrix::zeros(if propagate { b } else { 0 }, in_dim);
            for r in 0..b {
                let dr = delta.row(r);
                let xr = input.row(r);
                for (o, &d) in dr.iter().enumerate() {
                    if d.is_zero() {
                        continue;
                    }
                    g.bias[o] += d;
                    axpy(&mut g.weights[o * in_dim..(o + 1) * in_dim], d, xr);
                }
                if propagate {
                    let nr = next.row_mut(r);
                    for (o, &d) in dr.iter().enumerate() {
                        if !d.is_zero() {
                            axpy(nr, d, l.weight_row(o));
                        }
                    }
                }
            }
            delta = next;
        }
        Ok((grads, want_input.then_some(delta)))
    }

    /// Which relu units are active for each row; used to detect kinks in gradient checks.
    pub(crate) fn relu_pattern(&self, batch: &Matrix<T>) -> Result<Vec<bool>> {
        self.check_input(batch)?;
        let mut pattern = Vec::new();
        let mut a = batch.clone();
        for l in &self.layers {
            let mut z = affine(l, &a);
            if l.activation() == Activation::Relu {
                pattern.extend(z.as_slice().iter().map(|v| *v > T::zero()));
            }
            activate(l.activation(), &mut z);
            a = z;
        }
        Ok(pattern)
    }
}

fn affine<T: Scalar>(l: &DenseLayer<T>, a: &Matrix<T>) -> Matrix<T> {
    let out = l.out_dim();
    let mut z = Matrix::zeros(a.rows(), out);
    let mut r = 0;
    // four rows share each weight-row load
    while r + 4 <= a.rows() {
        let xs = [a.row(r), a.row(r + 1), a.row(r + 2), a.row(r + 3)];
        let zs = &mut z.as_mut_slice()[r * out..(r + 4) * out];
        for o in 0..out {
            let d = dot4(l.weight_row(o), xs);
            for (j, v) in d.into_iter().enumerate() {
                zs[j * out + o] = l.bias[o] + v;
            }
        }
        r += 4;
    }
    for r in r..a.rows() {
        let x = a.row(r);
        let zr = z.row_mut(r);
        for (o, zo) in zr.iter_mut().enumerate() {
            *zo = l.bias[o] + dot(l.weight_row(o), x);
        }
    }
    z
}

fn activate<T: Scalar>(act: Activation, z: &mut Matrix<T>) {
    if act == Activation::Identity {
        return;
    }
    for v in z.as_mut_slice() {
        *v = act.apply(*v);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(weights: Vec<f64>, bias: Vec<f64>, in_dim: usize, act: Activation) -> DenseNet<f64> {
        DenseNet::from_layers(vec![DenseLayer::new(weights, bias, in_dim, act).unwrap()], 0).unwrap()
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let net = single(vec![1.0, 0.0, 0.0, 1.0], vec![0.0, 0.0], 2, Activation::Identity);
        let out = net.forward(&Matrix::from_rows(&[[1.0, 2.0]]).unwrap()).unwrap();
        assert_eq!(out.row(0), &[1.0, 2.0]);
    }

    #[test]
    fn relu_clamps_negative_outputs() {
        let net = single(vec![1.0, 0.0, 0.0, 1.0], vec![0.0, 0.0], 2, Activation::Relu);
        let out = net.forward(&Matrix::from_rows(&[[-3.0, 4.0]]).unwrap()).unwrap();
        assert_eq!(out.row(0), &[0.0, 4.0]);
    }

    #[test]
    fn two_layer_composition_matches_hand_evaluation() {
        // layer 1: W = [[0.5, -1], [2, 0.25]], b = [0.1, -0.2], elu
        // layer 2: W = [[1.5, -0.5]], b = [0.3], identity
        let l1 = DenseLayer::new(vec![0.5, -1.0, 2.0, 0.25], vec![0.1, -0.2], 2, Activation::Elu).unwrap();
        let l2 = DenseLayer::new(vec![1.5, -0.5], vec![0.3], 2, Activation::Identity).unwrap();
        let net = DenseNet::from_layers(vec![l1, l2], 0).unwrap();
        // input [1, 1]: z1 = [0.5 - 1 + 0.1, 2 + 0.25 - 0.2] = [-0.4, 2.05]
        // a1 = [exp(-0.4) - 1, 2.05]
        let a1 = [(-0.4f64).exp() - 1.0, 2.05];
        let expected = 1.5 * a1[0] - 0.5 * a1[1] + 0.3;
        let out = net.forward(&Matrix::from_rows(&[[1.0, 1.0]]).unwrap()).unwrap();
        assert!((out.get(0, 0) - expected).abs() < 1e-15);
    }

    #[test]
    fn forward_rejects_dimension_mismatch() {
        let net = single(vec![1.0, 0.0, 0.0, 1.0], vec![0.0, 0.0], 2, Activation::Identity);
        let err = net.forward(&Matrix::from_rows(&[[1.0, 2.0, 3.0]]).unwrap()).unwrap_err();
        assert!(matches!(err, Error::InvalidInput(_)));
    }

    #[test]
    fn incompatible_layers_rejected() {
        let l1 = DenseLayer::<f64>::zeros(2, 3, Activation::Relu).unwrap();
        let l2 = DenseLayer::<f64>::zeros(2, 1, Activation::Identity).unwrap();
        assert!(matches!(DenseNet::from_layers(vec![l1, l2], 0), Err(Error::InvalidInput(_))));
        assert!(matches!(DenseNet::<f64>::from_layers(vec![], 0), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn backward_without_forward_is_state_error() {
        let net = single(vec![1.0], vec![0.0], 1, Activation::Identity);
        let up = Matrix::from_rows(&[[1.0]]).unwrap();
        assert!(matches!(net.backward(&up), Err(Error::State(_))));
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut net = DenseNet::<f64>::mlp(3, &[4, 4], 2, Activation::Elu, Activation::Identity, 7).unwrap();
        let batch = Matrix::from_rows(&[[0.1, -0.3, 0.7], [1.0, 2.0, -1.0]]).unwrap();
        net.forward_train(&batch).unwrap();
        let (g, dx) = net.backward(&Matrix::zeros(2, 2)).unwrap();
        assert!(g.is_zero());
        assert!(dx.as_slice().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn linear_layer_weight_gradient_is_input() {
        let mut net = single(vec![0.3, -0.2, 0.9], vec![0.5], 3, Activation::Identity);
        let x = [1.5, -2.0, 0.25];
        net.forward_train(&Matrix::from_rows(&[x]).unwrap()).unwrap();
        let (g, dx) = net.backward(&Matrix::from_rows(&[[1.0]]).unwrap()).unwrap();
        assert_eq!(g.layers[0].weights, x.to_vec());
        assert_eq!(g.layers[0].bias, vec![1.0]);
        assert_eq!(dx.row(0), &[0.3, -0.2, 0.9]);
    }

    #[test]
    fn forward_is_bitwise_repeatable() {
        let net = DenseNet::<f64>::mlp(5, &[16, 8], 3, Activation::Elu, Activation::Identity, 11).unwrap();
        let batch = Matrix::from_vec(2, 5, (0..10).map(|i| (i as f64).sin()).collect()).unwrap();
        let a = net.forward(&batch).unwrap();
        let b = net.forward(&batch).unwrap();
        assert!(a.as_slice().iter().zip(b.as_slice()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn seeded_init_is_reproducible_and_bounded() {
        let a = DenseNet::<f64>::mlp(10, &[64], 32, Activation::Elu, Activation::Elu, 3).unwrap();
        let b = DenseNet::<f64>::mlp(10, &[64], 32, Activation::Elu, Activation::Elu, 3).unwrap();
        assert_eq!(a.parameters(), b.parameters());
        let limit = (6.0f64 / 74.0).sqrt();
        assert!(a.layers()[0].weights().iter().all(|w| w.abs() <= limit));
        let c = DenseNet::<f64>::mlp(10, &[64], 32, Activation::Elu, Activation::Elu, 4).unwrap();
        assert_ne!(a.parameters(), c.parameters());
    }
}
