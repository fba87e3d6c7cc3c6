//! Factual squared error + pairwise linear-MMD imbalance + head weight decay.

use serde::{Deserialize, Serialize};

use super::MultiHeadNet;
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::nn::{GradientSet, Matrix};
use crate::scalar::Scalar;

/// Squared Euclidean distance between the row means of two groups.
pub fn mmd_linear<T: Scalar>(rep_a: &Matrix<T>, rep_b: &Matrix<T>) -> Result<T> {
    if rep_a.rows() == 0 || rep_b.rows() == 0 {
        return Err(Error::invalid("linear MMD needs non-empty groups"));
    }
    if rep_a.cols() != rep_b.cols() {
        return Err(Error::invalid("representation widths differ"));
    }
    let ma = row_mean(rep_a.iter_rows(), rep_a.cols());
    let mb = row_mean(rep_b.iter_rows(), rep_b.cols());
    Ok(ma.iter().zip(&mb).map(|(a, b)| (*a - *b) * (*a - *b)).sum())
}

fn row_mean<'a, T: Scalar>(rows: impl Iterator<Item = &'a [T]>, cols: usize) -> Vec<T> {
    let mut acc = vec![T::zero(); cols];
    let mut n = 0usize;
    for r in rows {
        for (a, v) in acc.iter_mut().zip(r) {
            *a += *v;
        }
        n += 1;
    }
    let inv = T::one() / T::from_usize(n.max(1)).unwrap();
    acc.iter_mut().for_each(|a| *a *= inv);
    acc
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub factual_mse: f64,
    /// Sum of linear MMD over all treatment pairs present in the batch.
    pub imbalance: f64,
    /// Sum of squared head weights.
    pub regularizer: f64,
    pub total: f64,
    pub alpha: f64,
    pub gamma: f64,
}

/// Covariates, factual treatments and factual outcomes of a (possibly augmented) batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch<T> {
    pub x: Matrix<T>,
    pub t: Vec<usize>,
    pub y: Vec<T>,
}

impl<T: Scalar> Batch<T> {
    pub fn new(x: Matrix<T>, t: Vec<usize>, y: Vec<T>) -> Result<Self> {
        if x.rows() == 0 {
            return Err(Error::invalid("empty batch"));
        }
        if t.len() != x.rows() || y.len() != x.rows() {
            return Err(Error::invalid("batch columns have different lengths"));
        }
        Ok(Self { x, t, y })
    }

    pub fn from_samples(samples: &[Sample<T>]) -> Result<Self> {
        let rows: Vec<&[T]> = samples.iter().map(|s| s.x.as_slice()).collect();
        Self::new(
            Matrix::from_rows(&rows)?,
            samples.iter().map(|s| s.t).collect(),
            samples.iter().map(|s| s.y_factual).collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    fn groups(&self, k: usize) -> Result<Vec<Vec<usize>>> {
        let mut g = vec![Vec::new(); k];
        for (i, &t) in self.t.iter().enumerate() {
            if t >= k {
                return Err(Error::invalid(format!("treatment {t} outside [0, {k})")));
            }
            g[t].push(i);
        }
        Ok(g)
    }
}

/// Gradients for the representation and each head.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGradients<T> {
    pub phi: GradientSet<T>,
    pub heads: Vec<GradientSet<T>>,
}

impl<T: Scalar> ModelGradients<T> {
    /// Same order as [`MultiHeadNet::parameters`].
    pub fn flatten(&self) -> Vec<T> {
        let mut out = self.phi.flatten();
        for h in &self.heads {
            out.extend(h.flatten());
        }
        out
    }
}

fn regularizer<T: Scalar>(net: &MultiHeadNet<T>) -> T {
    regularizer_of(net.heads())
}

/// Imbalance term and, per treatment, `d imbalance / d mean_k`.
fn pairwise_imbalance<T: Scalar>(rep: &Matrix<T>, groups: &[Vec<usize>]) -> (T, Vec<Option<Vec<T>>>) {
    let r = rep.cols();
    let means: Vec<Option<Vec<T>>> = groups
        .iter()
        .map(|g| (!g.is_empty()).then(|| row_mean(g.iter().map(|&i| rep.row(i)), r)))
        .collect();
    let mut total = T::zero();
    let mut grads: Vec<Option<Vec<T>>> = means.iter().map(|m| m.as_ref().map(|_| vec![T::zero(); r])).collect();
    let two = T::lit(2.0);
    for m in 0..means.len() {
        for q in 0..m {
            if let (Some(mm), Some(mq)) = (&means[m], &means[q]) {
                for c in 0..r {
                    let diff = mm[c] - mq[c];
                    total += diff * diff;
                    grads[m].as_mut().unwrap()[c] += two * diff;
                    grads[q].as_mut().unwrap()[c] -= two * diff;
                }
            }
        }
    }
    (total, grads)
}

fn breakdown<T: Scalar>(factual: T, imbalance: T, reg: T, alpha: f64, gamma: f64) -> LossBreakdown {
    let (f, i, g) = (factual.as_f64(), imbalance.as_f64(), reg.as_f64());
    LossBreakdown {
        factual_mse: f,
        imbalance: i,
        regularizer: g,
        total: (factual + T::lit(alpha) * imbalance + T::lit(gamma) * reg).as_f64(),
        alpha,
        gamma,
    }
}

fn check_weights(alpha: f64, gamma: f64) -> Result<()> {
    if !(alpha >= 0.0 && gamma >= 0.0 && alpha.is_finite() && gamma.is_finite()) {
        return Err(Error::invalid("alpha and gamma must be finite and non-negative"));
    }
    Ok(())
}

/// Loss of `net` on `batch` without gradients.
pub fn loss_eq1<T: Scalar>(net: &MultiHeadNet<T>, batch: &Batch<T>, alpha: f64, gamma: f64) -> Result<LossBreakdown> {
    check_weights(alpha, gamma)?;
    let groups = batch.groups(net.k())?;
    let rep = net.represent(&batch.x)?;
    let mut sse = T::zero();
    for (k, g) in groups.iter().enumerate() {
        if g.is_empty() {
            continue;
        }
        let out = net.heads()[k].forward(&rep.gather_rows(g))?;
        for (r, &i) in g.iter().enumerate() {
            let e = out.get(r, 0) - batch.y[i];
            sse += e * e;
        }
    }
    let factual = sse / T::from_usize(batch.len()).unwrap();
    let (imb, _) = pairwise_imbalance(&rep, &groups);
    Ok(breakdown(factual, imb, regularizer(net), alpha, gamma))
}

impl<T: Scalar> MultiHeadNet<T> {
    /// Loss and exact gradients with respect to every parameter.
    pub fn loss_and_gradients(
        &mut self,
        batch: &Batch<T>,
        alpha: f64,
        gamma: f64,
    ) -> Result<(LossBreakdown, ModelGradients<T>)> {
        check_weights(alpha, gamma)?;
        let k = self.k();
        let groups = batch.groups(k)?;
        let (phi, heads) = self.parts_mut();
        let rep = phi.forward_train(&batch.x)?;
        let n = T::from_usize(batch.len()).unwrap();
        let two = T::lit(2.0);
        let mut d_rep = Matrix::zeros(rep.rows(), rep.cols());
        let mut sse = T::zero();
        let mut head_grads = Vec::with_capacity(k);

        for (h, g) in heads.iter_mut().zip(&groups) {
            if g.is_empty() {
                head_grads.push(GradientSet::zeros_like(h));
                continue;
            }
            let out = h.forward_train(&rep.gather_rows(g))?;
            let mut up = Matrix::zeros(g.len(), 1);
            for (r, &i) in g.iter().enumerate() {
                let e = out.get(r, 0) - batch.y[i];
                sse += e * e;
                up.row_mut(r)[0] = two * e / n;
            }
            let (grads, d_in) = h.backward(&up)?;
            for (r, &i) in g.iter().enumerate() {
                for (d, v) in d_rep.row_mut(i).iter_mut().zip(d_in.row(r)) {
                    *d += *v;
                }
            }
            head_grads.push(grads);
        }

        let (imb, mean_grads) = pairwise_imbalance(&rep, &groups);
        if alpha > 0.0 {
            let a = T::lit(alpha);
            for (g, mg) in groups.iter().zip(&mean_grads) {
                if let Some(mg) = mg {
                    let scale = a / T::from_usize(g.len()).unwrap();
                    for &i in g {
                        for (d, v) in d_rep.row_mut(i).iter_mut().zip(mg) {
                            *d += scale * *v;
                        }
                    }
                }
            }
        }

        let reg = regularizer_of(heads);
        if gamma > 0.0 {
            let two_gamma = T::lit(2.0 * gamma);
            for (h, hg) in heads.iter().zip(head_grads.iter_mut()) {
                for (l, lg) in h.layers().iter().zip(hg.layers.iter_mut()) {
                    for (gw, w) in lg.weights.iter_mut().zip(l.weights()) {
                        *gw += two_gamma * *w;
                    }
                }
            }
        }

        let phi_grads = phi.backward_params(&d_rep)?;
        let loss = breakdown(sse / n, imb, reg, alpha, gamma);
        Ok((
            loss,
            ModelGradients {
                phi: phi_grads,
                heads: head_grads,
            },
        ))
    }
}

fn regularizer_of<T: Scalar>(heads: &[crate::nn::DenseNet<T>]) -> T {
    heads
        .iter()
        .flat_map(|h| h.layers())
        .flat_map(|l| l.weights())
        .map(|w| *w * *w)
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Architecture;
    use crate::nn::gradcheck::compare_flat;
    use crate::nn::{Activation, DenseLayer, DenseNet};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_batch(n: usize, d: usize, k: usize, seed: u64) -> Batch<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Matrix::from_vec(n, d, (0..n * d).map(|_| rng.random_range(-1.5..1.5)).collect()).unwrap();
        let t = (0..n).map(|i| if i < k { i } else { rng.random_range(0..k) }).collect();
        let y = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        Batch::new(x, t, y).unwrap()
    }

    fn small_arch() -> Architecture {
        Architecture {
            phi_hidden: vec![6],
            repr_dim: 4,
            head_hidden: vec![3],
            activation: Activation::Elu,
        }
    }

    #[test]
    fn mmd_examples() {
        let a = Matrix::<f64>::from_rows(&[[1.0, 0.0], [1.0, 0.0]]).unwrap();
        let b = Matrix::from_rows(&[[0.0, 1.0]]).unwrap();
        assert_eq!(mmd_linear(&a, &a).unwrap(), 0.0);
        assert!((mmd_linear(&a, &b).unwrap() - 2.0).abs() < 1e-15);
        assert_eq!(mmd_linear(&a, &b).unwrap(), mmd_linear(&b, &a).unwrap());
        let c = Matrix::<f64>::from_rows(&[[0.3, 2.0], [1.0, -1.0], [4.0, 0.5]]).unwrap();
        let c_perm = Matrix::from_rows(&[[4.0, 0.5], [0.3, 2.0], [1.0, -1.0]]).unwrap();
        assert!((mmd_linear(&c, &b).unwrap() - mmd_linear(&c_perm, &b).unwrap()).abs() < 1e-14);
        assert!(mmd_linear(&Matrix::<f64>::zeros(0, 2), &b).is_err());
    }

    #[test]
    fn perfect_predictor_has_zero_loss() {
        let phi = DenseNet::<f64>::mlp(2, &[], 2, Activation::Identity, Activation::Identity, 0).unwrap();
        let heads = (0..2)
            .map(|_| DenseNet::from_layers(vec![DenseLayer::zeros(2, 1, Activation::Identity).unwrap()], 0).unwrap())
            .collect();
        let net = MultiHeadNet::from_parts(phi, heads).unwrap();
        let batch = Batch::new(Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap(), vec![0, 1], vec![0.0, 0.0]).unwrap();
        assert_eq!(loss_eq1(&net, &batch, 0.0, 0.0).unwrap().total, 0.0);
    }

    #[test]
    fn binary_imbalance_is_a_single_mmd() {
        let net = MultiHeadNet::<f64>::new(3, 2, &small_arch(), 1).unwrap();
        let batch = random_batch(10, 3, 2, 4);
        let l = loss_eq1(&net, &batch, 1.0, 0.0).unwrap();
        let rep = net.represent(&batch.x).unwrap();
        let g: Vec<Vec<usize>> = (0..2).map(|k| (0..10).filter(|&i| batch.t[i] == k).collect()).collect();
        let direct = mmd_linear(&rep.gather_rows(&g[0]), &rep.gather_rows(&g[1])).unwrap();
        assert!((l.imbalance - direct).abs() < 1e-12);
    }

    #[test]
    fn three_treatment_imbalance_sums_pairs() {
        // Hand-set representation via an identity phi.
        let phi = DenseNet::from_layers(
            vec![DenseLayer::new(vec![1.0, 0.0, 0.0, 1.0], vec![0.0, 0.0], 2, Activation::Identity).unwrap()],
            0,
        )
        .unwrap();
        let heads = (0..3)
            .map(|_| DenseNet::from_layers(vec![DenseLayer::zeros(2, 1, Activation::Identity).unwrap()], 0).unwrap())
            .collect();
        let net = MultiHeadNet::from_parts(phi, heads).unwrap();
        let x = Matrix::from_rows(&[[0.0, 0.0], [2.0, 0.0], [1.0, 1.0], [0.0, 3.0], [0.0, 1.0]]).unwrap();
        let batch = Batch::new(x, vec![0, 0, 1, 2, 2], vec![0.0; 5]).unwrap();
        // means: m0 = (1, 0), m1 = (1, 1), m2 = (0, 2)
        // |m0-m1|^2 = 1, |m0-m2|^2 = 1 + 4 = 5, |m1-m2|^2 = 1 + 1 = 2
        let l = loss_eq1(&net, &batch, 1.0, 0.0).unwrap();
        assert!((l.imbalance - 8.0).abs() < 1e-14);
    }

    #[test]
    fn empty_groups_contribute_nothing() {
        let net = MultiHeadNet::<f64>::new(3, 4, &small_arch(), 2).unwrap();
        let mut batch = random_batch(8, 3, 2, 5);
        batch.t = vec![0, 0, 0, 0, 3, 3, 3, 3];
        let l = loss_eq1(&net, &batch, 1.0, 0.0).unwrap();
        let rep = net.represent(&batch.x).unwrap();
        let direct = mmd_linear(&rep.gather_rows(&[0, 1, 2, 3]), &rep.gather_rows(&[4, 5, 6, 7])).unwrap();
        assert!((l.imbalance - direct).abs() < 1e-12);
    }

    #[test]
    fn total_combines_terms() {
        let net = MultiHeadNet::<f64>::new(3, 3, &small_arch(), 3).unwrap();
        let batch = random_batch(9, 3, 3, 6);
        let l = loss_eq1(&net, &batch, 0.7, 0.3).unwrap();
        assert!((l.total - (l.factual_mse + 0.7 * l.imbalance + 0.3 * l.regularizer)).abs() < 1e-9);
    }

    #[test]
    fn analytic_loss_matches_pure_loss() {
        let mut net = MultiHeadNet::<f64>::new(3, 3, &small_arch(), 3).unwrap();
        let batch = random_batch(9, 3, 3, 6);
        let pure = loss_eq1(&net, &batch, 0.7, 0.3).unwrap();
        let (trained, _) = net.loss_and_gradients(&batch, 0.7, 0.3).unwrap();
        assert!((pure.total - trained.total).abs() < 1e-12);
    }

    #[test]
    fn gradients_match_finite_differences() {
        for (seed, k) in [(0u64, 2usize), (1, 3), (2, 4)] {
            let mut net = MultiHeadNet::<f64>::new(3, k, &small_arch(), seed).unwrap();
            let batch = random_batch(12, 3, k, 10 + seed);
            let (_, grads) = net.loss_and_gradients(&batch, 0.8, 0.05).unwrap();
            let params = net.parameters();
            let mut probe = net.clone();
            let report = compare_flat(
                &params,
                &grads.flatten(),
                1e-5,
                |p| {
                    probe.set_parameters(p)?;
                    Ok(loss_eq1(&probe, &batch, 0.8, 0.05)?.total)
                },
                |_, _| Ok(false),
            )
            .unwrap();
            assert!(report.max_rel_error < 1e-4, "K={k}: {report:?}");
        }
    }

    #[test]
    fn alpha_zero_ignores_group_composition() {
        // Row order and head labelling move the imbalance around but never the
        // factual or regularizer terms.
        let net = MultiHeadNet::<f64>::new(3, 3, &small_arch(), 8).unwrap();
        let batch = random_batch(9, 3, 3, 1);
        let base = loss_eq1(&net, &batch, 0.0, 0.1).unwrap();
        let perm: Vec<usize> = vec![4, 0, 8, 2, 6, 1, 3, 7, 5];
        let shuffled = Batch::new(
            batch.x.gather_rows(&perm),
            perm.iter().map(|&i| batch.t[i]).collect(),
            perm.iter().map(|&i| batch.y[i]).collect(),
        )
        .unwrap();
        let other = loss_eq1(&net, &shuffled, 0.0, 0.1).unwrap();
        assert!((base.factual_mse - other.factual_mse).abs() < 1e-12);
        assert_eq!(base.regularizer, other.regularizer);
        assert!((base.total - (base.factual_mse + 0.1 * base.regularizer)).abs() < 1e-12);
    }
}
