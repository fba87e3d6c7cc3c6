//! Central finite-difference verification of analytic gradients.

use super::matrix::Matrix;
use super::net::DenseNet;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Gradients smaller than this are compared in absolute terms.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Index of the worst parameter in flattened order.
    pub worst_index: Option<usize>,
    pub checked: usize,
    /// Parameters excluded because a perturbation crossed a relu kink.
    pub skipped: usize,
}

/// `|a - n| / max(|a|, |n|, RELATIVE_ERROR_FLOOR)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(RELATIVE_ERROR_FLOOR);
    (analytic - numeric).abs() / denom
}

/// Compares `analytic` against central differences of `eval` around `params`.
///
/// `skip(plus, minus)` may exclude a coordinate after seeing both perturbed
/// parameter vectors.
pub fn compare_flat<T, F, S>(params: &[T], analytic: &[T], eps: f64, mut eval: F, mut skip: S) -> Result<GradCheckReport>
where
    T: Scalar,
    F: FnMut(&[T]) -> Result<T>,
    S: FnMut(&[T], &[T]) -> Result<bool>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::invalid(format!("eps {eps} outside [1e-7, 1e-3]")));
    }
    if params.is_empty() {
        return Err(Error::invalid("no parameters to check"));
    }
    if params.len() != analytic.len() {
        return Err(Error::invalid("analytic gradient length differs from parameter count"));
    }
    let h = T::lit(eps);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_index: None,
        checked: 0,
        skipped: 0,
    };
    let mut plus = params.to_vec();
    let mut minus = params.to_vec();
    for i in 0..params.len() {
        plus[i] = params[i] + h;
        minus[i] = params[i] - h;
        if skip(&plus, &minus)? {
            report.skipped += 1;
        } else {
            let lp = eval(&plus)?;
            let lm = eval(&minus)?;
            if !(lp.is_finite() && lm.is_finite()) {
                return Err(Error::State(format!("non-finite loss while perturbing parameter {i}")));
            }
            let numeric = (lp - lm).as_f64() / (2.0 * eps);
            let err = relative_error(analytic[i].as_f64(), numeric);
            if report.worst_index.is_none() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst_index = Some(i);
            }
            report.checked += 1;
        }
        plus[i] = params[i];
        minus[i] = params[i];
    }
    Ok(report)
}

/// Checks [`DenseNet::backward`] against finite differences.
///
/// `loss_fn` maps the network output to `(loss, dloss/doutput)`. Parameters
/// whose perturbation flips any relu unit are skipped.
pub fn check_gradients<T, F>(net: &DenseNet<T>, loss_fn: F, batch: &Matrix<T>, eps: f64) -> Result<GradCheckReport>
where
    T: Scalar,
    F: Fn(&Matrix<T>) -> (T, Matrix<T>),
{
    let mut work = net.clone();
    let out = work.forward_train(batch)?;
    let (loss, upstream) = loss_fn(&out);
    if !loss.is_finite() {
        return Err(Error::State("loss is not finite at the base point".into()));
    }
    let grads = work.backward_params(&upstream)?;
    let analytic = grads.flatten();
    let params = net.parameters();
    let base_pattern = net.relu_pattern(batch)?;
    let has_relu = !base_pattern.is_empty();

    let mut probe = net.clone();
    let mut probe_skip = net.clone();
    compare_flat(
        &params,
        &analytic,
        eps,
        |p| {
            probe.set_parameters(p)?;
            let out = probe.forward(batch)?;
            Ok(loss_fn(&out).0)
        },
        |plus, minus| {
            if !has_relu {
                return Ok(false);
            }
            probe_skip.set_parameters(plus)?;
            if probe_skip.relu_pattern(batch)? != base_pattern {
                return Ok(true);
            }
            probe_skip.set_parameters(minus)?;
            Ok(probe_skip.relu_pattern(batch)? != base_pattern)
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::layer::{Activation, DenseLayer};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn half_sq(out: &Matrix<f64>) -> (f64, Matrix<f64>) {
        let loss = out.as_slice().iter().map(|v| 0.5 * v * v).sum();
        (loss, out.clone())
    }

    fn random_batch(rows: usize, cols: usize, seed: u64) -> Matrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn linear_net_quadratic_loss_is_exact() {
        let net = DenseNet::<f64>::mlp(4, &[], 3, Activation::Identity, Activation::Identity, 5).unwrap();
        let r = check_gradients(&net, half_sq, &random_batch(6, 4, 1), 1e-5).unwrap();
        assert!(r.max_rel_error < 1e-6, "{r:?}");
        assert_eq!(r.skipped, 0);
    }

    #[test]
    fn random_relu_net_matches_within_tolerance() {
        for seed in 0..5 {
            let net = DenseNet::<f64>::mlp(5, &[8, 6], 2, Activation::Relu, Activation::Identity, seed).unwrap();
            let r = check_gradients(&net, half_sq, &random_batch(7, 5, 100 + seed), 1e-5).unwrap();
            assert!(r.max_rel_error < 1e-4, "seed {seed}: {r:?}");
            assert!(r.checked > 0);
        }
    }

    #[test]
    fn random_elu_net_matches_within_tolerance() {
        let net = DenseNet::<f64>::mlp(5, &[8, 6], 2, Activation::Elu, Activation::Elu, 9).unwrap();
        let r = check_gradients(&net, half_sq, &random_batch(7, 5, 3), 1e-5).unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
        assert_eq!(r.skipped, 0);
    }

    #[test]
    fn eps_out_of_range_rejected() {
        let net = DenseNet::<f64>::mlp(2, &[], 1, Activation::Identity, Activation::Identity, 0).unwrap();
        let b = random_batch(2, 2, 0);
        assert!(matches!(check_gradients(&net, half_sq, &b, 1e-2), Err(Error::InvalidInput(_))));
        assert!(matches!(check_gradients(&net, half_sq, &b, 1e-9), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn non_finite_loss_is_state_error() {
        let layer = DenseLayer::new(vec![1.0], vec![0.0], 1, Activation::Identity).unwrap();
        let net = DenseNet::from_layers(vec![layer], 0).unwrap();
        let b = Matrix::from_rows(&[[1.0]]).unwrap();
        let err = check_gradients(&net, |o| (f64::NAN, o.clone()), &b, 1e-5).unwrap_err();
        assert!(matches!(err, Error::State(_)));
    }
}
