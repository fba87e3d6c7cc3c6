//! Oracle evaluation: PEHE over treatment pairs, ATE, relative ATE error and
//! factual / counterfactual RMSE.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::MultiHeadNet;
use crate::nn::Matrix;
use crate::scalar::Scalar;

/// True ATE magnitudes below this make the relative error undefined.
pub const MIN_ATE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub sqrt_pehe: f64,
    pub ate_true: f64,
    pub ate_est: f64,
    pub mape_ate: f64,
    pub rmse_factual: f64,
    pub rmse_counterfactual: f64,
    pub n_eval: usize,
}

/// Square root of the mean, over samples and unordered treatment pairs, of the
/// squared error in the pairwise effect.
pub fn pehe<T: Scalar>(y_true: &Matrix<T>, y_pred: &Matrix<T>) -> Result<T> {
    if y_true.rows() != y_pred.rows() || y_true.cols() != y_pred.cols() {
        return Err(Error::invalid(format!(
            "shape mismatch: {}x{} vs {}x{}",
            y_true.rows(),
            y_true.cols(),
            y_pred.rows(),
            y_pred.cols()
        )));
    }
    let k = y_true.cols();
    if k < 2 {
        return Err(Error::invalid("PEHE needs at least two treatments"));
    }
    if y_true.rows() == 0 {
        return Err(Error::invalid("PEHE of an empty set"));
    }
    let mut sum = T::zero();
    for (yt, yp) in y_true.iter_rows().zip(y_pred.iter_rows()) {
        for a in 0..k {
            for b in a + 1..k {
                let e = (yt[a] - yt[b]) - (yp[a] - yp[b]);
                sum += e * e;
            }
        }
    }
    let pairs = T::from_usize(y_true.rows() * k * (k - 1) / 2).unwrap();
    Ok((sum / pairs).sqrt())
}

/// Mean over samples of `|y[i, t_i] - mean_{j != t_i} y[i, j]|`.
pub fn ate<T: Scalar>(y: &Matrix<T>, factual: &[usize]) -> Result<T> {
    let k = y.cols();
    if k < 2 {
        return Err(Error::invalid("ATE needs at least two treatments"));
    }
    if y.rows() == 0 || factual.len() != y.rows() {
        return Err(Error::invalid("one factual treatment per row required"));
    }
    let others = T::from_usize(k - 1).unwrap();
    let mut total = T::zero();
    for (row, &t) in y.iter_rows().zip(factual) {
        if t >= k {
            return Err(Error::invalid(format!("treatment {t} outside [0, {k})")));
        }
        let rest: T = row.iter().enumerate().filter(|(j, _)| *j != t).map(|(_, v)| *v).sum();
        total += (row[t] - rest / others).abs();
    }
    Ok(total / T::from_usize(y.rows()).unwrap())
}

/// `|ate_est - ate_true| / |ate_true|`
pub fn mape_ate<T: Scalar>(ate_true: T, ate_est: T) -> Result<T> {
    if !(ate_true.abs() > T::lit(MIN_ATE)) {
        return Err(Error::UndefinedMetric(format!("true ATE {ate_true} is too close to zero")));
    }
    Ok((ate_est - ate_true).abs() / ate_true.abs())
}

/// RMSE of the factual-treatment predictions.
pub fn rmse_factual<T: Scalar>(pred: &Matrix<T>, ds: &Dataset<T>) -> Result<T> {
    check_rows(pred, ds)?;
    let mut sse = T::zero();
    for (row, s) in pred.iter_rows().zip(ds.samples()) {
        let e = row[s.t] - s.y_factual;
        sse += e * e;
    }
    Ok((sse / T::from_usize(ds.len()).unwrap()).sqrt())
}

/// RMSE over the `K - 1` counterfactual coordinates, against oracle outcomes.
pub fn rmse_counterfactual<T: Scalar>(pred: &Matrix<T>, ds: &Dataset<T>) -> Result<T> {
    check_rows(pred, ds)?;
    let mut sse = T::zero();
    for (row, s) in pred.iter_rows().zip(ds.samples()) {
        let y = s
            .y_all
            .as_ref()
            .ok_or_else(|| Error::invalid(format!("sample {} has no oracle outcomes", s.id)))?;
        for (j, (p, v)) in row.iter().zip(y).enumerate() {
            if j != s.t {
                sse += (*p - *v) * (*p - *v);
            }
        }
    }
    let n = T::from_usize(ds.len() * (ds.k() - 1)).unwrap();
    Ok((sse / n).sqrt())
}

fn check_rows<T: Scalar>(pred: &Matrix<T>, ds: &Dataset<T>) -> Result<()> {
    if ds.is_empty() {
        return Err(Error::invalid("evaluation set is empty"));
    }
    if pred.rows() != ds.len() || pred.cols() != ds.k() {
        return Err(Error::invalid("prediction shape does not match dataset"));
    }
    Ok(())
}

/// All metrics from a prediction matrix against the oracle outcomes of `test`.
pub fn report_from_predictions<T: Scalar>(pred: &Matrix<T>, test: &Dataset<T>) -> Result<MetricsReport> {
    if !test.has_oracle() {
        return Err(Error::invalid("evaluation requires oracle potential outcomes"));
    }
    let truth = test.oracle_outcomes()?;
    let t = test.treatments();
    let ate_true = ate(&truth, &t)?;
    let ate_est = ate(pred, &t)?;
    let report = MetricsReport {
        sqrt_pehe: pehe(&truth, pred)?.as_f64(),
        ate_true: ate_true.as_f64(),
        ate_est: ate_est.as_f64(),
        mape_ate: mape_ate(ate_true, ate_est)?.as_f64(),
        rmse_factual: rmse_factual(pred, test)?.as_f64(),
        rmse_counterfactual: rmse_counterfactual(pred, test)?.as_f64(),
        n_eval: test.len(),
    };
    let finite = [
        report.sqrt_pehe,
        report.ate_true,
        report.ate_est,
        report.mape_ate,
        report.rmse_factual,
        report.rmse_counterfactual,
    ]
    .iter()
    .all(|v| v.is_finite());
    if !finite {
        return Err(Error::NonFinite(format!("metrics contain non-finite values: {report:?}")));
    }
    Ok(report)
}

pub fn evaluate<T: Scalar>(net: &MultiHeadNet<T>, test: &Dataset<T>) -> Result<MetricsReport> {
    if !test.has_oracle() {
        return Err(Error::invalid("evaluation requires oracle potential outcomes"));
    }
    let pred = net.predict_matrix(&test.covariates())?;
    report_from_predictions(&pred, test)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_synthetic;
    use crate::model::Architecture;
    use proptest::prelude::*;

    fn m(rows: &[&[f64]]) -> Matrix<f64> {
        Matrix::from_rows(rows).unwrap()
    }

    #[test]
    fn pehe_examples() {
        let y = m(&[&[1.0, 2.0, 4.0], &[0.0, -1.0, 3.0]]);
        assert_eq!(pehe(&y, &y).unwrap(), 0.0);
        let shifted = m(&[&[6.0, 7.0, 9.0], &[5.0, 4.0, 8.0]]);
        assert!(pehe(&y, &shifted).unwrap().abs() < 1e-15);
        assert_eq!(pehe(&m(&[&[0.0, 1.0]]), &m(&[&[0.0, 3.0]])).unwrap(), 2.0);
        assert!(pehe(&m(&[&[0.0, 1.0]]), &m(&[&[0.0, 3.0, 1.0]])).is_err());
    }

    #[test]
    fn ate_examples() {
        assert_eq!(ate(&m(&[&[3.0, 3.0, 3.0]]), &[1]).unwrap(), 0.0);
        assert_eq!(ate(&m(&[&[2.0, 5.0]]), &[0]).unwrap(), 3.0);
        // per-sample: |2 - 5| = 3 and |1 - (4 + 0) / 2| = 1
        let two = ate(&m(&[&[2.0, 5.0, 5.0], &[4.0, 1.0, 0.0]]), &[0, 1]).unwrap();
        assert_eq!(two, 2.0);
        assert!(ate(&m(&[&[1.0]]), &[0]).is_err());
    }

    #[test]
    fn mape_examples() {
        assert_eq!(mape_ate(2.0, 2.0).unwrap(), 0.0);
        assert_eq!(mape_ate(2.0, 1.0).unwrap(), 0.5);
        assert!(matches!(mape_ate(0.0, 1.0), Err(Error::UndefinedMetric(_))));
    }

    proptest! {
        #[test]
        fn pehe_is_row_shift_invariant(
            rows in proptest::collection::vec((proptest::collection::vec(-5.0f64..5.0, 4), proptest::collection::vec(-5.0f64..5.0, 4), -10.0f64..10.0), 1..20)
        ) {
            let yt: Vec<Vec<f64>> = rows.iter().map(|r| r.0.clone()).collect();
            let yp: Vec<Vec<f64>> = rows.iter().map(|r| r.1.clone()).collect();
            let yt_s: Vec<Vec<f64>> = rows.iter().map(|r| r.0.iter().map(|v| v + r.2).collect()).collect();
            let yp_s: Vec<Vec<f64>> = rows.iter().map(|r| r.1.iter().map(|v| v + r.2).collect()).collect();
            let a = pehe(&Matrix::from_rows(&yt).unwrap(), &Matrix::from_rows(&yp).unwrap()).unwrap();
            let b = pehe(&Matrix::from_rows(&yt_s).unwrap(), &Matrix::from_rows(&yp_s).unwrap()).unwrap();
            prop_assert!(a >= 0.0);
            prop_assert!((a - b).abs() < 1e-9);
            prop_assert_eq!(pehe(&Matrix::from_rows(&yt).unwrap(), &Matrix::from_rows(&yt).unwrap()).unwrap(), 0.0);
        }
    }

    #[test]
    fn oracle_predictor_scores_zero() {
        let ds = generate_synthetic::<f64>(50, 3, 3, 1.0, 0).unwrap();
        let pred = ds.oracle_outcomes().unwrap();
        let r = report_from_predictions(&pred, &ds).unwrap();
        assert_eq!(r.sqrt_pehe, 0.0);
        assert_eq!(r.mape_ate, 0.0);
        assert_eq!(r.rmse_factual, 0.0);
        assert_eq!(r.rmse_counterfactual, 0.0);
        assert_eq!(r.n_eval, 50);
    }

    #[test]
    fn evaluate_requires_oracle() {
        let ds = generate_synthetic::<f64>(40, 2, 2, 1.0, 0).unwrap();
        let stripped: Vec<_> = ds
            .samples()
            .iter()
            .cloned()
            .map(|mut s| {
                s.y_all = None;
                s
            })
            .collect();
        let bare = Dataset::new(stripped, 2, 2).unwrap();
        let net = MultiHeadNet::<f64>::new(2, 2, &Architecture::default(), 0).unwrap();
        assert!(matches!(evaluate(&net, &bare), Err(Error::InvalidInput(_))));
        let r = evaluate(&net, &ds).unwrap();
        assert!(r.sqrt_pehe.is_finite() && r.rmse_counterfactual >= 0.0);
    }
}
