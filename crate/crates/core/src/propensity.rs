//! Generalized propensity score estimation.
//!
//! A softmax classifier over treatments is fitted on the held-out
//! propensity split and used to predict `p(t | x)` for the training units.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::{Activation, DenseNet, Matrix, OptimizerConfig, OptimizerState};
use crate::scalar::{format_exact, parse_exact, Scalar};

/// Lower bound applied to every predicted probability.
pub const PROBABILITY_FLOOR: f64 = 1e-6;

/// A probability vector over the `K` treatments.
#[derive(Debug, Clone, PartialEq)]
pub struct GpsVector<T>(Vec<T>);

impl<T: Scalar> GpsVector<T> {
    /// Wraps a probability vector as-is. Entries must lie in `[0, 1]` and sum to one.
    pub fn new(p: Vec<T>) -> Result<Self> {
        if p.len() < 2 {
            return Err(Error::invalid("GPS vector needs at least two entries"));
        }
        if p.iter().any(|v| !(*v >= T::zero() && *v <= T::one())) {
            return Err(Error::invalid("GPS entries must lie in [0, 1]"));
        }
        let sum: T = p.iter().copied().sum();
        let tol = if T::NAME == "f32" { 1e-5 } else { 1e-9 };
        if (sum.as_f64() - 1.0).abs() > tol {
            return Err(Error::invalid(format!("GPS entries sum to {sum}, not 1")));
        }
        Ok(Self(p))
    }

    /// Softmax of `logits`, floored at [`PROBABILITY_FLOOR`] and renormalized.
    pub fn from_logits(logits: &[T]) -> Result<Self> {
        if logits.len() < 2 || logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("logits must be finite with at least two entries"));
        }
        let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
        let exps: Vec<T> = logits.iter().map(|v| (*v - max).exp()).collect();
        let sum: T = exps.iter().copied().sum();
        let p: Vec<T> = exps.into_iter().map(|e| e / sum).collect();
        Ok(Self(clamp_and_renormalize(p)))
    }

    pub fn as_slice(&self) -> &[T] {
        &self.0
    }

    pub fn k(&self) -> usize {
        self.0.len()
    }

    /// Index of the largest probability (first on ties).
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, v) in self.0.iter().enumerate() {
            if *v > self.0[best] {
                best = i;
            }
        }
        best
    }
}

/// Raises entries below the floor to the floor and rescales the remaining
/// entries so the vector sums to one; repeats if rescaling pushed another
/// entry under the floor.
fn clamp_and_renormalize<T: Scalar>(mut p: Vec<T>) -> Vec<T> {
    let floor = T::lit(PROBABILITY_FLOOR);
    let mut fixed = vec![false; p.len()];
    loop {
        let mut changed = false;
        for (v, f) in p.iter_mut().zip(fixed.iter_mut()) {
            if !*f && *v <= floor {
                *v = floor;
                *f = true;
                changed = true;
            }
        }
        let fixed_mass = floor * T::from_usize(fixed.iter().filter(|f| **f).count()).unwrap();
        let free_mass: T = p.iter().zip(&fixed).filter(|(_, f)| !**f).map(|(v, _)| *v).sum();
        if free_mass > T::zero() {
            let scale = (T::one() - fixed_mass) / free_mass;
            for (v, f) in p.iter_mut().zip(&fixed) {
                if !*f {
                    *v *= scale;
                }
            }
        }
        if !changed {
            return p;
        }
    }
}

/// GPS per sample id.
pub type GpsTable<T> = BTreeMap<u64, GpsVector<T>>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GpsConfig {
    /// Empty means a plain multinomial logistic model.
    pub hidden_widths: Vec<usize>,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for GpsConfig {
    fn default() -> Self {
        Self {
            hidden_widths: Vec::new(),
            epochs: 200,
            lr: 1e-2,
            batch_size: 64,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GpsModel<T> {
    classifier: DenseNet<T>,
    pub epochs: usize,
    pub final_log_loss: f64,
    /// Set when training log-loss did not beat the uniform predictor.
    pub warning: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GpsQuality {
    pub log_loss: f64,
    pub accuracy: f64,
}

impl<T: Scalar> GpsModel<T> {
    /// Wraps a logit network whose output width is the number of treatments.
    pub fn from_classifier(classifier: DenseNet<T>) -> Result<Self> {
        if classifier.output_dim() < 2 {
            return Err(Error::invalid("classifier needs at least two outputs"));
        }
        Ok(Self {
            classifier,
            epochs: 0,
            final_log_loss: f64::NAN,
            warning: None,
        })
    }

    pub fn classifier(&self) -> &DenseNet<T> {
        &self.classifier
    }

    pub fn k(&self) -> usize {
        self.classifier.output_dim()
    }

    pub fn predict_batch(&self, x: &Matrix<T>) -> Result<Vec<GpsVector<T>>> {
        let logits = self.classifier.forward(x)?;
        logits.iter_rows().map(GpsVector::from_logits).collect()
    }

    /// GPS for every sample of `ds`, keyed by id.
    pub fn predict_dataset(&self, ds: &Dataset<T>) -> Result<GpsTable<T>> {
        if ds.k() != self.k() {
            return Err(Error::invalid(format!("dataset has K={}, model has K={}", ds.k(), self.k())));
        }
        let preds = self.predict_batch(&ds.covariates())?;
        Ok(ds.ids().into_iter().zip(preds).collect())
    }
}

pub fn predict_gps<T: Scalar>(m: &GpsModel<T>, x: &[T]) -> Result<GpsVector<T>> {
    let batch = Matrix::from_vec(1, x.len(), x.to_vec())?;
    Ok(m.predict_batch(&batch)?.pop().expect("one row"))
}

/// Fits the treatment classifier by minibatch Adam on the multinomial log-loss.
pub fn fit_gps<T: Scalar>(gps_fit: &Dataset<T>, cfg: &GpsConfig) -> Result<GpsModel<T>> {
    if gps_fit.is_empty() {
        return Err(Error::invalid("propensity fit set is empty"));
    }
    let k = gps_fit.k();
    if let Some(missing) = gps_fit.treatment_counts().iter().position(|c| *c == 0) {
        return Err(Error::degenerate(format!("treatment {missing} absent from propensity fit set")));
    }
    if cfg.epochs == 0 || cfg.batch_size == 0 {
        return Err(Error::invalid("epochs and batch size must be positive"));
    }
    let mut net = DenseNet::mlp(
        gps_fit.d(),
        &cfg.hidden_widths,
        k,
        Activation::Elu,
        Activation::Identity,
        cfg.seed,
    )?;
    let mut opt = OptimizerState::new(OptimizerConfig::adam(cfg.lr), &net)?;
    let x = gps_fit.covariates();
    let t = gps_fit.treatments();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut order: Vec<usize> = (0..gps_fit.len()).collect();

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let xb = x.gather_rows(chunk);
            let logits = net.forward_train(&xb)?;
            let inv_b = T::one() / T::from_usize(chunk.len()).unwrap();
            let mut up = Matrix::zeros(chunk.len(), k);
            for (r, &i) in chunk.iter().enumerate() {
                let row = logits.row(r);
                let max = row.iter().copied().fold(T::neg_infinity(), T::max);
                let exps: Vec<T> = row.iter().map(|v| (*v - max).exp()).collect();
                let sum: T = exps.iter().copied().sum();
                let ur = up.row_mut(r);
                for c in 0..k {
                    let target = if c == t[i] { T::one() } else { T::zero() };
                    ur[c] = (exps[c] / sum - target) * inv_b;
                }
            }
            let g = net.backward_params(&up)?;
            opt.apply_update(&mut net, &g)
                .map_err(|e| Error::NonFinite(format!("propensity fit epoch {epoch}: {e}")))?;
        }
    }
    net.clear_cache();

    let mut model = GpsModel::from_classifier(net)?;
    model.epochs = cfg.epochs;
    model.final_log_loss = evaluate_gps(&model, gps_fit)?.log_loss;
    let uniform = (k as f64).ln();
    if model.final_log_loss > uniform {
        let msg = format!(
            "propensity log-loss {:.4} does not beat the uniform predictor ({uniform:.4})",
            model.final_log_loss
        );
        log::warn!("{msg}");
        model.warning = Some(msg);
    }
    Ok(model)
}

/// Multiclass log-loss and top-1 accuracy of GPS vectors against treatments.
pub fn gps_quality<T: Scalar>(probs: &[GpsVector<T>], treatments: &[usize]) -> Result<GpsQuality> {
    if probs.is_empty() {
        return Err(Error::invalid("cannot score an empty set"));
    }
    if probs.len() != treatments.len() {
        return Err(Error::invalid("one treatment per GPS vector required"));
    }
    let mut loss = 0.0;
    let mut hits = 0usize;
    for (p, &t) in probs.iter().zip(treatments) {
        if t >= p.k() {
            return Err(Error::invalid(format!("treatment {t} outside GPS width {}", p.k())));
        }
        loss -= p.as_slice()[t].as_f64().ln();
        if p.argmax() == t {
            hits += 1;
        }
    }
    let n = probs.len() as f64;
    Ok(GpsQuality {
        log_loss: loss / n,
        accuracy: hits as f64 / n,
    })
}

pub fn evaluate_gps<T: Scalar>(m: &GpsModel<T>, ds: &Dataset<T>) -> Result<GpsQuality> {
    if ds.is_empty() {
        return Err(Error::invalid("cannot evaluate on an empty dataset"));
    }
    let preds = m.predict_batch(&ds.covariates())?;
    gps_quality(&preds, &ds.treatments())
}

/// Writes `id,p_0,...,p_{K-1}` with 17 significant digits.
pub fn write_gps_csv<T: Scalar>(table: &GpsTable<T>, path: &Path) -> Result<()> {
    let k = table.values().next().map_or(0, GpsVector::k);
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["id".to_string()];
    header.extend((0..k).map(|j| format!("p_{j}")));
    w.write_record(&header)?;
    for (id, p) in table {
        if p.k() != k {
            return Err(Error::invalid("GPS vectors of different widths"));
        }
        let mut rec = vec![id.to_string()];
        rec.extend(p.as_slice().iter().map(|v| format_exact(*v)));
        w.write_record(&rec)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    crate::io::write_atomic(path, &bytes)
}

pub fn read_gps_csv<T: Scalar>(path: &Path) -> Result<GpsTable<T>> {
    let mut r = csv::Reader::from_path(path)?;
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    let k = header.len().saturating_sub(1);
    if header.first().map(String::as_str) != Some("id") || k < 2 {
        return Err(Error::format(path, "expected header id,p_0,...,p_{K-1}"));
    }
    for (j, h) in header[1..].iter().enumerate() {
        if *h != format!("p_{j}") {
            return Err(Error::format(path, format!("expected column p_{j}, found {h}")));
        }
    }
    let mut table = GpsTable::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec?;
        let id: u64 = rec
            .get(0)
            .and_then(|s| s.trim().parse().ok())
            .ok_or_else(|| Error::format(path, format!("row {}: bad id", line + 1)))?;
        let p = (1..=k)
            .map(|i| {
                rec.get(i)
                    .and_then(parse_exact::<T>)
                    .ok_or_else(|| Error::format(path, format!("row {}: bad probability", line + 1)))
            })
            .collect::<Result<Vec<T>>>()?;
        let v = GpsVector::new(p).map_err(|e| Error::format(path, format!("row {}: {e}", line + 1)))?;
        if table.insert(id, v).is_some() {
            return Err(Error::format(path, format!("duplicate id {id}")));
        }
    }
    Ok(table)
}
