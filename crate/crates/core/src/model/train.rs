use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::{Batch, LossBreakdown};
use super::{Architecture, MultiHeadNet};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::matching::{build_match_index, AugmentStats, MatchIndex, MatchStrategy};
use crate::metrics;
use crate::nn::{OptimizerConfig, OptimizerState};
use crate::propensity::GpsTable;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Matching {
    None,
    Ps,
    Gps,
}

impl Matching {
    pub fn strategy(self) -> Option<MatchStrategy> {
        match self {
            Matching::None => None,
            Matching::Ps => Some(MatchStrategy::Ps),
            Matching::Gps => Some(MatchStrategy::Gps),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Minibatch size before augmentation.
    pub batch_size: usize,
    pub alpha: f64,
    pub gamma: f64,
    pub optimizer: OptimizerConfig,
    pub matching: Matching,
    /// When off, the imbalance weight is forced to zero.
    pub balancing: bool,
    /// Neighbours kept per (unit, counterfactual treatment).
    pub l: usize,
    pub seed: u64,
    pub architecture: Architecture,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 300,
            batch_size: 32,
            alpha: 1.0,
            gamma: 1e-4,
            optimizer: OptimizerConfig::default(),
            matching: Matching::Gps,
            balancing: true,
            l: 5,
            seed: 0,
            architecture: Architecture::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(Error::invalid("epochs must be at least 1"));
        }
        if self.batch_size < 2 {
            return Err(Error::invalid("batch size must be at least 2"));
        }
        if !(self.alpha >= 0.0 && self.gamma >= 0.0) {
            return Err(Error::invalid("alpha and gamma must be non-negative"));
        }
        if self.l < 1 {
            return Err(Error::invalid("l must be at least 1"));
        }
        self.optimizer.validate()
    }

    pub fn effective_alpha(&self) -> f64 {
        if self.balancing {
            self.alpha
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_total: f64,
    pub train_factual: f64,
    pub train_imbalance: f64,
    pub val_rmse_f: f64,
    /// Only with oracle outcomes on the validation set.
    pub val_rmse_cf: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    /// Parameters from the epoch with the lowest validation factual RMSE.
    pub net: MultiHeadNet<T>,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub augment: AugmentStats,
    pub match_index: Option<MatchIndex<T>>,
}

struct Optimizers<T> {
    phi: OptimizerState<T>,
    heads: Vec<OptimizerState<T>>,
}

/// Trains on `train`, selecting on `val`.
///
/// Each epoch shuffles the training set into minibatches; with matching on,
/// every minibatch is augmented with one random neighbour per counterfactual
/// treatment before the gradient step.
pub fn train<T: Scalar>(
    train: &Dataset<T>,
    val: &Dataset<T>,
    gps: Option<&GpsTable<T>>,
    cfg: &TrainConfig,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    let index = match cfg.matching.strategy() {
        None => None,
        Some(strategy) => {
            let gps = gps.ok_or_else(|| Error::invalid("matching requires GPS vectors for the training set"))?;
            Some(build_match_index(train, gps, cfg.l, strategy)?)
        }
    };
    train_with_index(train, val, index, cfg)
}

/// As [`train`], with a prebuilt match index. The index must have been built
/// on `train` with the strategy implied by `cfg.matching`.
pub fn train_with_index<T: Scalar>(
    train: &Dataset<T>,
    val: &Dataset<T>,
    index: Option<MatchIndex<T>>,
    cfg: &TrainConfig,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::invalid("training and validation sets must be non-empty"));
    }
    if val.d() != train.d() || val.k() != train.k() {
        return Err(Error::invalid("training and validation sets disagree on d or K"));
    }
    match (&index, cfg.matching.strategy()) {
        (None, None) => {}
        (Some(idx), Some(s)) if idx.strategy() == s && idx.dataset().len() == train.len() => {}
        _ => return Err(Error::invalid("match index does not fit the matching strategy or training set")),
    }

    let mut net = MultiHeadNet::new(train.d(), train.k(), &cfg.architecture, cfg.seed)?;
    let mut opt = Optimizers {
        phi: OptimizerState::new(cfg.optimizer, net.phi())?,
        heads: net
            .heads()
            .iter()
            .map(|h| OptimizerState::new(cfg.optimizer, h))
            .collect::<Result<_>>()?,
    };
    let alpha = cfg.effective_alpha();

    let x = train.covariates();
    let t = train.treatments();
    let y: Vec<T> = train.samples().iter().map(|s| s.y_factual).collect();
    let val_x = val.covariates();

    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    shuffle_rng.set_stream(1);
    let mut match_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    match_rng.set_stream(2);

    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, MultiHeadNet<T>)> = None;
    let mut augment = AugmentStats::default();

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut sums = [0.0f64; 3];
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let rows = match &index {
                Some(idx) => idx.augment_positions(chunk, &mut match_rng, &mut augment),
                None => chunk.to_vec(),
            };
            let batch = Batch::new(
                x.gather_rows(&rows),
                rows.iter().map(|&i| t[i]).collect(),
                rows.iter().map(|&i| y[i]).collect(),
            )?;
            let (loss, grads) = net.loss_and_gradients(&batch, alpha, cfg.gamma)?;
            if !loss.total.is_finite() {
                return Err(non_finite(epoch, batches, &loss));
            }
            step(&mut net, &mut opt, &grads).map_err(|e| match e {
                Error::NonFinite(msg) => Error::NonFinite(format!("epoch {epoch}, batch {batches}: {msg}")),
                e => e,
            })?;
            sums[0] += loss.total;
            sums[1] += loss.factual_mse;
            sums[2] += loss.imbalance;
            batches += 1;
        }

        let pred = net.predict_matrix(&val_x)?;
        let val_rmse_f = metrics::rmse_factual(&pred, val)?.as_f64();
        let val_rmse_cf = if val.has_oracle() {
            Some(metrics::rmse_counterfactual(&pred, val)?.as_f64())
        } else {
            None
        };
        let nb = batches as f64;
        history.push(EpochRecord {
            epoch,
            train_total: sums[0] / nb,
            train_factual: sums[1] / nb,
            train_imbalance: sums[2] / nb,
            val_rmse_f,
            val_rmse_cf,
        });
        log::debug!("epoch {epoch}: train {:.5} val rmse {val_rmse_f:.5}", sums[0] / nb);
        if best.as_ref().is_none_or(|(b, _, _)| val_rmse_f < *b) {
            best = Some((val_rmse_f, epoch, net.clone()));
        }
    }

    let (_, best_epoch, mut best_net) = best.expect("at least one epoch");
    best_net.clear_caches();
    Ok(TrainOutcome {
        net: best_net,
        history,
        best_epoch,
        augment,
        match_index: index,
    })
}

fn step<T: Scalar>(
    net: &mut MultiHeadNet<T>,
    opt: &mut Optimizers<T>,
    grads: &super::ModelGradients<T>,
) -> Result<()> {
    let (phi, heads) = net.parts_mut();
    opt.phi.apply_update(phi, &grads.phi)?;
    for ((h, o), g) in heads.iter_mut().zip(&mut opt.heads).zip(&grads.heads) {
        o.apply_update(h, g)?;
    }
    Ok(())
}

fn non_finite(epoch: usize, batch: usize, loss: &LossBreakdown) -> Error {
    Error::NonFinite(format!(
        "loss at epoch {epoch}, batch {batch}: factual {} imbalance {} regularizer {}",
        loss.factual_mse, loss.imbalance, loss.regularizer
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, split, SplitSpec};
    use crate::nn::Activation;
    use crate::propensity::{fit_gps, GpsConfig};

    fn small_cfg() -> TrainConfig {
        TrainConfig {
            epochs: 5,
            batch_size: 8,
            architecture: Architecture {
                phi_hidden: vec![8],
                repr_dim: 4,
                head_hidden: vec![4],
                activation: Activation::Elu,
            },
            ..TrainConfig::default()
        }
    }

    fn fixture(n: usize, k: usize) -> (Dataset<f64>, Dataset<f64>, GpsTable<f64>) {
        let ds = generate_synthetic::<f64>(n, 3, k, 2.0, 7).unwrap();
        let s = split(&ds, &SplitSpec::default(), 1).unwrap();
        let m = fit_gps(&s.gps_fit, &GpsConfig { epochs: 20, ..GpsConfig::default() }).unwrap();
        let gps = m.predict_dataset(&s.train).unwrap();
        (s.train, s.validation, gps)
    }

    #[test]
    fn zero_learning_rate_keeps_initial_parameters() {
        let (tr, va, gps) = fixture(200, 2);
        let cfg = TrainConfig {
            epochs: 1,
            optimizer: OptimizerConfig::sgd(0.0),
            ..small_cfg()
        };
        let out = train(&tr, &va, Some(&gps), &cfg).unwrap();
        let init = MultiHeadNet::<f64>::new(3, 2, &cfg.architecture, cfg.seed).unwrap();
        assert_eq!(out.net.parameters(), init.parameters());
        assert_eq!(out.history.len(), 1);
        assert!(out.history[0].val_rmse_f.is_finite());
        assert!(out.history[0].val_rmse_cf.is_some());
    }

    #[test]
    fn factual_loss_decreases_on_small_fixture() {
        let ds = generate_synthetic::<f64>(40, 2, 2, 1.0, 3).unwrap();
        let cfg = TrainConfig {
            epochs: 200,
            matching: Matching::None,
            optimizer: OptimizerConfig::adam(1e-2),
            ..small_cfg()
        };
        let init = MultiHeadNet::<f64>::new(2, 2, &cfg.architecture, cfg.seed).unwrap();
        let batch = Batch::from_samples(ds.samples()).unwrap();
        let before = super::super::loss_eq1(&init, &batch, 0.0, 0.0).unwrap().factual_mse;
        let out = train(&ds, &ds, None, &cfg).unwrap();
        let after = super::super::loss_eq1(&out.net, &batch, 0.0, 0.0).unwrap().factual_mse;
        assert!(after < before, "{after} !< {before}");
        assert!(out.history.last().unwrap().train_factual < out.history[0].train_factual);
    }

    #[test]
    fn training_is_deterministic() {
        let (tr, va, gps) = fixture(240, 3);
        let a = train(&tr, &va, Some(&gps), &small_cfg()).unwrap();
        let b = train(&tr, &va, Some(&gps), &small_cfg()).unwrap();
        assert_eq!(a.net, b.net);
        assert_eq!(a.history, b.history);
    }

    #[test]
    fn matching_without_gps_is_rejected() {
        let (tr, va, _) = fixture(200, 2);
        assert!(matches!(train(&tr, &va, None, &small_cfg()), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn unmatched_unbalanced_run_ignores_imbalance() {
        let (tr, va, _) = fixture(200, 3);
        let cfg = TrainConfig {
            matching: Matching::None,
            balancing: false,
            ..small_cfg()
        };
        let out = train(&tr, &va, None, &cfg).unwrap();
        assert!(out.match_index.is_none());
        for r in &out.history {
            // total carries only the factual term and the tiny head decay
            assert!(r.train_total - r.train_factual < 1e-2);
        }
    }

    #[test]
    fn augmentation_grows_batches() {
        let (tr, va, gps) = fixture(240, 3);
        let out = train(&tr, &va, Some(&gps), &TrainConfig { epochs: 1, ..small_cfg() }).unwrap();
        let idx = out.match_index.unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut stats = AugmentStats::default();
        let rows = idx.augment_positions(&[0, 1, 2, 3], &mut rng, &mut stats);
        assert_eq!(rows.len(), 12);
        assert_eq!(stats.skipped, 0);
    }
}
