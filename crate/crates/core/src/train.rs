//! MSE training with Adam, per-epoch validation, early stopping and
//! best-weights restoration.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{Batch, Example, Model};
use crate::numeric::rng::{self, stream};
use crate::numeric::{AdamConfig, AdamState, Graph, Tensor, Var};

/// `(1/n) Σ (pred - target)²`.
pub fn mse(pred: &[f64], target: &[f64]) -> Result<f64> {
    if pred.len() != target.len() {
        return Err(Error::LengthMismatch(pred.len(), target.len()));
    }
    if pred.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let s: f64 = pred.iter().zip(target).map(|(p, t)| (p - t) * (p - t)).sum();
    Ok(s / pred.len() as f64)
}

fn mse_graph(g: &mut Graph, pred: Var, target: &[f64]) -> Result<Var> {
    let t = g.constant(Tensor::new(&[target.len(), 1], target.to_vec())?);
    let d = g.sub(pred, t)?;
    let sq = g.mul(d, d)?;
    g.mean_all(sq)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub shuffle_each_epoch: bool,
    /// Stop as soon as validation loss reaches this value.
    pub target_loss: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            lr: 1e-3,
            max_epochs: 100,
            patience: 5,
            seed: 42,
            shuffle_each_epoch: true,
            target_loss: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.patience == 0 || self.max_epochs == 0 {
            return Err(Error::InvalidConfig(
                "batch_size, patience and max_epochs must be >= 1".into(),
            ));
        }
        AdamConfig::with_lr(self.lr).validate()
    }
}

/// What one more validation loss means for the run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Progress {
    Improved,
    Waiting,
    Stop,
}

/// Patience counter over validation losses. Only a strict decrease counts
/// as improvement, so ties keep the earliest epoch.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: usize,
    best: Option<(usize, f64)>,
    seen: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience,
            best: None,
            seen: 0,
        }
    }

    pub fn observe(&mut self, loss: f64) -> Progress {
        let epoch = self.seen;
        self.seen += 1;
        match self.best {
            Some((_, b)) if !(loss < b) => {
                if self.epochs_since_best() >= self.patience {
                    Progress::Stop
                } else {
                    Progress::Waiting
                }
            }
            _ => {
                self.best = Some((epoch, loss));
                Progress::Improved
            }
        }
    }

    pub fn best_epoch(&self) -> Option<usize> {
        self.best.map(|(e, _)| e)
    }

    pub fn best_loss(&self) -> Option<f64> {
        self.best.map(|(_, l)| l)
    }

    pub fn epochs_since_best(&self) -> usize {
        self.best.map_or(self.seen, |(e, _)| self.seen - 1 - e)
    }
}

/// Feeds `losses` through [`EarlyStopping`] as the training loop would,
/// returning `(best_epoch, stopped_early, epochs_run)`.
pub fn simulate_early_stopping(losses: &[f64], patience: usize) -> (usize, bool, usize) {
    let mut es = EarlyStopping::new(patience);
    for (i, &l) in losses.iter().enumerate() {
        if es.observe(l) == Progress::Stop {
            return (es.best_epoch().unwrap_or(0), true, i + 1);
        }
    }
    (es.best_epoch().unwrap_or(0), false, losses.len())
}

/// Per-epoch history. Epochs are numbered from 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub train_losses: Vec<f64>,
    pub val_losses: Vec<f64>,
    pub best_epoch: usize,
    pub stopped_early: bool,
    pub reached_target: bool,
    /// Kept out of serialized records so they stay byte-reproducible.
    #[serde(skip)]
    pub wall_time_secs: f64,
}

impl TrainRecord {
    pub fn best_val_loss(&self) -> f64 {
        self.val_losses[self.best_epoch]
    }

    pub fn epochs(&self) -> usize {
        self.val_losses.len()
    }
}

/// Sentence vectors from a frozen backbone, computed once.
struct FeatureCache {
    d: usize,
    rows: Vec<f64>,
}

impl FeatureCache {
    fn build(model: &Model, examples: &[Example], batch_size: usize) -> Result<Self> {
        let mut rows = Vec::new();
        let mut d = 0;
        for chunk in examples.chunks(batch_size) {
            let refs: Vec<&Example> = chunk.iter().collect();
            let batch = Batch::from_examples(&refs)?;
            let mut g = Graph::new();
            let rep = model.represent(&mut g, &batch)?;
            d = g.shape(rep)[1];
            rows.extend_from_slice(g.value(rep));
        }
        Ok(FeatureCache { d, rows })
    }

    fn gather(&self, idx: &[usize]) -> Result<Tensor> {
        let mut v = Vec::with_capacity(idx.len() * self.d);
        for &i in idx {
            v.extend_from_slice(&self.rows[i * self.d..(i + 1) * self.d]);
        }
        Tensor::new(&[idx.len(), self.d], v)
    }
}

fn predict_cached(model: &Model, cache: &FeatureCache, n: usize, batch_size: usize) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(n);
    let idx: Vec<usize> = (0..n).collect();
    for chunk in idx.chunks(batch_size) {
        let mut g = Graph::new();
        let rep = g.constant(cache.gather(chunk)?);
        let y = model.head().forward(&mut g, model.params(), rep)?;
        out.extend_from_slice(g.value(y));
    }
    Ok(out)
}

fn targets(examples: &[Example]) -> Vec<f64> {
    examples.iter().map(|e| e.target).collect()
}

fn non_finite(e: Error, epoch: usize, batch: usize) -> Error {
    match e {
        Error::NonFiniteValue(_) => Error::NonFiniteLoss { epoch, batch },
        other => other,
    }
}

/// Trains `model` in place and leaves it holding the parameters of the
/// best validation epoch.
///
/// With a frozen backbone the sentence vectors are computed once, without
/// dropout, and only the head is optimized.
pub fn train(model: &mut Model, train: &[Example], val: &[Example], cfg: &TrainConfig) -> Result<TrainRecord> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::EmptySplit("train".into()));
    }
    if val.is_empty() {
        return Err(Error::EmptySplit("validation".into()));
    }
    let start = Instant::now();
    let frozen = model.backbone_frozen();
    let caches = if frozen {
        Some((
            FeatureCache::build(model, train, cfg.batch_size)?,
            FeatureCache::build(model, val, cfg.batch_size)?,
        ))
    } else {
        None
    };
    let val_targets = targets(val);

    let mut adam = AdamState::new(AdamConfig::with_lr(cfg.lr), model.params())?.with_f32_storage(true);
    let mut shuffle_rng = rng::seeded(cfg.seed, stream::EPOCH_SHUFFLE);
    let mut dropout_rng = Some(rng::seeded(cfg.seed, stream::DROPOUT));
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut best_params = model.params().snapshot();
    let mut record = TrainRecord {
        train_losses: Vec::new(),
        val_losses: Vec::new(),
        best_epoch: 0,
        stopped_early: false,
        reached_target: false,
        wall_time_secs: 0.0,
    };
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 0..cfg.max_epochs {
        if cfg.shuffle_each_epoch {
            rng::shuffle(&mut order, &mut shuffle_rng);
        }
        let mut total = 0.0;
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let y: Vec<f64> = chunk.iter().map(|&i| train[i].target).collect();
            let (mut g, pred) = match &caches {
                Some((tc, _)) => {
                    let mut g = Graph::new();
                    let rep = g.constant(tc.gather(chunk)?);
                    let pred = model.head().forward(&mut g, model.params(), rep);
                    (g, pred)
                }
                None => {
                    let refs: Vec<&Example> = chunk.iter().map(|&i| &train[i]).collect();
                    let batch = Batch::from_examples(&refs)?;
                    let mut g = Graph::training(dropout_rng.take().expect("rng returned"));
                    let pred = model.forward(&mut g, &batch);
                    (g, pred)
                }
            };
            let loss = pred
                .and_then(|p| mse_graph(&mut g, p, &y))
                .map_err(|e| non_finite(e, epoch, bi))?;
            total += g.value(loss)[0] * chunk.len() as f64;
            g.backward_params(loss, model.params_mut()).map_err(|e| non_finite(e, epoch, bi))?;
            if g.is_training() {
                dropout_rng = g.into_rng();
            }
            adam.step(model.params_mut())?;
            model.params_mut().clear_grads();
        }
        record.train_losses.push(total / train.len() as f64);

        let val_pred = match &caches {
            Some((_, vc)) => predict_cached(model, vc, val.len(), cfg.batch_size)?,
            None => predict_examples(model, val, cfg.batch_size)?,
        };
        let val_loss = mse(&val_pred, &val_targets)?;
        if !val_loss.is_finite() {
            return Err(Error::NonFiniteLoss { epoch, batch: 0 });
        }
        record.val_losses.push(val_loss);
        let progress = stopper.observe(val_loss);
        if progress == Progress::Improved {
            best_params = model.params().snapshot();
        }
        if progress == Progress::Stop {
            record.stopped_early = true;
            break;
        }
        if cfg.target_loss.is_some_and(|t| val_loss <= t) {
            record.reached_target = true;
            break;
        }
    }
    model.params_mut().restore(&best_params);
    record.best_epoch = stopper.best_epoch().unwrap_or(0);
    record.wall_time_secs = start.elapsed().as_secs_f64();
    Ok(record)
}

/// Predictions in input order, dropout disabled.
pub fn predict_examples(model: &Model, examples: &[Example], batch_size: usize) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(examples.len());
    for chunk in examples.chunks(batch_size.max(1)) {
        let refs: Vec<&Example> = chunk.iter().collect();
        out.extend(model.predict(&Batch::from_examples(&refs)?)?);
    }
    Ok(out)
}

/// MSE over `examples`, dropout disabled.
pub fn evaluate(model: &Model, examples: &[Example], batch_size: usize) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::EmptySplit("evaluation".into()));
    }
    mse(&predict_examples(model, examples, batch_size)?, &targets(examples))
}

/// MSE of predicting the mean of `fit` for every item of `eval`.
pub fn constant_baseline_mse(fit: &[Example], eval: &[Example]) -> Result<f64> {
    if fit.is_empty() || eval.is_empty() {
        return Err(Error::EmptySplit("baseline".into()));
    }
    let mean = fit.iter().map(|e| e.target).sum::<f64>() / fit.len() as f64;
    mse(&vec![mean; eval.len()], &targets(eval))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{BiLstmSpec, EncoderSpec, FineasModel, Pooling};
    use crate::tokenize::TokenSeq;
    use proptest::prelude::*;

    #[test]
    fn mse_examples() {
        assert_eq!(mse(&[0.3, -0.2], &[0.3, -0.2]).unwrap(), 0.0);
        assert_eq!(mse(&[0.0, 0.0], &[1.0, -1.0]).unwrap(), 1.0);
        assert!(matches!(mse(&[0.0], &[1.0, 2.0]), Err(Error::LengthMismatch(1, 2))));
        assert!(matches!(mse(&[], &[]), Err(Error::EmptyBatch)));
    }

    #[test]
    fn constant_at_mean_minimizes_mse() {
        let t = [0.9, -0.4, 0.1, 0.25, -0.7];
        let mean = t.iter().sum::<f64>() / 5.0;
        let at_mean = mse(&[mean; 5], &t).unwrap();
        for k in -200..=200 {
            let c = k as f64 / 200.0;
            assert!(mse(&[c; 5], &t).unwrap() >= at_mean - 1e-15);
        }
    }

    #[test]
    fn early_stopping_basics() {
        assert_eq!(simulate_early_stopping(&[5.0, 4.0, 3.0, 2.0], 2), (3, false, 4));
        assert_eq!(simulate_early_stopping(&[1.0, 2.0, 1.0, 3.0], 3), (0, true, 4));
        assert_eq!(simulate_early_stopping(&[2.0, 1.0, 1.0, 1.0], 2), (1, true, 4));
    }

    proptest! {
        #[test]
        fn early_stopping_invariant(losses in prop::collection::vec(0u8..20, 1..60), patience in 1usize..8) {
            let losses: Vec<f64> = losses.into_iter().map(f64::from).collect();
            let (best, stopped, run) = simulate_early_stopping(&losses, patience);
            let seen = &losses[..run];
            let min = seen.iter().cloned().fold(f64::INFINITY, f64::min);
            prop_assert_eq!(best, seen.iter().position(|&l| l == min).unwrap());
            if stopped {
                prop_assert_eq!(run - 1 - best, patience);
            } else {
                prop_assert_eq!(run, losses.len());
            }
        }
    }

    fn synthetic(n: usize, seed: u64) -> Vec<Example> {
        let mut r = rng::seeded(seed, 99);
        (0..n)
            .map(|_| {
                let a = 4 + rng::below(&mut r, 4) as u32;
                let b = 4 + rng::below(&mut r, 4) as u32;
                let len = 2 + rng::below(&mut r, 3) as usize;
                let ids = vec![2, a, b, 3][..len.min(4)].to_vec();
                Example {
                    seq: TokenSeq { length: ids.len(), ids },
                    key: String::new(),
                    target: (a as f64 - 5.5) / 4.0,
                }
            })
            .collect()
    }

    fn tiny_encoder() -> EncoderSpec {
        let mut s = EncoderSpec::new(10, 8, 1, 2);
        s.max_len = 8;
        s
    }

    #[test]
    fn deterministic_rerun_and_best_weights() {
        let data = synthetic(40, 1);
        let cfg = TrainConfig {
            batch_size: 8,
            max_epochs: 6,
            lr: 1e-2,
            ..Default::default()
        };
        let run = || {
            let mut m = Model::for_arm(crate::models::Arm::FineasFinetune, &tiny_encoder(), &BiLstmSpec::default(), 10, 3).unwrap();
            let rec = train(&mut m, &data[..30], &data[30..], &cfg).unwrap();
            (m, rec)
        };
        let (m1, r1) = run();
        let (m2, r2) = run();
        assert_eq!(serde_json::to_string(&r1).unwrap(), serde_json::to_string(&r2).unwrap());
        assert_eq!(m1.params().snapshot(), m2.params().snapshot());
        let v = evaluate(&m1, &data[30..], cfg.batch_size).unwrap();
        assert!((v - r1.best_val_loss()).abs() < 1e-7);
    }

    #[test]
    fn frozen_backbone_untouched_and_head_learns() {
        let data = synthetic(64, 2);
        let fm = FineasModel::new(tiny_encoder(), Pooling::Mean, true, 4).unwrap();
        let mut m = Model::Fineas(fm);
        let before = m.params().subset("encoder.").snapshot();
        let cfg = TrainConfig {
            batch_size: 16,
            max_epochs: 3,
            ..Default::default()
        };
        let rec = train(&mut m, &data, &data, &cfg).unwrap();
        assert_eq!(m.params().subset("encoder.").snapshot(), before);
        assert_eq!(rec.epochs(), 3);
    }

    #[test]
    fn strictly_improving_validation_runs_to_max_epochs() {
        let data = synthetic(32, 3);
        let mut m = Model::Fineas(FineasModel::new(tiny_encoder(), Pooling::Mean, true, 5).unwrap());
        let cfg = TrainConfig {
            batch_size: 32,
            lr: 1e-3,
            max_epochs: 5,
            shuffle_each_epoch: false,
            ..Default::default()
        };
        let rec = train(&mut m, &data, &data, &cfg).unwrap();
        assert!(rec.val_losses.windows(2).all(|w| w[1] < w[0]), "{:?}", rec.val_losses);
        assert!(!rec.stopped_early);
        assert_eq!(rec.best_epoch, 4);
    }

    #[test]
    fn one_full_batch_head_step_decreases_mse() {
        let data = synthetic(48, 4);
        let mut m = Model::Fineas(FineasModel::new(tiny_encoder(), Pooling::Mean, true, 6).unwrap());
        let before = evaluate(&m, &data, 48).unwrap();
        let cfg = TrainConfig {
            batch_size: 48,
            lr: 1e-4,
            max_epochs: 1,
            shuffle_each_epoch: false,
            ..Default::default()
        };
        train(&mut m, &data, &data, &cfg).unwrap();
        assert!(evaluate(&m, &data, 48).unwrap() < before);
    }

    #[test]
    fn evaluate_is_batch_size_independent() {
        let data = synthetic(50, 5);
        let m = Model::for_arm(crate::models::Arm::FineasFinetune, &tiny_encoder(), &BiLstmSpec::default(), 10, 1).unwrap();
        let a = evaluate(&m, &data, 1).unwrap();
        let b = evaluate(&m, &data, 32).unwrap();
        assert!((a - b).abs() < 1e-6);
        assert_eq!(evaluate(&m, &data, 32).unwrap(), b);
        assert!(matches!(evaluate(&m, &[], 4), Err(Error::EmptySplit(_))));
    }

    #[test]
    fn empty_splits_rejected() {
        let data = synthetic(4, 6);
        let mut m = Model::for_arm(crate::models::Arm::FineasFinetune, &tiny_encoder(), &BiLstmSpec::default(), 10, 1).unwrap();
        let cfg = TrainConfig::default();
        assert!(matches!(train(&mut m, &[], &data, &cfg), Err(Error::EmptySplit(_))));
        assert!(matches!(train(&mut m, &data, &[], &cfg), Err(Error::EmptySplit(_))));
    }
}
