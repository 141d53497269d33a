use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::mat::Mat;
use super::model::{backward, forward, Group, Params, PredictorModel};
use crate::{Error, Result};

/// SGD training protocol.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub warmup_epochs: usize,
    pub patience: usize,
    pub val_fraction: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Weight of the squared distance to the anchor parameters.
    pub beta: f64,
    /// Number of bottom transformer layers frozen during fine-tuning.
    pub freeze_first: usize,
    pub max_epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            warmup_epochs: 10,
            patience: 10,
            val_fraction: 0.1,
            learning_rate: 0.01,
            batch_size: 32,
            beta: 0.0,
            freeze_first: 0,
            max_epochs: 100,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::Config("val_fraction must lie in (0, 1)".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be finite and >= 0".into()));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::Config("beta must be finite and >= 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.max_epochs == 0 {
            return Err(Error::Config("max_epochs must be >= 1".into()));
        }
        Ok(())
    }
}

/// Input windows (`L x C`, RUL channel excluded) with scalar targets.
#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub inputs: Vec<Mat>,
    pub labels: Vec<f64>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            inputs: idx.iter().map(|&i| self.inputs[i].clone()).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    /// Parameters at the epoch with the lowest validation MSE.
    pub model: PredictorModel,
    pub history: Vec<EpochRecord>,
    /// 1-based epoch of the returned checkpoint.
    pub best_epoch: usize,
}

/// Mean squared error plus `beta * ||adapt - anchor||^2`.
///
/// `adapt` and `anchor` are flattened trainable parameters in the same order.
pub fn loss_total(preds: &[f64], labels: &[f64], adapt: &[f64], anchor: &[f64], beta: f64) -> f64 {
    debug_assert_eq!(preds.len(), labels.len());
    debug_assert_eq!(adapt.len(), anchor.len());
    let mse = if preds.is_empty() {
        0.0
    } else {
        preds
            .iter()
            .zip(labels)
            .map(|(p, y)| (p - y).powi(2))
            .sum::<f64>()
            / preds.len() as f64
    };
    if beta == 0.0 {
        return mse;
    }
    let drift: f64 = adapt.iter().zip(anchor).map(|(a, b)| (a - b).powi(2)).sum();
    mse + beta * drift
}

/// Which parameter groups receive updates.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FreezeMask {
    pub frozen_layers: usize,
}

impl FreezeMask {
    pub fn none() -> Self {
        FreezeMask { frozen_layers: 0 }
    }

    pub fn trainable(&self, g: Group) -> bool {
        match g {
            Group::Layer(i) => i >= self.frozen_layers,
            Group::Embed | Group::Head => true,
        }
    }
}

/// Anchor term: the reference parameters and their weight.
#[derive(Debug, Clone, Copy)]
pub struct Anchor<'a> {
    pub params: &'a Params,
    pub beta: f64,
}

/// Loss and its gradient on one batch. Frozen groups get exactly zero gradient.
pub fn batch_gradient(
    params: &Params,
    batch: &[(&Mat, f64)],
    mask: &FreezeMask,
    anchor: Option<Anchor<'_>>,
) -> (f64, Params) {
    let mut grads = params.zeros_like();
    let n = batch.len() as f64;
    let mut preds = Vec::with_capacity(batch.len());
    for (x, y) in batch {
        let cache = forward(params, x);
        preds.push(cache.y);
        backward(params, &cache, 2.0 * (cache.y - y) / n, &mut grads);
    }
    let labels: Vec<f64> = batch.iter().map(|b| b.1).collect();
    let mut loss = loss_total(&preds, &labels, &[], &[], 0.0);
    if let Some(a) = anchor.filter(|a| a.beta != 0.0) {
        let mut anchor_mats = Vec::new();
        a.params.for_each(|_, _, m| anchor_mats.push(m));
        let mut current = Vec::new();
        params.for_each(|_, _, m| current.push(m));
        let mut idx = 0;
        grads.for_each_mut(|g, _, gm| {
            if mask.trainable(g) {
                for ((gv, p), q) in gm.data.iter_mut().zip(&current[idx].data).zip(&anchor_mats[idx].data) {
                    *gv += 2.0 * a.beta * (p - q);
                    loss += a.beta * (p - q).powi(2);
                }
            }
            idx += 1;
        });
    }
    grads.for_each_mut(|g, _, gm| {
        if !mask.trainable(g) {
            gm.fill(0.0);
        }
    });
    (loss, grads)
}

/// `params -= lr * grads` over trainable groups.
pub fn sgd_step(params: &mut Params, grads: &Params, lr: f64, mask: &FreezeMask) {
    let mut gs = Vec::new();
    grads.for_each(|_, _, m| gs.push(m));
    let mut i = 0;
    params.for_each_mut(|g, _, m| {
        if mask.trainable(g) {
            m.axpy(-lr, gs[i]);
        }
        i += 1;
    });
}

/// Mean squared error of the model on a dataset.
pub fn evaluate_mse(params: &Params, data: &Dataset) -> f64 {
    if data.is_empty() {
        return f64::NAN;
    }
    let preds: Vec<f64> = data.inputs.iter().map(|x| forward(params, x).y).collect();
    loss_total(&preds, &data.labels, &[], &[], 0.0)
}

/// Seeded 90/10-style split: returns (train, validation) indices.
pub fn split_indices(n: usize, val_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    idx.shuffle(&mut rng);
    if n < 2 {
        return (idx.clone(), idx);
    }
    let n_val = ((n as f64 * val_fraction).round() as usize).clamp(1, n - 1);
    let val = idx[..n_val].to_vec();
    let train = idx[n_val..].to_vec();
    (train, val)
}

/// Trains every parameter group from the model's current weights.
pub fn train(model: &PredictorModel, data: &Dataset, config: &TrainConfig) -> Result<TrainOutcome> {
    run(model, data, config, &FreezeMask::none(), None)
}

/// Fine-tunes with the first `freeze_first` layers frozen and an anchor to the
/// pretrained weights weighted by `beta`.
pub fn finetune(pretrained: &PredictorModel, data: &Dataset, config: &TrainConfig) -> Result<TrainOutcome> {
    if config.freeze_first > pretrained.config.layers {
        return Err(Error::arg(format!(
            "freeze_first {} exceeds layer count {}",
            config.freeze_first, pretrained.config.layers
        )));
    }
    let mask = FreezeMask {
        frozen_layers: config.freeze_first,
    };
    let anchor = Anchor {
        params: &pretrained.params,
        beta: config.beta,
    };
    run(pretrained, data, config, &mask, Some(anchor))
}

fn run(
    model: &PredictorModel,
    data: &Dataset,
    config: &TrainConfig,
    mask: &FreezeMask,
    anchor: Option<Anchor<'_>>,
) -> Result<TrainOutcome> {
    config.validate()?;
    model.config.validate()?;
    model.params.check_shapes(&model.config)?;
    if data.is_empty() {
        return Err(Error::arg("training dataset is empty"));
    }
    if data.inputs.len() != data.labels.len() {
        return Err(Error::Shape("inputs and labels differ in length".into()));
    }
    for x in &data.inputs {
        model.check_input(x)?;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let (mut train_idx, val_idx) = split_indices(data.len(), config.val_fraction, config.seed);
    let val = data.subset(&val_idx);

    let mut params = model.params.clone();
    let mut best = params.clone();
    let mut best_val = f64::INFINITY;
    let mut best_epoch = 0;
    let mut stale = 0;
    let mut history = Vec::new();

    for epoch in 1..=config.max_epochs {
        let start = Instant::now();
        train_idx.shuffle(&mut rng);
        let mut weighted = 0.0;
        for chunk in train_idx.chunks(config.batch_size) {
            let batch: Vec<(&Mat, f64)> = chunk.iter().map(|&i| (&data.inputs[i], data.labels[i])).collect();
            let (loss, grads) = batch_gradient(&params, &batch, mask, anchor);
            if !loss.is_finite() {
                return Err(Error::Divergence { epoch, loss });
            }
            weighted += loss * chunk.len() as f64;
            sgd_step(&mut params, &grads, config.learning_rate, mask);
        }
        let train_loss = weighted / train_idx.len() as f64;
        let val_loss = evaluate_mse(&params, &val);
        if !val_loss.is_finite() {
            return Err(Error::Divergence { epoch, loss: val_loss });
        }
        history.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            seconds: start.elapsed().as_secs_f64(),
        });
        if val_loss < best_val {
            best_val = val_loss;
            best = params.clone();
            best_epoch = epoch;
            stale = 0;
        } else if epoch > config.warmup_epochs {
            stale += 1;
            if stale >= config.patience {
                break;
            }
        }
    }

    Ok(TrainOutcome {
        model: PredictorModel {
            config: model.config.clone(),
            params: best,
        },
        history,
        best_epoch,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::predictor::model::PredictorConfig;
    use rand::Rng;

    fn tiny() -> PredictorConfig {
        PredictorConfig {
            embed_dim: 8,
            heads: 2,
            layers: 2,
            ffn_dim: 16,
            head_dims: [6, 4],
            input_channels: 3,
            seq_len: 4,
        }
    }

    fn toy_data(n: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut d = Dataset::default();
        for _ in 0..n {
            let mut x = Mat::zeros(4, 3);
            x.data.iter_mut().for_each(|v| *v = rng.random_range(0.0..1.0));
            let y = x.data.iter().sum::<f64>() / 12.0;
            d.inputs.push(x);
            d.labels.push(y);
        }
        d
    }

    #[test]
    fn loss_total_cases() {
        assert_eq!(loss_total(&[1.0, 2.0], &[1.0, 2.0], &[0.5, 1.0, 2.0], &[0.5, 1.0, 2.0], 3.0), 0.0);
        assert_eq!(loss_total(&[1.0, 2.0], &[0.0, 4.0], &[9.0], &[0.0], 0.0), 2.5);
        // (1 + 4) / 2 + 0.5 * ((1)^2 + (2)^2 + (0.5)^2)
        let v = loss_total(&[1.0, 2.0], &[0.0, 4.0], &[1.0, 0.0, 2.5], &[0.0, 2.0, 2.0], 0.5);
        assert_eq!(v, 2.5 + 0.5 * 5.25);
    }

    #[test]
    fn anchor_gradient_vanishes_at_anchor() {
        let m = PredictorModel::new(tiny(), 1).unwrap();
        let d = toy_data(3, 2);
        let batch: Vec<(&Mat, f64)> = d.inputs.iter().zip(&d.labels).map(|(x, y)| (x, *y)).collect();
        let (l0, g0) = batch_gradient(&m.params, &batch, &FreezeMask::none(), None);
        let anchor = Anchor { params: &m.params, beta: 7.0 };
        let (l1, g1) = batch_gradient(&m.params, &batch, &FreezeMask::none(), Some(anchor));
        assert_eq!(l0, l1);
        assert_eq!(g0, g1);
    }

    #[test]
    fn frozen_groups_have_zero_gradient() {
        let m = PredictorModel::new(tiny(), 3).unwrap();
        let d = toy_data(3, 4);
        let batch: Vec<(&Mat, f64)> = d.inputs.iter().zip(&d.labels).map(|(x, y)| (x, *y)).collect();
        let mask = FreezeMask { frozen_layers: 1 };
        let (_, g) = batch_gradient(&m.params, &batch, &mask, None);
        let mut nonzero_trainable = false;
        g.for_each(|grp, _, t| {
            if grp == Group::Layer(0) {
                assert!(t.data.iter().all(|&v| v == 0.0));
            } else if t.data.iter().any(|&v| v != 0.0) {
                nonzero_trainable = true;
            }
        });
        assert!(nonzero_trainable);
    }

    #[test]
    fn split_is_seeded_partition() {
        let (t, v) = split_indices(50, 0.1, 9);
        assert_eq!(v.len(), 5);
        assert_eq!(t.len(), 45);
        let mut all: Vec<usize> = t.iter().chain(&v).copied().collect();
        all.sort();
        assert_eq!(all, (0..50).collect::<Vec<_>>());
        assert_eq!(split_indices(50, 0.1, 9), (t, v));
    }

    #[test]
    fn constant_validation_stops_at_warmup_plus_patience() {
        let m = PredictorModel::new(tiny(), 5).unwrap();
        let cfg = TrainConfig {
            learning_rate: 0.0,
            max_epochs: 100,
            batch_size: 8,
            ..TrainConfig::default()
        };
        let out = train(&m, &toy_data(20, 6), &cfg).unwrap();
        assert_eq!(out.history.len(), 20);
        assert_eq!(out.best_epoch, 1);
        assert_eq!(out.model, m);
    }

    #[test]
    fn improving_validation_runs_to_max_epochs() {
        let m = PredictorModel::new(tiny(), 7).unwrap();
        let mut data = toy_data(20, 8);
        // a shifted constant target: the output bias alone drives the loss down
        data.labels.iter_mut().for_each(|y| *y = 3.0);
        let cfg = TrainConfig {
            learning_rate: 1e-3,
            max_epochs: 25,
            batch_size: 20,
            ..TrainConfig::default()
        };
        let out = train(&m, &data, &cfg).unwrap();
        assert_eq!(out.history.len(), 25);
        assert!(out.history.windows(2).all(|w| w[1].val_loss < w[0].val_loss));
        assert_eq!(out.best_epoch, 25);
    }

    #[test]
    fn training_is_deterministic() {
        let m = PredictorModel::new(tiny(), 9).unwrap();
        let data = toy_data(30, 10);
        let cfg = TrainConfig {
            max_epochs: 5,
            batch_size: 4,
            seed: 3,
            ..TrainConfig::default()
        };
        let a = train(&m, &data, &cfg).unwrap();
        let b = train(&m, &data, &cfg).unwrap();
        assert_eq!(a.model, b.model);
        let losses = |o: &TrainOutcome| o.history.iter().map(|r| (r.train_loss, r.val_loss)).collect::<Vec<_>>();
        assert_eq!(losses(&a), losses(&b));
    }

    #[test]
    fn divergence_is_reported() {
        let m = PredictorModel::new(tiny(), 11).unwrap();
        let mut data = toy_data(10, 12);
        data.labels.iter_mut().for_each(|y| *y = 1e200);
        let cfg = TrainConfig {
            max_epochs: 3,
            ..TrainConfig::default()
        };
        match train(&m, &data, &cfg) {
            Err(Error::Divergence { epoch, .. }) => assert_eq!(epoch, 1),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn finetune_freezes_and_validates() {
        let m = PredictorModel::new(tiny(), 13).unwrap();
        let data = toy_data(20, 14);
        let cfg = TrainConfig {
            freeze_first: 1,
            max_epochs: 4,
            batch_size: 4,
            learning_rate: 0.05,
            ..TrainConfig::default()
        };
        let out = finetune(&m, &data, &cfg).unwrap();
        assert_eq!(out.model.params.layers[0], m.params.layers[0]);
        assert_ne!(out.model.params.layers[1], m.params.layers[1]);
        let bad = TrainConfig { freeze_first: 3, ..cfg };
        assert!(matches!(finetune(&m, &data, &bad), Err(Error::Argument(_))));
    }

    #[test]
    fn finetune_without_freeze_or_anchor_equals_train() {
        let m = PredictorModel::new(tiny(), 15).unwrap();
        let data = toy_data(20, 16);
        let cfg = TrainConfig {
            max_epochs: 4,
            batch_size: 4,
            ..TrainConfig::default()
        };
        let a = train(&m, &data, &cfg).unwrap();
        let b = finetune(&m, &data, &cfg).unwrap();
        assert_eq!(a.model, b.model);
        assert_eq!(a.best_epoch, b.best_epoch);
    }

    #[test]
    fn strong_anchor_limits_drift() {
        let m = PredictorModel::new(tiny(), 17).unwrap();
        let data = toy_data(20, 18);
        let cfg = TrainConfig {
            freeze_first: 2,
            beta: 1e6,
            learning_rate: 1e-8,
            max_epochs: 5,
            batch_size: 4,
            ..TrainConfig::default()
        };
        let out = finetune(&m, &data, &cfg).unwrap();
        let keep = |g: Group| !matches!(g, Group::Layer(_));
        let drift: f64 = out
            .model
            .params
            .flatten(keep)
            .iter()
            .zip(m.params.flatten(keep))
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        assert!(drift <= 1e-3, "drift {drift}");
    }

    #[test]
    fn rejects_bad_inputs() {
        let m = PredictorModel::new(tiny(), 19).unwrap();
        assert!(train(&m, &Dataset::default(), &TrainConfig::default()).is_err());
        let mut d = toy_data(3, 20);
        d.inputs[1] = Mat::zeros(4, 2);
        assert!(matches!(train(&m, &d, &TrainConfig::default()), Err(Error::Shape(_))));
        let cfg = TrainConfig { val_fraction: 1.0, ..TrainConfig::default() };
        assert!(train(&m, &toy_data(3, 21), &cfg).is_err());
    }

    fn perturbed(params: &Params, k: usize, delta: f64) -> Params {
        let mut p = params.clone();
        let mut seen = 0;
        p.for_each_mut(|_, _, m| {
            if k >= seen && k < seen + m.len() {
                m.data[k - seen] += delta;
            }
            seen += m.len();
        });
        p
    }

    #[test]
    fn gradients_match_central_differences() {
        let cfg = PredictorConfig {
            embed_dim: 8,
            heads: 2,
            layers: 1,
            ffn_dim: 16,
            head_dims: [6, 4],
            input_channels: 3,
            seq_len: 4,
        };
        let m = PredictorModel::new(cfg, 21).unwrap();
        let mut anchor = m.params.clone();
        anchor.for_each_mut(|_, _, t| t.data.iter_mut().for_each(|v| *v *= 0.9));
        let data = toy_data(3, 22);
        let batch: Vec<(&Mat, f64)> = data.inputs.iter().zip(&data.labels).map(|(x, y)| (x, *y)).collect();
        let a = Some(Anchor { params: &anchor, beta: 0.3 });
        let (_, grads) = batch_gradient(&m.params, &batch, &FreezeMask::none(), a);
        let flat = grads.flatten(|_| true);
        let h = 1e-4;
        let mut worst: f64 = 0.0;
        for (k, &analytic) in flat.iter().enumerate() {
            let up = batch_gradient(&perturbed(&m.params, k, h), &batch, &FreezeMask::none(), a).0;
            let down = batch_gradient(&perturbed(&m.params, k, -h), &batch, &FreezeMask::none(), a).0;
            let numeric = (up - down) / (2.0 * h);
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max(rel);
        }
        assert!(worst <= 1e-4, "worst relative error {worst}");
    }

    #[test]
    fn memorizes_twenty_samples() {
        let cfg = PredictorConfig {
            embed_dim: 16,
            heads: 2,
            layers: 1,
            ffn_dim: 32,
            head_dims: [16, 8],
            input_channels: 3,
            seq_len: 4,
        };
        let m = PredictorModel::new(cfg, 23).unwrap();
        let data = toy_data(20, 24);
        let batch: Vec<(&Mat, f64)> = data.inputs.iter().zip(&data.labels).map(|(x, y)| (x, *y)).collect();
        let mut params = m.params.clone();
        let mut loss = f64::INFINITY;
        for epoch in 0..2000 {
            let (l, g) = batch_gradient(&params, &batch, &FreezeMask::none(), None);
            loss = l;
            if loss <= 1e-3 {
                eprintln!("memorized at epoch {epoch}");
                break;
            }
            sgd_step(&mut params, &g, 0.05, &FreezeMask::none());
        }
        assert!(loss <= 1e-3, "loss {loss}");
    }
}
