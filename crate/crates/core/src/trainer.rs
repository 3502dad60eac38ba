//! Mini-batch momentum SGD with global-norm clipping, validation-based model
//! selection and early stopping.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, SamplePair};
use crate::error::{Error, Result};
use crate::model::{self, full_mask, init_params, GradBuffer, ModelConfig, ParameterStore};
use crate::tensor::Rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub grad_clip_norm: f64,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    /// Per-sample probability of hiding each encoder during training.
    pub encoder_dropout_prob: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.05,
            momentum: 0.9,
            batch_size: 32,
            max_epochs: 200,
            grad_clip_norm: 5.0,
            patience: 20,
            seed: 1,
            encoder_dropout_prob: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            bad.push(format!("train.learning_rate must be >= 0, got {}", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            bad.push(format!("train.momentum must be in [0, 1), got {}", self.momentum));
        }
        if self.batch_size == 0 {
            bad.push("train.batch_size must be at least 1".into());
        }
        if self.patience == 0 {
            bad.push("train.patience must be at least 1".into());
        }
        if !(self.grad_clip_norm > 0.0) {
            bad.push(format!("train.grad_clip_norm must be > 0, got {}", self.grad_clip_norm));
        }
        if !(0.0..1.0).contains(&self.encoder_dropout_prob) {
            bad.push(format!(
                "train.encoder_dropout_prob must be in [0, 1), got {}",
                self.encoder_dropout_prob
            ));
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean training-mode loss over the epoch's samples, before each update.
    pub train_loss: f64,
    /// Free-running validation MSE after the epoch.
    pub valid_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Training-mode loss of the initial parameters.
    pub initial_train_loss: f64,
    pub initial_valid_loss: f64,
    pub epochs: Vec<EpochStats>,
    /// Index into `epochs` of the selected parameters; `None` when no epoch
    /// improved on the initial parameters.
    pub best_epoch: Option<usize>,
    pub best_valid_loss: f64,
    pub updates: usize,
    pub seconds: f64,
    pub checksum: String,
}

/// Mean loss and mean gradient over `samples`; per-sample work may run in
/// parallel but the reduction follows sample order.
pub fn batch_gradient(
    samples: &[&SamplePair],
    masks: &[Vec<bool>],
    params: &ParameterStore,
    cfg: &ModelConfig,
) -> Result<(f64, GradBuffer)> {
    let per_sample: Vec<Result<(f64, GradBuffer)>> = samples
        .par_iter()
        .zip(masks.par_iter())
        .map(|(s, m)| model::backward(&s.x, &s.y, params, cfg, m))
        .collect();
    let mut total = 0.0;
    let mut grads = params.zeros_like();
    for r in per_sample {
        let (l, g) = r?;
        total += l;
        grads.add_scaled(&g, 1.0);
    }
    let k = 1.0 / samples.len() as f64;
    grads.scale(k);
    Ok((total * k, grads))
}

/// Rescales `grads` so its global 2-norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_gradients(grads: &mut GradBuffer, max_norm: f64) -> f64 {
    let norm = grads.norm();
    if norm > max_norm {
        grads.scale(max_norm / norm);
    }
    norm
}

/// Free-running MSE per sample with the full mask.
pub fn sample_losses(params: &ParameterStore, cfg: &ModelConfig, data: &Dataset) -> Result<Vec<f64>> {
    let mask = full_mask(cfg.e);
    data.samples
        .par_iter()
        .map(|s| {
            let f = model::forward(&s.x, params, cfg, &mask, None)?;
            model::loss(&f.y_hat, &s.y)
        })
        .collect()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |a, b| a + b) / v.len() as f64
}

/// 100 × the free-running mean squared error over every sample, station,
/// step and feature.
pub fn evaluate(params: &ParameterStore, cfg: &ModelConfig, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("evaluation set is empty".into()));
    }
    Ok(100.0 * mean(&sample_losses(params, cfg, data)?))
}

fn training_losses(params: &ParameterStore, cfg: &ModelConfig, data: &Dataset) -> Result<f64> {
    let mask = full_mask(cfg.e);
    let teacher_losses: Vec<f64> = data
        .samples
        .par_iter()
        .map(|s| {
            let teacher = cfg.teacher_forcing.then_some(&s.y);
            let f = model::forward(&s.x, params, cfg, &mask, teacher)?;
            model::loss(&f.y_hat, &s.y)
        })
        .collect::<Result<_>>()?;
    Ok(mean(&teacher_losses))
}

fn check_dataset(data: &Dataset, cfg: &ModelConfig, name: &str) -> Result<()> {
    if data.is_empty() {
        return Err(Error::InvalidArgument(format!("{name} set is empty")));
    }
    let s = &data.samples[0];
    if s.x.shape() != cfg.input_shape() {
        return Err(Error::shape("training input", s.x.shape(), &cfg.input_shape()));
    }
    if s.y.shape() != cfg.output_shape() {
        return Err(Error::shape("training target", s.y.shape(), &cfg.output_shape()));
    }
    Ok(())
}

fn draw_mask(e: usize, p: f64, rng: &mut Rng) -> Vec<bool> {
    if p == 0.0 {
        return full_mask(e);
    }
    let mut mask: Vec<bool> = (0..e).map(|_| rng.uniform() >= p).collect();
    if !mask.iter().any(|&m| m) {
        mask[rng.below(e)] = true;
    }
    mask
}

/// Trains from the seeded initialisation and returns the parameters of the
/// best validation epoch.
pub fn train(
    train: &Dataset,
    valid: &Dataset,
    cfg: &ModelConfig,
    tcfg: &TrainConfig,
) -> Result<(ParameterStore, TrainReport)> {
    cfg.validate()?;
    tcfg.validate()?;
    check_dataset(train, cfg, "training")?;
    check_dataset(valid, cfg, "validation")?;
    let started = Instant::now();

    let mut params = init_params(cfg, tcfg.seed);
    let mut velocity = params.zeros_like();
    let mut rng = Rng::new(tcfg.seed.wrapping_add(0x9e37_79b9_7f4a_7c15));

    let initial_train_loss = training_losses(&params, cfg, train)?;
    let initial_valid_loss = mean(&sample_losses(&params, cfg, valid)?);
    let mut best_valid = initial_valid_loss;
    let mut best_params = params.clone();
    let mut best_epoch = None;
    let mut since_best = 0;
    let mut epochs = Vec::new();
    let mut updates = 0;
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 0..tcfg.max_epochs {
        rng.shuffle(&mut order);
        let mut loss_sum = 0.0;
        for (batch_idx, chunk) in order.chunks(tcfg.batch_size).enumerate() {
            let samples: Vec<&SamplePair> = chunk.iter().map(|&i| &train.samples[i]).collect();
            let masks: Vec<Vec<bool>> = chunk
                .iter()
                .map(|_| draw_mask(cfg.e, tcfg.encoder_dropout_prob, &mut rng))
                .collect();
            let (batch_loss, mut grads) = batch_gradient(&samples, &masks, &params, cfg)?;
            if !batch_loss.is_finite() || !grads.all_finite() {
                return Err(Error::Diverged {
                    epoch,
                    batch: batch_idx,
                });
            }
            loss_sum += batch_loss * chunk.len() as f64;
            clip_gradients(&mut grads, tcfg.grad_clip_norm);
            velocity.scale(tcfg.momentum);
            velocity.add_scaled(&grads, -tcfg.learning_rate);
            params.add_scaled(&velocity, 1.0);
            updates += 1;
        }
        let valid_loss = mean(&sample_losses(&params, cfg, valid)?);
        if !valid_loss.is_finite() {
            return Err(Error::Diverged {
                epoch,
                batch: order.len().div_ceil(tcfg.batch_size),
            });
        }
        epochs.push(EpochStats {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            valid_loss,
        });
        if valid_loss < best_valid {
            best_valid = valid_loss;
            best_params = params.clone();
            best_epoch = Some(epoch);
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= tcfg.patience {
                break;
            }
        }
    }

    let report = TrainReport {
        initial_train_loss,
        initial_valid_loss,
        epochs,
        best_epoch,
        best_valid_loss: best_valid,
        updates,
        seconds: started.elapsed().as_secs_f64(),
        checksum: best_params.checksum(),
    };
    Ok((best_params, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_dataset, split, synth_generate, NormStats, SplitSpec, SynthParams};

    fn tiny_data() -> (Dataset, Dataset, ModelConfig) {
        let series = synth_generate(3, 800, 5, &SynthParams::default()).unwrap();
        let sp = split(&series, SplitSpec::default()).unwrap();
        let stats = NormStats::fit(&sp.train);
        let tr = make_dataset(&sp.train, &stats, 12, 6, 6, "train").unwrap();
        let va = make_dataset(sp.valid.as_ref().unwrap(), &stats, 12, 6, 6, "valid").unwrap();
        let cfg = ModelConfig {
            h: 6,
            p_att: 4,
            ..ModelConfig::square(3, 1, 12, 6)
        };
        (tr, va, cfg)
    }

    #[test]
    fn zero_learning_rate_leaves_params_unchanged() {
        let (tr, va, cfg) = tiny_data();
        let tcfg = TrainConfig {
            learning_rate: 0.0,
            max_epochs: 3,
            ..TrainConfig::default()
        };
        let (p, report) = train(&tr, &va, &cfg, &tcfg).unwrap();
        assert_eq!(p.checksum(), init_params(&cfg, tcfg.seed).checksum());
        assert!(report.best_epoch.is_none());
    }

    #[test]
    fn training_is_deterministic() {
        let (tr, va, cfg) = tiny_data();
        let tcfg = TrainConfig {
            max_epochs: 3,
            batch_size: 8,
            encoder_dropout_prob: 0.3,
            ..TrainConfig::default()
        };
        let (p1, r1) = train(&tr, &va, &cfg, &tcfg).unwrap();
        let (p2, r2) = train(&tr, &va, &cfg, &tcfg).unwrap();
        assert_eq!(p1, p2);
        assert_eq!(r1.epochs, r2.epochs);
        assert_eq!(r1.checksum, r2.checksum);
        assert_eq!(r1.best_epoch, r2.best_epoch);
    }

    #[test]
    fn best_epoch_parameters_are_returned() {
        let (tr, va, cfg) = tiny_data();
        let tcfg = TrainConfig {
            max_epochs: 15,
            batch_size: 8,
            patience: 3,
            ..TrainConfig::default()
        };
        let (p, r) = train(&tr, &va, &cfg, &tcfg).unwrap();
        let min = r.epochs.iter().map(|e| e.valid_loss).fold(r.initial_valid_loss, f64::min);
        assert_eq!(r.best_valid_loss, min);
        let again = evaluate(&p, &cfg, &va).unwrap() / 100.0;
        assert!((again - r.best_valid_loss).abs() < 1e-12);
        if let Some(b) = r.best_epoch {
            assert!(r.epochs.len() <= b + 1 + tcfg.patience);
        }
    }

    #[test]
    fn batch_gradient_is_mean_of_single_samples() {
        let (tr, _, cfg) = tiny_data();
        let params = init_params(&cfg, 3);
        let samples: Vec<&SamplePair> = tr.samples.iter().take(5).collect();
        let masks = vec![full_mask(cfg.e); 5];
        let (l, g) = batch_gradient(&samples, &masks, &params, &cfg).unwrap();
        let mut acc = vec![0.0; params.len()];
        let mut lacc = 0.0;
        for s in &samples {
            let (li, gi) = batch_gradient(&[*s], &masks[..1], &params, &cfg).unwrap();
            lacc += li / 5.0;
            for (a, b) in acc.iter_mut().zip(gi.flatten()) {
                *a += b / 5.0;
            }
        }
        assert!((l - lacc).abs() < 1e-12);
        for (a, b) in g.flatten().iter().zip(&acc) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn clipping_bounds_the_norm() {
        let (tr, _, cfg) = tiny_data();
        let params = init_params(&cfg, 3);
        let samples: Vec<&SamplePair> = tr.samples.iter().take(4).collect();
        let masks = vec![full_mask(cfg.e); 4];
        let (_, mut g) = batch_gradient(&samples, &masks, &params, &cfg).unwrap();
        let before = g.norm();
        let max = before / 3.0;
        assert_eq!(clip_gradients(&mut g, max), before);
        assert!(g.norm() <= max + 1e-9);
        let mut g2 = g.clone();
        clip_gradients(&mut g2, 1e6);
        assert_eq!(g, g2);
    }

    #[test]
    fn evaluate_is_scaled_mean_loss() {
        let (_, va, cfg) = tiny_data();
        let params = init_params(&cfg, 4);
        let mut sum = 0.0;
        for s in &va.samples {
            let f = model::forward(&s.x, &params, &cfg, &full_mask(cfg.e), None).unwrap();
            sum += model::loss(&f.y_hat, &s.y).unwrap();
        }
        let direct = 100.0 * sum / va.len() as f64;
        assert!((evaluate(&params, &cfg, &va).unwrap() - direct).abs() < 1e-12);
    }

    #[test]
    fn config_validation_lists_every_problem() {
        let t = TrainConfig {
            learning_rate: -1.0,
            batch_size: 0,
            patience: 0,
            ..TrainConfig::default()
        };
        match t.validate() {
            Err(Error::Config(list)) => assert_eq!(list.len(), 3),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn divergence_is_reported() {
        let (tr, va, cfg) = tiny_data();
        let mut bad = tr.clone();
        bad.samples[0].y.data_mut()[0] = f64::INFINITY;
        let tcfg = TrainConfig {
            max_epochs: 1,
            batch_size: 1000,
            ..TrainConfig::default()
        };
        assert!(matches!(
            train(&bad, &va, &cfg, &tcfg),
            Err(Error::Diverged { epoch: 0, batch: 0 })
        ));
    }
}
