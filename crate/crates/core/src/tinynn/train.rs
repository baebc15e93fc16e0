use log::info;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::checkpoint::Checkpoint;
use super::model::{Mode, Model};
use super::optim::{Adam, AdamConfig};
use super::Tensor;
use crate::error::{Error, Result};
use crate::patchset::Patch;
use crate::rng::{child_seed, stream};

const PROB_CLAMP: f64 = 1e-7;

/// Mean weighted binary cross-entropy with probabilities clamped away from 0 and 1.
pub fn bce_loss(pred: &[f64], target: &[f64], pos_weight: f64) -> f64 {
    if pred.is_empty() {
        return 0.0;
    }
    let sum: f64 = pred
        .iter()
        .zip(target)
        .map(|(&p, &t)| {
            let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
            -(pos_weight * t * p.ln() + (1.0 - t) * (1.0 - p).ln())
        })
        .sum();
    sum / pred.len() as f64
}

/// Plateau test on the trailing window of validation accuracies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopRule {
    /// Stop when max - min <= band.
    #[default]
    Absolute,
    /// Stop when (max - min) / max <= band.
    Relative,
    /// Run to `max_epochs`.
    Never,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub max_epochs: usize,
    pub window: usize,
    pub band: f64,
    pub stop_rule: StopRule,
    pub pos_weight: f64,
    pub seed: u64,
    /// Also score the training set in eval mode after every epoch.
    pub track_train_accuracy: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            batch_size: 32,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            max_epochs: 100,
            window: 10,
            band: 0.05,
            stop_rule: StopRule::Absolute,
            pos_weight: 1.0,
            seed: 0,
            track_train_accuracy: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.lr
            )));
        }
        if self.window == 0 || self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::Config(
                "window, batch size and epochs must be >= 1".into(),
            ));
        }
        if !(self.pos_weight > 0.0) {
            return Err(Error::Config(
                "positive-class weight must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
        }
    }

    fn plateaued(&self, accs: &[f64]) -> bool {
        if accs.len() < self.window {
            return false;
        }
        let tail = &accs[accs.len() - self.window..];
        let hi = tail.iter().cloned().fold(f64::MIN, f64::max);
        let lo = tail.iter().cloned().fold(f64::MAX, f64::min);
        match self.stop_rule {
            StopRule::Absolute => hi - lo <= self.band + 1e-12,
            StopRule::Relative => hi <= 0.0 || (hi - lo) / hi <= self.band + 1e-12,
            StopRule::Never => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
    pub train_accuracy: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochStats>,
    pub best_epoch: usize,
    pub stopped_early: bool,
}

impl History {
    pub fn train_losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.train_loss).collect()
    }
}

pub struct TrainOutcome {
    /// Snapshot at the best validation epoch.
    pub best: Checkpoint,
    /// Weights after the final epoch.
    pub last: Model<f32>,
}

fn stack(patches: &[&Patch]) -> Result<Tensor<f32>> {
    let first = patches
        .first()
        .ok_or_else(|| Error::Shape("cannot stack an empty batch".into()))?;
    let (c, s) = (first.channels, first.size);
    let mut data = Vec::with_capacity(patches.len() * first.data.len());
    for p in patches {
        if p.channels != c || p.size != s || p.data.len() != c * s * s * s {
            return Err(Error::Shape(format!(
                "patch {}x{}^3 does not match {}x{}^3",
                p.channels, p.size, c, s
            )));
        }
        data.extend_from_slice(&p.data);
    }
    Tensor::new(vec![patches.len(), c, s, s, s], data)
}

/// Eval-mode probabilities, computed in batches of `batch_size`.
pub fn predict(model: &mut Model<f32>, patches: &[Patch], batch_size: usize) -> Result<Vec<f64>> {
    let refs: Vec<&Patch> = patches.iter().collect();
    predict_patches(model, &refs, batch_size)
}

pub fn predict_patches(
    model: &mut Model<f32>,
    patches: &[&Patch],
    batch_size: usize,
) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(patches.len());
    for chunk in patches.chunks(batch_size.max(1)) {
        let x = stack(chunk)?;
        out.extend(model.forward(&x, Mode::Eval)?.into_iter().map(|p| p as f64));
    }
    Ok(out)
}

fn accuracy(probs: &[f64], targets: &[f64]) -> f64 {
    let hits = probs
        .iter()
        .zip(targets)
        .filter(|(&p, &t)| (p >= 0.5) == (t > 0.5))
        .count();
    hits as f64 / probs.len() as f64
}

fn targets(patches: &[&Patch]) -> Vec<f64> {
    patches.iter().map(|p| p.label as f64).collect()
}

/// Seeded minibatch Adam training with the plateau stopping rule. The best
/// epoch maximizes validation accuracy; ties go to the lower validation
/// loss, then to the earlier epoch.
pub fn train(
    mut model: Model<f32>,
    train_set: &[&Patch],
    val_set: &[&Patch],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Config(format!(
            "training needs non-empty sets, got {} train / {} validation",
            train_set.len(),
            val_set.len()
        )));
    }
    let mut adam = Adam::for_model(cfg.adam(), &model);
    let val_t = targets(val_set);
    let mut history = History::default();
    let mut best: Option<(f64, f64, Model<f32>, Adam)> = None;

    for epoch in 1..=cfg.max_epochs {
        let epoch_seed = child_seed(cfg.seed, epoch as u64);
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut stream(epoch_seed, 0));
        let mut loss_sum = 0.0;
        for (bi, idx) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&Patch> = idx.iter().map(|&i| train_set[i]).collect();
            let x = stack(&batch)?;
            let t = targets(&batch);
            let mode = Mode::Train {
                dropout_seed: child_seed(epoch_seed, 1 + bi as u64),
            };
            let p: Vec<f64> = model.forward(&x, mode)?.iter().map(|&v| v as f64).collect();
            loss_sum += bce_loss(&p, &t, cfg.pos_weight) * batch.len() as f64;
            let t32: Vec<f32> = t.iter().map(|&v| v as f32).collect();
            model.backward(&t32, cfg.pos_weight)?;
            adam.step_model(&mut model);
        }
        let train_loss = loss_sum / train_set.len() as f64;
        let val_p = predict_patches(&mut model, val_set, cfg.batch_size)?;
        let val_loss = bce_loss(&val_p, &val_t, cfg.pos_weight);
        let val_accuracy = accuracy(&val_p, &val_t);
        let train_accuracy = if cfg.track_train_accuracy {
            let p = predict_patches(&mut model, train_set, cfg.batch_size)?;
            Some(accuracy(&p, &targets(train_set)))
        } else {
            None
        };
        info!(
            "epoch {epoch}: train loss {train_loss:.4}, val loss {val_loss:.4}, val acc {val_accuracy:.3}"
        );
        history.epochs.push(EpochStats {
            epoch,
            train_loss,
            val_loss,
            val_accuracy,
            train_accuracy,
        });
        let better = match &best {
            None => true,
            Some((acc, loss, _, _)) => {
                val_accuracy > *acc || (val_accuracy == *acc && val_loss < *loss)
            }
        };
        if better {
            model.clear_cache();
            best = Some((val_accuracy, val_loss, model.clone(), adam.clone()));
            history.best_epoch = epoch;
        }
        let accs: Vec<f64> = history.epochs.iter().map(|e| e.val_accuracy).collect();
        if cfg.plateaued(&accs) {
            history.stopped_early = epoch < cfg.max_epochs;
            break;
        }
    }
    let (_, _, best_model, best_adam) = best.expect("at least one epoch");
    model.clear_cache();
    Ok(TrainOutcome {
        best: Checkpoint {
            model: best_model,
            optimizer: Some(best_adam),
            history,
        },
        last: model,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::patchset::PatchMeta;
    use crate::tinynn::ModelConfig;

    #[test]
    fn bce_examples() {
        for t in [0.0, 1.0] {
            assert!((bce_loss(&[0.5], &[t], 1.0) - std::f64::consts::LN_2).abs() < 1e-12);
        }
        assert!((bce_loss(&[0.9], &[1.0], 1.0) - 0.105360515657826).abs() < 1e-12);
        assert!(bce_loss(&[1.0, 0.0], &[1.0, 0.0], 1.0) <= 1e-6);
        assert!((bce_loss(&[0.9], &[1.0], 3.0) - 3.0 * 0.105360515657826).abs() < 1e-12);
    }

    #[test]
    fn plateau_rules() {
        let cfg = TrainConfig::default();
        assert!(!cfg.plateaued(&[0.5; 9]));
        assert!(cfg.plateaued(&[0.5; 10]));
        let mut v = vec![0.4, 0.6];
        v.extend([0.5; 9]);
        assert!(!cfg.plateaued(&v));
        v.push(0.54);
        assert!(cfg.plateaued(&v));
        v.push(0.7);
        assert!(!cfg.plateaued(&v));
        let rel = TrainConfig {
            stop_rule: StopRule::Relative,
            band: 0.1,
            ..TrainConfig::default()
        };
        assert!(rel.plateaued(&[0.95, 1.0, 0.91, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0]));
        assert!(!rel.plateaued(&[0.85, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0]));
    }

    fn toy_patches(n: usize, size: usize) -> Vec<Patch> {
        (0..n)
            .map(|i| {
                let label = (i % 2) as u8;
                let s3 = size * size * size;
                let data = (0..2 * s3)
                    .map(|j| {
                        let base = if label == 1 { 0.5 } else { -0.5 };
                        base + ((i * 31 + j * 7) % 13) as f32 * 0.05
                    })
                    .collect();
                Patch {
                    data,
                    channels: 2,
                    size,
                    label,
                    meta: PatchMeta {
                        patient_id: format!("P{i}"),
                        position: [0.0; 3],
                        current_ma: 1.0,
                    },
                }
            })
            .collect()
    }

    #[test]
    fn plateau_stops_at_window_and_is_deterministic() {
        let patches = toy_patches(6, 5);
        let refs: Vec<&Patch> = patches.iter().collect();
        let cfg = TrainConfig {
            lr: 1e-12,
            batch_size: 4,
            seed: 3,
            ..TrainConfig::default()
        };
        // frozen running stats and a negligible step keep val accuracy constant
        let mcfg = ModelConfig {
            bn_momentum: 0.0,
            ..ModelConfig::reduced()
        };
        let run = || {
            let m = Model::new(mcfg.clone(), 1).unwrap();
            train(m, &refs[..4], &refs[4..], &cfg).unwrap()
        };
        let a = run();
        assert_eq!(a.best.history.epochs.len(), 10);
        assert!(a.best.history.stopped_early);
        let b = run();
        assert_eq!(a.best.history, b.best.history);
    }

    #[test]
    fn empty_sets_are_rejected() {
        let patches = toy_patches(2, 5);
        let refs: Vec<&Patch> = patches.iter().collect();
        let m = Model::new(ModelConfig::reduced(), 1).unwrap();
        assert!(matches!(
            train(m, &refs, &[], &TrainConfig::default()),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn predict_is_batch_independent_and_handles_empty() {
        let patches = toy_patches(5, 7);
        let mut m = Model::new(ModelConfig::reduced(), 4).unwrap();
        assert!(predict(&mut m, &[], 4).unwrap().is_empty());
        let a = predict(&mut m, &patches, 5).unwrap();
        let b = predict(&mut m, &patches, 2).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() <= 1e-6);
        }
    }
}
