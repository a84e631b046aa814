//! Training: Adam, the learning-rate schedule, data preparation with
//! augmentation, the epoch loop with validation-based model selection, and
//! a synthetic corpus for desk-scale runs.

mod adam;
mod data;
mod toy;

use std::fmt::Write as _;
use std::path::Path;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Tensor};
use crate::dsp::{augment, AugmentKind};
use crate::dsp::{apply_cmvn, extract_lms, LmsFeature, CMVN_WINDOW_S, SAMPLE_RATE};
use crate::fsutil::write_atomic;
use crate::model::Amcrn;
use crate::{Error, Result};

pub use adam::AdamState;
pub use data::{Dataset, LabeledAudio};
pub use toy::{make_toy_dataset, synthesize, write_dataset, ToySpeakerSpec, ToyVoice};

/// Optimization and data settings.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr_start: f64,
    pub lr_end: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub crop_seconds: f64,
    pub seed: u64,
    pub val_fraction: f64,
    /// Augmented copies generated per training utterance.
    pub augment_copies: usize,
    /// Global gradient-norm clip.
    pub grad_clip: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_start: 0.005,
            lr_end: 0.000001,
            epochs: 10,
            batch_size: 32,
            crop_seconds: 2.0,
            seed: 0,
            val_fraction: 0.05,
            augment_copies: 2,
            grad_clip: 5.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_end > 0.0 && self.lr_end <= self.lr_start) {
            return Err(Error::config("need 0 < lr_end <= lr_start"));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::config("val_fraction must lie in (0, 1)"));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::config("epochs and batch_size must be positive"));
        }
        if !(self.crop_seconds > 0.0) || !(self.grad_clip > 0.0) {
            return Err(Error::config("crop_seconds and grad_clip must be positive"));
        }
        Ok(())
    }
}

/// Exponential interpolation from `lr_start` at epoch 0 to `lr_end` at the
/// last epoch.
pub fn lr_schedule(epoch: usize, total_epochs: usize, cfg: &TrainConfig) -> f64 {
    if total_epochs <= 1 || epoch == 0 {
        return cfg.lr_start;
    }
    if epoch + 1 >= total_epochs {
        return cfg.lr_end;
    }
    let frac = epoch as f64 / (total_epochs - 1) as f64;
    cfg.lr_start * (cfg.lr_end / cfg.lr_start).powf(frac)
}

/// SNR range in dB used when drawing an augmentation of `kind`. For reverb
/// the range is the direct-to-reverberant ratio.
pub fn snr_range(kind: AugmentKind) -> (f64, f64) {
    match kind {
        AugmentKind::Noise => (0.0, 15.0),
        AugmentKind::Music => (5.0, 15.0),
        AugmentKind::Babble => (13.0, 20.0),
        AugmentKind::Reverb => (0.0, 10.0),
    }
}

/// One row of the loss history.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
}

/// Result of [`train`].
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Network with the lowest validation loss, rounded to single precision.
    pub best: Amcrn,
    pub best_epoch: usize,
    pub history: Vec<EpochRecord>,
    /// Training examples per epoch after augmentation.
    pub examples_per_epoch: usize,
}

struct Example {
    lms: LmsFeature,
    speaker: usize,
}

/// Loss history as CSV with header `epoch,train_loss,val_loss,lr`.
pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut s = String::from("epoch,train_loss,val_loss,lr\n");
    for r in history {
        writeln!(s, "{},{},{},{}", r.epoch, r.train_loss, r.val_loss, r.lr).unwrap();
    }
    s
}

pub fn write_history_csv(path: &Path, history: &[EpochRecord]) -> Result<()> {
    write_atomic(path, history_csv(history).as_bytes())
}

fn stack(examples: &[&Example], start: &[usize], len: usize, n_mels: usize) -> Result<Tensor> {
    let mut data = Vec::with_capacity(examples.len() * len * n_mels);
    for (ex, &s) in examples.iter().zip(start) {
        let crop = apply_cmvn(&ex.lms.crop(s, len), CMVN_WINDOW_S);
        data.extend_from_slice(crop.values.as_slice());
    }
    Tensor::new(vec![examples.len(), len, n_mels], data)
}

/// Splits `n` into batch lengths of at most `size`; a trailing batch of one
/// is merged into the previous batch (batch statistics need two rows).
fn batch_lengths(n: usize, size: usize) -> Vec<usize> {
    let mut v = vec![size; n / size];
    if n % size > 0 {
        v.push(n % size);
    }
    if v.len() > 1 && *v.last().unwrap() == 1 {
        v.pop();
        *v.last_mut().unwrap() += 1;
    }
    v
}

/// Mean loss of `model` in inference mode over fixed crops.
fn eval_loss(model: &Amcrn, examples: &[Example], starts: &[usize], len: usize, batch: usize) -> Result<f64> {
    let mut total = 0.0;
    let mut done = 0;
    let refs: Vec<&Example> = examples.iter().collect();
    for n in batch_lengths(refs.len(), batch) {
        let chunk = &refs[done..done + n];
        let x = stack(chunk, &starts[done..done + n], len, model.config().n_mels)?;
        let labels: Vec<usize> = chunk.iter().map(|e| e.speaker).collect();
        let mut g = Graph::new(model.params(), false, 0);
        let xv = g.input(x);
        let loss = model.loss(&mut g, xv, &labels, &mut Vec::new())?;
        total += g.data(loss)[0] * n as f64;
        done += n;
    }
    Ok(total / examples.len() as f64)
}

/// Trains `model` on `dataset` and returns the network with the lowest
/// validation loss.
pub fn train(mut model: Amcrn, dataset: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if dataset.n_speakers() < 2 {
        return Err(Error::InsufficientData("training needs at least 2 speakers".into()));
    }
    if model.config().n_classes < dataset.n_speakers() {
        return Err(Error::config(format!(
            "model has {} classes but the data has {} speakers",
            model.config().n_classes,
            dataset.n_speakers()
        )));
    }
    if dataset.len() < 3 {
        return Err(Error::InsufficientData("training needs at least 3 utterances".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let spec = *model.frontend();

    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(&mut rng);
    let n_val = ((dataset.len() as f64 * cfg.val_fraction).round() as usize).clamp(1, dataset.len() - 2);
    let (val_idx, train_idx) = order.split_at(n_val);

    let mut train_set = Vec::new();
    for &i in train_idx {
        let item = &dataset.items[i];
        train_set.push(Example {
            lms: extract_lms(&item.audio, &spec)?,
            speaker: item.speaker,
        });
        for _ in 0..cfg.augment_copies {
            let kind = AugmentKind::ALL[rng.random_range(0..AugmentKind::ALL.len())];
            let (lo, hi) = snr_range(kind);
            let snr = rng.random_range(lo..=hi);
            let noisy = augment(&item.audio, kind, snr, rng.random())?;
            train_set.push(Example {
                lms: extract_lms(&noisy, &spec)?,
                speaker: item.speaker,
            });
        }
    }
    let val_set: Vec<Example> = val_idx
        .iter()
        .map(|&i| {
            let item = &dataset.items[i];
            Ok(Example {
                lms: extract_lms(&item.audio, &spec)?,
                speaker: item.speaker,
            })
        })
        .collect::<Result<_>>()?;

    let crop_frames = spec.n_frames((cfg.crop_seconds * SAMPLE_RATE as f64).round() as usize, SAMPLE_RATE);
    let shortest = train_set
        .iter()
        .chain(&val_set)
        .map(|e| e.lms.n_frames())
        .min()
        .unwrap_or(0);
    let len = crop_frames.min(shortest);
    if len < 2 {
        return Err(Error::InputTooShort {
            needed: 2,
            got: len,
            unit: "frames",
        });
    }
    if len < crop_frames {
        warn!("shortest utterance has {shortest} frames; crops shortened from {crop_frames} to {len}");
    }
    let val_starts: Vec<usize> = val_set.iter().map(|e| (e.lms.n_frames() - len) / 2).collect();

    let mut adam = AdamState::new(model.params());
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, Amcrn)> = None;
    let n_mels = model.config().n_mels;
    for epoch in 0..cfg.epochs {
        let lr = lr_schedule(epoch, cfg.epochs, cfg);
        let mut perm: Vec<usize> = (0..train_set.len()).collect();
        perm.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut done = 0;
        for n in batch_lengths(perm.len(), cfg.batch_size) {
            let chunk: Vec<&Example> = perm[done..done + n].iter().map(|&i| &train_set[i]).collect();
            done += n;
            let starts: Vec<usize> = chunk
                .iter()
                .map(|e| rng.random_range(0..=e.lms.n_frames() - len))
                .collect();
            let x = stack(&chunk, &starts, len, n_mels)?;
            let labels: Vec<usize> = chunk.iter().map(|e| e.speaker).collect();
            let mut updates = Vec::new();
            let (loss, grads) = {
                let mut g = Graph::new(model.params(), true, rng.random());
                let xv = g.input(x);
                let loss = model.loss(&mut g, xv, &labels, &mut updates)?;
                (g.data(loss)[0], g.backward(loss)?)
            };
            if !loss.is_finite() {
                return Err(Error::Numerical(format!("training loss is {loss} in epoch {epoch}")));
            }
            let params = model.params_mut();
            params.zero_grad();
            params.accumulate(&grads);
            params.clip_grad_norm(cfg.grad_clip);
            adam.step(params, lr)?;
            model.apply_bn_updates(&updates);
            loss_sum += loss * n as f64;
        }
        let train_loss = loss_sum / train_set.len() as f64;
        let mut snapshot = model.clone();
        snapshot.round_to_f32();
        let val_loss = eval_loss(&snapshot, &val_set, &val_starts, len, cfg.batch_size)?;
        if !val_loss.is_finite() {
            return Err(Error::Numerical(format!("validation loss is {val_loss} in epoch {epoch}")));
        }
        info!("epoch {epoch}: train {train_loss:.4} val {val_loss:.4} lr {lr:.2e}");
        history.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            lr,
        });
        if best.as_ref().is_none_or(|(b, _, _)| val_loss < *b) {
            best = Some((val_loss, epoch, snapshot));
        }
    }
    let (_, best_epoch, best) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        best,
        best_epoch,
        history,
        examples_per_epoch: train_set.len(),
    })
}

/// Validation loss of `model` on `dataset` using centred crops, as computed
/// during training.
pub fn validation_loss(model: &Amcrn, dataset: &Dataset, crop_seconds: f64, batch_size: usize) -> Result<f64> {
    let spec = *model.frontend();
    let examples: Vec<Example> = dataset
        .items
        .iter()
        .map(|item| {
            Ok(Example {
                lms: extract_lms(&item.audio, &spec)?,
                speaker: item.speaker,
            })
        })
        .collect::<Result<_>>()?;
    let crop = spec.n_frames((crop_seconds * SAMPLE_RATE as f64).round() as usize, SAMPLE_RATE);
    let len = examples.iter().map(|e| e.lms.n_frames()).min().unwrap_or(0).min(crop);
    let starts: Vec<usize> = examples.iter().map(|e| (e.lms.n_frames() - len) / 2).collect();
    eval_loss(model, &examples, &starts, len, batch_size.max(1))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::AmcrnConfig;

    #[test]
    fn schedule_endpoints_and_midpoint() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_schedule(0, 11, &cfg), 0.005);
        assert_eq!(lr_schedule(10, 11, &cfg), 0.000001);
        let mid = lr_schedule(5, 11, &cfg);
        assert!((mid - (0.005f64 * 0.000001).sqrt()).abs() < 1e-15);
        for e in 1..11 {
            assert!(lr_schedule(e, 11, &cfg) < lr_schedule(e - 1, 11, &cfg));
        }
    }

    #[test]
    fn config_validation() {
        let mut c = TrainConfig::default();
        c.validate().unwrap();
        c.lr_end = 0.01;
        assert!(c.validate().is_err());
        let c = TrainConfig {
            val_fraction: 1.0,
            ..TrainConfig::default()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn batches_never_end_with_a_single_example() {
        assert_eq!(batch_lengths(10, 4), vec![4, 4, 2]);
        assert_eq!(batch_lengths(9, 4), vec![4, 5]);
        assert_eq!(batch_lengths(8, 4), vec![4, 4]);
        assert_eq!(batch_lengths(1, 4), vec![1]);
    }

    #[test]
    fn history_csv_format() {
        let h = [EpochRecord {
            epoch: 0,
            train_loss: 1.5,
            val_loss: 2.25,
            lr: 0.005,
        }];
        assert_eq!(history_csv(&h), "epoch,train_loss,val_loss,lr\n0,1.5,2.25,0.005\n");
    }

    fn micro() -> (Amcrn, Dataset) {
        let ds = make_toy_dataset(&ToySpeakerSpec {
            n_speakers: 3,
            utterances_per_speaker: 4,
            utterance_seconds: 0.6,
            seed: 1,
        })
        .unwrap();
        let cfg = AmcrnConfig {
            initial_channels: 8,
            mcb_channels: vec![8; 3],
            n_scales: 2,
            blstm_hidden: 4,
            pool_bottleneck: 4,
            embedding_dim: 16,
            n_classes: 3,
            ..AmcrnConfig::default()
        };
        (Amcrn::new(cfg, 3).unwrap(), ds)
    }

    #[test]
    fn augmentation_triples_examples() {
        let (model, ds) = micro();
        let base = TrainConfig {
            epochs: 1,
            batch_size: 8,
            crop_seconds: 0.3,
            val_fraction: 0.2,
            ..TrainConfig::default()
        };
        let plain = train(
            model.clone(),
            &ds,
            &TrainConfig {
                augment_copies: 0,
                ..base.clone()
            },
        )
        .unwrap();
        let aug = train(model, &ds, &base).unwrap();
        assert_eq!(aug.examples_per_epoch, 3 * plain.examples_per_epoch);
    }

    #[test]
    fn training_is_deterministic_and_selects_min_validation_loss() {
        let (model, ds) = micro();
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 6,
            crop_seconds: 0.3,
            val_fraction: 0.2,
            augment_copies: 1,
            ..TrainConfig::default()
        };
        let a = train(model.clone(), &ds, &cfg).unwrap();
        let b = train(model, &ds, &cfg).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.history.len(), 3);
        let best = a.history[a.best_epoch].val_loss;
        assert!(a.history.iter().all(|r| best <= r.val_loss));
        assert!(a.history.iter().all(|r| r.train_loss.is_finite() && r.val_loss.is_finite()));
        assert_eq!(a.history[0].lr, 0.005);
        assert_eq!(a.history[2].lr, 0.000001);
    }

    #[test]
    fn single_speaker_data_is_rejected() {
        let (model, mut ds) = micro();
        ds.items.retain(|i| i.speaker == 0);
        ds.speakers.truncate(1);
        assert!(matches!(
            train(model, &ds, &TrainConfig::default()),
            Err(Error::InsufficientData(_))
        ));
    }
}
