//! Training: loss functions, the optimizer, the epoch loop with
//! best-checkpoint retention, the five experiment protocols, and
//! checkpoint serialization.

pub mod adamw;
pub mod checkpoint;
pub mod experiment;
pub mod loss;

use std::io::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::data::{augment, Sample};
use crate::error::TrainError;
use crate::eval::compute_metrics;
use crate::model::Model;
use crate::rng::{mix2, stream_seed};

pub use adamw::{AdamW, AdamWParams};

/// Knobs for one training phase.
#[derive(Debug, Clone)]
pub struct TrainSettings {
    pub batch_size: usize,
    pub epochs: usize,
    pub optimizer: AdamWParams,
    /// Applied to the train split only; evaluation always sees raw images.
    pub augment: bool,
    /// Master seed for the shuffle and augmentation streams.
    pub seed: u64,
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings {
            batch_size: 32,
            epochs: 300,
            optimizer: AdamWParams::default(),
            augment: true,
            seed: 0,
        }
    }
}

/// One row of the training history.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub phase: usize,
    pub train_loss: f64,
    pub val_acc: f64,
    pub val_macro_f1: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,phase,train_loss,val_acc,val_macro_f1\n");
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.epoch, r.phase, r.train_loss, r.val_acc, r.val_macro_f1
            ));
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> std::io::Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(self.to_csv().as_bytes())
    }

    pub fn extend(&mut self, other: TrainHistory) {
        self.records.extend(other.records);
    }
}

/// Predict fused grades for a sample slice and score them.
pub fn evaluate(
    model: &Model,
    samples: &[Sample],
    batch_size: usize,
) -> Result<crate::eval::MetricsReport, TrainError> {
    if samples.is_empty() {
        return Err(TrainError::Eval(crate::error::EvalError::Empty));
    }
    let mut pairs = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch_size.max(1)) {
        let mut images = Vec::with_capacity(chunk.len() * chunk[0].image.len());
        for s in chunk {
            images.extend_from_slice(&s.image);
        }
        let preds = model.predict(&images, chunk.len())?;
        for (s, p) in chunk.iter().zip(preds) {
            pairs.push((s.grade, p as u8));
        }
    }
    Ok(compute_metrics(&pairs)?)
}

/// Train `model` in place for `settings.epochs` epochs and hand back the
/// history. Each epoch reshuffles the train split from its own seeded
/// stream, draws fresh augmentations (train split only), runs AdamW over
/// mean batch losses, and scores the val split. The parameter snapshot with
/// the best val macro-F1 is restored at the end; with an empty val split the
/// final parameters stand and the val columns hold NaN.
pub fn train_loop(
    model: &Model,
    optimizer: &mut AdamW,
    train: &[Sample],
    val: &[Sample],
    settings: &TrainSettings,
    phase: usize,
) -> Result<TrainHistory, TrainError> {
    if train.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let shuffle_base = stream_seed(settings.seed, "shuffle");
    let augment_base = stream_seed(settings.seed, "augmentation");
    let image_len = train[0].image.len();

    let mut history = TrainHistory::default();
    let mut best: Option<(f64, Vec<Vec<f32>>)> = None;
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 0..settings.epochs {
        let mut shuffle_rng = ChaCha12Rng::seed_from_u64(mix2(shuffle_base, epoch as u64));
        order.shuffle(&mut shuffle_rng);
        let mut aug_rng = ChaCha12Rng::seed_from_u64(mix2(augment_base, epoch as u64));

        let mut loss_sum = 0.0f64;
        for batch in order.chunks(settings.batch_size.max(1)) {
            let mut images = Vec::with_capacity(batch.len() * image_len);
            let mut grades = Vec::with_capacity(batch.len());
            for &i in batch {
                let s = &train[i];
                if settings.augment {
                    images.extend_from_slice(&augment::augment(s, &mut aug_rng).image);
                } else {
                    images.extend_from_slice(&s.image);
                }
                grades.push(s.grade);
            }
            let tape = crate::tape::Tape::new();
            let out = model.forward(&tape, &images, batch.len())?;
            let loss = loss::batch_loss(&out.logits, &grades)?;
            model.params.zero_grad();
            loss.backward()?;
            optimizer.step(&model.params);
            loss_sum += loss.item() as f64 * batch.len() as f64;
        }
        let train_loss = loss_sum / train.len() as f64;

        let (val_acc, val_macro_f1) = if val.is_empty() {
            (f64::NAN, f64::NAN)
        } else {
            let report = evaluate(model, val, settings.batch_size)?;
            (report.accuracy, report.macro_f1)
        };
        if !val_macro_f1.is_nan() && best.as_ref().is_none_or(|(b, _)| val_macro_f1 > *b) {
            best = Some((val_macro_f1, model.params.snapshot()));
        }
        history.records.push(EpochRecord {
            epoch,
            phase,
            train_loss,
            val_acc,
            val_macro_f1,
        });
    }

    if let Some((_, snapshot)) = best {
        model.params.restore(&snapshot);
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use crate::data::synth::{synth_sample, SynthSpec};
    use crate::data::Site;

    fn tiny_dataset(n: usize, spec: &SynthSpec) -> Vec<Sample> {
        (0..n)
            .map(|i| synth_sample(spec, (i % 5) as u8, Site::Source, mix2(50, i as u64)))
            .collect()
    }

    fn tiny_config() -> ModelConfig {
        let mut cfg = ModelConfig::bench();
        cfg.image_size = 32;
        cfg
    }

    fn tiny_settings(epochs: usize) -> TrainSettings {
        TrainSettings {
            batch_size: 8,
            epochs,
            optimizer: AdamWParams {
                lr: 1e-3,
                ..AdamWParams::default()
            },
            augment: true,
            seed: 5,
        }
    }

    #[test]
    fn loss_decreases_and_history_is_complete() {
        let spec = SynthSpec {
            image_size: 32,
            ..SynthSpec::default()
        };
        let train = tiny_dataset(20, &spec);
        let val = tiny_dataset(10, &spec);
        let model = Model::new(&tiny_config(), 1).unwrap();
        let mut opt = AdamW::new(tiny_settings(4).optimizer);
        let history = train_loop(&model, &mut opt, &train, &val, &tiny_settings(4), 1).unwrap();
        assert_eq!(history.records.len(), 4);
        let first = history.records.first().unwrap();
        let last = history.records.last().unwrap();
        assert!(last.train_loss < first.train_loss, "{history:?}");
        assert!(history.records.iter().all(|r| r.train_loss.is_finite()));
        assert!(history.records.iter().all(|r| (0.0..=1.0).contains(&r.val_acc)));
    }

    #[test]
    fn same_seed_reproduces_the_loss_curve() {
        let spec = SynthSpec {
            image_size: 32,
            ..SynthSpec::default()
        };
        let train = tiny_dataset(16, &spec);
        let val = tiny_dataset(8, &spec);
        let run = || {
            let model = Model::new(&tiny_config(), 2).unwrap();
            let mut opt = AdamW::new(tiny_settings(3).optimizer);
            train_loop(&model, &mut opt, &train, &val, &tiny_settings(3), 1).unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn empty_train_split_is_an_error() {
        let model = Model::new(&tiny_config(), 3).unwrap();
        let mut opt = AdamW::new(AdamWParams::default());
        let err = train_loop(&model, &mut opt, &[], &[], &tiny_settings(1), 1).unwrap_err();
        assert!(matches!(err, TrainError::EmptyDataset));
    }

    #[test]
    fn best_checkpoint_is_restored_not_last() {
        // One real epoch, then an epoch run with a destroyed dataset cannot
        // happen — instead check the mechanism directly: after training,
        // the restored parameters reproduce the best recorded val score.
        let spec = SynthSpec {
            image_size: 32,
            ..SynthSpec::default()
        };
        let train = tiny_dataset(20, &spec);
        let val = tiny_dataset(10, &spec);
        let model = Model::new(&tiny_config(), 4).unwrap();
        let mut opt = AdamW::new(tiny_settings(5).optimizer);
        let history = train_loop(&model, &mut opt, &train, &val, &tiny_settings(5), 1).unwrap();
        let best = history
            .records
            .iter()
            .map(|r| r.val_macro_f1)
            .fold(f64::NEG_INFINITY, f64::max);
        let report = evaluate(&model, &val, 8).unwrap();
        assert!(
            (report.macro_f1 - best).abs() < 1e-12,
            "restored {} vs best {best}",
            report.macro_f1
        );
    }

    #[test]
    fn history_csv_has_header_and_rows() {
        let mut h = TrainHistory::default();
        h.records.push(EpochRecord {
            epoch: 0,
            phase: 2,
            train_loss: 1.5,
            val_acc: 0.25,
            val_macro_f1: 0.125,
        });
        let csv = h.to_csv();
        assert!(csv.starts_with("epoch,phase,train_loss,val_acc,val_macro_f1\n"));
        assert!(csv.contains("0,2,1.5,0.25,0.125\n"));
    }
}
