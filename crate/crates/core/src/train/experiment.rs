//! The five standard experiment protocols and the drift-correction phase.
//!
//! | id | classifier  | phase 1            | phase 2                     |
//! |----|-------------|--------------------|-----------------------------|
//! | 1  | single-head | both sites         | —                           |
//! | 2  | multi-head  | both sites         | —                           |
//! | 3  | multi-head  | target only        | —                           |
//! | 4  | multi-head  | source only        | —                           |
//! | 5  | multi-head  | source only        | target, heads frozen        |
//!
//! Every phase ends with an evaluation on both held-out test sets so
//! cross-site transfer can be read off directly.

use serde::{Deserialize, Serialize};

use crate::config::{ClassifierMode, ModelConfig};
use crate::data::{Sample, Site, Split};
use crate::error::TrainError;
use crate::eval::MetricsReport;
use crate::model::Model;
use crate::rng::{mix2, stream_seed};
use crate::train::{evaluate, train_loop, AdamW, TrainHistory, TrainSettings};

/// One training phase: which site's train/val data to use, for how long,
/// and whether the grading heads stay fixed while the encoder adapts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Phase {
    /// `None` trains on the union of both sites.
    pub site: Option<Site>,
    pub epochs: usize,
    pub freeze_heads: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub id: u8,
    pub classifier_mode: ClassifierMode,
    pub phases: Vec<Phase>,
}

impl ExperimentSpec {
    /// The standard protocol for experiment `id`. `p2_epochs` only matters
    /// for the two-phase experiment 5.
    pub fn standard(id: u8, p1_epochs: usize, p2_epochs: usize) -> Result<Self, TrainError> {
        let phase = |site, epochs, freeze_heads| Phase {
            site,
            epochs,
            freeze_heads,
        };
        let (mode, phases) = match id {
            1 => (ClassifierMode::SingleHead, vec![phase(None, p1_epochs, false)]),
            2 => (ClassifierMode::MultiHead, vec![phase(None, p1_epochs, false)]),
            3 => (
                ClassifierMode::MultiHead,
                vec![phase(Some(Site::Target), p1_epochs, false)],
            ),
            4 => (
                ClassifierMode::MultiHead,
                vec![phase(Some(Site::Source), p1_epochs, false)],
            ),
            5 => (
                ClassifierMode::MultiHead,
                vec![
                    phase(Some(Site::Source), p1_epochs, false),
                    phase(Some(Site::Target), p2_epochs, true),
                ],
            ),
            other => return Err(TrainError::UnknownExperiment(other)),
        };
        Ok(ExperimentSpec {
            id,
            classifier_mode: mode,
            phases,
        })
    }
}

/// Scores taken at the end of one phase.
#[derive(Debug, Clone)]
pub struct PhaseOutcome {
    pub history: TrainHistory,
    pub source_test: MetricsReport,
    pub target_test: MetricsReport,
    /// Fingerprint of all `heads.` parameters right after the phase; equal
    /// fingerprints across phases prove the heads never moved.
    pub head_fingerprint: u64,
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub id: u8,
    pub phases: Vec<PhaseOutcome>,
}

fn subset(samples: &[Sample], split: Split, site: Option<Site>) -> Vec<Sample> {
    samples
        .iter()
        .filter(|s| s.split == split && site.is_none_or(|want| s.site == want))
        .cloned()
        .collect()
}

/// Train a fresh model through every phase of `spec`. The classifier mode
/// in `config` is overridden by the spec; each phase gets its own optimizer
/// and its own seed stream derived from `seed`.
pub fn run_experiment(
    spec: &ExperimentSpec,
    config: &ModelConfig,
    samples: &[Sample],
    settings: &TrainSettings,
    seed: u64,
) -> Result<(Model, ExperimentOutcome), TrainError> {
    let mut cfg = config.clone();
    cfg.classifier_mode = spec.classifier_mode;
    let model = Model::new(&cfg, stream_seed(seed, "init"))?;
    let source_test = subset(samples, Split::Test, Some(Site::Source));
    let target_test = subset(samples, Split::Test, Some(Site::Target));

    let mut outcome = ExperimentOutcome {
        id: spec.id,
        phases: Vec::new(),
    };
    for (p, phase) in spec.phases.iter().enumerate() {
        let train = subset(samples, Split::Train, phase.site);
        let val = subset(samples, Split::Val, phase.site);
        let phase_settings = TrainSettings {
            epochs: phase.epochs,
            seed: mix2(stream_seed(seed, "train"), p as u64),
            ..settings.clone()
        };
        let history = if phase.freeze_heads {
            drift_correct(&model, &train, &val, &phase_settings, p + 1)?
        } else {
            let mut opt = AdamW::new(phase_settings.optimizer);
            train_loop(&model, &mut opt, &train, &val, &phase_settings, p + 1)?
        };
        outcome.phases.push(PhaseOutcome {
            history,
            source_test: evaluate(&model, &source_test, settings.batch_size)?,
            target_test: evaluate(&model, &target_test, settings.batch_size)?,
            head_fingerprint: model.params.fingerprint("heads."),
        });
    }
    Ok((model, outcome))
}

/// Adapt the encoder to a drifted site while the grading heads stay put:
/// freeze every `heads.` parameter, train with a fresh optimizer under the
/// same hyperparameters, then re-enable the heads.
pub fn drift_correct(
    model: &Model,
    train: &[Sample],
    val: &[Sample],
    settings: &TrainSettings,
    phase: usize,
) -> Result<TrainHistory, TrainError> {
    model.params.set_trainable_by_prefix("heads.", false);
    let mut opt = AdamW::new(settings.optimizer);
    let result = train_loop(model, &mut opt, train, val, settings, phase);
    model.params.set_trainable_by_prefix("heads.", true);
    result
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::{synth_sample, SynthSpec};
    use crate::train::AdamWParams;

    fn tiny_corpus() -> Vec<Sample> {
        let spec = SynthSpec {
            image_size: 32,
            ..SynthSpec::default()
        };
        let mut samples = Vec::new();
        for (k, &site) in [Site::Source, Site::Target].iter().enumerate() {
            for i in 0..30 {
                let mut s = synth_sample(&spec, (i % 5) as u8, site, mix2(80, (k * 100 + i) as u64));
                s.split = match i % 3 {
                    0 | 1 => Split::Train,
                    _ => {
                        if i % 6 == 2 {
                            Split::Val
                        } else {
                            Split::Test
                        }
                    }
                };
                samples.push(s);
            }
        }
        samples
    }

    fn tiny_config() -> ModelConfig {
        let mut cfg = ModelConfig::bench();
        cfg.image_size = 32;
        cfg
    }

    fn tiny_settings() -> TrainSettings {
        TrainSettings {
            batch_size: 8,
            epochs: 1,
            optimizer: AdamWParams {
                lr: 1e-3,
                ..AdamWParams::default()
            },
            augment: false,
            seed: 0,
        }
    }

    #[test]
    fn standard_specs_match_the_protocol_table() {
        let e1 = ExperimentSpec::standard(1, 10, 0).unwrap();
        assert_eq!(e1.classifier_mode, ClassifierMode::SingleHead);
        assert_eq!(e1.phases, vec![Phase { site: None, epochs: 10, freeze_heads: false }]);

        let e2 = ExperimentSpec::standard(2, 10, 0).unwrap();
        assert_eq!(e2.classifier_mode, ClassifierMode::MultiHead);
        assert_eq!(e2.phases[0].site, None);

        assert_eq!(
            ExperimentSpec::standard(3, 10, 0).unwrap().phases[0].site,
            Some(Site::Target)
        );
        assert_eq!(
            ExperimentSpec::standard(4, 10, 0).unwrap().phases[0].site,
            Some(Site::Source)
        );

        let e5 = ExperimentSpec::standard(5, 10, 4).unwrap();
        assert_eq!(e5.phases.len(), 2);
        assert_eq!(
            e5.phases[1],
            Phase {
                site: Some(Site::Target),
                epochs: 4,
                freeze_heads: true
            }
        );
        assert!(!e5.phases[0].freeze_heads);

        for bad in [0u8, 6, 200] {
            assert!(matches!(
                ExperimentSpec::standard(bad, 1, 1),
                Err(TrainError::UnknownExperiment(b)) if b == bad
            ));
        }
    }

    #[test]
    fn two_phase_run_keeps_heads_frozen_in_phase_two() {
        let spec = ExperimentSpec::standard(5, 1, 2).unwrap();
        let (model, outcome) =
            run_experiment(&spec, &tiny_config(), &tiny_corpus(), &tiny_settings(), 9).unwrap();
        assert_eq!(outcome.id, 5);
        assert_eq!(outcome.phases.len(), 2);
        assert_eq!(
            outcome.phases[0].head_fingerprint, outcome.phases[1].head_fingerprint,
            "heads moved during the frozen phase"
        );
        // The encoder did move.
        assert_ne!(
            model.params.fingerprint("encoder."),
            Model::new(&{
                let mut c = tiny_config();
                c.classifier_mode = ClassifierMode::MultiHead;
                c
            }, stream_seed(9, "init"))
            .unwrap()
            .params
            .fingerprint("encoder.")
        );
        // Heads are trainable again once the run is over.
        let flags: Vec<bool> = model
            .params
            .iter()
            .filter(|(n, _)| n.starts_with("heads."))
            .map(|(_, p)| p.requires_grad())
            .collect();
        assert!(!flags.is_empty() && flags.iter().all(|&f| f));
        // Phase labels in the history line up with phase order.
        assert!(outcome.phases[0].history.records.iter().all(|r| r.phase == 1));
        assert!(outcome.phases[1].history.records.iter().all(|r| r.phase == 2));
    }

    #[test]
    fn single_phase_run_trains_heads() {
        let spec = ExperimentSpec::standard(4, 2, 0).unwrap();
        let samples = tiny_corpus();
        let (_, outcome) =
            run_experiment(&spec, &tiny_config(), &samples, &tiny_settings(), 10).unwrap();
        assert_eq!(outcome.phases.len(), 1);
        let fresh = Model::new(
            &{
                let mut c = tiny_config();
                c.classifier_mode = ClassifierMode::MultiHead;
                c
            },
            stream_seed(10, "init"),
        )
        .unwrap();
        assert_ne!(
            outcome.phases[0].head_fingerprint,
            fresh.params.fingerprint("heads."),
            "heads never trained"
        );
        let n_source_test = samples
            .iter()
            .filter(|s| s.split == Split::Test && s.site == Site::Source)
            .count();
        assert_eq!(outcome.phases[0].source_test.n_samples, n_source_test);
    }

    #[test]
    fn experiment_one_uses_the_single_head_classifier() {
        let spec = ExperimentSpec::standard(1, 1, 0).unwrap();
        let (model, _) =
            run_experiment(&spec, &tiny_config(), &tiny_corpus(), &tiny_settings(), 3).unwrap();
        assert_eq!(model.config.classifier_mode, ClassifierMode::SingleHead);
        assert!(model.params.get("heads.shared.l0.weight").is_some());
    }

    #[test]
    fn drift_correct_restores_trainability_even_on_error() {
        let model = Model::new(&tiny_config(), 1).unwrap();
        let err = drift_correct(&model, &[], &[], &tiny_settings(), 2).unwrap_err();
        assert!(matches!(err, TrainError::EmptyDataset));
        assert!(model
            .params
            .iter()
            .filter(|(n, _)| n.starts_with("heads."))
            .all(|(_, p)| p.requires_grad()));
    }
}
