//! Full model: encoder + grade classifier over one parameter registry.
//! Encoder weights live under `encoder.*` and classifier weights under
//! `heads.*`, which is what the freeze logic keys on.

use crate::config::ModelConfig;
use crate::error::{BuildError, EvalError, TensorError};
use crate::heads::{fuse_predictions, Classifier, ClassifierOut};
use crate::rng;
use crate::swin::{EncoderOut, SwinEncoder};
use crate::tape::Tape;
use crate::tensor::Params;

pub struct Model {
    pub config: ModelConfig,
    pub params: Params,
    pub encoder: SwinEncoder,
    pub classifier: Classifier,
}

pub struct ModelOut<'t> {
    pub encoder: EncoderOut<'t>,
    pub logits: ClassifierOut<'t>,
}

impl Model {
    /// Validate the config and initialize all weights from the init stream
    /// of `seed` (truncated normal, zero biases).
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self, BuildError> {
        config.validate()?;
        let mut params = Params::new();
        let mut rng = rng::stream(seed, "init");
        let encoder = SwinEncoder::new(&mut params, config, &mut rng)?;
        let classifier = Classifier::new(
            &mut params,
            config.classifier_mode,
            config.feature_dim(),
            &config.head_layer_sizes,
            &mut rng,
        );
        Ok(Model {
            config: config.clone(),
            params,
            encoder,
            classifier,
        })
    }

    /// Forward a batch of flat [H·W·3] images through encoder and heads.
    pub fn forward<'t>(
        &self,
        tape: &'t Tape,
        images: &[f32],
        batch: usize,
    ) -> Result<ModelOut<'t>, TensorError> {
        let encoder = self.encoder.forward(tape, images, batch)?;
        let logits = self.classifier.forward(tape, encoder.pooled)?;
        Ok(ModelOut { encoder, logits })
    }

    /// Fused grade predictions for a batch.
    pub fn predict(&self, images: &[f32], batch: usize) -> Result<Vec<usize>, EvalError> {
        let tape = Tape::new();
        let out = self.forward(&tape, images, batch)?;
        out.logits
            .logit_rows()
            .iter()
            .map(fuse_predictions)
            .collect()
    }

    /// Pooled feature vectors (row-major [batch, feature_dim]).
    pub fn embed(&self, images: &[f32], batch: usize) -> Result<Vec<f32>, TensorError> {
        let tape = Tape::new();
        let out = self.encoder.forward(&tape, images, batch)?;
        Ok(out.pooled.value())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{ClassifierMode, NUM_STAGES};

    /// Expected parameter-element count derived independently from the
    /// config's geometry.
    fn expected_elements(c: &ModelConfig) -> usize {
        let mut total = (c.patch_dim() + 1) * c.base_channels; // embed
        for s in 0..NUM_STAGES {
            let d = c.stage_dim(s);
            let m = c.effective_window(s);
            let span = 2 * m - 1;
            let per_block = 2 * d                      // norm1
                + (d + 1) * 3 * d                      // qkv
                + (d + 1) * d                          // proj
                + if c.use_relative_position_bias {
                    span * span * c.stage_heads[s]
                } else {
                    0
                }
                + 2 * d                                // norm2
                + (d + 1) * 4 * d                      // fc1
                + (4 * d + 1) * d; // fc2
            total += per_block * c.stage_depths[s];
            if s + 1 < NUM_STAGES {
                total += 2 * 4 * d + 4 * d * 2 * d; // merge norm + reduce
            }
        }
        total += 2 * c.feature_dim(); // final norm
        let mut head_sizes = c.head_layer_sizes.clone();
        let heads = match c.classifier_mode {
            ClassifierMode::MultiHead => 5,
            ClassifierMode::SingleHead => {
                *head_sizes.last_mut().unwrap() = 5;
                1
            }
        };
        let mut per_head = 0;
        let mut prev = c.feature_dim();
        for &sz in &head_sizes {
            per_head += (prev + 1) * sz;
            prev = sz;
        }
        total + heads * per_head
    }

    #[test]
    fn toy_parameter_audit_matches_geometry() {
        let config = ModelConfig::toy();
        let model = Model::new(&config, 7).unwrap();
        assert_eq!(model.params.total_elements(), expected_elements(&config));
    }

    #[test]
    fn single_head_parameter_audit() {
        let config = ModelConfig {
            classifier_mode: ClassifierMode::SingleHead,
            ..ModelConfig::bench()
        };
        let model = Model::new(&config, 7).unwrap();
        assert_eq!(model.params.total_elements(), expected_elements(&config));
    }

    #[test]
    fn every_parameter_is_namespaced() {
        let model = Model::new(&ModelConfig::bench(), 1).unwrap();
        let mut heads = 0;
        for (name, _) in model.params.iter() {
            assert!(
                name.starts_with("encoder.") || name.starts_with("heads."),
                "{name}"
            );
            if name.starts_with("heads.") {
                heads += 1;
            }
        }
        assert_eq!(heads, 40); // 5 heads × 4 layers × (weight, bias)
        let frozen = model.params.set_trainable_by_prefix("heads.", false);
        assert_eq!(frozen, 40);
    }

    #[test]
    fn same_seed_same_weights_different_seed_different() {
        let config = ModelConfig::bench();
        let a = Model::new(&config, 42).unwrap();
        let b = Model::new(&config, 42).unwrap();
        let c = Model::new(&config, 43).unwrap();
        assert_eq!(a.params.fingerprint(""), b.params.fingerprint(""));
        assert_ne!(a.params.fingerprint(""), c.params.fingerprint(""));
    }

    #[test]
    fn predict_stays_in_grade_range_and_is_deterministic() {
        let config = ModelConfig::bench();
        let model = Model::new(&config, 3).unwrap();
        let px = config.image_size * config.image_size * 3;
        let images: Vec<f32> = (0..2 * px)
            .map(|i| (crate::rng::mix2(9, i as u64) % 1000) as f32 / 1000.0)
            .collect();
        let a = model.predict(&images, 2).unwrap();
        let b = model.predict(&images, 2).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|&g| g < 5));
    }
}
