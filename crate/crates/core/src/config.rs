//! Model configuration: geometry of the four-stage encoder plus head layout.
//!
//! All derived quantities (per-stage grid sides, channel dims, effective
//! window and shift) come from methods here so the rest of the code never
//! re-derives them inconsistently.

use serde::{Deserialize, Serialize};

use crate::error::ConfigError;

pub const NUM_STAGES: usize = 4;
pub const NUM_GRADES: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClassifierMode {
    SingleHead,
    MultiHead,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Input images are square: image_size × image_size × 3.
    pub image_size: usize,
    #[serde(default = "default_patch_size")]
    pub patch_size: usize,
    /// Channel dim after the linear embedding; stage s runs at `C·2^s`.
    pub base_channels: usize,
    pub stage_depths: [usize; NUM_STAGES],
    pub stage_heads: [usize; NUM_STAGES],
    /// Window side M in tokens (clamped per stage to the grid side).
    pub window: usize,
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: usize,
    #[serde(default = "default_true")]
    pub use_relative_position_bias: bool,
    /// Hidden sizes of each grade head, ending in the single-logit layer.
    #[serde(default = "default_head_layers")]
    pub head_layer_sizes: Vec<usize>,
    #[serde(default = "default_mode")]
    pub classifier_mode: ClassifierMode,
}

fn default_patch_size() -> usize {
    4
}
fn default_mlp_ratio() -> usize {
    4
}
fn default_true() -> bool {
    true
}
fn default_head_layers() -> Vec<usize> {
    vec![384, 48, 48, 1]
}
fn default_mode() -> ClassifierMode {
    ClassifierMode::MultiHead
}

impl ModelConfig {
    /// Paper-scale reference: 224px, C=128, depths {2,2,18,2} → 1024-d vector.
    pub fn swin_b() -> Self {
        ModelConfig {
            image_size: 224,
            patch_size: 4,
            base_channels: 128,
            stage_depths: [2, 2, 18, 2],
            stage_heads: [4, 8, 16, 32],
            window: 7,
            mlp_ratio: 4,
            use_relative_position_bias: true,
            head_layer_sizes: default_head_layers(),
            classifier_mode: ClassifierMode::MultiHead,
        }
    }

    /// Desk-scale reference config; trains in minutes and exercises window
    /// clamping in the last two stages (grid sides 4 and 2 with M=4).
    pub fn toy() -> Self {
        ModelConfig {
            image_size: 64,
            patch_size: 4,
            base_channels: 24,
            stage_depths: [2, 2, 2, 2],
            stage_heads: [2, 4, 8, 16],
            window: 4,
            mlp_ratio: 4,
            use_relative_position_bias: true,
            head_layer_sizes: default_head_layers(),
            classifier_mode: ClassifierMode::MultiHead,
        }
    }

    /// Minimal config for timing-sensitive end-to-end runs: one block per
    /// stage, C=16.
    pub fn bench() -> Self {
        ModelConfig {
            base_channels: 16,
            stage_depths: [1, 1, 1, 1],
            stage_heads: [2, 2, 4, 4],
            ..Self::toy()
        }
    }

    /// Check every structural invariant, reporting all violations at once.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let mut issues = Vec::new();
        if self.image_size == 0 || self.patch_size == 0 {
            issues.push("image_size and patch_size must be positive".to_string());
        } else if !self.image_size.is_multiple_of(self.patch_size * 8) {
            issues.push(format!(
                "image_size {} must be divisible by patch_size·8 = {} (four halving stages)",
                self.image_size,
                self.patch_size * 8
            ));
        }
        if self.base_channels == 0 {
            issues.push("base_channels must be positive".to_string());
        }
        if self.window == 0 {
            issues.push("window must be positive".to_string());
        }
        if self.mlp_ratio == 0 {
            issues.push("mlp_ratio must be positive".to_string());
        }
        for (s, &depth) in self.stage_depths.iter().enumerate() {
            if depth == 0 {
                issues.push(format!("stage {s} has zero blocks"));
            }
        }
        for s in 0..NUM_STAGES {
            let dim = self.stage_dim(s);
            let heads = self.stage_heads[s];
            if heads == 0 {
                issues.push(format!("stage {s} has zero attention heads"));
            } else if !dim.is_multiple_of(heads) {
                issues.push(format!(
                    "stage {s} channel dim {dim} not divisible by {heads} heads"
                ));
            }
        }
        if self.image_size > 0 && self.patch_size > 0 && self.window > 0 {
            for s in 0..NUM_STAGES {
                let side = self.stage_side(s);
                let w = self.effective_window(s);
                if side == 0 {
                    issues.push(format!("stage {s} grid side is zero"));
                } else if !side.is_multiple_of(w) {
                    issues.push(format!(
                        "stage {s} grid side {side} not divisible by window {w}"
                    ));
                }
            }
        }
        if self.head_layer_sizes.is_empty() || *self.head_layer_sizes.last().unwrap() != 1 {
            issues.push(format!(
                "head_layer_sizes {:?} must end with a single-logit layer",
                self.head_layer_sizes
            ));
        } else if self.head_layer_sizes.contains(&0) {
            issues.push("head_layer_sizes must all be positive".to_string());
        }
        if issues.is_empty() {
            Ok(())
        } else {
            Err(ConfigError { issues })
        }
    }

    /// Channel dim at stage s: C·2^s.
    pub fn stage_dim(&self, s: usize) -> usize {
        self.base_channels << s
    }

    /// Token-grid side at stage s: (image/patch)/2^s.
    pub fn stage_side(&self, s: usize) -> usize {
        (self.image_size / self.patch_size) >> s
    }

    pub fn token_count(&self, s: usize) -> usize {
        let side = self.stage_side(s);
        side * side
    }

    /// Window side actually used at stage s (clamped to the grid).
    pub fn effective_window(&self, s: usize) -> usize {
        self.window.min(self.stage_side(s))
    }

    /// Cyclic-shift offset for the shifted block at stage s; zero when the
    /// window covers the whole grid (shift would be a no-op rotation of a
    /// single window).
    pub fn shift(&self, s: usize) -> usize {
        if self.stage_side(s) <= self.window {
            0
        } else {
            self.effective_window(s) / 2
        }
    }

    /// Dim of a raw patch token: patch²·3.
    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * 3
    }

    /// Dim of the pooled representation: 8C.
    pub fn feature_dim(&self) -> usize {
        self.base_channels * 8
    }
}
