//! Class-activation maps from the final token grid.
//!
//! The encoder's last stage emits a (H/32)×(W/32) grid of feature tokens
//! (taken before the output LayerNorm, so token magnitudes are preserved);
//! the map is the gradient-weighted channel sum of that grid for one class
//! logit, rectified, upsampled to the input resolution and normalized.

use std::io::Write as _;
use std::path::Path;

use crate::config::NUM_GRADES;
use crate::error::{EvalError, TensorError};
use crate::model::Model;
use crate::tape::Tape;

/// A saliency map for one (image, class) pair.
#[derive(Debug, Clone)]
pub struct GradCamMap {
    /// H×W, min-max normalized to [0, 1] (all zeros when the raw map is flat).
    pub heatmap: Vec<f32>,
    pub height: usize,
    pub width: usize,
    /// The coarse map before upsampling/normalization: one value per token,
    /// nonnegative (post-ReLU), row-major side×side.
    pub raw: Vec<f32>,
    pub side: usize,
}

/// Saliency of `class_index` for a single image (flat H×W×3 in [0,1]).
pub fn gradcam(model: &Model, image: &[f32], class_index: usize) -> Result<GradCamMap, EvalError> {
    if class_index >= NUM_GRADES {
        return Err(EvalError::Tensor(TensorError::Invalid {
            op: "gradcam",
            msg: format!("class index {class_index} out of range 0..{NUM_GRADES}"),
        }));
    }
    let size = model.config.image_size;
    let feat = model.config.feature_dim();

    let tape = Tape::new();
    let out = model.forward(&tape, image, 1)?;
    let logit = out.logits.class_logit(0, class_index)?;
    logit.backward()?;

    let grid = out.encoder.grid; // [1, side², feat]
    let side = out.encoder.grid_side;
    let values = grid.value();
    let grads = grid.grad().ok_or(TensorError::Invalid {
        op: "gradcam",
        msg: "token grid received no gradient".to_string(),
    })?;
    let tokens = side * side;

    // Channel weights: spatial mean of the gradient.
    let mut weights = vec![0.0f32; feat];
    for t in 0..tokens {
        for c in 0..feat {
            weights[c] += grads[t * feat + c];
        }
    }
    for w in weights.iter_mut() {
        *w /= tokens as f32;
    }

    // Weighted channel sum per token, rectified.
    let mut raw = vec![0.0f32; tokens];
    for t in 0..tokens {
        let mut acc = 0.0f32;
        for c in 0..feat {
            acc += weights[c] * values[t * feat + c];
        }
        raw[t] = acc.max(0.0);
    }

    let heatmap = normalize(&upsample_bilinear(&raw, side, size, size));
    Ok(GradCamMap {
        heatmap,
        height: size,
        width: size,
        raw,
        side,
    })
}

/// Bilinear upsample of a side×side grid to out_h×out_w, sampling cell
/// centers (align-corners-false convention) with edge clamping.
fn upsample_bilinear(grid: &[f32], side: usize, out_h: usize, out_w: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; out_h * out_w];
    let sy = side as f32 / out_h as f32;
    let sx = side as f32 / out_w as f32;
    for y in 0..out_h {
        let fy = ((y as f32 + 0.5) * sy - 0.5).clamp(0.0, side as f32 - 1.0);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(side - 1);
        let wy = fy - y0 as f32;
        for x in 0..out_w {
            let fx = ((x as f32 + 0.5) * sx - 0.5).clamp(0.0, side as f32 - 1.0);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(side - 1);
            let wx = fx - x0 as f32;
            out[y * out_w + x] = grid[y0 * side + x0] * (1.0 - wy) * (1.0 - wx)
                + grid[y0 * side + x1] * (1.0 - wy) * wx
                + grid[y1 * side + x0] * wy * (1.0 - wx)
                + grid[y1 * side + x1] * wy * wx;
        }
    }
    out
}

fn normalize(map: &[f32]) -> Vec<f32> {
    let max = map.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let min = map.iter().copied().fold(f32::INFINITY, f32::min);
    if !(max - min).is_normal() || max <= min {
        return vec![0.0; map.len()];
    }
    map.iter().map(|&v| (v - min) / (max - min)).collect()
}

/// 8-bit binary PGM (P5) export.
pub fn write_pgm(path: &Path, map: &[f32], height: usize, width: usize) -> std::io::Result<()> {
    assert_eq!(map.len(), height * width);
    let mut f = std::fs::File::create(path)?;
    write!(f, "P5\n{width} {height}\n255\n")?;
    let bytes: Vec<u8> = map
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    f.write_all(&bytes)
}

/// Raw little-endian f32 sidecar, row-major, no header.
pub fn write_f32_sidecar(path: &Path, map: &[f32]) -> std::io::Result<()> {
    let mut bytes = Vec::with_capacity(map.len() * 4);
    for v in map {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(path, bytes)
}
