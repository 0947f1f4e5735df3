//! Hierarchical windowed-attention encoder: patch partition, linear
//! embedding, four stages of (shifted-)window attention blocks with 2×2
//! patch merging between stages, then a final norm and mean pool.

pub mod attention;
pub mod windows;

use rand_chacha::ChaCha12Rng;

use crate::config::{ModelConfig, NUM_STAGES};
use crate::error::TensorError;
use crate::tape::{Tape, Var};
use crate::tensor::Params;

use attention::{LayerNormLayer, Linear, PatchMerging, SwinBlock};

pub struct SwinEncoder {
    embed: Linear,
    stages: Vec<Vec<SwinBlock>>,
    merges: Vec<PatchMerging>,
    final_norm: LayerNormLayer,
    patch_idx: Vec<u32>,
    config: ModelConfig,
}

/// Encoder outputs: pooled feature vector (token mean of the normalized
/// grid), the raw stage-4 token grid as produced by the last block, and
/// per-block attention weights for probing.
pub struct EncoderOut<'t> {
    pub pooled: Var<'t>,
    pub grid: Var<'t>,
    pub grid_side: usize,
    pub attention: Vec<Var<'t>>,
}

impl SwinEncoder {
    /// Build and register all encoder parameters under `encoder.*`.
    /// The config must already be validated.
    pub fn new(
        params: &mut Params,
        config: &ModelConfig,
        rng: &mut ChaCha12Rng,
    ) -> Result<Self, TensorError> {
        let embed = Linear::new(
            params,
            "encoder.embed",
            config.patch_dim(),
            config.base_channels,
            true,
            rng,
        );
        let mut stages = Vec::with_capacity(NUM_STAGES);
        let mut merges = Vec::new();
        for s in 0..NUM_STAGES {
            let dim = config.stage_dim(s);
            let side = config.stage_side(s);
            let window = config.effective_window(s);
            let mut blocks = Vec::with_capacity(config.stage_depths[s]);
            for b in 0..config.stage_depths[s] {
                // Alternate W-MSA / SW-MSA, starting unshifted.
                let shift = if b % 2 == 1 { config.shift(s) } else { 0 };
                blocks.push(SwinBlock::new(
                    params,
                    &format!("encoder.stage{s}.block{b}"),
                    dim,
                    config.stage_heads[s],
                    side,
                    window,
                    shift,
                    config.mlp_ratio,
                    config.use_relative_position_bias,
                    rng,
                )?);
            }
            stages.push(blocks);
            if s + 1 < NUM_STAGES {
                merges.push(PatchMerging::new(
                    params,
                    &format!("encoder.merge{s}"),
                    dim,
                    side,
                    rng,
                ));
            }
        }
        let final_norm = LayerNormLayer::new(params, "encoder.norm", config.feature_dim());
        Ok(SwinEncoder {
            embed,
            stages,
            merges,
            final_norm,
            patch_idx: windows::patch_partition_indices(
                config.image_size,
                config.image_size,
                config.patch_size,
            ),
            config: config.clone(),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Run a batch of flat [H·W·3] images (values row-major, channels
    /// innermost) through the encoder.
    pub fn forward<'t>(
        &self,
        tape: &'t Tape,
        images: &[f32],
        batch: usize,
    ) -> Result<EncoderOut<'t>, TensorError> {
        let px = self.config.image_size * self.config.image_size * 3;
        if batch == 0 || images.len() != batch * px {
            return Err(TensorError::ShapeDataMismatch {
                shape: vec![batch, px],
                expected: batch * px,
                actual: images.len(),
            });
        }
        let input = tape.constant(vec![batch, px], images.to_vec())?;
        let mut idx = Vec::with_capacity(batch * px);
        for b in 0..batch {
            let offset = (b * px) as u32;
            idx.extend(self.patch_idx.iter().map(|&e| e + offset));
        }
        let n0 = self.config.token_count(0);
        let tokens = input.gather(
            std::rc::Rc::new(idx),
            vec![batch, n0, self.config.patch_dim()],
        )?;
        let mut x = self.embed.forward(tape, tokens)?;
        let mut attention = Vec::new();
        for (s, blocks) in self.stages.iter().enumerate() {
            for block in blocks {
                let (next, weights) = block.forward(tape, x, batch)?;
                x = next;
                attention.push(weights);
            }
            if s + 1 < NUM_STAGES {
                x = self.merges[s].forward(tape, x, batch)?;
            }
        }
        let normed = self.final_norm.forward(tape, x)?;
        let pooled = normed.mean_pool()?;
        Ok(EncoderOut {
            pooled,
            grid: x,
            grid_side: self.config.stage_side(3),
            attention,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use crate::tape::Tape;
    use attention::WindowAttention;
    use std::rc::Rc;

    fn test_config() -> ModelConfig {
        ModelConfig {
            image_size: 32,
            base_channels: 8,
            stage_depths: [1, 2, 1, 1],
            stage_heads: [2, 2, 4, 4],
            window: 4,
            ..ModelConfig::toy()
        }
    }

    fn rand_vec(n: usize, salt: u64) -> Vec<f32> {
        (0..n)
            .map(|i| (crate::rng::mix2(salt, i as u64) % 2000) as f32 / 1000.0 - 1.0)
            .collect()
    }

    /// f64 reference implementation of global multi-head self-attention
    /// using the layer's own packed qkv/proj parameters.
    fn naive_global_msa(
        x: &[f32],
        tokens: usize,
        dim: usize,
        heads: usize,
        qkv_w: &[f32],
        qkv_b: &[f32],
        proj_w: &[f32],
        proj_b: &[f32],
    ) -> Vec<f64> {
        let hd = dim / heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let project = |t: usize, col: usize| -> f64 {
            let mut acc = qkv_b[col] as f64;
            for i in 0..dim {
                acc += x[t * dim + i] as f64 * qkv_w[i * 3 * dim + col] as f64;
            }
            acc
        };
        let mut merged = vec![0.0f64; tokens * dim];
        for h in 0..heads {
            for ti in 0..tokens {
                let q: Vec<f64> = (0..hd).map(|c| project(ti, h * hd + c)).collect();
                let mut logits = Vec::with_capacity(tokens);
                for tj in 0..tokens {
                    let mut dot = 0.0;
                    for (c, &qc) in q.iter().enumerate() {
                        dot += qc * project(tj, dim + h * hd + c);
                    }
                    logits.push(dot * scale);
                }
                let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
                let denom: f64 = exps.iter().sum();
                for c in 0..hd {
                    let mut acc = 0.0;
                    for (tj, &e) in exps.iter().enumerate() {
                        acc += e / denom * project(tj, 2 * dim + h * hd + c);
                    }
                    merged[ti * dim + h * hd + c] = acc;
                }
            }
        }
        let mut out = vec![0.0f64; tokens * dim];
        for t in 0..tokens {
            for o in 0..dim {
                let mut acc = proj_b[o] as f64;
                for i in 0..dim {
                    acc += merged[t * dim + i] * proj_w[i * dim + o] as f64;
                }
                out[t * dim + o] = acc;
            }
        }
        out
    }

    #[test]
    fn window_covering_grid_equals_global_msa() {
        let (tokens, dim, heads) = (16, 8, 2);
        let mut params = Params::new();
        let mut rng = stream(11, "init");
        let attn =
            WindowAttention::new(&mut params, "a", dim, heads, 4, false, &mut rng).unwrap();
        let x = rand_vec(tokens * dim, 5);
        let tape = Tape::new();
        let xv = tape.constant(vec![1, tokens, dim], x.clone()).unwrap();
        let got = attn.forward(&tape, xv, None).unwrap().tokens.value();

        let grab = |name: &str| params.get(name).unwrap().borrow().data().to_vec();
        let want = naive_global_msa(
            &x,
            tokens,
            dim,
            heads,
            &grab("a.qkv.weight"),
            &grab("a.qkv.bias"),
            &grab("a.proj.weight"),
            &grab("a.proj.bias"),
        );
        for (g, w) in got.iter().zip(&want) {
            assert!((*g as f64 - w).abs() < 1e-5, "{g} vs {w}");
        }
    }

    #[test]
    fn single_token_window_attends_to_itself() {
        let mut params = Params::new();
        let mut rng = stream(12, "init");
        let attn = WindowAttention::new(&mut params, "a", 4, 1, 1, true, &mut rng).unwrap();
        let tape = Tape::new();
        let x = tape.constant(vec![3, 1, 4], rand_vec(12, 9)).unwrap();
        let out = attn.forward(&tape, x, None).unwrap();
        assert_eq!(out.weights.value(), vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn fully_masked_off_diagonal_is_identity_attention() {
        let (tokens, dim, heads) = (4, 6, 2);
        let mut params = Params::new();
        let mut rng = stream(13, "init");
        let attn =
            WindowAttention::new(&mut params, "a", dim, heads, 2, false, &mut rng).unwrap();
        let tape = Tape::new();
        let x = tape.constant(vec![1, tokens, dim], rand_vec(24, 3)).unwrap();
        let mut mask = vec![windows::MASK_NEG; heads * tokens * tokens];
        for h in 0..heads {
            for t in 0..tokens {
                mask[(h * tokens + t) * tokens + t] = 0.0;
            }
        }
        let mask = tape
            .constant(vec![heads, tokens, tokens], mask)
            .unwrap();
        let out = attn.forward(&tape, x, Some(&mask)).unwrap();
        let w = out.weights.value();
        for g in 0..heads {
            for i in 0..tokens {
                for j in 0..tokens {
                    let v = w[(g * tokens + i) * tokens + j];
                    if i == j {
                        assert!((v - 1.0).abs() < 1e-6);
                    } else {
                        assert!(v < 1e-7);
                    }
                }
            }
        }
    }

    #[test]
    fn zeroed_maps_reduce_block_to_identity() {
        let mut params = Params::new();
        let mut rng = stream(14, "init");
        let block = SwinBlock::new(
            &mut params, "b", 8, 2, 4, 4, 0, 4, true, &mut rng,
        )
        .unwrap();
        for (name, p) in params.iter() {
            if name.contains("attn") || name.contains("mlp") {
                let mut t = p.borrow_mut();
                t.data_mut().fill(0.0);
            }
        }
        let tape = Tape::new();
        let x_data = rand_vec(2 * 16 * 8, 21);
        let x = tape.constant(vec![2, 16, 8], x_data.clone()).unwrap();
        let (y, _) = block.forward(&tape, x, 2).unwrap();
        assert_eq!(y.value(), x_data);
    }

    #[test]
    fn shifted_block_blocks_cross_region_attention() {
        let (side, window, shift, dim, heads) = (8, 4, 2, 8, 2);
        let mut params = Params::new();
        let mut rng = stream(15, "init");
        let block = SwinBlock::new(
            &mut params,
            "b",
            dim,
            heads,
            side,
            window,
            shift,
            2,
            true,
            &mut rng,
        )
        .unwrap();
        let batch = 2;
        let tape = Tape::new();
        let x = tape
            .constant(vec![batch, side * side, dim], rand_vec(batch * 64 * dim, 33))
            .unwrap();
        let (_, weights) = block.forward(&tape, x, batch).unwrap();
        let w = weights.value();
        let ids = windows::shift_region_ids(side, side, window, shift);
        let win_rows = windows::window_partition_rows(side, side, window);
        let m2 = window * window;
        let nw = (side / window) * (side / window);
        for b in 0..batch {
            for wi in 0..nw {
                let tokens = &win_rows[wi * m2..(wi + 1) * m2];
                for h in 0..heads {
                    let g = (b * nw + wi) * heads + h;
                    for i in 0..m2 {
                        for j in 0..m2 {
                            if ids[tokens[i]] != ids[tokens[j]] {
                                let v = w[(g * m2 + i) * m2 + j];
                                assert!(v < 1e-7, "cross-region weight {v}");
                            }
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn patch_merging_halves_grid_and_doubles_dim() {
        let mut params = Params::new();
        let mut rng = stream(16, "init");
        let merge = PatchMerging::new(&mut params, "m", 8, 4, &mut rng);
        let tape = Tape::new();
        let x = tape.constant(vec![2, 16, 8], rand_vec(256, 41)).unwrap();
        let y = merge.forward(&tape, x, 2).unwrap();
        assert_eq!(y.shape(), vec![2, 4, 16]);
    }

    #[test]
    fn encoder_shapes_pooling_and_determinism() {
        let config = test_config();
        config.validate().unwrap();
        let mut params = Params::new();
        let mut rng = stream(17, "init");
        let enc = SwinEncoder::new(&mut params, &config, &mut rng).unwrap();
        let images = rand_vec(2 * 32 * 32 * 3, 55);

        let run = || {
            let tape = Tape::new();
            let out = enc.forward(&tape, &images, 2).unwrap();
            (out.pooled.value(), out.grid.value(), out.grid_side)
        };
        let (pooled, grid, side) = run();
        assert_eq!(side, 1);
        assert_eq!(grid.len(), 2 * 1 * 64);
        assert_eq!(pooled.len(), 2 * 64);
        // Pooled vector is the token mean of the layer-normed grid.
        let gamma = params.get("encoder.norm.gamma").unwrap().borrow().data().to_vec();
        let beta = params.get("encoder.norm.beta").unwrap().borrow().data().to_vec();
        let n4 = side * side;
        for b in 0..2 {
            let mut mean = vec![0.0f32; 64];
            for t in 0..n4 {
                let tok = &grid[(b * n4 + t) * 64..(b * n4 + t + 1) * 64];
                let mu = tok.iter().sum::<f32>() / 64.0;
                let var = tok.iter().map(|v| (v - mu).powi(2)).sum::<f32>() / 64.0;
                let inv = 1.0 / (var + 1e-5).sqrt();
                for c in 0..64 {
                    mean[c] += ((tok[c] - mu) * inv * gamma[c] + beta[c]) / n4 as f32;
                }
            }
            for c in 0..64 {
                assert!((pooled[b * 64 + c] - mean[c]).abs() < 1e-5);
            }
        }
        let (pooled2, grid2, _) = run();
        assert_eq!(pooled, pooled2);
        assert_eq!(grid, grid2);
    }

    #[test]
    fn every_trainable_parameter_reaches_the_loss() {
        let config = test_config();
        let mut params = Params::new();
        let mut rng = stream(18, "init");
        let enc = SwinEncoder::new(&mut params, &config, &mut rng).unwrap();
        let images = rand_vec(32 * 32 * 3, 66);
        let tape = Tape::new();
        let out = enc.forward(&tape, &images, 1).unwrap();
        let idx: Vec<u32> = (0..out.pooled.numel() as u32).collect();
        let n = idx.len();
        let loss = out
            .pooled
            .gather(Rc::new(idx), vec![n])
            .unwrap()
            .bce_with_logits_sum(Rc::new(vec![0.7; n]))
            .unwrap();
        loss.backward().unwrap();
        for (name, p) in params.iter() {
            let t = p.borrow();
            let g = t.grad.as_ref();
            assert!(g.is_some(), "{name} missing grad");
            assert!(
                g.unwrap().iter().all(|v| v.is_finite()),
                "{name} non-finite grad"
            );
        }
    }
}
