//! Learned layers of the encoder: linear maps, layer norm, windowed
//! multi-head attention, transformer blocks, and patch merging.

use std::rc::Rc;

use rand_chacha::ChaCha12Rng;

use crate::error::TensorError;
use crate::swin::windows;
use crate::tape::{Tape, Var};
use crate::tensor::{Param, Params, Tensor};

pub const INIT_SIGMA: f32 = 0.02;
pub const LN_EPS: f32 = 1e-5;

/// Affine map on the last axis: y = x·W + b, weight stored [in, out].
pub struct Linear {
    weight: Param,
    bias: Option<Param>,
    in_dim: usize,
    out_dim: usize,
}

impl Linear {
    pub fn new(
        params: &mut Params,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        with_bias: bool,
        rng: &mut ChaCha12Rng,
    ) -> Self {
        let weight = params.register(
            format!("{name}.weight"),
            Param::new(Tensor::trunc_normal(vec![in_dim, out_dim], INIT_SIGMA, rng)),
        );
        let bias = with_bias.then(|| {
            params.register(
                format!("{name}.bias"),
                Param::new(Tensor::zeros(vec![out_dim])),
            )
        });
        Linear {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward<'t>(&self, tape: &'t Tape, x: Var<'t>) -> Result<Var<'t>, TensorError> {
        let mut shape = x.shape();
        let last = *shape.last().ok_or(TensorError::Invalid {
            op: "linear",
            msg: "input has no dims".into(),
        })?;
        if last != self.in_dim {
            return Err(TensorError::ShapeMismatch {
                op: "linear",
                lhs: shape.clone(),
                rhs: vec![self.in_dim, self.out_dim],
            });
        }
        let rows = x.numel() / last;
        let flat = x.reshape(vec![rows, last])?;
        let mut y = flat.matmul(&tape.leaf(&self.weight))?;
        if let Some(bias) = &self.bias {
            y = y.add_tiled(&tape.leaf(bias))?;
        }
        *shape.last_mut().unwrap() = self.out_dim;
        y.reshape(shape)
    }
}

pub struct LayerNormLayer {
    gamma: Param,
    beta: Param,
}

impl LayerNormLayer {
    pub fn new(params: &mut Params, name: &str, dim: usize) -> Self {
        LayerNormLayer {
            gamma: params.register(
                format!("{name}.gamma"),
                Param::new(Tensor::full(vec![dim], 1.0)),
            ),
            beta: params.register(
                format!("{name}.beta"),
                Param::new(Tensor::zeros(vec![dim])),
            ),
        }
    }

    pub fn forward<'t>(&self, tape: &'t Tape, x: Var<'t>) -> Result<Var<'t>, TensorError> {
        x.layer_norm(&tape.leaf(&self.gamma), &tape.leaf(&self.beta), LN_EPS)
    }
}

/// Multi-head self-attention within M×M windows, with optional additive
/// shift mask and learned relative-position bias.
pub struct WindowAttention {
    qkv: Linear,
    proj: Linear,
    rel_bias: Option<Param>,
    rel_idx: Rc<Vec<u32>>,
    heads: usize,
    window: usize,
    scale: f32,
}

/// Attention output plus the post-softmax weights
/// [groups·heads, tokens, tokens] for probing.
pub struct AttentionOut<'t> {
    pub tokens: Var<'t>,
    pub weights: Var<'t>,
}

impl WindowAttention {
    pub fn new(
        params: &mut Params,
        name: &str,
        dim: usize,
        heads: usize,
        window: usize,
        with_rel_bias: bool,
        rng: &mut ChaCha12Rng,
    ) -> Result<Self, TensorError> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(TensorError::Invalid {
                op: "window_attention",
                msg: format!("dim {dim} not divisible by {heads} heads"),
            });
        }
        let qkv = Linear::new(params, &format!("{name}.qkv"), dim, 3 * dim, true, rng);
        let proj = Linear::new(params, &format!("{name}.proj"), dim, dim, true, rng);
        let rel_bias = with_rel_bias.then(|| {
            let span = 2 * window - 1;
            params.register(
                format!("{name}.rel_bias"),
                Param::new(Tensor::trunc_normal(
                    vec![span * span, heads],
                    INIT_SIGMA,
                    rng,
                )),
            )
        });
        Ok(WindowAttention {
            qkv,
            proj,
            rel_bias,
            rel_idx: Rc::new(windows::relative_bias_indices(window, heads)),
            heads,
            window,
            scale: 1.0 / ((dim / heads) as f32).sqrt(),
        })
    }

    /// `x` is [groups, m², d] with one group per (batch, window) pair;
    /// `mask`, when present, is a constant [nw·heads·m⁴] tile that broadcasts
    /// over the batch via `add_tiled`.
    pub fn forward<'t>(
        &self,
        tape: &'t Tape,
        x: Var<'t>,
        mask: Option<&Var<'t>>,
    ) -> Result<AttentionOut<'t>, TensorError> {
        let shape = x.shape();
        let (groups, tokens, dim) = (shape[0], shape[1], shape[2]);
        let head_dim = dim / self.heads;
        debug_assert_eq!(tokens, self.window * self.window);

        let qkv = self.qkv.forward(tape, x)?;
        let split_shape = vec![groups * self.heads, tokens, head_dim];
        let mut parts = [None, None, None];
        for (which, slot) in parts.iter_mut().enumerate() {
            let idx = windows::head_split_indices(groups, tokens, self.heads, head_dim, which, 3);
            *slot = Some(qkv.gather(Rc::new(idx), split_shape.clone())?);
        }
        let (q, k, v) = (
            parts[0].unwrap(),
            parts[1].unwrap(),
            parts[2].unwrap(),
        );

        let mut logits = q.bmm(&k, true)?.scale(self.scale);
        if let Some(table) = &self.rel_bias {
            let bias = tape.leaf(table).gather(
                self.rel_idx.clone(),
                vec![self.heads, tokens, tokens],
            )?;
            logits = logits.add_tiled(&bias)?;
        }
        if let Some(mask) = mask {
            logits = logits.add_tiled(mask)?;
        }
        let weights = logits.softmax_last();
        let ctx = weights.bmm(&v, false)?;
        let merged = ctx.gather(
            Rc::new(windows::head_merge_indices(
                groups, tokens, self.heads, head_dim,
            )),
            vec![groups, tokens, dim],
        )?;
        Ok(AttentionOut {
            tokens: self.proj.forward(tape, merged)?,
            weights,
        })
    }
}

/// One pre-norm transformer block: x + Attn(LN(x)), then x + MLP(LN(x)).
/// Shifted blocks roll the grid by ⌊M/2⌋ before windowing and mask
/// cross-region pairs.
pub struct SwinBlock {
    norm1: LayerNormLayer,
    attn: WindowAttention,
    norm2: LayerNormLayer,
    fc1: Linear,
    fc2: Linear,
    side: usize,
    window: usize,
    shift: usize,
    partition_rows: Vec<usize>,
    reverse_rows: Vec<usize>,
    shift_rows: Vec<usize>,
    unshift_rows: Vec<usize>,
    mask: Option<Vec<f32>>,
    heads: usize,
}

impl SwinBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        params: &mut Params,
        name: &str,
        dim: usize,
        heads: usize,
        side: usize,
        window: usize,
        shift: usize,
        mlp_ratio: usize,
        with_rel_bias: bool,
        rng: &mut ChaCha12Rng,
    ) -> Result<Self, TensorError> {
        let norm1 = LayerNormLayer::new(params, &format!("{name}.norm1"), dim);
        let attn = WindowAttention::new(
            params,
            &format!("{name}.attn"),
            dim,
            heads,
            window,
            with_rel_bias,
            rng,
        )?;
        let norm2 = LayerNormLayer::new(params, &format!("{name}.norm2"), dim);
        let hidden = mlp_ratio * dim;
        let fc1 = Linear::new(params, &format!("{name}.mlp.fc1"), dim, hidden, true, rng);
        let fc2 = Linear::new(params, &format!("{name}.mlp.fc2"), hidden, dim, true, rng);
        let partition_rows = windows::window_partition_rows(side, side, window);
        let reverse_rows = windows::invert_rows(&partition_rows);
        let mask = (shift > 0)
            .then(|| windows::attention_mask_values(side, side, window, shift, heads));
        Ok(SwinBlock {
            norm1,
            attn,
            norm2,
            fc1,
            fc2,
            side,
            window,
            shift,
            partition_rows,
            reverse_rows,
            shift_rows: windows::cyclic_shift_rows(side, side, shift),
            unshift_rows: windows::cyclic_unshift_rows(side, side, shift),
            mask,
            heads,
        })
    }

    /// Forward over [batch, side², dim]; returns the same shape plus the
    /// attention weights for probing.
    pub fn forward<'t>(
        &self,
        tape: &'t Tape,
        x: Var<'t>,
        batch: usize,
    ) -> Result<(Var<'t>, Var<'t>), TensorError> {
        let shape = x.shape();
        let (n, dim) = (shape[1], shape[2]);
        let m2 = self.window * self.window;
        let nw = n / m2;

        let mut y = self.norm1.forward(tape, x)?;
        if self.shift > 0 {
            let idx = windows::batched_expand(&self.shift_rows, batch, dim);
            y = y.gather(Rc::new(idx), shape.clone())?;
        }
        let idx = windows::batched_expand(&self.partition_rows, batch, dim);
        let windowed = y
            .gather(Rc::new(idx), vec![batch * nw, m2, dim])?;
        let mask_var = match &self.mask {
            Some(values) => Some(tape.constant(
                vec![nw * self.heads, m2, m2],
                values.clone(),
            )?),
            None => None,
        };
        let attn_out = self.attn.forward(tape, windowed, mask_var.as_ref())?;
        let mut back = attn_out.tokens.reshape(vec![batch, n, dim])?;
        let idx = windows::batched_expand(&self.reverse_rows, batch, dim);
        back = back.gather(Rc::new(idx), shape.clone())?;
        if self.shift > 0 {
            let idx = windows::batched_expand(&self.unshift_rows, batch, dim);
            back = back.gather(Rc::new(idx), shape.clone())?;
        }
        let x = x.add(&back)?;

        let z = self.norm2.forward(tape, x)?;
        let z = self.fc2.forward(tape, self.fc1.forward(tape, z)?.gelu())?;
        Ok((x.add(&z)?, attn_out.weights))
    }

    pub fn side(&self) -> usize {
        self.side
    }
}

/// Downsample between stages: concat each 2×2 neighborhood (TL, TR, BL, BR),
/// layer-norm the 4d vector, project to 2d without bias.
pub struct PatchMerging {
    norm: LayerNormLayer,
    reduce: Linear,
    concat_rows: Vec<usize>,
}

impl PatchMerging {
    pub fn new(
        params: &mut Params,
        name: &str,
        dim: usize,
        side: usize,
        rng: &mut ChaCha12Rng,
    ) -> Self {
        PatchMerging {
            norm: LayerNormLayer::new(params, &format!("{name}.norm"), 4 * dim),
            reduce: Linear::new(
                params,
                &format!("{name}.reduce"),
                4 * dim,
                2 * dim,
                false,
                rng,
            ),
            concat_rows: windows::merge_concat_rows(side, side),
        }
    }

    pub fn forward<'t>(
        &self,
        tape: &'t Tape,
        x: Var<'t>,
        batch: usize,
    ) -> Result<Var<'t>, TensorError> {
        let shape = x.shape();
        let (n, dim) = (shape[1], shape[2]);
        let idx = windows::batched_expand(&self.concat_rows, batch, dim);
        let grouped = x
            .gather(Rc::new(idx), vec![batch, n / 4, 4 * dim])?;
        let normed = self.norm.forward(tape, grouped)?;
        self.reduce.forward(tape, normed)
    }
}
