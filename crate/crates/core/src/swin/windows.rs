//! Index builders for every rearrangement the encoder needs.
//!
//! Token grids are stored row-major as [h·w, d]. Each builder returns either
//! a row permutation (one entry per token) or ready-to-use element indices
//! for `Var::gather`. Because gathers are exact bijections here, rearrange +
//! inverse restores input bit-for-bit.

/// Expand a row permutation over `d` contiguous channels into element
/// indices: out element (r, c) reads src element (rows[r], c).
pub fn expand_rows(rows: &[usize], d: usize) -> Vec<u32> {
    let mut idx = Vec::with_capacity(rows.len() * d);
    for &r in rows {
        let base = (r * d) as u32;
        for c in 0..d as u32 {
            idx.push(base + c);
        }
    }
    idx
}

/// Apply a per-item row permutation across a batch of [n, d] blocks:
/// out element (b, r, c) reads src element (b, rows[r], c).
pub fn batched_expand(rows: &[usize], batch: usize, d: usize) -> Vec<u32> {
    let n = rows.len();
    let mut idx = Vec::with_capacity(batch * n * d);
    for b in 0..batch {
        let offset = b * n;
        for &r in rows {
            let base = ((offset + r) * d) as u32;
            for c in 0..d as u32 {
                idx.push(base + c);
            }
        }
    }
    idx
}

/// Inverse of a row permutation.
pub fn invert_rows(rows: &[usize]) -> Vec<usize> {
    let mut inv = vec![0usize; rows.len()];
    for (dst, &src) in rows.iter().enumerate() {
        inv[src] = dst;
    }
    inv
}

/// Group an h×w token grid into (h/m)·(w/m) windows of m² tokens each,
/// window-major then row-major within the window.
pub fn window_partition_rows(h: usize, w: usize, m: usize) -> Vec<usize> {
    assert!(h.is_multiple_of(m) && w.is_multiple_of(m), "grid {h}×{w} not divisible by {m}");
    let mut rows = Vec::with_capacity(h * w);
    for wr in 0..h / m {
        for wc in 0..w / m {
            for r in 0..m {
                for c in 0..m {
                    rows.push((wr * m + r) * w + wc * m + c);
                }
            }
        }
    }
    rows
}

/// Toroidal roll of the grid up-left by `s`: out (r, c) = src ((r+s) mod h,
/// (c+s) mod w). [`cyclic_unshift_rows`] rolls back down-right.
pub fn cyclic_shift_rows(h: usize, w: usize, s: usize) -> Vec<usize> {
    let mut rows = Vec::with_capacity(h * w);
    for r in 0..h {
        for c in 0..w {
            rows.push(((r + s) % h) * w + (c + s) % w);
        }
    }
    rows
}

pub fn cyclic_unshift_rows(h: usize, w: usize, s: usize) -> Vec<usize> {
    let (rs, cs) = ((h - s % h) % h, (w - s % w) % w);
    let mut rows = Vec::with_capacity(h * w);
    for r in 0..h {
        for c in 0..w {
            rows.push(((r + rs) % h) * w + (c + cs) % w);
        }
    }
    rows
}

/// Rows for 2×2 patch merging: group (i, j) concatenates source tokens in
/// fixed order top-left, top-right, bottom-left, bottom-right. Reshaping the
/// gathered [h·w, d] to [(h/2)·(w/2), 4d] yields the concatenated features.
pub fn merge_concat_rows(h: usize, w: usize) -> Vec<usize> {
    assert!(h.is_multiple_of(2) && w.is_multiple_of(2), "merge needs even grid, got {h}×{w}");
    let mut rows = Vec::with_capacity(h * w);
    for i in 0..h / 2 {
        for j in 0..w / 2 {
            rows.push((2 * i) * w + 2 * j);
            rows.push((2 * i) * w + 2 * j + 1);
            rows.push((2 * i + 1) * w + 2 * j);
            rows.push((2 * i + 1) * w + 2 * j + 1);
        }
    }
    rows
}

/// Element indices flattening an [img_h × img_w × 3] image into
/// [(h/p)·(w/p), p·p·3] patch tokens (row-major patches, channels innermost).
pub fn patch_partition_indices(img_h: usize, img_w: usize, p: usize) -> Vec<u32> {
    assert!(
        img_h.is_multiple_of(p) && img_w.is_multiple_of(p),
        "image {img_h}×{img_w} not divisible by patch {p}"
    );
    let mut idx = Vec::with_capacity(img_h * img_w * 3);
    for ti in 0..img_h / p {
        for tj in 0..img_w / p {
            for pr in 0..p {
                for pc in 0..p {
                    for ch in 0..3 {
                        let src = ((ti * p + pr) * img_w + (tj * p + pc)) * 3 + ch;
                        idx.push(src as u32);
                    }
                }
            }
        }
    }
    idx
}

/// Extract one of q/k/v per head from a fused projection. Source layout
/// [groups, tokens, parts·heads·head_dim]; output [groups·heads, tokens,
/// head_dim] with the head axis folded into the group axis.
pub fn head_split_indices(
    groups: usize,
    tokens: usize,
    heads: usize,
    head_dim: usize,
    select: usize,
    parts: usize,
) -> Vec<u32> {
    debug_assert!(select < parts);
    let src_row = parts * heads * head_dim;
    let mut idx = Vec::with_capacity(groups * heads * tokens * head_dim);
    for g in 0..groups {
        for h in 0..heads {
            for t in 0..tokens {
                let base = (g * tokens + t) * src_row + select * heads * head_dim + h * head_dim;
                for c in 0..head_dim {
                    idx.push((base + c) as u32);
                }
            }
        }
    }
    idx
}

/// Inverse of the head split: [groups·heads, tokens, head_dim] back to
/// [groups, tokens, heads·head_dim].
pub fn head_merge_indices(groups: usize, tokens: usize, heads: usize, head_dim: usize) -> Vec<u32> {
    let mut idx = Vec::with_capacity(groups * tokens * heads * head_dim);
    for g in 0..groups {
        for t in 0..tokens {
            for h in 0..heads {
                let base = ((g * heads + h) * tokens + t) * head_dim;
                for c in 0..head_dim {
                    idx.push((base + c) as u32);
                }
            }
        }
    }
    idx
}

/// Gather indices turning a [(2m−1)², heads] bias table into the per-head
/// logit offsets [heads, m², m²]: entry (h, i, j) reads the table row for the
/// relative displacement between window positions i and j.
pub fn relative_bias_indices(m: usize, heads: usize) -> Vec<u32> {
    let span = 2 * m - 1;
    let m2 = m * m;
    let mut idx = Vec::with_capacity(heads * m2 * m2);
    for h in 0..heads {
        for i in 0..m2 {
            let (yi, xi) = (i / m, i % m);
            for j in 0..m2 {
                let (yj, xj) = (j / m, j % m);
                let dy = yi + m - 1 - yj;
                let dx = xi + m - 1 - xj;
                idx.push(((dy * span + dx) * heads + h) as u32);
            }
        }
    }
    idx
}

/// Region label per token of the shifted grid: tokens sharing a label were
/// contiguous before the cyclic shift and may attend to each other.
pub fn shift_region_ids(h: usize, w: usize, m: usize, s: usize) -> Vec<usize> {
    let band = |pos: usize, len: usize| -> usize {
        if pos < len - m {
            0
        } else if pos < len - s {
            1
        } else {
            2
        }
    };
    let mut ids = Vec::with_capacity(h * w);
    for r in 0..h {
        for c in 0..w {
            ids.push(band(r, h) * 3 + band(c, w));
        }
    }
    ids
}

/// Additive attention mask for shifted windows, pre-tiled over heads:
/// [nw, heads, m², m²] flat, 0 where tokens share a shift region and −1e9
/// otherwise. Tiling it onto [B·nw·heads, m², m²] logits broadcasts over the
/// batch.
pub const MASK_NEG: f32 = -1e9;

pub fn attention_mask_values(h: usize, w: usize, m: usize, s: usize, heads: usize) -> Vec<f32> {
    let ids = shift_region_ids(h, w, m, s);
    let win_rows = window_partition_rows(h, w, m);
    let m2 = m * m;
    let nw = (h / m) * (w / m);
    let mut mask = Vec::with_capacity(nw * heads * m2 * m2);
    for wi in 0..nw {
        let tokens = &win_rows[wi * m2..(wi + 1) * m2];
        let mut per_window = Vec::with_capacity(m2 * m2);
        for &ti in tokens {
            for &tj in tokens {
                per_window.push(if ids[ti] == ids[tj] { 0.0 } else { MASK_NEG });
            }
        }
        for _ in 0..heads {
            mask.extend_from_slice(&per_window);
        }
    }
    mask
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn window_partition_example_counts() {
        // 56×56 grid with M=7 → 64 windows of 49 tokens.
        let rows = window_partition_rows(56, 56, 7);
        assert_eq!(rows.len(), 56 * 56);
        let mut sorted = rows.clone();
        sorted.sort_unstable();
        assert!(sorted.iter().enumerate().all(|(i, &r)| i == r));
        // 8×8 grid with M=4 → 4 windows of 16 tokens; first window is the
        // top-left 4×4 block.
        let rows = window_partition_rows(8, 8, 4);
        assert_eq!(
            &rows[..16],
            &[0, 1, 2, 3, 8, 9, 10, 11, 16, 17, 18, 19, 24, 25, 26, 27]
        );
    }

    #[test]
    fn merge_concat_is_tl_tr_bl_br() {
        // 2×2 grid: single group reading rows 0,1,2,3 in that order.
        assert_eq!(merge_concat_rows(2, 2), vec![0, 1, 2, 3]);
        // 4×4 grid: group (0,1) covers columns 2..4 of rows 0..2.
        let rows = merge_concat_rows(4, 4);
        assert_eq!(&rows[4..8], &[2, 3, 6, 7]);
    }

    #[test]
    fn patch_partition_round_trips_exactly() {
        let (h, w, p) = (8, 8, 4);
        let idx = patch_partition_indices(h, w, p);
        let img: Vec<f32> = (0..h * w * 3).map(|v| v as f32 * 0.37).collect();
        let tokens: Vec<f32> = idx.iter().map(|&i| img[i as usize]).collect();
        // Invert the permutation.
        let mut back = vec![0.0f32; img.len()];
        for (dst, &src) in idx.iter().enumerate() {
            back[src as usize] = tokens[dst];
        }
        assert_eq!(back, img);
        // Token 0 begins with pixel (0,0) channels, then pixel (0,1).
        assert_eq!(&tokens[..6], &img[..6]);
    }

    #[test]
    fn shift_region_mask_blocks_cross_region_pairs() {
        let (h, w, m, s) = (8, 8, 4, 2);
        let mask = attention_mask_values(h, w, m, s, 1);
        let m2 = m * m;
        // Window 0 (top-left) contains one region only → all zeros.
        assert!(mask[..m2 * m2].iter().all(|&v| v == 0.0));
        // Window 3 (bottom-right) mixes four regions; its mask must block
        // exactly the cross-region pairs and keep the diagonal open.
        let w3 = &mask[3 * m2 * m2..4 * m2 * m2];
        let ids = shift_region_ids(h, w, m, s);
        let tokens = &window_partition_rows(h, w, m)[3 * m2..4 * m2];
        for i in 0..m2 {
            assert_eq!(w3[i * m2 + i], 0.0);
            for j in 0..m2 {
                let same = ids[tokens[i]] == ids[tokens[j]];
                assert_eq!(w3[i * m2 + j] == 0.0, same);
                // Symmetric pattern.
                assert_eq!(w3[i * m2 + j], w3[j * m2 + i]);
            }
        }
        // The blocked fraction is substantial (four 2/4-sized bands).
        let blocked = w3.iter().filter(|&&v| v != 0.0).count();
        assert_eq!(blocked, 192); // 256 pairs − 4 regions × 16 in-region pairs
    }

    #[test]
    fn relative_bias_indices_reflect_displacement() {
        let m = 3;
        let heads = 2;
        let span = 2 * m - 1;
        let idx = relative_bias_indices(m, heads);
        let m2 = m * m;
        // Self-pairs all share the (0,0) displacement row, per head.
        for h in 0..heads {
            for i in 0..m2 {
                let entry = idx[(h * m2 + i) * m2 + i];
                assert_eq!(entry as usize, ((m - 1) * span + (m - 1)) * heads + h);
            }
        }
        // Swapping i and j mirrors the displacement.
        let (i, j) = (1, 7);
        let a = idx[i * m2 + j] as usize / heads;
        let b = idx[j * m2 + i] as usize / heads;
        let (dy_a, dx_a) = (a / span, a % span);
        let (dy_b, dx_b) = (b / span, b % span);
        assert_eq!(dy_a + dy_b, 2 * (m - 1));
        assert_eq!(dx_a + dx_b, 2 * (m - 1));
    }

    proptest! {
        #[test]
        fn window_partition_inverts(hm in 1usize..4, wm in 1usize..4, m in 1usize..5) {
            let (h, w) = (hm * m, wm * m);
            let rows = window_partition_rows(h, w, m);
            let inv = invert_rows(&rows);
            for (dst, &src) in rows.iter().enumerate() {
                prop_assert_eq!(inv[src], dst);
            }
        }

        #[test]
        fn cyclic_shift_inverts(h in 1usize..9, w in 1usize..9, s in 0usize..8) {
            let fwd = cyclic_shift_rows(h, w, s % h.min(w).max(1));
            let bwd = cyclic_unshift_rows(h, w, s % h.min(w).max(1));
            for dst in 0..h * w {
                prop_assert_eq!(bwd[fwd[dst]], dst);
            }
        }

        #[test]
        fn head_split_then_merge_is_identity(
            groups in 1usize..3,
            tokens in 1usize..5,
            heads in 1usize..4,
            head_dim in 1usize..4,
        ) {
            // Round-trip through a single-part split (parts=1, select=0).
            let split = head_split_indices(groups, tokens, heads, head_dim, 0, 1);
            let merge = head_merge_indices(groups, tokens, heads, head_dim);
            let n = groups * tokens * heads * head_dim;
            let data: Vec<u32> = (0..n as u32).collect();
            let after_split: Vec<u32> = split.iter().map(|&i| data[i as usize]).collect();
            let back: Vec<u32> = merge.iter().map(|&i| after_split[i as usize]).collect();
            prop_assert_eq!(back, data);
        }
    }
}
