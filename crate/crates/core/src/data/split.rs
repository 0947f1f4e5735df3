//! Stratified train/val/test assignment.

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

use super::{Sample, Split};
use crate::config::NUM_GRADES;
use crate::rng::mix2;

/// Largest-remainder allocation of `total` items across `ratio` parts.
/// Each part is within 1 of its exact share and the parts sum to `total`.
pub fn allocate(total: usize, ratio: [u32; 3]) -> [usize; 3] {
    let denom: u32 = ratio.iter().sum();
    assert!(denom > 0, "split ratio must have a positive part");
    let exact: Vec<f64> = ratio
        .iter()
        .map(|&r| total as f64 * r as f64 / denom as f64)
        .collect();
    let mut out = [0usize; 3];
    let mut assigned = 0;
    for (i, e) in exact.iter().enumerate() {
        out[i] = e.floor() as usize;
        assigned += out[i];
    }
    // Hand out the remaining seats by descending fractional part; ties go to
    // the earlier part so the result is deterministic.
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    for &i in order.iter().take(total - assigned) {
        out[i] += 1;
    }
    out
}

/// Assign splits in place, stratified by grade: each grade is shuffled with
/// its own seeded stream and divided by largest remainder, so every
/// (grade, split) cell is within 1 of the exact ratio share. Grades with no
/// samples produce a warning string rather than an error.
pub fn assign_splits(samples: &mut [Sample], ratio: [u32; 3], seed: u64) -> Vec<String> {
    let mut warnings = Vec::new();
    for grade in 0..NUM_GRADES as u8 {
        let mut idx: Vec<usize> = (0..samples.len())
            .filter(|&i| samples[i].grade == grade)
            .collect();
        if idx.is_empty() {
            warnings.push(format!("grade {grade} has no samples; split proceeds without it"));
            continue;
        }
        let mut rng = ChaCha12Rng::seed_from_u64(mix2(seed, grade as u64));
        idx.shuffle(&mut rng);
        let [n_train, n_val, _] = allocate(idx.len(), ratio);
        for (k, &i) in idx.iter().enumerate() {
            samples[i].split = if k < n_train {
                Split::Train
            } else if k < n_train + n_val {
                Split::Val
            } else {
                Split::Test
            };
        }
    }
    warnings
}
