//! Squared maximum mean discrepancy between two embedding sets — the scalar
//! used to quantify how far apart the two sites' feature distributions sit.

use crate::config::NUM_GRADES;
use crate::error::EvalError;

use super::EmbeddingSet;

/// Unbiased squared MMD with an RBF kernel whose bandwidth is the median
/// pairwise distance of the pooled sample. Equal-sized sets use the paired
/// form, which is exactly zero when the sets are identical; unequal sizes
/// use the general unbiased estimator. Computed in f64 with a canonical
/// argument order, so `drift_distance(a, b) == drift_distance(b, a)`
/// bit-exactly.
pub fn drift_distance(a: &EmbeddingSet, b: &EmbeddingSet) -> Result<f64, EvalError> {
    if a.is_empty() || b.is_empty() {
        return Err(EvalError::Empty);
    }
    if a.dim != b.dim {
        return Err(EvalError::DimMismatch(format!(
            "embedding dims {} vs {}",
            a.dim, b.dim
        )));
    }
    // Canonical order: smaller set first (ties keep the given order, where
    // the paired estimator is symmetric term by term anyway).
    let (x, y) = if a.len() <= b.len() { (a, b) } else { (b, a) };
    let xm = x.matrix_f64();
    let ym = y.matrix_f64();
    Ok(mmd2(&xm, &ym, x.dim))
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum()
}

/// Median pairwise distance over the pooled rows (order-independent).
fn median_bandwidth(x: &[f64], y: &[f64], dim: usize) -> f64 {
    let rows: Vec<&[f64]> = x.chunks(dim).chain(y.chunks(dim)).collect();
    let mut dists = Vec::with_capacity(rows.len() * (rows.len() - 1) / 2);
    for i in 0..rows.len() {
        for j in i + 1..rows.len() {
            dists.push(sq_dist(rows[i], rows[j]).sqrt());
        }
    }
    if dists.is_empty() {
        return 1.0;
    }
    dists.sort_by(f64::total_cmp);
    let med = dists[dists.len() / 2];
    if med > 0.0 {
        med
    } else {
        1.0 // all points coincide; any bandwidth gives MMD 0
    }
}

fn mmd2(x: &[f64], y: &[f64], dim: usize) -> f64 {
    let xs: Vec<&[f64]> = x.chunks(dim).collect();
    let ys: Vec<&[f64]> = y.chunks(dim).collect();
    let (m, n) = (xs.len(), ys.len());
    let h = median_bandwidth(x, y, dim);
    let k = |a: &[f64], b: &[f64]| (-sq_dist(a, b) / (2.0 * h * h)).exp();

    if m == n {
        // Paired U-statistic: each off-diagonal pair contributes
        // k(xi,xj) + k(yi,yj) - k(xi,yj) - k(xj,yi), which cancels exactly
        // when x == y elementwise.
        let mut acc = 0.0;
        for i in 0..m {
            for j in 0..m {
                if i == j {
                    continue;
                }
                acc += k(xs[i], xs[j]) + k(ys[i], ys[j]) - k(xs[i], ys[j]) - k(xs[j], ys[i]);
            }
        }
        acc / (m * (m - 1)) as f64
    } else {
        let mut kxx = 0.0;
        for i in 0..m {
            for j in 0..m {
                if i != j {
                    kxx += k(xs[i], xs[j]);
                }
            }
        }
        let mut kyy = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    kyy += k(ys[i], ys[j]);
                }
            }
        }
        let mut kxy = 0.0;
        for xi in &xs {
            for yj in &ys {
                kxy += k(xi, yj);
            }
        }
        kxx / (m * (m - 1)) as f64 + kyy / (n * (n - 1)) as f64 - 2.0 * kxy / (m * n) as f64
    }
}

/// L2 distance between the per-grade feature centroids of the two sets;
/// `None` where either side has no samples of that grade.
pub fn class_centroid_distances(
    a: &EmbeddingSet,
    b: &EmbeddingSet,
) -> Result<[Option<f64>; NUM_GRADES], EvalError> {
    if a.dim != b.dim {
        return Err(EvalError::DimMismatch(format!(
            "embedding dims {} vs {}",
            a.dim, b.dim
        )));
    }
    let centroid = |set: &EmbeddingSet, grade: u8| -> Option<Vec<f64>> {
        let rows: Vec<_> = set.rows.iter().filter(|r| r.grade == grade).collect();
        if rows.is_empty() {
            return None;
        }
        let mut c = vec![0.0f64; set.dim];
        for r in &rows {
            for (acc, &v) in c.iter_mut().zip(r.features.iter()) {
                *acc += v as f64;
            }
        }
        for v in c.iter_mut() {
            *v /= rows.len() as f64;
        }
        Some(c)
    };
    let mut out = [None; NUM_GRADES];
    for (g, slot) in out.iter_mut().enumerate() {
        if let (Some(ca), Some(cb)) = (centroid(a, g as u8), centroid(b, g as u8)) {
            *slot = Some(sq_dist(&ca, &cb).sqrt());
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Site;
    use crate::eval::EmbeddingRow;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;
    use rand_distr::{Distribution, Normal};

    fn gaussian_set(n: usize, dim: usize, mean: f64, seed: u64, site: Site) -> EmbeddingSet {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let normal = Normal::new(mean, 1.0).unwrap();
        let rows = (0..n)
            .map(|i| EmbeddingRow {
                id: format!("{site}{i}"),
                grade: (i % 5) as u8,
                site,
                features: (0..dim).map(|_| normal.sample(&mut rng) as f32).collect(),
            })
            .collect();
        EmbeddingSet::new(dim, rows).unwrap()
    }

    #[test]
    fn identical_sets_give_exact_zero() {
        let a = gaussian_set(40, 8, 0.0, 1, Site::Source);
        let b = EmbeddingSet {
            dim: a.dim,
            rows: a.rows.clone(),
            projection: None,
        };
        let d = drift_distance(&a, &b).unwrap();
        assert_eq!(d, 0.0);
    }

    #[test]
    fn offset_increases_distance() {
        let base = gaussian_set(60, 6, 0.0, 2, Site::Source);
        // Independent draws from one distribution: the unbiased estimator
        // is zero-mean with O(1/m) noise, so only its magnitude is bounded.
        let mut prev = drift_distance(&base, &gaussian_set(60, 6, 0.0, 3, Site::Target)).unwrap();
        assert!(prev.abs() < 0.05, "same-distribution MMD {prev}");
        for (i, offset) in [0.5, 1.0, 2.0].iter().enumerate() {
            let shifted = gaussian_set(60, 6, *offset, 3, Site::Target);
            let d = drift_distance(&base, &shifted).unwrap();
            assert!(d > prev, "offset {offset} gave {d} <= {prev}");
            assert!(i > 0 || d > 0.0);
            prev = d;
        }
    }

    #[test]
    fn symmetric_bit_exactly_for_unequal_sizes() {
        let a = gaussian_set(30, 5, 0.0, 4, Site::Source);
        let b = gaussian_set(47, 5, 0.7, 5, Site::Target);
        let ab = drift_distance(&a, &b).unwrap();
        let ba = drift_distance(&b, &a).unwrap();
        assert_eq!(ab, ba);
        assert!(ab > 0.0);
    }

    #[test]
    fn equal_size_estimator_stays_near_zero_on_same_distribution() {
        let a = gaussian_set(50, 4, 0.0, 6, Site::Source);
        let b = gaussian_set(50, 4, 0.0, 7, Site::Target);
        let d = drift_distance(&a, &b).unwrap();
        assert!(d.abs() < 0.05, "null MMD {d}");
    }

    #[test]
    fn empty_or_mismatched_inputs_error() {
        let a = gaussian_set(10, 4, 0.0, 8, Site::Source);
        let empty = EmbeddingSet::new(4, vec![]).unwrap();
        assert!(matches!(drift_distance(&a, &empty), Err(EvalError::Empty)));
        let other = gaussian_set(10, 5, 0.0, 9, Site::Target);
        assert!(drift_distance(&a, &other).is_err());
    }

    #[test]
    fn centroid_table_reports_known_offsets_and_gaps() {
        let mk = |grade: u8, v: f32, id: &str| EmbeddingRow {
            id: id.into(),
            grade,
            site: Site::Source,
            features: vec![v, v],
        };
        let a = EmbeddingSet::new(2, vec![mk(0, 0.0, "a0"), mk(0, 2.0, "a1"), mk(1, 5.0, "a2")])
            .unwrap();
        let b = EmbeddingSet::new(2, vec![mk(0, 4.0, "b0"), mk(2, 1.0, "b1")]).unwrap();
        let table = class_centroid_distances(&a, &b).unwrap();
        // Grade 0 centroids: (1,1) vs (4,4) -> L2 = 3·sqrt(2).
        assert!((table[0].unwrap() - 3.0 * 2.0f64.sqrt()).abs() < 1e-12);
        assert!(table[1].is_none()); // missing in b
        assert!(table[2].is_none()); // missing in a
        assert!(table[3].is_none() && table[4].is_none());
    }
}
