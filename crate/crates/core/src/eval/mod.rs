//! Evaluation: classification metrics, pooled-feature extraction, and the
//! analysis tools built on top of them (2-D projection, distribution
//! distance, saliency maps).

pub mod gradcam;
pub mod mmd;
pub mod tsne;

use std::io::Write as _;
use std::path::Path;

use serde::Serialize;

use crate::config::NUM_GRADES;
use crate::data::{Sample, Site};
use crate::error::EvalError;
use crate::model::Model;

/// Aggregate classification quality over one evaluation set.
#[derive(Debug, Clone, Serialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    /// Per-class F1 = 2TP/(2TP+FP+FN); 0 when that denominator is 0.
    pub per_class_f1: [f64; NUM_GRADES],
    /// Mean per-class F1 over classes that actually occur in the truth;
    /// classes with no true samples are excluded from the mean.
    pub macro_f1: f64,
    /// confusion[t][p] = count of samples with true grade t predicted as p.
    pub confusion: [[usize; NUM_GRADES]; NUM_GRADES],
    pub n_samples: usize,
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Compute metrics from (true, predicted) grade pairs.
pub fn compute_metrics(pairs: &[(u8, u8)]) -> Result<MetricsReport, EvalError> {
    if pairs.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut confusion = [[0usize; NUM_GRADES]; NUM_GRADES];
    for &(t, p) in pairs {
        assert!(
            (t as usize) < NUM_GRADES && (p as usize) < NUM_GRADES,
            "grade pair ({t},{p}) out of range"
        );
        confusion[t as usize][p as usize] += 1;
    }
    let n_samples = pairs.len();
    let trace: usize = (0..NUM_GRADES).map(|i| confusion[i][i]).sum();
    let mut per_class_f1 = [0.0f64; NUM_GRADES];
    let mut macro_acc = 0.0;
    let mut present = 0usize;
    for k in 0..NUM_GRADES {
        let tp = confusion[k][k];
        let fn_: usize = (0..NUM_GRADES).filter(|&j| j != k).map(|j| confusion[k][j]).sum();
        let fp: usize = (0..NUM_GRADES).filter(|&i| i != k).map(|i| confusion[i][k]).sum();
        let denom = 2 * tp + fp + fn_;
        per_class_f1[k] = if denom == 0 {
            0.0
        } else {
            2.0 * tp as f64 / denom as f64
        };
        if tp + fn_ > 0 {
            macro_acc += per_class_f1[k];
            present += 1;
        }
    }
    Ok(MetricsReport {
        accuracy: trace as f64 / n_samples as f64,
        per_class_f1,
        macro_f1: if present > 0 { macro_acc / present as f64 } else { 0.0 },
        confusion,
        n_samples,
    })
}

/// One pooled feature vector with its provenance labels.
#[derive(Debug, Clone)]
pub struct EmbeddingRow {
    pub id: String,
    pub grade: u8,
    pub site: Site,
    pub features: Vec<f32>,
}

/// A batch of embeddings with a consistent dimension, optionally carrying a
/// 2-D projection (one point per row).
#[derive(Debug, Clone)]
pub struct EmbeddingSet {
    pub dim: usize,
    pub rows: Vec<EmbeddingRow>,
    pub projection: Option<Vec<[f64; 2]>>,
}

impl EmbeddingSet {
    pub fn new(dim: usize, rows: Vec<EmbeddingRow>) -> Result<Self, EvalError> {
        for r in &rows {
            if r.features.len() != dim {
                return Err(EvalError::DimMismatch(format!(
                    "row {} has {} features, set dimension is {dim}",
                    r.id,
                    r.features.len()
                )));
            }
        }
        Ok(EmbeddingSet {
            dim,
            rows,
            projection: None,
        })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Feature matrix as f64, row-major n×dim.
    pub fn matrix_f64(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.rows.len() * self.dim);
        for r in &self.rows {
            out.extend(r.features.iter().map(|&v| v as f64));
        }
        out
    }

    /// TSV export: id, grade, site, then the projection when present,
    /// otherwise the raw feature columns.
    pub fn write_tsv(&self, path: &Path) -> Result<(), std::io::Error> {
        let mut f = std::fs::File::create(path)?;
        match &self.projection {
            Some(proj) => {
                writeln!(f, "id\tgrade\tsite\tx\ty")?;
                for (r, p) in self.rows.iter().zip(proj.iter()) {
                    writeln!(f, "{}\t{}\t{}\t{}\t{}", r.id, r.grade, r.site, p[0], p[1])?;
                }
            }
            None => {
                let header: Vec<String> = (0..self.dim).map(|i| format!("f{i}")).collect();
                writeln!(f, "id\tgrade\tsite\t{}", header.join("\t"))?;
                for r in &self.rows {
                    let feats: Vec<String> = r.features.iter().map(|v| v.to_string()).collect();
                    writeln!(f, "{}\t{}\t{}\t{}", r.id, r.grade, r.site, feats.join("\t"))?;
                }
            }
        }
        Ok(())
    }

    /// Rows restricted to one site, as a new set (projection dropped).
    pub fn filter_site(&self, site: Site) -> EmbeddingSet {
        EmbeddingSet {
            dim: self.dim,
            rows: self.rows.iter().filter(|r| r.site == site).cloned().collect(),
            projection: None,
        }
    }
}

/// Run the encoder over `samples` and collect pooled features, `batch`
/// images at a time.
pub fn extract_embeddings(
    model: &Model,
    samples: &[Sample],
    batch: usize,
) -> Result<EmbeddingSet, EvalError> {
    let size = model.config.image_size;
    let dim = model.config.feature_dim();
    let mut rows = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch.max(1)) {
        let mut images = Vec::with_capacity(chunk.len() * size * size * 3);
        for s in chunk {
            if s.height != size || s.width != size {
                return Err(EvalError::DimMismatch(format!(
                    "sample {} is {}x{}, model expects {size}x{size}",
                    s.id, s.height, s.width
                )));
            }
            images.extend_from_slice(&s.image);
        }
        let pooled = model.embed(&images, chunk.len())?;
        for (i, s) in chunk.iter().enumerate() {
            rows.push(EmbeddingRow {
                id: s.id.clone(),
                grade: s.grade,
                site: s.site,
                features: pooled[i * dim..(i + 1) * dim].to_vec(),
            });
        }
    }
    EmbeddingSet::new(dim, rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_predictions() {
        let pairs: Vec<(u8, u8)> = (0..5u8).flat_map(|g| [(g, g), (g, g)]).collect();
        let m = compute_metrics(&pairs).unwrap();
        assert_eq!(m.accuracy, 1.0);
        assert_eq!(m.macro_f1, 1.0);
        assert_eq!(m.n_samples, 10);
        for t in 0..5 {
            for p in 0..5 {
                assert_eq!(m.confusion[t][p], if t == p { 2 } else { 0 });
            }
        }
    }

    #[test]
    fn two_tp_one_fp_one_fn_gives_two_thirds() {
        // Class 1: TP=2 (both (1,1)), FN=1 (the (1,0)), FP=1 (the (0,1)).
        let pairs = [(1u8, 1u8), (1, 1), (1, 0), (0, 1), (0, 0)];
        let m = compute_metrics(&pairs).unwrap();
        assert!((m.per_class_f1[1] - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn constant_predictor_on_balanced_set() {
        let pairs: Vec<(u8, u8)> = (0..5u8).flat_map(|g| vec![(g, 0u8); 4]).collect();
        let m = compute_metrics(&pairs).unwrap();
        assert!((m.accuracy - 0.2).abs() < 1e-12);
        // Class 0: TP=4, FP=16 -> F1 = 8/24; others 0.
        assert!((m.per_class_f1[0] - 1.0 / 3.0).abs() < 1e-12);
        assert!((m.macro_f1 - (1.0 / 3.0) / 5.0).abs() < 1e-12);
    }

    #[test]
    fn absent_classes_leave_the_macro_mean() {
        // Only grades 0 and 1 occur as truth; grade 2 shows up as a wrong
        // prediction but still has no true samples.
        let pairs = [(0u8, 0u8), (0, 0), (1, 1), (1, 2)];
        let m = compute_metrics(&pairs).unwrap();
        let f1_0 = 1.0;
        let f1_1 = 2.0 * 1.0 / (2.0 + 0.0 + 1.0);
        assert!((m.macro_f1 - (f1_0 + f1_1) / 2.0).abs() < 1e-12);
        // The absent-but-predicted class is reported (as 0) without voting.
        assert_eq!(m.per_class_f1[2], 0.0);
    }

    #[test]
    fn confusion_sums_to_sample_count_and_empty_errors() {
        let pairs = [(0u8, 1u8), (3, 3), (4, 2), (2, 2), (1, 1), (0, 0)];
        let m = compute_metrics(&pairs).unwrap();
        let total: usize = m.confusion.iter().flatten().sum();
        assert_eq!(total, m.n_samples);
        let trace: usize = (0..5).map(|i| m.confusion[i][i]).sum();
        assert!((m.accuracy - trace as f64 / 6.0).abs() < 1e-12);
        assert!(matches!(compute_metrics(&[]), Err(EvalError::Empty)));
    }

    #[test]
    fn report_serializes_with_all_fields() {
        let m = compute_metrics(&[(0u8, 0u8), (1, 0)]).unwrap();
        let json = m.to_json();
        for key in ["accuracy", "per_class_f1", "macro_f1", "confusion", "n_samples"] {
            assert!(json.contains(key), "missing {key} in {json}");
        }
        let parsed: serde_json::Value = serde_json::from_str(&json).unwrap();
        assert_eq!(parsed["n_samples"], 2);
    }

    #[test]
    fn embedding_set_checks_dims_and_exports() {
        let rows = vec![
            EmbeddingRow {
                id: "a".into(),
                grade: 0,
                site: Site::Source,
                features: vec![1.0, 2.0],
            },
            EmbeddingRow {
                id: "b".into(),
                grade: 3,
                site: Site::Target,
                features: vec![4.0, 5.0],
            },
        ];
        let mut set = EmbeddingSet::new(2, rows.clone()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let raw = dir.path().join("raw.tsv");
        set.write_tsv(&raw).unwrap();
        let text = std::fs::read_to_string(&raw).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert!(text.starts_with("id\tgrade\tsite\tf0\tf1"));

        set.projection = Some(vec![[0.5, -0.5], [1.5, 2.5]]);
        let proj = dir.path().join("proj.tsv");
        set.write_tsv(&proj).unwrap();
        let text = std::fs::read_to_string(&proj).unwrap();
        assert!(text.contains("b\t3\ttarget\t1.5\t2.5"));

        let mut bad = rows;
        bad[1].features = vec![1.0];
        assert!(EmbeddingSet::new(2, bad).is_err());
    }

    #[test]
    fn extract_embeddings_matches_single_image_calls() {
        use crate::config::ModelConfig;
        use crate::data::synth::{synth_sample, SynthSpec};

        let mut cfg = ModelConfig::bench();
        cfg.image_size = 32;
        let model = Model::new(&cfg, 11).unwrap();
        let spec = SynthSpec {
            image_size: 32,
            ..SynthSpec::default()
        };
        let samples: Vec<Sample> = (0..5u64)
            .map(|i| synth_sample(&spec, (i % 5) as u8, Site::Target, i))
            .collect();
        let set = extract_embeddings(&model, &samples, 2).unwrap();
        assert_eq!(set.len(), 5);
        assert_eq!(set.dim, cfg.feature_dim());
        for (row, s) in set.rows.iter().zip(samples.iter()) {
            let single = model.embed(&s.image, 1).unwrap();
            assert_eq!(row.features, single, "batching changed features");
            assert_eq!(row.grade, s.grade);
        }
        // Identical image twice -> identical embedding.
        let twice = vec![samples[0].clone(), samples[0].clone()];
        let set2 = extract_embeddings(&model, &twice, 2).unwrap();
        assert_eq!(set2.rows[0].features, set2.rows[1].features);
    }
}
