//! Grade classifiers on top of the pooled encoder feature.
//!
//! The multi-head variant runs five independent one-vs-rest MLPs (grade i's
//! head emits the logit of P(grade = i)); predictions fuse by argmax. The
//! single-head baseline shares the same trunk sizes but emits all five
//! logits from one MLP, so comparisons isolate head topology.

use rand_chacha::ChaCha12Rng;

use crate::config::{ClassifierMode, NUM_GRADES};
use crate::error::{EvalError, TensorError};
use crate::swin::attention::Linear;
use crate::tape::{Tape, Var};
use crate::tensor::Params;

/// Stack of linear maps with ReLU between hidden layers (none after the
/// output layer — losses and fusion work on raw logits).
pub struct HeadMlp {
    layers: Vec<Linear>,
}

impl HeadMlp {
    pub fn new(
        params: &mut Params,
        prefix: &str,
        in_dim: usize,
        sizes: &[usize],
        rng: &mut ChaCha12Rng,
    ) -> Self {
        let mut layers = Vec::with_capacity(sizes.len());
        let mut prev = in_dim;
        for (l, &out) in sizes.iter().enumerate() {
            layers.push(Linear::new(
                params,
                &format!("{prefix}.l{l}"),
                prev,
                out,
                true,
                rng,
            ));
            prev = out;
        }
        HeadMlp { layers }
    }

    pub fn forward<'t>(&self, tape: &'t Tape, x: Var<'t>) -> Result<Var<'t>, TensorError> {
        let mut y = x;
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            y = layer.forward(tape, y)?;
            if l < last {
                y = y.relu();
            }
        }
        Ok(y)
    }
}

pub enum Classifier {
    /// One MLP per grade, each ending in a single logit.
    Multi(Vec<HeadMlp>),
    /// One MLP ending in five logits.
    Single(HeadMlp),
}

/// Per-batch logits in whichever topology produced them.
pub enum ClassifierOut<'t> {
    Multi(Vec<Var<'t>>),
    Single(Var<'t>),
}

impl Classifier {
    /// Register head parameters under `heads.*`. `sizes` is the configured
    /// layer list ending in 1; the single-head variant swaps the final layer
    /// for a 5-way output.
    pub fn new(
        params: &mut Params,
        mode: ClassifierMode,
        feature_dim: usize,
        sizes: &[usize],
        rng: &mut ChaCha12Rng,
    ) -> Self {
        match mode {
            ClassifierMode::MultiHead => {
                let heads = (0..NUM_GRADES)
                    .map(|i| {
                        HeadMlp::new(params, &format!("heads.grade{i}"), feature_dim, sizes, rng)
                    })
                    .collect();
                Classifier::Multi(heads)
            }
            ClassifierMode::SingleHead => {
                let mut sizes = sizes.to_vec();
                *sizes.last_mut().expect("validated non-empty") = NUM_GRADES;
                Classifier::Single(HeadMlp::new(
                    params,
                    "heads.shared",
                    feature_dim,
                    &sizes,
                    rng,
                ))
            }
        }
    }

    /// Logits for a [batch, feature_dim] input: five [batch] vectors
    /// (multi) or one [batch, 5] matrix (single).
    pub fn forward<'t>(
        &self,
        tape: &'t Tape,
        features: Var<'t>,
    ) -> Result<ClassifierOut<'t>, TensorError> {
        let batch = features.shape()[0];
        match self {
            Classifier::Multi(heads) => {
                let mut outs = Vec::with_capacity(NUM_GRADES);
                for head in heads {
                    outs.push(head.forward(tape, features)?.reshape(vec![batch])?);
                }
                Ok(ClassifierOut::Multi(outs))
            }
            Classifier::Single(head) => Ok(ClassifierOut::Single(head.forward(tape, features)?)),
        }
    }
}

impl<'t> ClassifierOut<'t> {
    /// Assemble per-sample logit rows [batch][5].
    pub fn logit_rows(&self) -> Vec<[f32; NUM_GRADES]> {
        match self {
            ClassifierOut::Multi(heads) => {
                let cols: Vec<Vec<f32>> = heads.iter().map(|h| h.value()).collect();
                let batch = cols[0].len();
                (0..batch)
                    .map(|b| std::array::from_fn(|i| cols[i][b]))
                    .collect()
            }
            ClassifierOut::Single(m) => {
                let v = m.value();
                v.chunks_exact(NUM_GRADES)
                    .map(|row| std::array::from_fn(|i| row[i]))
                    .collect()
            }
        }
    }

    /// Scalar logit node for (sample, grade) — the Grad-CAM target.
    pub fn class_logit(&self, sample: usize, grade: usize) -> Result<Var<'t>, TensorError> {
        match self {
            ClassifierOut::Multi(heads) => {
                heads[grade].gather(std::rc::Rc::new(vec![sample as u32]), vec![1])
            }
            ClassifierOut::Single(m) => m.gather(
                std::rc::Rc::new(vec![(sample * NUM_GRADES + grade) as u32]),
                vec![1],
            ),
        }
    }
}

/// Argmax fusion over the five grade logits; ties resolve to the lowest
/// grade (the clinically conservative choice).
pub fn fuse_predictions(logits: &[f32; NUM_GRADES]) -> Result<usize, EvalError> {
    let mut best = 0usize;
    for (i, &v) in logits.iter().enumerate() {
        if !v.is_finite() {
            return Err(EvalError::NonFiniteLogit(v));
        }
        if v > logits[best] {
            best = i;
        }
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    #[test]
    fn fuse_examples_and_tie_break() {
        assert_eq!(fuse_predictions(&[0.1, 2.3, 0.5, -1.0, 0.0]).unwrap(), 1);
        assert_eq!(fuse_predictions(&[0.7; 5]).unwrap(), 0);
        assert_eq!(fuse_predictions(&[-3.0, -1.0, -1.0, -2.0, -5.0]).unwrap(), 1);
        assert!(matches!(
            fuse_predictions(&[0.0, f32::NAN, 0.0, 0.0, 0.0]),
            Err(EvalError::NonFiniteLogit(_))
        ));
    }

    #[test]
    fn fusion_invariant_under_monotone_transforms() {
        let cases = [
            [0.3, -0.2, 1.4, 1.4, 0.0],
            [-2.0, -3.0, -4.0, -5.0, -1.0],
            [0.0, 0.0, 0.0, 0.0, 0.0],
        ];
        for logits in cases {
            let base = fuse_predictions(&logits).unwrap();
            let sigmoid: [f32; 5] = std::array::from_fn(|i| 1.0 / (1.0 + (-logits[i]).exp()));
            assert_eq!(fuse_predictions(&sigmoid).unwrap(), base);
            let affine: [f32; 5] = std::array::from_fn(|i| 3.0 * logits[i] + 7.0);
            assert_eq!(fuse_predictions(&affine).unwrap(), base);
        }
    }

    #[test]
    fn zero_weights_give_neutral_outputs() {
        let mut params = Params::new();
        let mut rng = stream(3, "init");
        let multi = Classifier::new(
            &mut params,
            ClassifierMode::MultiHead,
            16,
            &[8, 1],
            &mut rng,
        );
        for (_, p) in params.iter() {
            p.borrow_mut().data_mut().fill(0.0);
        }
        let tape = Tape::new();
        let f = tape.constant(vec![2, 16], vec![0.3; 32]).unwrap();
        let out = multi.forward(&tape, f).unwrap();
        for row in out.logit_rows() {
            assert_eq!(row, [0.0; 5]); // logit 0 ⇒ probability 0.5
        }

        let mut params = Params::new();
        let single = Classifier::new(
            &mut params,
            ClassifierMode::SingleHead,
            16,
            &[8, 1],
            &mut rng,
        );
        for (_, p) in params.iter() {
            p.borrow_mut().data_mut().fill(0.0);
        }
        let tape = Tape::new();
        let f = tape.constant(vec![1, 16], vec![0.5; 16]).unwrap();
        if let ClassifierOut::Single(m) = single.forward(&tape, f).unwrap() {
            let probs = m.softmax_last().value();
            assert!(probs.iter().all(|&p| (p - 0.2).abs() < 1e-6));
        } else {
            panic!("expected single-head output");
        }
    }

    #[test]
    fn heads_share_no_parameters_and_count_matches_formula() {
        let mut params = Params::new();
        let mut rng = stream(4, "init");
        let feature_dim = 192;
        let sizes = [384, 48, 48, 1];
        let _ = Classifier::new(
            &mut params,
            ClassifierMode::MultiHead,
            feature_dim,
            &sizes,
            &mut rng,
        );
        // Five disjoint heads: 5 · Σ (in+1)·out over consecutive sizes.
        let per_head: usize = [(192, 384), (384, 48), (48, 48), (48, 1)]
            .iter()
            .map(|&(i, o)| (i + 1) * o)
            .sum();
        assert_eq!(params.total_elements(), 5 * per_head);
        // 4 linear layers ⇒ 8 tensors per head.
        assert_eq!(params.len(), 40);
        for i in 0..5 {
            let w = params.get(&format!("heads.grade{i}.l0.weight")).unwrap();
            for j in 0..5 {
                if i != j {
                    let other = params.get(&format!("heads.grade{j}.l0.weight")).unwrap();
                    assert!(!w.ptr_eq(other));
                }
            }
        }
    }

    #[test]
    fn single_head_probabilities_sum_to_one() {
        let mut params = Params::new();
        let mut rng = stream(5, "init");
        let single = Classifier::new(
            &mut params,
            ClassifierMode::SingleHead,
            24,
            &[16, 8, 1],
            &mut rng,
        );
        let tape = Tape::new();
        let data: Vec<f32> = (0..72).map(|i| (i as f32 * 0.13).sin()).collect();
        let f = tape.constant(vec![3, 24], data).unwrap();
        if let ClassifierOut::Single(m) = single.forward(&tape, f).unwrap() {
            let probs = m.softmax_last().value();
            for row in probs.chunks_exact(5) {
                assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-6);
            }
        } else {
            panic!("expected single-head output");
        }
    }

    #[test]
    fn predictions_always_in_grade_range() {
        let mut params = Params::new();
        let mut rng = stream(6, "init");
        let multi = Classifier::new(
            &mut params,
            ClassifierMode::MultiHead,
            8,
            &[4, 1],
            &mut rng,
        );
        let tape = Tape::new();
        let data: Vec<f32> = (0..64).map(|i| ((i * 37 % 23) as f32 - 11.0) * 0.4).collect();
        let f = tape.constant(vec![8, 8], data).unwrap();
        let out = multi.forward(&tape, f).unwrap();
        for row in out.logit_rows() {
            let g = fuse_predictions(&row).unwrap();
            assert!(g < NUM_GRADES);
        }
    }
}
