//! Classification losses, built on the tape's fused log-space reductions so
//! extreme logits stay finite.

use std::rc::Rc;

use crate::config::NUM_GRADES;
use crate::error::TensorError;
use crate::heads::ClassifierOut;
use crate::tape::Var;

/// Mean per-sample loss for a batch of classifier outputs.
///
/// Multi-head: each grade head is a one-vs-rest binary task — the sample's
/// loss is the sum over the five heads of BCE(sigmoid(logit_i), 1[grade==i]).
/// Single-head: softmax cross-entropy against the grade.
pub fn batch_loss<'t>(out: &ClassifierOut<'t>, grades: &[u8]) -> Result<Var<'t>, TensorError> {
    assert!(!grades.is_empty(), "empty batch");
    let b = grades.len();
    let total = match out {
        ClassifierOut::Multi(heads) => {
            assert_eq!(heads.len(), NUM_GRADES);
            let mut total: Option<Var<'t>> = None;
            for (i, head) in heads.iter().enumerate() {
                let targets: Vec<f32> = grades
                    .iter()
                    .map(|&g| if g as usize == i { 1.0 } else { 0.0 })
                    .collect();
                let l = head.bce_with_logits_sum(Rc::new(targets))?;
                total = Some(match total {
                    Some(t) => t.add(&l)?,
                    None => l,
                });
            }
            total.expect("at least one head")
        }
        ClassifierOut::Single(logits) => {
            let classes: Vec<usize> = grades.iter().map(|&g| g as usize).collect();
            logits.cross_entropy_sum(Rc::new(classes))?
        }
    };
    Ok(total.scale(1.0 / b as f32))
}
