//! Macro-F1, accuracy and confusion matrices.
//!
//! Per-class F1 is `2 tp / (2 tp + fp + fn)`. A class that never occurs in
//! the truth and is never predicted has no defined F1 and is left out of the
//! macro average.

use serde::{Deserialize, Serialize};

use crate::data::TimeSeriesBatch;
use crate::error::{contract_err, Result};
use crate::model::ModelBundle;
use crate::tensor::{Real, Tensor};

/// Row = true class, column = predicted class.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub num_classes: usize,
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn from_labels(truth: &[usize], pred: &[usize], num_classes: usize) -> Result<Self> {
        if truth.len() != pred.len() {
            return Err(contract_err!("{} true labels vs {} predictions", truth.len(), pred.len()));
        }
        let mut counts = vec![vec![0u64; num_classes]; num_classes];
        for (&t, &p) in truth.iter().zip(pred) {
            if t >= num_classes || p >= num_classes {
                return Err(contract_err!("label pair ({t}, {p}) outside [0, {num_classes})"));
            }
            counts[t][p] += 1;
        }
        Ok(ConfusionMatrix { num_classes, counts })
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn accuracy(&self) -> f64 {
        let diag: u64 = (0..self.num_classes).map(|i| self.counts[i][i]).sum();
        diag as f64 / self.total().max(1) as f64
    }

    /// Per-class F1, `None` for classes absent from both truth and
    /// predictions.
    pub fn per_class_f1(&self) -> Vec<Option<f64>> {
        (0..self.num_classes)
            .map(|c| {
                let tp = self.counts[c][c];
                let fn_: u64 = self.counts[c].iter().sum::<u64>() - tp;
                let fp: u64 = self.counts.iter().map(|row| row[c]).sum::<u64>() - tp;
                let denom = 2 * tp + fp + fn_;
                (denom > 0).then(|| 2.0 * tp as f64 / denom as f64)
            })
            .collect()
    }

    pub fn macro_f1(&self) -> Result<f64> {
        let scores: Vec<f64> = self.per_class_f1().into_iter().flatten().collect();
        if scores.is_empty() {
            return Err(contract_err!("macro F1 of an empty evaluation"));
        }
        Ok(scores.iter().sum::<f64>() / scores.len() as f64)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("true\\pred");
        for c in 0..self.num_classes {
            s.push_str(&format!(",{c}"));
        }
        s.push('\n');
        for (t, row) in self.counts.iter().enumerate() {
            s.push_str(&t.to_string());
            for v in row {
                s.push_str(&format!(",{v}"));
            }
            s.push('\n');
        }
        s
    }
}

pub fn macro_f1(truth: &[usize], pred: &[usize], num_classes: usize) -> Result<f64> {
    ConfusionMatrix::from_labels(truth, pred, num_classes)?.macro_f1()
}

/// Row-wise argmax of `[N, K]` scores; ties go to the lowest index.
pub fn argmax_rows<F: Real>(scores: &Tensor<F>) -> Vec<usize> {
    let k = scores.shape()[scores.rank() - 1];
    scores
        .data()
        .chunks(k)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, F::neg_infinity()), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub mf1: f64,
    pub accuracy: f64,
    pub confusion: ConfusionMatrix,
}

/// Eval-mode predictions on a labelled batch. Parameters and running
/// statistics are only read.
pub fn evaluate<F: Real>(bundle: &ModelBundle<F>, batch: &TimeSeriesBatch) -> Result<EvalResult> {
    let truth = batch
        .labels()
        .ok_or_else(|| contract_err!("evaluation needs labels for domain {}", batch.domain_id))?;
    let logits = bundle.infer(batch.values())?.logits;
    let pred = argmax_rows(&logits);
    let confusion = ConfusionMatrix::from_labels(truth, &pred, bundle.arch.num_classes)?;
    Ok(EvalResult {
        mf1: confusion.macro_f1()?,
        accuracy: confusion.accuracy(),
        confusion,
    })
}
