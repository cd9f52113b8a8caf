use std::fmt::Write as _;

use super::trainer::argmax_rows;
use crate::data::{batch_tensor, SkeletonSequence};
use crate::error::{Error, Result};
use crate::network::Network;

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub n_samples: usize,
    pub accuracy: f64,
    /// `None` for classes without samples.
    pub per_class: Vec<Option<f64>>,
    /// `confusion[true][predicted]` counts.
    pub confusion: Vec<Vec<usize>>,
    /// Rows divided by their totals; empty rows stay zero.
    pub confusion_ratio: Vec<Vec<f64>>,
}

impl EvalReport {
    pub fn from_predictions(predicted: &[usize], labels: &[usize], n_classes: usize) -> Result<Self> {
        let mut confusion = vec![vec![0usize; n_classes]; n_classes];
        for (&p, &l) in predicted.iter().zip(labels) {
            for v in [p, l] {
                if v >= n_classes {
                    return Err(Error::InvalidLabel { label: v, n_classes });
                }
            }
            confusion[l][p] += 1;
        }
        let n = labels.len();
        let correct: usize = (0..n_classes).map(|k| confusion[k][k]).sum();
        let per_class = confusion
            .iter()
            .enumerate()
            .map(|(k, row)| {
                let total: usize = row.iter().sum();
                (total > 0).then(|| row[k] as f64 / total as f64)
            })
            .collect();
        let confusion_ratio = confusion
            .iter()
            .map(|row| {
                let total: usize = row.iter().sum();
                row.iter().map(|&c| if total == 0 { 0.0 } else { c as f64 / total as f64 }).collect()
            })
            .collect();
        Ok(EvalReport {
            n_samples: n,
            accuracy: if n == 0 { 0.0 } else { correct as f64 / n as f64 },
            per_class,
            confusion,
            confusion_ratio,
        })
    }

    /// `true,pred,count,ratio` rows.
    pub fn confusion_csv(&self) -> String {
        let mut s = String::from("true,pred,count,ratio\n");
        for (t, row) in self.confusion.iter().enumerate() {
            for (p, &c) in row.iter().enumerate() {
                let _ = writeln!(s, "{t},{p},{c},{}", self.confusion_ratio[t][p]);
            }
        }
        s
    }

    /// Human-readable summary including, per class, its most frequent wrong class.
    pub fn summary(&self) -> String {
        let mut s = format!("samples {}  accuracy {:.4}\n", self.n_samples, self.accuracy);
        for (k, acc) in self.per_class.iter().enumerate() {
            let Some(acc) = acc else { continue };
            let wrong = (0..self.confusion.len())
                .filter(|&p| p != k && self.confusion[k][p] > 0)
                .max_by(|&a, &b| self.confusion[k][a].cmp(&self.confusion[k][b]).then(b.cmp(&a)));
            let _ = match wrong {
                Some(p) => writeln!(s, "class {k}: {acc:.4}  wrong class {p}: {:.4}", self.confusion_ratio[k][p]),
                None => writeln!(s, "class {k}: {acc:.4}"),
            };
        }
        s
    }
}

/// Evaluation-mode predictions for prepared sequences.
pub fn predict_labels(net: &Network, data: &[SkeletonSequence], batch_size: usize) -> Result<Vec<usize>> {
    let k = net.config().n_classes;
    let mut out = Vec::with_capacity(data.len());
    for chunk in data.chunks(batch_size.max(1)) {
        let refs: Vec<&SkeletonSequence> = chunk.iter().collect();
        let logits = net.predict(&batch_tensor(&refs)?)?;
        out.extend(argmax_rows(logits.data(), k));
    }
    Ok(out)
}

pub fn evaluate(net: &Network, data: &[SkeletonSequence], batch_size: usize) -> Result<EvalReport> {
    let predicted = predict_labels(net, data, batch_size)?;
    let labels: Vec<usize> = data.iter().map(|s| s.label).collect();
    EvalReport::from_predictions(&predicted, &labels, net.config().n_classes)
}
